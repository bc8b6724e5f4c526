"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Every kernel exists twice: ``np_<name>`` (vectorised numpy, always
available) and ``nb_<name>`` (``@njit`` loops). The public ``<name>`` is
bound at import time to one of them. Set ``EBAMA_DISABLE_NUMBA=1`` to force
the numpy path; it is also used when numba cannot be imported.

All kernels work on float64 C-contiguous arrays.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def _flag(name: str) -> bool:
    return os.environ.get(name, "").strip().lower() in {"1", "true", "yes", "on"}


USE_NUMBA = HAVE_NUMBA and not _flag("EBAMA_DISABLE_NUMBA")
BACKEND = "numba" if USE_NUMBA else "numpy"


def njit(fn):
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


def gaussian_kernel3(sigma: float = 1.0) -> np.ndarray:
    """Normalised 3x3 Gaussian kernel."""
    ax = np.array([-1.0, 0.0, 1.0])
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma**2))
    return g / g.sum()


# --------------------------------------------------------------------------
# 3x3 smoothing with replicate padding, and its adjoint
# --------------------------------------------------------------------------


def np_smooth3(img, kernel):
    # written as img + sum w (shifted - img): equal to the plain weighted sum
    # for a normalised kernel, and exact on constant maps
    h, w = img.shape
    padded = np.pad(img, 1, mode="edge")
    out = img.copy()
    for di in range(3):
        for dj in range(3):
            out += kernel[di, dj] * (padded[di : di + h, dj : dj + w] - img)
    return out


def np_smooth3_adjoint(grad, kernel):
    h, w = grad.shape
    gpad = np.zeros((h + 2, w + 2))
    for di in range(3):
        for dj in range(3):
            gpad[di : di + h, dj : dj + w] += kernel[di, dj] * grad
    # fold the replicated border back onto the edge pixels
    gpad[1, :] += gpad[0, :]
    gpad[-2, :] += gpad[-1, :]
    gpad[:, 1] += gpad[:, 0]
    gpad[:, -2] += gpad[:, -1]
    return gpad[1:-1, 1:-1] + (1.0 - kernel.sum()) * grad


@njit
def nb_smooth3(img, kernel):
    h, w = img.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            c = img[i, j]
            acc = 0.0
            for di in range(3):
                ii = min(max(i + di - 1, 0), h - 1)
                for dj in range(3):
                    jj = min(max(j + dj - 1, 0), w - 1)
                    acc += kernel[di, dj] * (img[ii, jj] - c)
            out[i, j] = c + acc
    return out


@njit
def nb_smooth3_adjoint(grad, kernel):
    h, w = grad.shape
    rest = 1.0 - kernel.sum()
    out = np.empty((h, w))
    for i in range(h):
        for j in range(w):
            out[i, j] = rest * grad[i, j]
    for i in range(h):
        for j in range(w):
            g = grad[i, j]
            if g == 0.0:
                continue
            for di in range(3):
                ii = min(max(i + di - 1, 0), h - 1)
                for dj in range(3):
                    jj = min(max(j + dj - 1, 0), w - 1)
                    out[ii, jj] += kernel[di, dj] * g
    return out


# --------------------------------------------------------------------------
# pairwise cosine similarity between rows, and its vector-Jacobian product
# --------------------------------------------------------------------------


def np_cosine_matrix(x):
    norms = np.sqrt((x * x).sum(axis=1))
    return (x @ x.T) / np.outer(norms, norms)


def np_cosine_matrix_vjp(x, g):
    # C = D^-1 X X^T D^-1 with D = diag(norms)
    norms = np.sqrt((x * x).sum(axis=1))
    c = (x @ x.T) / np.outer(norms, norms)
    gs = g + g.T
    u = x / norms[:, None]
    du = gs @ u - (gs * c).sum(axis=1)[:, None] * u
    return du / norms[:, None]


@njit
def nb_cosine_matrix(x):
    n, p = x.shape
    norms = np.empty(n)
    for i in range(n):
        acc = 0.0
        for k in range(p):
            acc += x[i, k] * x[i, k]
        norms[i] = np.sqrt(acc)
    out = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            acc = 0.0
            for k in range(p):
                acc += x[i, k] * x[j, k]
            v = acc / (norms[i] * norms[j])
            out[i, j] = v
            out[j, i] = v
    return out


@njit
def nb_cosine_matrix_vjp(x, g):
    n, p = x.shape
    c = nb_cosine_matrix(x)
    norms = np.empty(n)
    for i in range(n):
        acc = 0.0
        for k in range(p):
            acc += x[i, k] * x[i, k]
        norms[i] = np.sqrt(acc)
    out = np.zeros((n, p))
    for i in range(n):
        diag = 0.0
        for j in range(n):
            gij = g[i, j] + g[j, i]
            if gij == 0.0:
                continue
            diag += gij * c[i, j]
            scale = gij / norms[j]
            for k in range(p):
                out[i, k] += scale * x[j, k]
        inv = 1.0 / norms[i]
        for k in range(p):
            out[i, k] = (out[i, k] - diag * x[i, k] * inv) * inv
    return out


# --------------------------------------------------------------------------
# symmetric KL between rows after shift-and-normalise
# --------------------------------------------------------------------------


def np_to_distribution(x, eps):
    q = np.maximum(x - x.min(axis=1, keepdims=True), eps)
    return q / q.sum(axis=1, keepdims=True)


def np_sym_kl_matrix(x, eps):
    p = np_to_distribution(x, eps)
    logp = np.log(p)
    # KL(p_i||p_j) = sum p_i log p_i - sum p_i log p_j
    neg_ent = (p * logp).sum(axis=1)
    cross = p @ logp.T
    kl = neg_ent[:, None] - cross
    return 0.5 * (kl + kl.T)


def np_sym_kl_matrix_vjp(x, g, eps):
    n = x.shape[0]
    shifted = x - x.min(axis=1, keepdims=True)
    active = shifted > eps
    q = np.where(active, shifted, eps)
    z = q.sum(axis=1, keepdims=True)
    p = q / z
    logp = np.log(p)
    gs = 0.5 * (g + g.T)
    # D_ij = 0.5 * sum_k (p_ik - p_jk)(log p_ik - log p_jk)
    # dD_ij/dp_ik = 0.5 * (log p_ik - log p_jk + 1 - p_jk / p_ik)
    gp = np.zeros_like(p)
    for i in range(n):
        w = gs[i]
        gp[i] = w.sum() * (logp[i] + 1.0) - w @ logp - (w @ p) / p[i]
    # p = q / z; then q -> x through the shift by the row minimum
    gq = (gp - (gp * p).sum(axis=1, keepdims=True)) / z
    gq = np.where(active, gq, 0.0)
    gx = gq.copy()
    argmin = x.argmin(axis=1)
    gx[np.arange(n), argmin] -= gq.sum(axis=1)
    return gx


@njit
def nb_sym_kl_matrix(x, eps):
    n, m = x.shape
    p = np.empty((n, m))
    for i in range(n):
        lo = x[i, 0]
        for k in range(m):
            lo = min(lo, x[i, k])
        s = 0.0
        for k in range(m):
            v = max(x[i, k] - lo, eps)
            p[i, k] = v
            s += v
        for k in range(m):
            p[i, k] /= s
    logp = np.log(p)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            acc = 0.0
            for k in range(m):
                acc += (p[i, k] - p[j, k]) * (logp[i, k] - logp[j, k])
            out[i, j] = 0.5 * acc
            out[j, i] = 0.5 * acc
    return out


# --------------------------------------------------------------------------
# softmax along the last axis and its vjp
# --------------------------------------------------------------------------


def np_softmax_rows(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def np_softmax_rows_vjp(y, g):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


@njit
def nb_softmax_rows(x):
    n, m = x.shape
    out = np.empty((n, m))
    for i in range(n):
        hi = x[i, 0]
        for k in range(1, m):
            hi = max(hi, x[i, k])
        s = 0.0
        for k in range(m):
            e = np.exp(x[i, k] - hi)
            out[i, k] = e
            s += e
        for k in range(m):
            out[i, k] /= s
    return out


@njit
def nb_softmax_rows_vjp(y, g):
    n, m = y.shape
    out = np.empty((n, m))
    for i in range(n):
        dot = 0.0
        for k in range(m):
            dot += g[i, k] * y[i, k]
        for k in range(m):
            out[i, k] = y[i, k] * (g[i, k] - dot)
    return out


_NAMES = (
    "smooth3",
    "smooth3_adjoint",
    "cosine_matrix",
    "cosine_matrix_vjp",
    "sym_kl_matrix",
    "softmax_rows",
    "softmax_rows_vjp",
)


def variants(name: str):
    """Return the ``(numpy, numba)`` implementations of a kernel."""
    return globals()["np_" + name], globals()["nb_" + name]


def _select():
    g = globals()
    for name in _NAMES:
        g[name] = g[("nb_" if USE_NUMBA else "np_") + name]


_select()

# the KL vjp is only ever called on a handful of rows; numpy suffices
sym_kl_matrix_vjp = np_sym_kl_matrix_vjp
