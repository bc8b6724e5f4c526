import os
import subprocess
import sys

import numpy as np
import pytest

import oracles
from ebama import kernels

needs_numba = pytest.mark.skipif(not kernels.HAVE_NUMBA, reason="numba not installed")


def test_gaussian_kernel_matches_oracle():
    k = kernels.gaussian_kernel3(1.0)
    assert k.sum() == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_allclose(k, oracles.gaussian3(1.0), rtol=0, atol=1e-15)
    assert k[1, 1] == pytest.approx(oracles.center_weight(), abs=1e-15)
    assert k[1, 1] == pytest.approx(0.2042, abs=1e-4)


@pytest.mark.parametrize("which", ["np", "nb"])
def test_smooth3_matches_loop_oracle(which, rng):
    img = rng.random((6, 5))
    fn = getattr(kernels, f"{which}_smooth3")
    got = fn(np.ascontiguousarray(img), kernels.gaussian_kernel3(1.0))
    np.testing.assert_allclose(got, oracles.smooth_replicate(img.tolist()), atol=1e-13)


@pytest.mark.parametrize("which", ["np", "nb"])
def test_smooth3_adjoint_is_transpose(which, rng):
    k = kernels.gaussian_kernel3(1.0)
    smooth = getattr(kernels, f"{which}_smooth3")
    adjoint = getattr(kernels, f"{which}_smooth3_adjoint")
    x, y = rng.random((7, 7)), rng.random((7, 7))
    # <K x, y> == <x, K^T y>
    assert np.sum(smooth(x, k) * y) == pytest.approx(np.sum(x * adjoint(y, k)), rel=1e-12)


@needs_numba
@pytest.mark.parametrize(
    "name, make_args",
    [
        ("smooth3", lambda r: (r.random((16, 16)), kernels.gaussian_kernel3(1.0))),
        ("smooth3_adjoint", lambda r: (r.standard_normal((16, 16)), kernels.gaussian_kernel3(1.0))),
        ("cosine_matrix", lambda r: (r.standard_normal((6, 256)),)),
        ("cosine_matrix_vjp", lambda r: (r.standard_normal((6, 256)), r.standard_normal((6, 6)))),
        ("sym_kl_matrix", lambda r: (r.standard_normal((5, 256)), 1e-12)),
        ("softmax_rows", lambda r: (r.standard_normal((256, 7)) * 5,)),
        ("softmax_rows_vjp", lambda r: (kernels.np_softmax_rows(r.standard_normal((256, 7))),
                                        r.standard_normal((256, 7)))),
    ],
)
def test_numba_and_numpy_variants_agree(name, make_args, rng):
    np_fn, nb_fn = kernels.variants(name)
    args = make_args(rng)
    np.testing.assert_allclose(nb_fn(*args), np_fn(*args), rtol=1e-11, atol=1e-12)


def test_cosine_and_kl_match_oracles(rng):
    x = rng.standard_normal((4, 9))
    cos = kernels.np_cosine_matrix(x)
    kl = kernels.np_sym_kl_matrix(x, 1e-12)
    for i in range(4):
        for j in range(4):
            assert cos[i, j] == pytest.approx(oracles.cosine(x[i], x[j]), abs=1e-13)
            assert -kl[i, j] == pytest.approx(oracles.neg_avg_kl(list(x[i]), list(x[j])), abs=1e-10)


def test_softmax_rows_sum_to_one(rng):
    y = kernels.softmax_rows(rng.standard_normal((50, 4)) * 30)
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)


def _backend_in_subprocess(flag):
    env = dict(os.environ)
    env.pop("EBAMA_DISABLE_NUMBA", None)
    if flag is not None:
        env["EBAMA_DISABLE_NUMBA"] = flag
    out = subprocess.run(
        [sys.executable, "-c", "from ebama import kernels; print(kernels.BACKEND, "
         "kernels.smooth3 is kernels.np_smooth3)"],
        env=env, capture_output=True, text=True, check=True,
    )
    return out.stdout.split()


def test_env_flag_forces_numpy_path():
    assert _backend_in_subprocess("1") == ["numpy", "True"]


@needs_numba
def test_numba_is_default_when_available():
    assert _backend_in_subprocess(None) == ["numba", "False"]
    assert _backend_in_subprocess("0") == ["numba", "False"]
