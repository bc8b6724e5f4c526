"""Energies between attention maps and the guidance losses built from them.

For an object token ``s`` the modifiers ``l`` follow
``p(l | s) ∝ exp(f(A_l, A_s))`` with ``f`` a negative energy (cosine
similarity by default). The binding loss replaces the model's expectation
term by a uniform average over unrelated tokens; the intensity term keeps
the Gaussian-smoothed peak of the object's score map high.

Every loss here is linear in the pairwise energies, so the gradient with
respect to the feature maps is one call to the energy-matrix vjp.
"""

from __future__ import annotations

from collections.abc import Callable, Iterable, Sequence
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from . import kernels
from .attention import AggregatedAttention
from .errors import DegenerateInputError, InputError
from .prompt_graph import ObjectGraph

KL_EPS = 1e-12
SMOOTHING_SIGMA = 1.0


class EnergyKind(str, Enum):
    COSINE = "cosine"
    NEG_AVG_KL = "neg_avg_kl"

    @classmethod
    def parse(cls, value) -> EnergyKind:
        if isinstance(value, cls):
            return value
        aliases = {"kl": cls.NEG_AVG_KL, "cos": cls.COSINE}
        key = str(value).lower()
        if key in aliases:
            return aliases[key]
        try:
            return cls(key)
        except ValueError:
            raise InputError(f"unknown energy {value!r}; use cosine or kl") from None


@dataclass(frozen=True)
class Ablations:
    no_repulsion: bool = False
    no_object_conditioning: bool = False
    # drops the whole binding term; used to study the intensity term alone
    no_binding: bool = False


@dataclass(frozen=True)
class GuidanceHyperparams:
    alpha: float = 20.0
    lam: float = 0.5
    total_steps: int = 50
    update_steps: int = 25
    guidance_scale: float = 7.5
    energy: EnergyKind = EnergyKind.COSINE
    ablations: Ablations = field(default_factory=Ablations)

    def __post_init__(self):
        object.__setattr__(self, "energy", EnergyKind.parse(self.energy))
        if self.alpha < 0:
            raise InputError("alpha must be >= 0")
        if self.lam < 0:
            raise InputError("lambda must be >= 0")
        if not 0 <= self.update_steps <= self.total_steps:
            raise InputError("update_steps must lie in [0, total_steps]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["energy"] = self.energy.value
        return d


@dataclass
class LossBreakdown:
    per_object_binding: dict[int, float]
    per_object_intensity: dict[int, float]
    total: float
    lam: float
    degraded: bool = False
    pair_energies: dict[int, list[float]] = field(default_factory=dict)

    @property
    def binding_total(self) -> float:
        return float(sum(self.per_object_binding.values()))

    def intensity_levels(self) -> dict[int, float]:
        return {s: -v for s, v in self.per_object_intensity.items()}

    def to_record(self) -> dict:
        return {
            "total": self.total,
            "lambda": self.lam,
            "degraded": self.degraded,
            "binding": {str(s): v for s, v in self.per_object_binding.items()},
            "intensity": {str(s): v for s, v in self.per_object_intensity.items()},
            "pair_energies": {str(s): v for s, v in self.pair_energies.items()},
        }


# --------------------------------------------------------------------------
# energies
# --------------------------------------------------------------------------


def _as_rows(*maps):
    arrs = [np.asarray(m, dtype=np.float64).ravel() for m in maps]
    shape = np.shape(maps[0])
    if any(np.shape(m) != shape for m in maps):
        raise InputError("energy inputs must have the same shape")
    return np.ascontiguousarray(np.stack(arrs))


def energy_matrix(kind: EnergyKind, features: np.ndarray) -> np.ndarray:
    """All pairwise negative energies ``f(A_i, A_j)`` between feature rows."""
    kind = EnergyKind.parse(kind)
    x = np.ascontiguousarray(features, dtype=np.float64)
    if kind is EnergyKind.COSINE:
        if np.any(np.sqrt((x * x).sum(axis=1)) == 0.0):
            raise DegenerateInputError("cosine energy is undefined for a zero map")
        return kernels.cosine_matrix(x)
    return -kernels.sym_kl_matrix(x, KL_EPS)


def energy_matrix_vjp(kind: EnergyKind, features: np.ndarray, grad: np.ndarray) -> np.ndarray:
    kind = EnergyKind.parse(kind)
    x = np.ascontiguousarray(features, dtype=np.float64)
    g = np.ascontiguousarray(grad, dtype=np.float64)
    if kind is EnergyKind.COSINE:
        return kernels.cosine_matrix_vjp(x, g)
    return -kernels.sym_kl_matrix_vjp(x, g, KL_EPS)


def energy(kind: EnergyKind, a, b) -> float:
    """``f(a, b)``: cosine similarity, or minus the symmetric mean KL of the normalised maps."""
    return float(energy_matrix(kind, _as_rows(a, b))[0, 1])


# --------------------------------------------------------------------------
# conditional model and its exact log-likelihood gradient
# --------------------------------------------------------------------------


def _candidate_list(s: int, candidates: Iterable[int]) -> list[int]:
    cands = list(candidates)
    if not cands:
        raise InputError("candidate set is empty")
    if s in cands:
        raise InputError("the conditioning object cannot be its own candidate")
    return cands


def conditional_distribution(
    features: np.ndarray | AggregatedAttention,
    s: int,
    candidates: Iterable[int],
    kind: EnergyKind = EnergyKind.COSINE,
) -> np.ndarray:
    """``p(l | s)`` over ``candidates`` (in the given order)."""
    feats = features.features if isinstance(features, AggregatedAttention) else features
    cands = _candidate_list(s, candidates)
    e = energy_matrix(kind, feats)[s, cands]
    w = np.exp(e - e.max())
    return w / w.sum()


def exact_loglik_grad(
    features: np.ndarray,
    pullback: Callable[[np.ndarray], np.ndarray],
    s: int,
    l: int,
    candidates: Iterable[int],
    kind: EnergyKind = EnergyKind.COSINE,
) -> np.ndarray:
    """``∇_z log p(l | s)`` with the expectation summed over every candidate.

    ``features`` are the maps at the current latent and ``pullback`` maps a
    gradient on the features to a gradient on the latent. Only meant for
    small verification problems: it pulls back once per candidate.
    """
    cands = _candidate_list(s, candidates)
    if l not in cands:
        raise InputError(f"token {l} is not among the candidates")
    feats = np.ascontiguousarray(features, dtype=np.float64)
    probs = conditional_distribution(feats, s, cands, kind)

    def grad_pair(j):
        g = np.zeros((feats.shape[0], feats.shape[0]))
        g[j, s] = 1.0
        return pullback(energy_matrix_vjp(kind, feats, g))

    grads = [grad_pair(j) for j in cands]
    expected = sum(p * g for p, g in zip(probs, grads))
    return grads[cands.index(l)] - expected


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def negatives(graph: ObjectGraph, s: int, n: int | None = None) -> list[int]:
    """Tokens that are neither ``s`` nor one of its modifiers (externals included)."""
    n = graph.token_count if n is None else n
    mods = graph.modifiers.get(s, frozenset())
    return [l for l in range(n) if l != s and l not in mods]


def binding_coefficients(
    graph: ObjectGraph, s: int, ablations: Ablations = Ablations(), n: int | None = None
) -> np.ndarray:
    """Weights ``c`` with ``L_b(s) = Σ_l c_l f(A_s, A_l)``."""
    if s not in graph.objects:
        raise InputError(f"token {s} is not an object")
    n = graph.token_count if n is None else n
    coef = np.zeros(n)
    if ablations.no_binding:
        return coef
    mods = sorted(graph.modifiers.get(s, frozenset()))
    negs = negatives(graph, s, n)
    if mods:
        coef[mods] -= 1.0 / len(mods)
    if ablations.no_repulsion or not negs:
        return coef
    if ablations.no_object_conditioning and mods:
        # each f(s, l) becomes the mean of f(s, l) and the average f(s, m)
        coef[negs] += 0.5 / len(negs)
        coef[mods] += 0.5 / len(mods)
    else:
        coef[negs] += 1.0 / len(negs)
    return coef


def binding_loss(
    features: np.ndarray | AggregatedAttention,
    graph: ObjectGraph,
    s: int,
    kind: EnergyKind = EnergyKind.COSINE,
    ablations: Ablations = Ablations(),
) -> float:
    feats = features.features if isinstance(features, AggregatedAttention) else features
    coef = binding_coefficients(graph, s, ablations, feats.shape[0])
    e = energy_matrix(kind, feats)[s]
    return float(coef @ e)


def binding_loss_from_energies(
    energies: Sequence[float], graph: ObjectGraph, s: int, ablations: Ablations = Ablations()
) -> float:
    """Same as :func:`binding_loss` for precomputed ``f(A_s, A_l)`` over all ``l``."""
    e = np.asarray(energies, dtype=np.float64)
    return float(binding_coefficients(graph, s, ablations, e.size) @ e)


def smooth(score_map: np.ndarray, sigma: float = SMOOTHING_SIGMA) -> np.ndarray:
    return kernels.smooth3(
        np.ascontiguousarray(score_map, dtype=np.float64), kernels.gaussian_kernel3(sigma)
    )


def intensity_level(score_map: np.ndarray, sigma: float = SMOOTHING_SIGMA) -> float:
    """Peak of the 3x3 Gaussian-smoothed score map."""
    m = np.asarray(score_map, dtype=np.float64)
    if m.ndim != 2:
        raise InputError("score map must be 2-D")
    if np.any(m < 0):
        raise InputError("score maps are softmax outputs and cannot be negative")
    return float(smooth(m, sigma).max())


def intensity_loss(score_map: np.ndarray, sigma: float = SMOOTHING_SIGMA) -> float:
    return -intensity_level(score_map, sigma)


def intensity_loss_grad(score_map: np.ndarray, sigma: float = SMOOTHING_SIGMA) -> np.ndarray:
    """Subgradient of ``intensity_loss`` (first argmax on ties)."""
    m = np.ascontiguousarray(score_map, dtype=np.float64)
    k = kernels.gaussian_kernel3(sigma)
    sm = kernels.smooth3(m, k)
    onehot = np.zeros_like(m)
    onehot[np.unravel_index(np.argmax(sm), sm.shape)] = -1.0
    return kernels.smooth3_adjoint(onehot, k)


def total_loss(
    agg: AggregatedAttention, graph: ObjectGraph, hyper: GuidanceHyperparams
) -> LossBreakdown:
    return loss_and_grad(agg, graph, hyper, with_grad=False)[0]


def loss_and_grad(
    agg: AggregatedAttention,
    graph: ObjectGraph,
    hyper: GuidanceHyperparams,
    with_grad: bool = True,
):
    """Total loss plus gradients w.r.t. ``agg.features`` and ``agg.scores``.

    Returns ``(breakdown, grad_features, grad_scores)``; the gradients are
    ``None`` when ``with_grad`` is false.
    """
    n = agg.features.shape[0]
    if graph.token_count != n:
        raise InputError(f"graph has {graph.token_count} tokens, attention has {n}")
    g_feat = np.zeros_like(agg.features) if with_grad else None
    g_score = np.zeros_like(agg.scores) if with_grad else None
    if graph.degraded:
        return LossBreakdown({}, {}, 0.0, hyper.lam, degraded=True), g_feat, g_score

    e = energy_matrix(hyper.energy, agg.features)
    side = agg.resolution
    coef_rows = np.zeros((n, n))
    binding, intensity, pairs = {}, {}, {}
    for s in graph.objects:
        coef = binding_coefficients(graph, s, hyper.ablations, n)
        coef_rows[s] = coef
        binding[s] = float(coef @ e[s])
        pairs[s] = [float(v) for v in e[s]]
        smap = agg.scores[s].reshape(side, side)
        intensity[s] = intensity_loss(smap)
        if with_grad and hyper.lam != 0.0:
            g_score[s] += hyper.lam * intensity_loss_grad(smap).ravel()
    if with_grad and np.any(coef_rows):
        g_feat += energy_matrix_vjp(hyper.energy, agg.features, coef_rows)
    total = float(sum(binding[s] + hyper.lam * intensity[s] for s in graph.objects))
    return LossBreakdown(binding, intensity, total, hyper.lam, False, pairs), g_feat, g_score


def recompute_total(
    breakdown_record: dict, graph: ObjectGraph, ablations: Ablations = Ablations()
) -> float:
    """Rebuild the total from a logged trace record's energies and intensities."""
    total = 0.0
    lam = breakdown_record["lambda"]
    for s in graph.objects:
        e = breakdown_record["pair_energies"][str(s)]
        total += binding_loss_from_energies(e, graph, s, ablations)
        total += lam * breakdown_record["intensity"][str(s)]
    return total
