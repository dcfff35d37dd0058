"""Diversity objectives over jointly predicted final samples.

Objectives score a set of n predicted finals; their per-sample gradients,
scaled and sign-preserved, become the coupling velocity that pushes
concurrent trajectories apart.  All distance-based objectives work on the
normalized squared-distance matrix K = D / med(D); the median is treated as
a fixed constant, so no gradient flows through it.

Gradients are analytic (no finite differencing in the hot loop) and every
formula here is checked against central differences in the test suite.
Matrix objectives read A/(A+I) as A (A+I)^{-1} and get their log-dets and
inverses from one symmetric eigendecomposition, with a small ridge on A.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial import chebyshev as npcheb

from . import nnet
from .nnet import VelocityNet

__all__ = [
    "OBJECTIVES",
    "DiversityConfig",
    "DiversityObjectiveError",
    "PairwiseK",
    "predicted_finals",
    "pairwise_k",
    "objective_value",
    "grads_from_finals",
    "diversity_grads",
    "scale_to_velocity",
]

OBJECTIVES = ("dpp", "harmonic_dpp", "pg", "chebyshev", "log_barrier", "reciprocal", "none")
GRAD_MODES = ("stop_grad", "full_vjp")

_MATRIX_RIDGE = 1e-10
_ZERO_GRAD_NORM = 1e-12


class DiversityObjectiveError(RuntimeError):
    """A diversity objective produced a non-finite or invalid value."""


@dataclass(frozen=True)
class DiversityConfig:
    """Objective choice plus the knobs shared by the coupled sampler."""

    objective: str = "dpp"
    lam: float = 1.0
    chebyshev_order: int = 4
    grad_mode: str = "stop_grad"
    clamp_eps: float = 1e-8

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.chebyshev_order < 1:
            raise ValueError("chebyshev_order must be >= 1")
        if self.grad_mode not in GRAD_MODES:
            raise ValueError(f"unknown grad_mode {self.grad_mode!r}")
        if not 0.0 < self.clamp_eps <= 1e-3:
            raise ValueError("clamp_eps must lie in (0, 1e-3]")

    @property
    def active(self) -> bool:
        return self.objective != "none" and self.lam > 0.0


@dataclass(frozen=True)
class PairwiseK:
    """Normalized pairwise squared distances with the cached raw matrix and median."""

    k: np.ndarray
    median: float
    d: np.ndarray


def predicted_finals(positions: np.ndarray, v_outputs: np.ndarray, t: float) -> np.ndarray:
    """One-shot extrapolation of each sample to t = 1: ``x + (1 - t) v``."""
    if not 0.0 <= t < 1.0:
        raise ValueError("t must lie in [0, 1)")
    return np.asarray(positions) + (1.0 - t) * np.asarray(v_outputs)


def _pairwise_batch(finals: np.ndarray, clamp_eps: float, fixed_median=None):
    """Batched K computation for finals of shape (S, n, d)."""
    diff = finals[:, :, None, :] - finals[:, None, :, :]
    d_mat = np.einsum("sijk,sijk->sij", diff, diff)
    n = d_mat.shape[1]
    off = ~np.eye(n, dtype=bool)
    med = np.median(d_mat[:, off], axis=1)
    med = np.maximum(med, clamp_eps)
    if fixed_median is not None:
        med = np.full_like(med, float(fixed_median))
    k_mat = d_mat / med[:, None, None]
    return d_mat, med, k_mat


def pairwise_k(finals: np.ndarray, clamp_eps: float = 1e-8, fixed_median: float | None = None) -> PairwiseK:
    """K = D / med(D) over the n(n-1) off-diagonal squared distances.

    The median of an even count is the mean of the two middle entries; a
    median below ``clamp_eps`` is clamped to it.  ``fixed_median`` overrides
    the computed value (used when differentiating with the median frozen).
    """
    finals = np.asarray(finals, dtype=float)
    if finals.ndim != 2 or finals.shape[0] < 2:
        raise ValueError("need at least two samples")
    d_mat, med, k_mat = _pairwise_batch(finals[None], clamp_eps, fixed_median)
    return PairwiseK(k=k_mat[0], median=float(med[0]), d=d_mat[0])


def _chebyshev_t_and_deriv(s: np.ndarray, order: int):
    """T_r(s) and T_r'(s) for r = 0..order via the three-term recurrences."""
    ts = [np.ones_like(s), s]
    dts = [np.zeros_like(s), np.ones_like(s)]
    for _ in range(2, order + 1):
        ts.append(2.0 * s * ts[-1] - ts[-2])
        dts.append(2.0 * ts[-2] + 2.0 * s * dts[-1] - dts[-2])
    return ts[: order + 1], dts[: order + 1]


def _logdet_ratio_and_shrink(a: np.ndarray, name: str):
    """For symmetric A: log det(A (A+I)^{-1}) and the matrix A^{-1} - (A+I)^{-1}.

    Adds a ridge before factorizing; raises a diagnostic error when any
    eigenvalue is non-positive or the pipeline goes non-finite.
    """
    n = a.shape[-1]
    a = a + _MATRIX_RIDGE * np.eye(n)
    vals, vecs = np.linalg.eigh(a)
    if not np.all(np.isfinite(vals)) or np.any(vals <= 0.0):
        raise DiversityObjectiveError(
            f"objective {name!r}: kernel matrix is not positive definite "
            f"(min eigenvalue {float(vals.min())})"
        )
    value = np.sum(np.log(vals) - np.log1p(vals), axis=-1)
    shrink = 1.0 / vals - 1.0 / (vals + 1.0)
    grad_mat = np.einsum("...ik,...k,...jk->...ij", vecs, shrink, vecs)
    if not (np.all(np.isfinite(value)) and np.all(np.isfinite(grad_mat))):
        raise DiversityObjectiveError(f"objective {name!r}: log-det pipeline went non-finite")
    return value, grad_mat


def _harmonic_kernel(finals: np.ndarray, n: int):
    """Fejer-weighted Chebyshev kernel over row-normalized finals.

    Returns (unit rows, row norms, cosine matrix, kernel, entrywise kernel
    derivative wrt the cosine matrix).
    """
    norms = np.linalg.norm(finals, axis=-1)
    if np.any(norms < _ZERO_GRAD_NORM):
        raise DiversityObjectiveError("objective 'harmonic_dpp': a sample row has zero norm")
    unit = finals / norms[..., None]
    cos = np.einsum("...id,...jd->...ij", unit, unit)
    cos = np.clip(cos, -1.0, 1.0)
    idx = np.arange(cos.shape[-1])
    cos[..., idx, idx] = 1.0
    r = np.arange(n)
    coeffs = np.where(r == 0, 1.0, 2.0 * (1.0 - r / n)) / n
    kernel = npcheb.chebval(cos, coeffs)
    deriv = npcheb.chebval(cos, npcheb.chebder(coeffs))
    return unit, norms, cos, kernel, deriv


def _pair_slope(k_mat: np.ndarray, cfg: DiversityConfig):
    """d(objective)/dK per unordered pair for the distance-sum objectives."""
    s = np.exp(-k_mat)
    n = k_mat.shape[-1]
    if cfg.objective == "pg":
        return 2.0 * s
    if cfg.objective == "reciprocal":
        kc = np.maximum(k_mat, cfg.clamp_eps)
        slope = 1.0 / kc**2
        return np.where(k_mat > cfg.clamp_eps, slope, 0.0)
    if cfg.objective == "log_barrier":
        cap = 1.0 - cfg.clamp_eps
        slope = s / (1.0 - np.minimum(s, cap))
        return np.where(s < cap, slope, 0.0)
    if cfg.objective == "chebyshev":
        ts, dts = _chebyshev_t_and_deriv(s, cfg.chebyshev_order)
        off = ~np.eye(n, dtype=bool)
        slope = np.zeros_like(s)
        for r in range(1, cfg.chebyshev_order + 1):
            b_r = 1.0 + np.sum(ts[r][..., off], axis=-1) / n
            slope += (4.0 / n) * b_r[..., None, None] * dts[r] * s
        return slope
    raise AssertionError(f"not a pair objective: {cfg.objective}")


def objective_value(k: PairwiseK, finals: np.ndarray, cfg: DiversityConfig) -> float:
    """Scalar diversity objective h; larger means a more spread-out set."""
    k_mat = k.k
    n = k_mat.shape[0]
    off = ~np.eye(n, dtype=bool)
    s = np.exp(-k_mat)
    if cfg.objective == "none":
        return 0.0
    if cfg.objective == "pg":
        # Sum over ordered pairs i != j; the diagonal terms are the constant n
        # and carry no gradient, so they are excluded.
        return float(-np.sum(s[off]))
    if cfg.objective == "reciprocal":
        kc = np.maximum(k_mat, cfg.clamp_eps)
        return float(-0.5 * np.sum(1.0 / kc[off]))
    if cfg.objective == "log_barrier":
        sc = np.minimum(s, 1.0 - cfg.clamp_eps)
        return float(0.5 * np.sum(np.log(1.0 - sc[off])))
    if cfg.objective == "chebyshev":
        ts, _ = _chebyshev_t_and_deriv(s, cfg.chebyshev_order)
        total = 0.0
        for r in range(1, cfg.chebyshev_order + 1):
            b_r = 1.0 + np.sum(ts[r][off]) / n
            total -= b_r**2
        return float(total)
    if cfg.objective == "dpp":
        value, _ = _logdet_ratio_and_shrink(s, "dpp")
        return float(value)
    if cfg.objective == "harmonic_dpp":
        finals = np.asarray(finals, dtype=float)
        _, _, _, kernel, _ = _harmonic_kernel(finals, n)
        value, _ = _logdet_ratio_and_shrink(kernel, "harmonic_dpp")
        return float(value)
    raise AssertionError(f"unhandled objective {cfg.objective}")


def _grads_batch(finals: np.ndarray, cfg: DiversityConfig, fixed_median=None) -> np.ndarray:
    """Gradient of h wrt each final, batched over shape (S, n, d)."""
    s_count, n, _ = finals.shape
    if cfg.objective == "none":
        return np.zeros_like(finals)
    if cfg.objective == "harmonic_dpp":
        unit, norms, cos, kernel, deriv = _harmonic_kernel(finals, n)
        _, grad_mat = _logdet_ratio_and_shrink(kernel, "harmonic_dpp")
        q = grad_mat * deriv
        proj = np.einsum("sij,sij->si", q, cos)
        grad = 2.0 * (q @ unit - proj[..., None] * unit) / norms[..., None]
        return grad
    _, med, k_mat = _pairwise_batch(finals, cfg.clamp_eps, fixed_median)
    if cfg.objective == "dpp":
        s = np.exp(-k_mat)
        _, grad_mat = _logdet_ratio_and_shrink(s, "dpp")
        w = -(4.0 / med[:, None, None]) * grad_mat * s
    else:
        w = (2.0 / med[:, None, None]) * _pair_slope(k_mat, cfg)
    idx = np.arange(n)
    w[:, idx, idx] = 0.0
    grad = w.sum(axis=2)[..., None] * finals - w @ finals
    if not np.all(np.isfinite(grad)):
        raise DiversityObjectiveError(f"objective {cfg.objective!r}: gradient went non-finite")
    return grad


def grads_from_finals(
    finals: np.ndarray, cfg: DiversityConfig, fixed_median: float | None = None
) -> np.ndarray:
    """Analytic gradient of the objective wrt the predicted finals, shape (n, d)."""
    finals = np.asarray(finals, dtype=float)
    if finals.ndim != 2 or finals.shape[0] < 2:
        raise ValueError("need at least two samples")
    return _grads_batch(finals[None], cfg, fixed_median)[0]


def diversity_grads(
    positions: np.ndarray,
    net: VelocityNet,
    t: float,
    cfg: DiversityConfig,
    v_outputs: np.ndarray | None = None,
) -> np.ndarray:
    """Per-sample gradient g of the objective, taken through the predicted finals.

    Under ``stop_grad`` the finals are treated as shifted copies of the
    positions (identity Jacobian); ``full_vjp`` adds the exact
    ``(1 - t) * d v/d x`` chain through the velocity net.
    """
    positions = np.asarray(positions, dtype=float)
    if positions.ndim != 2 or positions.shape[0] < 2:
        raise ValueError("need at least two coupled samples")
    if not 0.0 <= t < 1.0:
        raise ValueError("t must lie in [0, 1)")
    v = nnet.forward(net, positions, t) if v_outputs is None else np.asarray(v_outputs)
    finals = predicted_finals(positions, v, t)
    g = grads_from_finals(finals, cfg)
    if cfg.grad_mode == "full_vjp":
        g = g + (1.0 - t) * nnet.vjp_input(net, positions, t, g)
    return g


def _scale_batch(g: np.ndarray, v: np.ndarray, t: float, lam: float) -> np.ndarray:
    """Batched velocity scaling over (S, n, d) with per-set concatenated norms."""
    g_norm = np.sqrt(np.einsum("snd,snd->s", g, g))
    v_norm = np.sqrt(np.einsum("snd,snd->s", v, v))
    gamma = np.where(
        g_norm < _ZERO_GRAD_NORM,
        0.0,
        lam * np.sqrt(max(1.0 - t, 0.0)) * v_norm / np.maximum(g_norm, _ZERO_GRAD_NORM),
    )
    return gamma[:, None, None] * g


def scale_to_velocity(g_all: np.ndarray, v_all: np.ndarray, t: float, lam: float) -> np.ndarray:
    """Scale gradients to the coupling velocity u = lam sqrt(1-t) (||v|| / ||g||) g.

    Both norms run over the full concatenated n*d vectors, so
    ``||u|| = lam * sqrt(1-t) * ||v||`` exactly whenever g is nonzero; a
    vanishing gradient yields u = 0.
    """
    g_all = np.asarray(g_all, dtype=float)
    v_all = np.asarray(v_all, dtype=float)
    if g_all.shape != v_all.shape:
        raise ValueError("gradient and velocity stacks must share a shape")
    return _scale_batch(g_all[None], v_all[None], t, lam)[0]
