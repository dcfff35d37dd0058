"""Gaussian-mixture targets with closed-form density, score, and sampling.

All mixtures use diagonal (axis-aligned) covariances, which keeps the
log-density, the score, and the linear-interpolant marginals closed-form
even at very small per-axis standard deviations.

A :class:`GmmSpec` is immutable after construction and safe to share
across threads; sampling takes a caller-owned generator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "GmmSpec",
    "make_circle_mixture",
    "log_density",
    "score",
    "sample",
    "nearest_mode",
    "path_marginal",
    "spec_to_block",
    "spec_from_block",
]

_WEIGHT_TOL = 1e-12


@dataclass(frozen=True)
class GmmSpec:
    """Mixture of axis-aligned Gaussians.

    Attributes:
        weights: Mixing weights, shape ``(K,)``, nonnegative, sum to 1.
        means: Component means, shape ``(K, d)``.
        stds: Per-axis standard deviations, shape ``(K, d)``, all > 0.
    """

    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        m = np.atleast_2d(np.asarray(self.means, dtype=float))
        s = np.atleast_2d(np.asarray(self.stds, dtype=float))
        if w.ndim != 1 or w.size < 1:
            raise ValueError("weights must be a nonempty 1-D vector")
        if m.shape[0] != w.size or s.shape != m.shape:
            raise ValueError(
                f"shape mismatch: weights {w.shape}, means {m.shape}, stds {s.shape}"
            )
        if m.shape[1] < 1:
            raise ValueError("dimension must be >= 1")
        if np.any(w < 0) or abs(w.sum() - 1.0) > _WEIGHT_TOL:
            raise ValueError("weights must be nonnegative and sum to 1")
        if not np.all(np.isfinite(m)):
            raise ValueError("means must be finite")
        if not np.all(s > 0) or not np.all(np.isfinite(s)):
            raise ValueError("stds must be strictly positive and finite")
        for arr in (w, m, s):
            arr.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "stds", s)

    @property
    def n_components(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.means.shape[1]


def make_circle_mixture(
    k: int,
    d: int,
    shift: float = 1.0,
    std_major: float = 0.01,
    std_minor: float = 0.0001,
    weight_mode: str = "uniform",
) -> GmmSpec:
    """Build a mixture with centers on the unit circle in the first two axes.

    Component ``j`` sits at angle ``2*pi*j/k``, translated by ``shift``
    along the first axis.  Axes 1-2 get ``std_major``; the remaining
    ``d - 2`` axes get ``std_minor``.

    Args:
        k: Number of components (>= 1).
        d: Dimension (>= 2).
        shift: Translation applied to the first coordinate.
        std_major: Standard deviation on the circle plane.
        std_minor: Standard deviation on the remaining axes.
        weight_mode: ``"uniform"`` for equal weights or ``"geometric"``
            for weights proportional to ``2**j``.

    Returns:
        The assembled :class:`GmmSpec`.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if d < 2:
        raise ValueError("d must be >= 2")
    if std_major <= 0 or std_minor <= 0:
        raise ValueError("standard deviations must be positive")
    angles = 2.0 * np.pi * np.arange(k) / k
    means = np.zeros((k, d))
    means[:, 0] = np.cos(angles) + shift
    means[:, 1] = np.sin(angles)
    stds = np.full((k, d), std_minor)
    stds[:, :2] = std_major
    if weight_mode == "uniform":
        weights = np.full(k, 1.0 / k)
    elif weight_mode == "geometric":
        raw = np.power(2.0, np.arange(k))
        weights = raw / raw.sum()
    else:
        raise ValueError(f"unknown weight_mode {weight_mode!r}")
    return GmmSpec(weights=weights, means=means, stds=stds)


def _component_log_density(spec: GmmSpec, x: np.ndarray) -> np.ndarray:
    """Per-component log density plus log weight, shape ``(B, K)``."""
    diff = x[:, None, :] - spec.means[None, :, :]
    z2 = (diff / spec.stds[None, :, :]) ** 2
    log_norm = -0.5 * np.sum(np.log(2.0 * np.pi * spec.stds**2), axis=1)
    with np.errstate(divide="ignore"):
        log_w = np.log(spec.weights)
    return log_w[None, :] + log_norm[None, :] - 0.5 * z2.sum(axis=2)


def _as_batch(spec: GmmSpec, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[-1] != spec.dim:
        raise ValueError(f"point dimension {x.shape[-1]} != spec dimension {spec.dim}")
    return x, single


def log_density(spec: GmmSpec, x: np.ndarray) -> float | np.ndarray:
    """Mixture log density at ``x`` via a max-shifted log-sum-exp.

    Accepts a single point ``(d,)`` or a batch ``(B, d)``.
    """
    xb, single = _as_batch(spec, x)
    lc = _component_log_density(spec, xb)
    m = lc.max(axis=1, keepdims=True)
    out = (m + np.log(np.exp(lc - m).sum(axis=1, keepdims=True)))[:, 0]
    return float(out[0]) if single else out


def score(spec: GmmSpec, x: np.ndarray) -> np.ndarray:
    """Gradient of the mixture log density.

    Uses analytic responsibilities (softmax over component log densities)
    combined with the per-component Gaussian scores ``-(x - mu) / sigma^2``.
    """
    xb, single = _as_batch(spec, x)
    lc = _component_log_density(spec, xb)
    lc = lc - lc.max(axis=1, keepdims=True)
    resp = np.exp(lc)
    resp /= resp.sum(axis=1, keepdims=True)
    comp_scores = -(xb[:, None, :] - spec.means[None, :, :]) / spec.stds[None, :, :] ** 2
    out = np.sum(resp[:, :, None] * comp_scores, axis=1)
    return out[0] if single else out


def sample(spec: GmmSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """Exact ancestral sampling: categorical component, then diagonal Gaussian.

    Deterministic for a fixed generator state.  Returns shape ``(n, d)``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    idx = rng.choice(spec.n_components, size=n, p=spec.weights)
    noise = rng.standard_normal((n, spec.dim))
    return spec.means[idx] + noise * spec.stds[idx]


def nearest_mode(spec: GmmSpec, x: np.ndarray) -> int | np.ndarray:
    """Index of the closest component mean; ties break to the lowest index."""
    xb, single = _as_batch(spec, x)
    diff = xb[:, None, :] - spec.means[None, :, :]
    d2 = np.sum(diff**2, axis=2)
    idx = np.argmin(d2, axis=1)  # argmin returns the first minimum
    return int(idx[0]) if single else idx


def path_marginal(spec: GmmSpec, t: float) -> GmmSpec:
    """Marginal of ``(1-t) Z + t X`` for ``Z ~ N(0, I)`` and ``X`` from the mixture.

    Component means scale by ``t``; per-axis variances become
    ``(1-t)^2 + t^2 sigma^2``.  Valid for ``t`` in ``[0, 1)``; at ``t = 1``
    the result equals the original mixture.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    new_stds = np.sqrt((1.0 - t) ** 2 + (t * spec.stds) ** 2)
    return GmmSpec(weights=spec.weights, means=t * spec.means, stds=new_stds)


def _format_vectors(rows: np.ndarray) -> str:
    return " ; ".join(" ".join(repr(float(v)) for v in row) for row in rows)


def spec_to_block(spec: GmmSpec) -> str:
    """Serialize to a plain-text key-value block (round-trips exactly)."""
    lines = [
        "weights = " + " ".join(repr(float(w)) for w in spec.weights),
        "means = " + _format_vectors(spec.means),
        "stds = " + _format_vectors(spec.stds),
    ]
    return "\n".join(lines) + "\n"


def spec_from_block(text: str) -> GmmSpec:
    """Parse the block format produced by :func:`spec_to_block`."""
    fields: dict[str, str] = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"malformed line in target block: {raw!r}")
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    missing = {"weights", "means", "stds"} - fields.keys()
    if missing:
        raise ValueError(f"target block missing keys: {sorted(missing)}")
    weights = np.array([float(v) for v in fields["weights"].split()])
    means = np.array(
        [[float(v) for v in row.split()] for row in fields["means"].split(";")]
    )
    stds = np.array(
        [[float(v) for v in row.split()] for row in fields["stds"].split(";")]
    )
    return GmmSpec(weights=weights, means=means, stds=stds)


def integrate_density_2d(
    spec: GmmSpec, lo: np.ndarray, hi: np.ndarray, points: int = 601
) -> float:
    """Trapezoid integral of ``exp(log_density)`` over a 2-D box (d = 2 only)."""
    if spec.dim != 2:
        raise ValueError("grid integration implemented for d = 2 only")
    xs = np.linspace(lo[0], hi[0], points)
    ys = np.linspace(lo[1], hi[1], points)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    dens = np.exp(log_density(spec, pts)).reshape(points, points)
    inner = np.trapezoid(dens, ys, axis=1)
    return float(np.trapezoid(inner, xs))
