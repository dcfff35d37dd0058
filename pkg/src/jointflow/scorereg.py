"""Score-direction regularization of diversity gradients.

A diversity gradient that points against the score (toward lower density)
gets its parallel component attenuated: the soft mode scales it by
sqrt(1 - t), the hard mode removes it.  Components along or orthogonal to
the score pass through untouched, so the output norm never exceeds the
input norm.
"""

from __future__ import annotations

import numpy as np

__all__ = ["REG_MODES", "regularize"]

REG_MODES = ("off", "soft", "hard")

_ZERO_SCORE_NORM = 1e-12


def regularize(g: np.ndarray, s: np.ndarray, t: float, mode: str) -> np.ndarray:
    """Attenuate the component of ``g`` that points against the score ``s``.

    Broadcasts over leading axes; the vector axis is the last one.  With
    ``mode="off"``, a vanishing score, or ``g . s >= 0`` the gradient is
    returned unchanged.  Otherwise the parallel part ``(g . s_hat) s_hat``
    is scaled by ``sqrt(1 - t)`` (soft) or dropped (hard).
    """
    if mode not in REG_MODES:
        raise ValueError(f"unknown regularization mode {mode!r}")
    g = np.asarray(g, dtype=float)
    s = np.asarray(s, dtype=float)
    if g.shape != s.shape:
        raise ValueError(f"gradient shape {g.shape} != score shape {s.shape}")
    if not 0.0 <= t < 1.0:
        raise ValueError("t must lie in [0, 1)")
    if mode == "off":
        return g.copy()
    s_norm = np.linalg.norm(s, axis=-1, keepdims=True)
    safe = np.maximum(s_norm, _ZERO_SCORE_NORM)
    s_hat = s / safe
    dot = np.sum(g * s_hat, axis=-1, keepdims=True)
    alpha = np.sqrt(1.0 - t) if mode == "soft" else 0.0
    attenuate = (dot < 0.0) & (s_norm >= _ZERO_SCORE_NORM)
    parallel = dot * s_hat
    return np.where(attenuate, alpha * parallel + (g - parallel), g)
