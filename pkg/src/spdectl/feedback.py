"""Saturated affine feedback maps Phi(t, x) = clamp_kappa(-K x - c(t))."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels_py
from .errors import InvalidParameterError


@dataclass(frozen=True, eq=False)
class ControlParams:
    """Gain matrix, offset table over time knots, saturation level.

    ``c`` has shape (n_knots, m); ``n_knots = 0`` means no offset.
    ``kappa = inf`` disables saturation.
    """

    K: np.ndarray
    c: np.ndarray
    kappa: float

    def __post_init__(self):
        K = np.array(self.K, dtype=float, copy=True)
        if K.ndim != 2 or K.shape[0] != K.shape[1]:
            raise InvalidParameterError(f"K must be square, got shape {K.shape}")
        m = K.shape[0]
        c = np.array(self.c, dtype=float, copy=True).reshape(-1, m) if np.size(self.c) else np.zeros((0, m))
        if not (np.all(np.isfinite(K)) and np.all(np.isfinite(c))):
            raise InvalidParameterError("ControlParams entries must be finite")
        if not self.kappa > 0:
            raise InvalidParameterError(f"kappa must be positive, got {self.kappa}")
        K.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "kappa", float(self.kappa))

    @property
    def m(self) -> int:
        return self.K.shape[0]

    @classmethod
    def zero(cls, m: int, n_knots: int = 0, kappa: float = math.inf) -> "ControlParams":
        return cls(np.zeros((m, m)), np.zeros((n_knots, m)), kappa)

    def scaled(self, s: float) -> "ControlParams":
        """Gain and offsets multiplied by ``s`` (saturation unchanged)."""
        return ControlParams(s * self.K, s * self.c, self.kappa)

    def norm(self) -> float:
        """Euclidean norm of (K, c) flattened."""
        return float(math.sqrt(np.sum(self.K**2) + np.sum(self.c**2)))

    def to_dict(self) -> dict:
        return {"K": self.K.tolist(), "c": self.c.tolist(), "kappa": self.kappa}

    @classmethod
    def from_dict(cls, d: dict) -> "ControlParams":
        K = np.asarray(d["K"], dtype=float)
        return cls(K, np.asarray(d.get("c", []), dtype=float).reshape(-1, K.shape[0]),
                   float(d["kappa"]))


class SaturatedAffineFeedback:
    """Callable feedback map; the simulator recognises it for the fused kernel."""

    def __init__(self, params: ControlParams, knot_times=None):
        self.params = params
        n_knots = params.c.shape[0]
        if knot_times is None:
            knot_times = np.zeros(n_knots) if n_knots <= 1 else None
        knot_times = np.asarray(knot_times, dtype=float)
        if knot_times.shape != (n_knots,):
            raise InvalidParameterError(
                f"need {n_knots} knot times for the offset table, got {knot_times.shape}"
            )
        if n_knots > 1 and np.any(np.diff(knot_times) <= 0):
            raise InvalidParameterError("knot times must be strictly increasing")
        self.knot_times = knot_times

    @property
    def K(self):
        return self.params.K

    @property
    def kappa(self):
        return self.params.kappa

    def offset(self, t: float) -> np.ndarray:
        c = _kernels_py._offset(t, self.knot_times, self.params.c)
        return np.zeros(self.params.m) if c is None else np.asarray(c)

    def __call__(self, t, X):
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        out = _kernels_py.saturated_affine(
            t, np.atleast_2d(X), self.params.K, self.knot_times, self.params.c, self.params.kappa
        )
        return out[0] if single else out

    def time_slope_bound(self) -> float:
        """max_i ‖c_{i+1} - c_i‖ / (t_{i+1} - t_i); Lipschitz constant in t."""
        c, t = self.params.c, self.knot_times
        if c.shape[0] < 2:
            return 0.0
        return float(np.max(np.linalg.norm(np.diff(c, axis=0), axis=1) / np.diff(t)))

    def coercivity_bound(self) -> float:
        """A constant f with 2 (Phi(t,x), x) <= f (1 + ‖x‖²) for all t, x.

        Saturation gives f = kappa; the affine core gives 2 mu+ + max‖c‖,
        mu the largest eigenvalue of -sym(K).
        """
        K = self.params.K
        mu = max(0.0, float(np.max(np.linalg.eigvalsh(-(K + K.T) / 2.0))))
        cmax = float(np.max(np.linalg.norm(self.params.c, axis=1))) if self.params.c.size else 0.0
        return min(self.params.kappa, 2.0 * mu + cmax)

    def monotonicity_bound(self) -> float:
        """A constant f with 2 (Phi(t,u) - Phi(t,v), u - v) <= f ‖u - v‖²."""
        K = self.params.K
        if math.isinf(self.params.kappa):
            return max(0.0, float(np.max(np.linalg.eigvalsh(-(K + K.T)))))
        return 2.0 * float(np.linalg.norm(K, 2))

    def __repr__(self):
        return f"SaturatedAffineFeedback(m={self.params.m}, kappa={self.params.kappa})"


def zero_feedback(m: int) -> SaturatedAffineFeedback:
    return SaturatedAffineFeedback(ControlParams.zero(m))


def linear_feedback(K) -> SaturatedAffineFeedback:
    """Unsaturated Phi(t, x) = -K x."""
    K = np.asarray(K, dtype=float)
    return SaturatedAffineFeedback(ControlParams(K, np.zeros((0, K.shape[0])), math.inf))
