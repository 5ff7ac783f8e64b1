"""A-priori quantities estimated from ensembles.

* moment bounds: E sup_t ‖Y‖_H^p and E (int ‖Y‖_V^beta dt)^(p/2)
* time-shift increment statistic E int_0^{T-delta} ‖Y(t+delta) - Y(t)‖_H^beta dt
* exponentially weighted gap phi(t) ‖Y1(t) - Y2(t)‖_H² between two
  solutions driven by the same noise
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ContractError, InvalidParameterError
from .operators import HypothesisParams, TimeTable, zero_weight
from .sim import PathEnsemble, SamplePath, running_integral
from .space import GalerkinSpace

GUARD = 3.0  # standard errors


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        raise InvalidParameterError("no valid paths to average")
    se = float(np.std(x, ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0
    return float(np.mean(x)), se


@dataclass(frozen=True)
class EnergyStats:
    p: float
    beta: float
    est_sup_H: float
    se_sup_H: float
    est_int_V: float
    se_int_V: float
    n_paths: int
    bound_rhs: float | None = None
    satisfied: bool | None = None


def _traces(obj):
    """(h2, vnorm, dt, beta) arrays with leading path axis, valid paths only."""
    if isinstance(obj, SamplePath):
        if obj.diverged:
            raise InvalidParameterError("path diverged")
        h2 = np.sum(obj.states**2, axis=-1)[None]
        dt = float(obj.times[1] - obj.times[0])
        return h2, None, dt, None, obj
    if isinstance(obj, PathEnsemble):
        ok = obj.valid
        return obj.h2[ok], obj.vnorm[ok], obj.dt, obj.beta, obj
    raise TypeError(f"expected SamplePath or PathEnsemble, got {type(obj).__name__}")


def energy_stats(ens, space: GalerkinSpace, p: float = 2.0, beta: float | None = None,
                 C_p: float | None = None) -> EnergyStats:
    """Monte Carlo estimates of the two moment quantities.

    The sup is taken over grid points and the time integral uses the left
    endpoint rule.  With ``C_p`` the bound C_p (1 + ‖x‖_H^p) is evaluated
    at the initial state and ``satisfied`` applies a 3-standard-error guard.
    """
    if not p >= 2:
        raise InvalidParameterError(f"p must be at least 2, got {p}")
    h2, vn, dt, ens_beta, src = _traces(ens)
    if h2.shape[0] == 0:
        raise InvalidParameterError("empty ensemble")
    if vn is None:
        from .space import v_norm
        vn = v_norm(space, src.states)[None]
    beta = ens_beta if beta is None else float(beta)
    if beta is None:
        beta = 2.0
    sup_h = np.max(h2, axis=1) ** (p / 2.0)
    int_v = np.sum(vn[:, :-1] ** beta, axis=1) * dt
    m1, s1 = _mean_se(sup_h)
    m2, s2 = _mean_se(int_v ** (p / 2.0))
    bound = sat = None
    if C_p is not None:
        x_norm_p = float(np.mean(h2[:, 0])) ** (p / 2.0)
        bound = C_p * (1.0 + x_norm_p)
        sat = bool(m1 - GUARD * s1 <= bound and m2 - GUARD * s2 <= bound)
    return EnergyStats(p=p, beta=beta, est_sup_H=m1, se_sup_H=s1, est_int_V=m2, se_int_V=s2,
                       n_paths=h2.shape[0], bound_rhs=bound, satisfied=sat)


def _states(obj):
    if isinstance(obj, SamplePath):
        if obj.diverged:
            raise InvalidParameterError("path diverged")
        return obj.states[None], float(obj.times[1] - obj.times[0]), float(obj.times[-1])
    if isinstance(obj, PathEnsemble):
        if obj.states is None:
            raise ContractError("ensemble was run without keep_states")
        return obj.states[obj.valid], obj.dt, float(obj.times[-1])
    raise TypeError(f"expected SamplePath or PathEnsemble, got {type(obj).__name__}")


def aldous_statistic(ens, space: GalerkinSpace, delta: float, beta: float = 2.0):
    """E sum_{t_n <= T - delta - dt} ‖Y(t_n + delta) - Y(t_n)‖_H^beta dt.

    Returns ``(estimate, stderr)``.  ``delta`` must be a positive multiple
    of the time step smaller than T.
    """
    states, dt, T = _states(ens)
    shift = delta / dt
    s = int(round(shift))
    if not delta > 0 or s < 1 or abs(shift - s) > 1e-9 * max(1.0, shift):
        raise InvalidParameterError(f"delta={delta} is not a positive multiple of dt={dt}")
    if not delta < T:
        raise InvalidParameterError(f"delta={delta} must be smaller than T={T}")
    N = states.shape[1] - 1
    diff = states[:, s:N] - states[:, : N - s]
    per_path = np.sum(np.linalg.norm(diff, axis=-1) ** beta, axis=1) * dt
    return _mean_se(per_path)


@dataclass
class GapWeights:
    """Evaluators entering the exponential weight phi."""

    f_A: TimeTable
    rho: Callable = zero_weight
    eta: Callable = zero_weight
    f_Phi: TimeTable = TimeTable.constant(0.0)

    @classmethod
    def from_params(cls, params: HypothesisParams, rho=zero_weight, eta=zero_weight):
        return cls(params.f_A, rho, eta, params.f_Phi)


@dataclass
class UniquenessGap:
    times: np.ndarray
    weighted: np.ndarray  # (P, n+1) phi(t) ‖Y1 - Y2‖²
    phi: np.ndarray  # (P, n+1)
    mean: np.ndarray
    stderr: np.ndarray
    initial_gap: float  # ‖x1 - x2‖²

    @property
    def max_mean(self) -> float:
        return float(np.max(self.mean))

    @property
    def argmax(self) -> int:
        return int(np.argmax(self.mean))

    def growth_rate(self) -> float:
        """Largest one-step increase of the mean, per unit time, relative to ‖Δx‖²."""
        dt = float(self.times[1] - self.times[0])
        inc = float(np.max(np.diff(self.mean))) if len(self.mean) > 1 else 0.0
        if self.initial_gap == 0.0:
            return 0.0
        return max(0.0, inc) / (dt * self.initial_gap)


def _same_noise(a, b) -> bool:
    if isinstance(a, SamplePath):
        if a.noise_record is not None and b.noise_record is not None:
            return np.array_equal(a.noise_record, b.noise_record)
        return (a.seed, a.stream_id) == (b.seed, b.stream_id)
    if a.noise is not None and b.noise is not None:
        return np.array_equal(a.noise, b.noise)
    return a.seed == b.seed and np.array_equal(a.stream_ids, b.stream_ids)


def uniqueness_gap(path1, path2, space: GalerkinSpace, weights: GapWeights) -> UniquenessGap:
    """phi(t) ‖Y1(t) - Y2(t)‖_H² along paths sharing their Brownian increments.

    phi(t) = exp(-int_0^t [2 (f_A + rho(Y1) + eta(Y2)) + f_Phi] ds), left
    endpoint rule on the simulation grid.
    """
    if type(path1) is not type(path2):
        raise ContractError("both arguments must be paths or both ensembles")
    if not np.array_equal(path1.times, path2.times):
        raise ContractError("paths live on different time grids")
    if not _same_noise(path1, path2):
        raise ContractError("paths were not driven by the same noise")
    if isinstance(path1, PathEnsemble):
        ok = path1.valid & path2.valid
        if path1.states is None or path2.states is None:
            raise ContractError("ensembles were run without keep_states")
        Y1, Y2 = path1.states[ok], path2.states[ok]
    else:
        if path1.diverged or path2.diverged:
            raise ContractError("cannot weigh a diverged path")
        Y1, Y2 = path1.states[None], path2.states[None]
    t = path1.times
    dt = float(t[1] - t[0])
    rate = (2.0 * (weights.f_A(t)[None, :] + weights.rho(Y1) + weights.eta(Y2))
            + weights.f_Phi(t)[None, :])
    phi = np.exp(-running_integral(rate, dt))
    gap = np.sum((Y1 - Y2) ** 2, axis=-1)
    weighted = phi * gap
    P = weighted.shape[0]
    mean = weighted.mean(axis=0)
    se = weighted.std(axis=0, ddof=1) / math.sqrt(P) if P > 1 else np.zeros_like(mean)
    return UniquenessGap(times=t, weighted=weighted, phi=phi, mean=mean, stderr=se,
                         initial_gap=float(np.mean(gap[:, 0])))
