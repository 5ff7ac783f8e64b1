"""Parametric feedback family, Monte Carlo cost and the direct optimizer.

Controls are saturated affine maps Phi(t, x) = clamp_kappa(-K x - c(t)).
Clamping keeps them bounded and the affine core keeps them Lipschitz, so
every member is admissible without a separate certification step.

The cost of a control is

    J = E[ int_0^T f(s, X) + g(Phi(s, X)) ds + h(X(T)) ],

estimated on a fixed set of Brownian streams.  All candidates in one
optimization share those streams (common random numbers), so cost
differences are not masked by sampling noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import optimize as sopt

from .errors import DivergenceError, InvalidParameterError, OptimizationError
from .feedback import ControlParams, SaturatedAffineFeedback
from .operators import OperatorTriple
from .sim import SimConfig, map_batches, post_process, run_ensemble, simulate_auxiliary
from .space import GalerkinSpace, as_coeffs, random_states, v_norm

GAIN_STRUCTURES = ("scalar", "diagonal", "full")
F_MODES = ("tracking", "vpenalty")
METHODS = ("nelder-mead", "random-search", "spsa")


@dataclass(frozen=True)
class FeedbackFamily:
    """Saturated affine feedbacks with a given gain structure.

    The parameter vector stacks the free gain entries (1, m or m² of them)
    followed by the offset table, ``n_knots`` rows of length m on an
    equispaced grid over [0, T].  ``n_knots = 0`` means no offset.
    """

    m: int
    gain: str = "full"
    n_knots: int = 0
    kappa: float = math.inf
    T: float = 1.0

    def __post_init__(self):
        if self.gain not in GAIN_STRUCTURES:
            raise InvalidParameterError(f"gain must be one of {GAIN_STRUCTURES}, got {self.gain!r}")
        if self.m < 1 or self.n_knots < 0:
            raise InvalidParameterError("need m >= 1 and n_knots >= 0")
        if not self.kappa > 0:
            raise InvalidParameterError(f"kappa must be positive, got {self.kappa}")
        if not self.T > 0:
            raise InvalidParameterError(f"T must be positive, got {self.T}")

    @property
    def n_gain(self) -> int:
        return {"scalar": 1, "diagonal": self.m, "full": self.m * self.m}[self.gain]

    @property
    def dim(self) -> int:
        return self.n_gain + self.n_knots * self.m

    @property
    def knot_times(self) -> np.ndarray:
        if self.n_knots <= 1:
            return np.zeros(self.n_knots)
        return np.linspace(0.0, self.T, self.n_knots)

    def unvectorize(self, theta) -> ControlParams:
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if theta.size != self.dim:
            raise InvalidParameterError(f"expected {self.dim} parameters, got {theta.size}")
        g, rest = theta[: self.n_gain], theta[self.n_gain:]
        if self.gain == "scalar":
            K = g[0] * np.eye(self.m)
        elif self.gain == "diagonal":
            K = np.diag(g)
        else:
            K = g.reshape(self.m, self.m)
        return ControlParams(K, rest.reshape(self.n_knots, self.m), self.kappa)

    def vectorize(self, params: ControlParams) -> np.ndarray:
        K = params.K
        if K.shape != (self.m, self.m) or params.c.shape != (self.n_knots, self.m):
            raise InvalidParameterError("parameters do not match the family shape")
        if self.gain == "scalar":
            g = np.array([K[0, 0]])
            ok = np.array_equal(K, g[0] * np.eye(self.m))
        elif self.gain == "diagonal":
            g = np.diag(K).copy()
            ok = np.array_equal(K, np.diag(g))
        else:
            g, ok = K.ravel(), True
        if not ok:
            raise InvalidParameterError(f"gain matrix is not {self.gain}")
        return np.concatenate([g, params.c.ravel()])

    def zero(self) -> ControlParams:
        return self.unvectorize(np.zeros(self.dim))

    def feedback(self, params) -> SaturatedAffineFeedback:
        if not isinstance(params, ControlParams):
            params = self.unvectorize(params)
        return SaturatedAffineFeedback(params, self.knot_times)

    def __call__(self, params, t, x):
        return self.feedback(params)(t, x)


@dataclass(frozen=True)
class CostSpec:
    """Running, control and terminal cost.

    f(x) = q ‖x - x_ref‖² (``tracking``) or q min(‖x‖_V², cap) (``vpenalty``);
    g(u) = r ‖u‖²; h(x) = q_T ‖x - x_T‖².  With ``joint`` the running cost
    becomes f(x) + g(u) + s <x - x_ref, u>, which stays nonnegative for
    |s| <= 2 sqrt(q r); it is then reported entirely in the f component.

    ``exit_level`` M enables the diagnostic fraction of paths whose
    sup_t ‖X‖_V² reaches M; it never truncates the cost.
    """

    f_mode: str = "tracking"
    q: float = 0.0
    r: float = 0.0
    q_T: float = 0.0
    x_ref: np.ndarray | None = None
    x_T: np.ndarray | None = None
    cap: float = math.inf
    joint: bool = False
    s: float = 0.0
    exit_level: float | None = None

    def __post_init__(self):
        if self.f_mode not in F_MODES:
            raise InvalidParameterError(f"f_mode must be one of {F_MODES}, got {self.f_mode!r}")
        for name in ("q", "r", "q_T"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise InvalidParameterError(f"{name} must be finite and nonnegative, got {v}")
        if not self.cap > 0:
            raise InvalidParameterError(f"cap must be positive, got {self.cap}")
        if self.joint and abs(self.s) > 2.0 * math.sqrt(self.q * self.r):
            raise InvalidParameterError("joint cross weight needs |s| <= 2 sqrt(q r)")
        if self.exit_level is not None and not self.exit_level > 0:
            raise InvalidParameterError("exit_level must be positive")


@dataclass(frozen=True)
class CostEstimate:
    J: float
    stderr: float
    n_paths: int
    f: float
    g: float
    h: float
    exit_fraction: float | None = None


def _vec(space, x):
    return np.zeros(space.m) if x is None else as_coeffs(space, x)


def path_costs(space: GalerkinSpace, spec: CostSpec, control: Callable, times, states):
    """Per-path (f, g, h) integrals for states of shape (P, N+1, m).

    Left-endpoint rule: the running cost at t_n weighs the step to t_{n+1}.
    """
    dt = float(times[1] - times[0])
    X = states[:, :-1]
    P, N, m = X.shape
    if spec.r > 0 or spec.joint:
        U = np.empty_like(X)
        for n in range(N):
            U[:, n] = control(float(times[n]), X[:, n])
    else:
        U = None
    x_ref = _vec(space, spec.x_ref)
    if spec.f_mode == "tracking":
        f = spec.q * np.sum((X - x_ref) ** 2, axis=-1)
    else:
        f = spec.q * np.minimum(v_norm(space, X) ** 2, spec.cap)
    g = spec.r * np.sum(U * U, axis=-1) if U is not None and spec.r > 0 else np.zeros((P, N))
    if spec.joint:
        f = f + g + spec.s * np.sum((X - x_ref) * U, axis=-1)
        g = np.zeros((P, N))
    h = spec.q_T * np.sum((states[:, -1] - _vec(space, spec.x_T)) ** 2, axis=-1)
    return np.sum(f, axis=1) * dt, np.sum(g, axis=1) * dt, h


def estimate_cost(space: GalerkinSpace, op: OperatorTriple, family: FeedbackFamily, params,
                  spec: CostSpec, x0, cfg: SimConfig, n_paths: int) -> CostEstimate:
    """Monte Carlo cost on streams 0..n_paths-1 of ``cfg.seed``.

    Divergent paths are dropped; more than ``cfg.divergence_cap`` of them
    raises DivergenceError.
    """
    control = family.feedback(params)
    times = cfg.times

    def reduce(ids, states, status, dW):
        if cfg.hard_stop:
            post_process(space, op, states, status, cfg)
        ok = status < 0
        f, g, h = path_costs(space, spec, control, times, states[ok])
        ex = None
        if spec.exit_level is not None:
            ex = np.max(v_norm(space, states[ok]) ** 2, axis=1) >= spec.exit_level
        return f, g, h, ex, int(np.sum(~ok))

    parts = map_batches(space, op, control, x0, cfg, n_paths, reduce)
    n_bad = sum(p[4] for p in parts)
    if n_bad / n_paths > cfg.divergence_cap:
        raise DivergenceError(f"{n_bad} of {n_paths} cost paths diverged", fraction=n_bad / n_paths)
    f = np.concatenate([p[0] for p in parts])
    g = np.concatenate([p[1] for p in parts])
    h = np.concatenate([p[2] for p in parts])
    n = f.size
    if n == 0:
        raise DivergenceError("every cost path diverged", fraction=1.0)
    fm, gm, hm = float(np.mean(f)), float(np.mean(g)), float(np.mean(h))
    tot = f + g + h
    se = float(np.std(tot, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    ex = None
    if spec.exit_level is not None:
        ex = float(np.mean(np.concatenate([p[3] for p in parts])))
    return CostEstimate(J=fm + gm + hm, stderr=se, n_paths=n, f=fm, g=gm, h=hm, exit_fraction=ex)


# ---------------------------------------------------------------------------
# optimization


@dataclass
class HistoryEntry:
    iteration: int
    J: float
    stderr: float
    accepted: bool
    theta_norm: float


@dataclass
class MinimizeResult:
    params: ControlParams
    theta: np.ndarray
    J: float
    stderr: float
    history: list[HistoryEntry] = field(default_factory=list)
    method: str = ""

    @property
    def accepted_J(self) -> list[float]:
        return [h.J for h in self.history if h.accepted]

    @property
    def n_evals(self) -> int:
        return len(self.history)


class _Budget(Exception):
    pass


class _Tracker:
    """Counts evaluations, records history and applies the acceptance rule."""

    def __init__(self, evaluate, budget):
        self.evaluate = evaluate
        self.budget = budget
        self.history: list[HistoryEntry] = []
        self.best_theta = None
        self.best_J = math.inf
        self.best_se = math.nan
        self.failures: list[str] = []

    def __call__(self, theta) -> float:
        if len(self.history) >= self.budget:
            raise _Budget
        theta = np.array(theta, dtype=float)
        try:
            est = self.evaluate(theta)
            J, se = est.J, est.stderr
        except DivergenceError as e:
            self.failures.append(str(e))
            J, se = math.inf, math.nan
        accepted = J < self.best_J
        if accepted:
            self.best_theta, self.best_J, self.best_se = theta, J, se
        self.history.append(HistoryEntry(len(self.history), J, se, accepted,
                                         float(np.linalg.norm(theta))))
        return J

    @property
    def left(self) -> int:
        return self.budget - len(self.history)


def _nelder_mead(track: _Tracker, theta0, step, rng):
    x = np.asarray(theta0, dtype=float)
    d = x.size
    while track.left > 0:
        sim0 = np.vstack([x, x + step * np.eye(d)])
        before = track.best_J
        try:
            sopt.minimize(track, x, method="Nelder-Mead",
                          options={"initial_simplex": sim0, "maxfev": track.left,
                                   "xatol": 1e-6 * max(1.0, step), "fatol": 0.0})
        except _Budget:
            return
        if track.best_theta is None:
            return
        # restart from the best point; shrink when the restart found nothing
        x = track.best_theta
        if not track.best_J < before:
            step *= 0.5
            if step < 1e-8:
                return


def _random_search(track: _Tracker, theta0, step, rng):
    track(theta0)
    while track.left > 0:
        base = track.best_theta if track.best_theta is not None else np.asarray(theta0, float)
        before = track.best_J
        try:
            track(base + step * rng.standard_normal(base.size))
        except _Budget:
            return
        if not track.best_J < before:
            step *= 0.9


def _spsa(track: _Tracker, theta0, step, rng, a=None, A=10.0, alpha=0.602, gamma=0.101):
    x = np.asarray(theta0, dtype=float)
    track(x)
    a = step if a is None else a
    k = 0
    while track.left >= 3:
        ck = step / (k + 1) ** gamma
        ak = a / (k + 1 + A) ** alpha
        delta = rng.choice([-1.0, 1.0], size=x.size)
        jp, jm = track(x + ck * delta), track(x - ck * delta)
        if not (math.isfinite(jp) and math.isfinite(jm)):
            a *= 0.5
            k += 1
            continue
        ghat = (jp - jm) / (2.0 * ck) * delta
        gn = np.linalg.norm(ghat)
        move = ak * ghat
        if np.linalg.norm(move) > step and gn > 0:
            move *= step / np.linalg.norm(move)
        cand = x - move
        before = track.best_J
        track(cand)
        if track.best_J < before:
            x = cand
        else:
            a *= 0.5
        k += 1
    while track.left > 0:
        track(x)


def minimize(space: GalerkinSpace, op: OperatorTriple, family: FeedbackFamily, spec: CostSpec,
             x0, cfg: SimConfig, n_paths: int, method: str = "nelder-mead", budget: int = 100,
             seed: int = 0, theta0=None, step: float = 0.5) -> MinimizeResult:
    """Direct minimization of the Monte Carlo cost over the family.

    Every candidate is evaluated on the same streams of ``cfg.seed``; the
    optimizer's own randomness comes from ``seed``.  A candidate is
    accepted only if its cost is strictly below the best so far, so the
    accepted costs form a strictly decreasing sequence.  ``budget`` counts
    cost evaluations, the first being ``theta0`` (zero by default).
    """
    if method not in METHODS:
        raise InvalidParameterError(f"method must be one of {METHODS}, got {method!r}")
    if budget < 1:
        raise InvalidParameterError("budget must be at least 1")
    if theta0 is None:
        theta0 = np.zeros(family.dim)
    elif isinstance(theta0, ControlParams):
        theta0 = family.vectorize(theta0)
    theta0 = np.asarray(theta0, dtype=float)
    track = _Tracker(lambda th: estimate_cost(space, op, family, th, spec, x0, cfg, n_paths), budget)
    rng = np.random.default_rng(seed)
    try:
        if budget == 1:
            track(theta0)
        elif method == "nelder-mead":
            _nelder_mead(track, theta0, step, rng)
        elif method == "random-search":
            _random_search(track, theta0, step, rng)
        else:
            _spsa(track, theta0, step, rng)
    except _Budget:
        pass
    if track.best_theta is None:
        msg = track.failures[-1] if track.failures else "no candidate evaluated"
        raise OptimizationError(f"all {len(track.history)} candidates diverged; last: {msg}")
    acc = [h.J for h in track.history if h.accepted]
    assert all(b < a for a, b in zip(acc, acc[1:])), "accepted history must decrease"
    return MinimizeResult(family.unvectorize(track.best_theta), track.best_theta, track.best_J,
                          track.best_se, track.history, method)


# ---------------------------------------------------------------------------
# convergence of control sequences


@dataclass(frozen=True)
class GapRow:
    n: int
    control_gap: float
    aux_gap: float
    aux_se: float
    direct_gap: float
    direct_se: float


def _sup_gap(a, b):
    d = np.max(np.sum((a - b) ** 2, axis=-1), axis=1)
    se = float(np.std(d, ddof=1) / math.sqrt(d.size)) if d.size > 1 else 0.0
    return float(np.mean(d)), se


def convergence_diag(space: GalerkinSpace, op: OperatorTriple, family: FeedbackFamily,
                     theta_seq, theta_lim, x0, cfg: SimConfig, n_paths: int,
                     n_probe: int = 256, r_max: float = 10.0, probe_seed: int = 0) -> list[GapRow]:
    """Gaps between controls Phi_n of a sequence and a limit control Phi.

    For each n: sup over probe points (t, x) of ‖Phi_n - Phi‖_H; E sup_t of
    the squared distance between the auxiliary state (Phi_n evaluated on
    the limit path) and the limit path; and the same for the state driven
    directly by Phi_n.  All runs share ``cfg`` and its noise streams.
    """
    lim = family.feedback(theta_lim)
    frozen = run_ensemble(space, op, lim, x0, cfg, n_paths, keep_states=True, keep_noise=True)
    prng = np.random.default_rng(probe_seed)
    pt = prng.uniform(0.0, cfg.T, n_probe)
    px = random_states(space, prng, n_probe, r_max)
    lim_vals = np.stack([lim(t, x) for t, x in zip(pt, px)])
    rows = []
    for i, th in enumerate(theta_seq, start=1):
        ctl = family.feedback(th)
        vals = np.stack([ctl(t, x) for t, x in zip(pt, px)])
        cg = float(np.max(np.linalg.norm(vals - lim_vals, axis=1)))
        aux = simulate_auxiliary(space, op, ctl, frozen, cfg)
        direct = run_ensemble(space, op, ctl, x0, cfg, n_paths, keep_states=True)
        ok = frozen.valid & aux.valid & direct.valid
        ag, ase = _sup_gap(aux.states[ok], frozen.states[ok])
        dg, dse = _sup_gap(direct.states[ok], frozen.states[ok])
        rows.append(GapRow(i, cg, ag, ase, dg, dse))
    return rows
