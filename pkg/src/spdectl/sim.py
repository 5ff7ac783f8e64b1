"""Euler-Maruyama integration of the Galerkin SDE and the frozen-control system.

The Galerkin system on span{e_1..e_m} reads

    dY = [A(t,Y) + Phi(t,Y)] dt + B(t,Y) Q_k dW,

with the drift's dual coordinates used directly as H coordinates (the
basis is orthonormal).  The auxiliary system evaluates the control and the
diffusion along a frozen path instead of the current state, reusing that
path's Brownian increments.

Paths are processed in fixed-size batches.  Each path draws its noise
from its own counter-based stream, and batches are independent of the
thread count, so results are bit-reproducible for a given master seed.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels, rng
from .errors import (ContractError, DivergenceError, InvalidParameterError,
                     OperatorEvaluationError)
from .feedback import SaturatedAffineFeedback
from .operators import OperatorTriple
from .space import GalerkinSpace, StateVec, as_coeffs, v_norm

SCHEMES = ("em", "tamed")
THREADS_ENV = "SPDECTL_THREADS"


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class SimConfig:
    """Time grid, noise truncation, scheme and seeding.

    ``stop_N_H`` / ``stop_N_V`` are the thresholds on ‖Y‖_H² and on the
    running integral of ‖Y‖_V^beta; ``None`` disables either.  Exit times
    are only recorded unless ``hard_stop`` is set, in which case each path
    is frozen at its exit state.
    """

    T: float = 0.1
    n_steps: int = 1000
    k_noise: int = 1
    scheme: str = "em"
    seed: int = 0
    taming_power: float = 1.0
    stop_N_H: float | None = None
    stop_N_V: float | None = None
    hard_stop: bool = False
    divergence_cap: float = 0.01
    chunk_size: int = 256
    threads: int | None = None
    debug: bool = False

    def __post_init__(self):
        if not self.T > 0:
            raise InvalidParameterError(f"T must be positive, got {self.T}")
        if not (isinstance(self.n_steps, (int, np.integer)) and self.n_steps >= 1):
            raise InvalidParameterError(f"n_steps must be a positive integer, got {self.n_steps}")
        if not (isinstance(self.k_noise, (int, np.integer)) and self.k_noise >= 1):
            raise InvalidParameterError(f"k_noise must be a positive integer, got {self.k_noise}")
        if self.scheme not in SCHEMES:
            raise InvalidParameterError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidParameterError("seed must fit in 64 unsigned bits")
        if not self.taming_power > 0:
            raise InvalidParameterError("taming_power must be positive")
        if not 0 <= self.divergence_cap <= 1:
            raise InvalidParameterError("divergence_cap must lie in [0, 1]")
        if self.chunk_size < 1:
            raise InvalidParameterError("chunk_size must be positive")

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_steps + 1)

    def with_(self, **kw) -> "SimConfig":
        return replace(self, **kw)


@dataclass(eq=False)
class SamplePath:
    """One simulated trajectory.

    ``diverged_at`` is the index of the step that produced a non-finite
    state; states from there on are NaN.
    """

    times: np.ndarray
    states: np.ndarray  # (n_steps + 1, m)
    v_beta_running: np.ndarray
    tau_exit: float
    noise_record: np.ndarray | None = field(default=None, repr=False)
    seed: int = 0
    stream_id: int = 0
    diverged_at: int | None = None

    @property
    def diverged(self) -> bool:
        return self.diverged_at is not None

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]

    def h_norms(self) -> np.ndarray:
        return np.linalg.norm(self.states, axis=-1)


@dataclass(eq=False)
class PathEnsemble:
    """Monte Carlo ensemble; norm traces always, states and noise on request."""

    seed: int
    stream_ids: np.ndarray
    times: np.ndarray
    beta: float
    h2: np.ndarray  # (P, n+1) ‖Y‖_H²
    vnorm: np.ndarray  # (P, n+1) ‖Y‖_V
    tau_exit: np.ndarray  # (P,)
    status: np.ndarray  # (P,) -1 or divergence step
    terminal: np.ndarray  # (P, m)
    states: np.ndarray | None = field(default=None, repr=False)
    noise: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_paths(self) -> int:
        return len(self.stream_ids)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def valid(self) -> np.ndarray:
        return self.status < 0

    @property
    def divergent_fraction(self) -> float:
        return float(np.mean(~self.valid))

    @property
    def v_beta_running(self) -> np.ndarray:
        return running_integral(self.vnorm**self.beta, self.dt)

    def path(self, i: int) -> SamplePath:
        if self.states is None:
            raise ContractError("ensemble was run without keep_states")
        return SamplePath(
            times=self.times, states=self.states[i],
            v_beta_running=self.v_beta_running[i], tau_exit=float(self.tau_exit[i]),
            noise_record=None if self.noise is None else self.noise[i],
            seed=self.seed, stream_id=int(self.stream_ids[i]),
            diverged_at=None if self.status[i] < 0 else int(self.status[i]),
        )


def running_integral(values: np.ndarray, dt: float) -> np.ndarray:
    """Left-endpoint running integral along the last axis, starting at 0."""
    out = np.zeros_like(values)
    np.cumsum(values[..., :-1] * dt, axis=-1, out=out[..., 1:])
    return out


def exit_indices(h2, vbeta_running, cfg: SimConfig) -> np.ndarray:
    """First grid index crossing a stop threshold; n_steps + 1 if none."""
    n = h2.shape[-1]
    hit = np.zeros(h2.shape, dtype=bool)
    if cfg.stop_N_H is not None:
        hit |= h2 > cfg.stop_N_H
    if cfg.stop_N_V is not None:
        hit |= vbeta_running > cfg.stop_N_V
    return np.where(hit.any(axis=-1), hit.argmax(axis=-1), n)


# ---------------------------------------------------------------------------
# single step


def _drift(op, control, t, X, Z):
    return op.A(t, X) + control(t, Z)


def _tame(D, dt, power):
    dn = np.sqrt(np.sum(D * D, axis=-1))
    return D / (1.0 + dt * dn**power)[..., None]


def step(space: GalerkinSpace, op: OperatorTriple, control, u, t: float, dt: float, dW,
         scheme: str = "em", taming_power: float = 1.0) -> StateVec:
    """One explicit (or tamed) Euler-Maruyama increment from state u."""
    if not dt > 0:
        raise InvalidParameterError(f"dt must be positive, got {dt}")
    x = as_coeffs(space, u)
    dW = np.atleast_1d(np.asarray(dW, dtype=float))
    if not 1 <= dW.shape[-1] <= space.m:
        raise InvalidParameterError(f"dW must have between 1 and m={space.m} entries")
    control = op.Phi if control is None else control
    with np.errstate(all="ignore"):
        try:
            D = _drift(op, control, t, x, x)
        except OperatorEvaluationError as exc:
            raise DivergenceError(f"drift evaluation failed at t={t}", t=t,
                                  h_norm=float(np.linalg.norm(x))) from exc
        if scheme == "tamed":
            D = _tame(D, dt, taming_power)
        elif scheme != "em":
            raise InvalidParameterError(f"unknown scheme {scheme!r}")
        new = x + dt * D + op.B.apply(t, x, dW)
    if not np.all(np.isfinite(new)):
        raise DivergenceError(f"non-finite state after step at t={t}", t=t,
                              h_norm=float(np.linalg.norm(x)))
    return StateVec(new, space.m)


# ---------------------------------------------------------------------------
# batch integration


_NOISE_CODES = {"none": kernels.NOISE_NONE, "additive": kernels.NOISE_ADDITIVE,
                "multiplicative": kernels.NOISE_MULTIPLICATIVE}


def _fast_path_ok(op, control, cfg) -> bool:
    return (op.linear_drift is not None and isinstance(control, SaturatedAffineFeedback)
            and op.B.kind in _NOISE_CODES and not cfg.debug)


def _integrate_fused(op, control, X0, dW, cfg, driver, backend=None):
    impl = kernels if backend is None else backend
    P, N, _ = dW.shape
    out = np.empty((P, N + 1, op.m))
    p = control.params
    status = impl.em_affine(
        np.ascontiguousarray(X0), np.ascontiguousarray(dW), np.ascontiguousarray(op.linear_drift),
        cfg.dt, np.ascontiguousarray(p.K), np.ascontiguousarray(control.knot_times),
        np.ascontiguousarray(p.c), p.kappa, _NOISE_CODES[op.B.kind], op.B.sigma,
        int(cfg.scheme == "tamed"), cfg.taming_power,
        None if driver is None else np.ascontiguousarray(driver), out,
    )
    return out, np.asarray(status, dtype=np.int64)


def _integrate_generic(op, control, X0, dW, cfg, driver):
    P, N, _ = dW.shape
    dt = cfg.dt
    out = np.empty((P, N + 1, op.m))
    status = np.full(P, -1, dtype=np.int64)
    X = np.array(X0, dtype=float, copy=True)
    out[:, 0] = X
    alive = np.arange(P)
    tamed = cfg.scheme == "tamed"
    for n in range(N):
        t = n * dt
        Xa = X[alive]
        Za = Xa if driver is None else driver[alive, n]
        with np.errstate(all="ignore"):
            try:
                D = _drift(op, control, t, Xa, Za)
            except OperatorEvaluationError:
                D = np.stack([_safe_drift(op, control, t, Xa[i], Za[i]) for i in range(len(alive))])
            if tamed:
                D = _tame(D, dt, cfg.taming_power)
                if cfg.debug and cfg.taming_power == 1.0:
                    # dt‖D‖/(1 + dt‖D‖) < 1
                    inc = dt * np.linalg.norm(D, axis=-1)
                    assert np.all(inc[np.isfinite(inc)] < 1.0), "taming bound violated"
            new = Xa + dt * D + op.B.apply(t, Za, dW[alive, n])
        bad = ~np.all(np.isfinite(new), axis=1)
        if np.any(bad):
            status[alive[bad]] = n
            new[bad] = np.nan
            X[alive] = new
            alive = alive[~bad]
        else:
            X[alive] = new
        out[:, n + 1] = X
    return out, status


def _safe_drift(op, control, t, x, z):
    try:
        return _drift(op, control, t, x, z)
    except OperatorEvaluationError:
        return np.full_like(x, np.nan)


def integrate_batch(op: OperatorTriple, control, X0, dW, cfg: SimConfig, driver=None,
                    backend=None):
    """States (P, N+1, m) and divergence status for a batch of paths.

    ``driver`` (P, N+1, m), when given, supplies the states at which the
    control and the diffusion are evaluated (auxiliary system).
    """
    control = op.Phi if control is None else control
    if _fast_path_ok(op, control, cfg):
        return _integrate_fused(op, control, X0, dW, cfg, driver, backend)
    return _integrate_generic(op, control, X0, dW, cfg, driver)


def post_process(space, op, states, status, cfg):
    """Traces (‖Y‖_H², ‖Y‖_V, running V-integral, exit time) for a batch.

    With ``cfg.hard_stop`` each path is frozen in place after its exit step.
    """
    beta = op.params.beta
    with np.errstate(over="ignore", invalid="ignore"):  # diverged paths carry NaN/inf
        h2 = np.sum(states * states, axis=-1)
        vn = v_norm(space, states)
        vbr = running_integral(vn**beta, cfg.dt)
    idx = exit_indices(h2, vbr, cfg)
    if cfg.hard_stop:
        N1 = states.shape[1]
        for p in np.nonzero(idx < N1)[0]:
            i = idx[p]
            states[p, i + 1:] = states[p, i]
            h2[p, i + 1:] = h2[p, i]
            vn[p, i + 1:] = vn[p, i]
        with np.errstate(over="ignore", invalid="ignore"):
            vbr = running_integral(vn**beta, cfg.dt)
    tau = np.where(idx < states.shape[1], np.minimum(idx, cfg.n_steps) * cfg.dt, cfg.T)
    return h2, vn, vbr, tau


def _check_k(space, cfg):
    if cfg.k_noise > space.m:
        raise InvalidParameterError(f"k_noise={cfg.k_noise} exceeds m={space.m}")


def simulate_path(space: GalerkinSpace, op: OperatorTriple, control, x0, cfg: SimConfig,
                  stream: int = 0) -> SamplePath:
    """Integrate one path on stream ``stream`` of the master seed.

    A path that produces a non-finite state is marked through
    ``diverged_at`` rather than raising.
    """
    _check_k(space, cfg)
    x = as_coeffs(space, x0 if isinstance(x0, StateVec) else StateVec(x0, space.m))
    dW = rng.brownian_increments(cfg.seed, stream, cfg.n_steps, cfg.k_noise, cfg.dt)
    states, status = integrate_batch(op, control, x[None, :], dW[None], cfg)
    return _path_from_batch(space, op, states, status, dW[None], cfg, 0, stream)


def _path_from_batch(space, op, states, status, dW, cfg, i, stream):
    _, _, vbr, tau = post_process(space, op, states, status, cfg)
    return SamplePath(
        times=cfg.times, states=states[i], v_beta_running=vbr[i], tau_exit=float(tau[i]),
        noise_record=dW[i], seed=cfg.seed, stream_id=stream,
        diverged_at=None if status[i] < 0 else int(status[i]),
    )


def _check_grid(times, cfg):
    if len(times) != cfg.n_steps + 1 or not math.isclose(times[-1], cfg.T, rel_tol=1e-12):
        raise ContractError("frozen path grid does not match the simulation config")


def simulate_auxiliary(space: GalerkinSpace, op: OperatorTriple, control_n, frozen,
                       cfg: SimConfig):
    """Frozen-control system driven by the noise of ``frozen``.

    The drift acts on the auxiliary state; ``control_n`` and B are
    evaluated along the frozen trajectory.  ``frozen`` is a SamplePath or a
    PathEnsemble run with ``keep_states`` and ``keep_noise``.
    """
    _check_k(space, cfg)
    if isinstance(frozen, PathEnsemble):
        return _auxiliary_ensemble(space, op, control_n, frozen, cfg)
    _check_grid(frozen.times, cfg)
    if frozen.noise_record is None:
        raise ContractError("frozen path has no noise record")
    if frozen.noise_record.shape != (cfg.n_steps, cfg.k_noise):
        raise ContractError("frozen noise record does not match (n_steps, k_noise)")
    if frozen.diverged:
        raise ContractError("frozen path diverged; no auxiliary system along it")
    dW = frozen.noise_record[None]
    states, status = integrate_batch(op, control_n, frozen.states[:1], dW, cfg,
                                     driver=frozen.states[None])
    return _path_from_batch(space, op, states, status, dW, cfg, 0, frozen.stream_id)


def _auxiliary_ensemble(space, op, control_n, frozen, cfg):
    if frozen.states is None or frozen.noise is None:
        raise ContractError("frozen ensemble needs keep_states and keep_noise")
    _check_grid(frozen.times, cfg)
    if frozen.noise.shape[1:] != (cfg.n_steps, cfg.k_noise):
        raise ContractError("frozen noise record does not match (n_steps, k_noise)")

    def work(sl):
        st, status = integrate_batch(op, control_n, frozen.states[sl, 0], frozen.noise[sl], cfg,
                                     driver=frozen.states[sl])
        return _summarize(space, op, st, status, frozen.noise[sl], cfg, True, True)

    return _assemble(frozen.seed, frozen.stream_ids, cfg, op, _run_chunks(work, frozen.n_paths, cfg))


def _summarize(space, op, states, status, dW, cfg, keep_states, keep_noise):
    h2, vn, _, tau = post_process(space, op, states, status, cfg)
    return dict(h2=h2, vnorm=vn, tau=tau, status=status, terminal=states[:, -1].copy(),
                states=states if keep_states else None, noise=dW if keep_noise else None)


def _run_chunks(work, n_paths, cfg):
    chunks = [slice(s, min(s + cfg.chunk_size, n_paths))
              for s in range(0, n_paths, cfg.chunk_size)]
    threads = cfg.threads or default_threads()
    if threads <= 1 or len(chunks) == 1:
        return [work(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(work, chunks))


def _assemble(seed, stream_ids, cfg, op, parts):
    cat = lambda key: np.concatenate([p[key] for p in parts])  # noqa: E731
    ens = PathEnsemble(
        seed=seed, stream_ids=np.asarray(stream_ids), times=cfg.times, beta=op.params.beta,
        h2=cat("h2"), vnorm=cat("vnorm"), tau_exit=cat("tau"), status=cat("status"),
        terminal=cat("terminal"),
        states=None if parts[0]["states"] is None else cat("states"),
        noise=None if parts[0]["noise"] is None else cat("noise"),
    )
    frac = ens.divergent_fraction
    if frac > cfg.divergence_cap:
        raise DivergenceError(
            f"{frac:.2%} of paths diverged (cap {cfg.divergence_cap:.2%})", fraction=frac
        )
    return ens


def map_batches(space: GalerkinSpace, op: OperatorTriple, control, x0, cfg: SimConfig,
                n_paths: int, reduce):
    """Simulate ``n_paths`` in fixed batches and apply ``reduce`` to each.

    ``reduce(ids, states, status, dW)`` runs on the worker; the list of its
    results comes back in batch order.
    """
    _check_k(space, cfg)
    if n_paths < 1:
        raise InvalidParameterError("n_paths must be at least 1")
    x = as_coeffs(space, x0 if isinstance(x0, StateVec) else StateVec(x0, space.m))

    def work(sl):
        ids = np.arange(sl.start, sl.stop)
        dW = rng.batch_increments(cfg.seed, ids, cfg.n_steps, cfg.k_noise, cfg.dt)
        X0 = np.broadcast_to(x, (len(ids), space.m))
        states, status = integrate_batch(op, control, X0, dW, cfg)
        return reduce(ids, states, status, dW)

    return _run_chunks(work, n_paths, cfg)


def run_ensemble(space: GalerkinSpace, op: OperatorTriple, control, x0, cfg: SimConfig,
                 n_paths: int, keep_states: bool = False, keep_noise: bool = False) -> PathEnsemble:
    """Independent paths on streams 0..n_paths-1 of the master seed.

    Raises DivergenceError when the divergent fraction exceeds the cap.
    """
    parts = map_batches(
        space, op, control, x0, cfg, n_paths,
        lambda ids, st, status, dW: _summarize(space, op, st, status, dW, cfg,
                                               keep_states, keep_noise),
    )
    return _assemble(cfg.seed, np.arange(n_paths), cfg, op, parts)
