"""Sampled certification of the structural inequalities on a coefficient triple.

Every check draws states as Gaussian directions with H-norm uniform in
[0, r_max] and times uniform in [0, T], evaluates the slack RHS - LHS of
one inequality, and reports the worst sample.  A pass certifies the
inequality only on that sampled ball.

Tolerances: ``atol + rtol * max |RHS|`` over the sample, so a report
passes iff ``margin >= -tolerance``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .operators import OperatorTriple, TimeTable, zero_weight
from .space import GalerkinSpace, random_states, v_norm

ATOL = 1e-7
RTOL = 1e-6


@dataclass
class CheckReport:
    hypothesis: str
    n_samples: int
    passed: bool
    margin: float
    tolerance: float
    witness: dict = field(default_factory=dict, repr=False)
    status: str = ""
    extras: dict = field(default_factory=dict)
    r_max: float = 10.0

    def __post_init__(self):
        if not self.status:
            self.status = "pass" if self.passed else "fail"

    def row(self) -> dict:
        """Flat record for CSV output."""
        w = self.witness
        return {
            "id": self.hypothesis,
            "status": self.status,
            "pass": int(self.passed),
            "margin": self.margin,
            "tolerance": self.tolerance,
            "n_samples": self.n_samples,
            "witness_t": w.get("t", ""),
            "witness_u_norm": float(np.linalg.norm(w["u"])) if "u" in w else "",
            "witness_v_norm": float(np.linalg.norm(w["v"])) if "v" in w else "",
        }


def _report(hyp, slack, rhs, witness_fn, r_max, extras=None, atol=ATOL, rtol=RTOL):
    slack = np.asarray(slack, dtype=float)
    tol = atol + rtol * float(np.max(np.abs(rhs))) if np.size(rhs) else atol
    i = int(np.argmin(slack))
    margin = float(slack[i])
    return CheckReport(hyp, int(slack.size), margin >= -tol, margin, tol,
                       witness_fn(i), extras=extras or {}, r_max=r_max)


BLOCK = 64


def _draw(seed, n, fn):
    """Concatenate blocks ``fn(rng, BLOCK)``, block b seeded by (seed, b).

    The first n samples of a larger draw are the n-sample draw, so the
    worst margin can only decrease as the sample grows.
    """
    parts = [fn(np.random.default_rng([seed, b]), BLOCK) for b in range(-(-n // BLOCK))]
    return [np.concatenate(p)[:n] for p in zip(*parts)]


def _unit(rng, b, m):
    g = rng.standard_normal((b, m))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def _pairs(space, rng, b, r_max, T):
    """Times and state pairs; odd rows are close pairs (v within 1 of u)."""
    t = rng.uniform(0.0, T, b)
    U = random_states(space, rng, b, r_max)
    V = random_states(space, rng, b, r_max)
    V[1::2] = U[1::2] + random_states(space, rng, b // 2, 1.0)
    return t, U, V


def _apply_rows(fn, t, U):
    """fn evaluated row by row when times differ; batched otherwise."""
    t = np.asarray(t)
    if t.ndim == 0 or np.all(t == t.flat[0]):
        return np.asarray(fn(float(t.flat[0]), U))
    return np.stack([np.asarray(fn(float(ti), ui)) for ti, ui in zip(t, U)])


# ---------------------------------------------------------------------------


def check_hemicontinuity(op: OperatorTriple, space: GalerkinSpace, n_samples: int = 64,
                         n_lambda: int = 64, seed: int = 0, T: float = 1.0,
                         r_max: float = 10.0, tol: float = 1e-6) -> CheckReport:
    """Refinement test of lambda -> <A(t, u + lambda v), w> on [-1, 1].

    The largest adjacent-grid variation must shrink by at least a factor
    1.5 when the grid is halved; a jump keeps it constant.  Variations
    below ``tol * (1 + max|f|)`` count as resolved.
    """
    if n_lambda < 8:
        raise ValueError("n_lambda must be at least 8")
    m = space.m
    ts, U, V, W = _draw(seed, n_samples, lambda r, b: (
        r.uniform(0.0, T, b), random_states(space, r, b, r_max), _unit(r, b, m), _unit(r, b, m)))
    fine = np.linspace(-1.0, 1.0, 2 * n_lambda - 1)
    ratios = np.empty(n_samples)
    jump_at = np.empty(n_samples)
    for i in range(n_samples):
        f = np.asarray(op.A(ts[i], U[i] + fine[:, None] * V[i])) @ W[i]
        coarse = f[::2]
        var_c = np.max(np.abs(np.diff(coarse)))
        dfine = np.abs(np.diff(f))
        var_f = np.max(dfine)
        floor = tol * (1.0 + np.max(np.abs(f)))
        ratios[i] = 2.0 if var_f <= floor else min(2.0, var_c / var_f)
        j = int(np.argmax(dfine))
        jump_at[i] = 0.5 * (fine[j] + fine[j + 1])
    margin = ratios - 1.5

    def witness(i):
        return {"t": float(ts[i]), "u": U[i] + jump_at[i] * V[i], "v": V[i], "w": W[i],
                "lambda": float(jump_at[i]), "base": U[i]}

    i = int(np.argmin(margin))
    return CheckReport("A.1", n_samples, bool(margin[i] >= 0.0), float(margin[i]), 0.0,
                       witness(i), extras={"min_ratio": float(ratios[i])}, r_max=r_max)


def check_local_monotonicity(op: OperatorTriple, space: GalerkinSpace, n_pairs: int = 1000,
                             rho: Callable | None = None, eta: Callable | None = None,
                             seed: int = 0, T: float = 1.0, r_max: float = 10.0) -> CheckReport:
    """2<A(t,u) - A(t,v), u - v> <= [f_A(t) + rho(u) + eta(v)] ‖u - v‖_H².

    Half the pairs are independent, half are close (v = u + small step).
    Also checks |rho(u)| + |eta(u)| <= C (1 + ‖u‖_V^beta)(1 + ‖u‖_H^zeta);
    its slack is reported in ``extras['side_margin']``.
    """
    rho = rho or zero_weight
    eta = eta or zero_weight
    prm = op.params
    ts, U, V = _draw(seed, n_pairs, lambda r, b: _pairs(space, r, b, r_max, T))
    D = U - V
    dA = _apply_rows(op.A, ts, U) - _apply_rows(op.A, ts, V)
    lhs = 2.0 * np.sum(dA * D, axis=1)
    rhs = (prm.f_A(ts) + rho(U) + eta(V)) * np.sum(D * D, axis=1)
    side_lhs = np.abs(rho(U)) + np.abs(eta(U))
    side_rhs = (prm.C_rho_eta * (1.0 + v_norm(space, U) ** prm.beta)
                * (1.0 + np.linalg.norm(U, axis=1) ** prm.zeta))
    side = side_rhs - side_lhs
    side_tol = ATOL + RTOL * float(np.max(np.abs(side_rhs)))
    rep = _report("A.2", rhs - lhs, rhs,
                  lambda i: {"t": float(ts[i]), "u": U[i], "v": V[i]}, r_max,
                  extras={"side_margin": float(np.min(side))})
    if np.min(side) < -side_tol:
        rep.passed = False
        rep.status = "fail"
        if rep.margin >= -rep.tolerance:
            j = int(np.argmin(side))
            rep.witness = {"t": float(ts[j]), "u": U[j], "v": U[j], "side_bound": True}
    return rep


def check_noise_lipschitz(op: OperatorTriple, space: GalerkinSpace, n_pairs: int = 1000,
                          rho: Callable | None = None, eta: Callable | None = None,
                          f_B: TimeTable | None = None, k: int | None = None, seed: int = 0,
                          T: float = 1.0, r_max: float = 10.0) -> CheckReport:
    """‖B(t,u) - B(t,v)‖²_{L2} <= [f(t) + rho(u) + eta(v)] ‖u - v‖².

    ``f`` defaults to the drift's f_A (shared witnesses); pass ``f_B`` for
    an independent one.
    """
    rho = rho or zero_weight
    eta = eta or zero_weight
    f = op.params.f_A if f_B is None else TimeTable.coerce(f_B)
    k = space.m if k is None else k
    ts, U, V = _draw(seed, n_pairs, lambda r, b: _pairs(space, r, b, r_max, T))
    dB = (_apply_rows(op.B.matrix, ts, U) - _apply_rows(op.B.matrix, ts, V))[..., :k]
    lhs = np.sum(dB * dB, axis=(1, 2))
    rhs = (f(ts) + rho(U) + eta(V)) * np.sum((U - V) ** 2, axis=1)
    return _report("B.1", rhs - lhs, rhs,
                   lambda i: {"t": float(ts[i]), "u": U[i], "v": V[i]}, r_max)


def check_coercivity(op: OperatorTriple, space: GalerkinSpace, n_samples: int = 1000,
                     seed: int = 0, T: float = 1.0, r_max: float = 10.0) -> CheckReport:
    """2<A(t,u), u> <= f_A(t)(1 + ‖u‖_H²) - C ‖u‖_V^beta."""
    prm = op.params
    ts, U = _draw(seed, n_samples, lambda r, b: (
        r.uniform(0.0, T, b), random_states(space, r, b, r_max)))
    lhs = 2.0 * np.sum(_apply_rows(op.A, ts, U) * U, axis=1)
    rhs = prm.f_A(ts) * (1.0 + np.sum(U * U, axis=1)) - prm.C_coerc * v_norm(space, U) ** prm.beta
    return _report("A.3", rhs - lhs, rhs, lambda i: {"t": float(ts[i]), "u": U[i]}, r_max)


# ---------------------------------------------------------------------------
# dual norm


def _sphere_terms(space, v):
    """Gradient and Hessian of ‖v‖_V^alpha / alpha at a point of the V-sphere."""
    z = v @ space.basis_derivs
    a = space.alpha
    az = np.abs(z)
    g = (space.weights * az ** (a - 2.0) * z) @ space.basis_derivs.T
    with np.errstate(divide="ignore"):
        wz = space.weights * np.where(az > 0, az, np.inf if a < 2 else 0.0) ** (a - 2.0)
    Hm = (a - 1.0) * (space.basis_derivs * wz) @ space.basis_derivs.T
    Hm += 1e-12 * np.trace(Hm) / space.m * np.eye(space.m)
    return g, Hm


def dual_norm(space: GalerkinSpace, w, iters: int = 50, rtol: float = 1e-12):
    """sup { <w, v> : ‖v‖_V = 1 } over the Galerkin space by projected ascent.

    Returns ``(value, converged)``.  Each step follows the gradient of
    <w, v> / ‖v‖_V preconditioned by the Hessian of ‖v‖_V^alpha and is then
    renormalized onto the sphere, with backtracking.  The start point
    (inverse Laplacian applied to w) is already optimal at alpha = 2.
    """
    w = np.asarray(w, dtype=float)
    if not np.any(w):
        return 0.0, True
    v = w / space.laplace_eigenvalues
    v = v / v_norm(space, v)
    val = float(w @ v)
    for _ in range(iters):
        g, Hm = _sphere_terms(space, v)
        r = w - val * g
        if np.linalg.norm(r) <= rtol * np.linalg.norm(w):
            return val, True
        d = np.linalg.solve(Hm, r) / max(val, 1e-300)
        step = 1.0
        while step > 1e-10:
            cand = v + step * d
            cn = v_norm(space, cand)
            if cn > 0 and float(w @ cand) / cn > val:
                break
            step *= 0.5
        else:
            return val, True  # no ascent direction left at working precision
        v = cand / cn
        new = float(w @ v)
        if new - val <= rtol * abs(new):
            return new, True
        val = new
    return val, False


def check_growth(op: OperatorTriple, space: GalerkinSpace, n_samples: int = 200, p: float = 2.0,
                 k: int | None = None, seed: int = 0, T: float = 1.0,
                 r_max: float = 10.0, control: Callable | None = None) -> list[CheckReport]:
    """Growth bounds on the drift, the diffusion and the control.

    Returns reports for, in order,
    ‖A(t,u)‖_{V*}^{beta/(beta-1)} <= (f_A + C ‖u‖_V^beta)(1 + ‖u‖_H^alpha),
    ‖B(t,u)‖_{L2}^p <= g_B (1 + ‖u‖_H^p), and
    ‖Phi(t,u)‖_H^p <= C (f_Phi + ‖u‖_H^p).
    """
    prm = op.params
    control = op.Phi if control is None else control
    k = space.m if k is None else k
    ts, U = _draw(seed, n_samples, lambda r, b: (
        r.uniform(0.0, T, b), random_states(space, r, b, r_max)))
    hn = np.linalg.norm(U, axis=1)
    wit = lambda i: {"t": float(ts[i]), "u": U[i]}  # noqa: E731

    A_vals = _apply_rows(op.A, ts, U)
    dn = np.empty(n_samples)
    conv = np.empty(n_samples, dtype=bool)
    for i in range(n_samples):
        dn[i], conv[i] = dual_norm(space, A_vals[i])
    q = prm.beta / (prm.beta - 1.0)
    rhs = (prm.f_A(ts) + prm.C_growth * v_norm(space, U) ** prm.beta) * (1.0 + hn**prm.alpha_growth)
    slack = np.where(conv, rhs - dn**q, np.inf)
    if np.all(conv):
        a4 = _report("A.4", slack, rhs, wit, r_max)
    else:
        a4 = _report("A.4", np.where(np.isinf(slack), np.finfo(float).max, slack), rhs, wit, r_max)
        if a4.passed:
            a4.status = "indeterminate"
    a4.extras["unconverged"] = int(np.sum(~conv))

    Bm = _apply_rows(op.B.matrix, ts, U)[..., :k]
    lhs_b = np.sqrt(np.sum(Bm * Bm, axis=(1, 2))) ** p
    rhs_b = prm.g_B(ts) * (1.0 + hn**p)
    b3 = _report("B.3", rhs_b - lhs_b, rhs_b, wit, r_max, extras={"p": p})

    lhs_c = np.linalg.norm(_apply_rows(control, ts, U), axis=1) ** p
    rhs_c = prm.C_control * (prm.f_Phi(ts) + hn**p)
    c4 = _report("C.4", rhs_c - lhs_c, rhs_c, wit, r_max, extras={"p": p})
    return [a4, b3, c4]


def check_control_family(Phi: Callable, space: GalerkinSpace, n_samples: int = 2000,
                         f_Phi: TimeTable | float | None = None, seed: int = 0,
                         T: float = 1.0, r_max: float = 10.0) -> list[CheckReport]:
    """Lipschitz and coercivity bounds on a feedback map.

    Lipschitz constants come from ratio maximization: ``alpha_lip`` over
    pairs (t, x, y), ``lam`` over pairs (s, t, x).  Both are scaled up by the
    factor needed for the joint bound on general samples, then reported in
    ``extras``.  ``f_Phi`` defaults to the map's own coercivity bound when
    it has one, else 0.
    """
    if f_Phi is None:
        f_Phi = Phi.coercivity_bound() if hasattr(Phi, "coercivity_bound") else 0.0
    f_Phi = TimeTable.coerce(f_Phi)
    t, X, Y, s = _draw(seed, n_samples, lambda r, b: (
        *_pairs(space, r, b, r_max, T), r.uniform(0.0, T, b)))

    PX = _apply_rows(Phi, t, X)
    PY = _apply_rows(Phi, t, Y)
    PSX = _apply_rows(Phi, s, X)
    PSY = _apply_rows(Phi, s, Y)
    dxy = np.sum((X - Y) ** 2, axis=1)
    dts = (t - s) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        r_x = np.where(dxy > 0, np.sum((PX - PY) ** 2, axis=1) / dxy, 0.0)
        r_t = np.where(dts > 0, np.sum((PX - PSX) ** 2, axis=1) / dts, 0.0)
    alpha_lip = float(np.max(r_x))
    lam = float(np.max(r_t))
    joint = np.sum((PX - PSY) ** 2, axis=1)
    denom = lam * dts + alpha_lip * dxy
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = float(np.max(np.where(denom > 0, joint / denom, np.where(joint > 0, np.inf, 0.0))))
    factor = max(1.0, factor)
    lam_f, alpha_f = lam * factor, alpha_lip * factor
    phi00 = float(np.sum(np.asarray(Phi(0.0, np.zeros(space.m))) ** 2))
    c1_rhs = lam_f * dts + alpha_f * dxy
    c1 = _report("C.1", c1_rhs - joint, c1_rhs,
                 lambda i: {"t": float(t[i]), "s": float(s[i]), "u": X[i], "v": Y[i]}, r_max,
                 extras={"lam": lam_f, "alpha_lip": alpha_f, "joint_factor": factor,
                         "phi00_sq": phi00})
    finite = math.isfinite(factor) and math.isfinite(phi00) and np.all(np.isfinite(PX))
    if not finite:
        c1.passed, c1.status = False, "fail"

    lhs3 = 2.0 * np.sum(PX * X, axis=1)
    rhs3 = f_Phi(t) * (1.0 + np.sum(X * X, axis=1))
    c3 = _report("C.3", rhs3 - lhs3, rhs3, lambda i: {"t": float(t[i]), "u": X[i]}, r_max,
                 extras={"f_Phi": float(f_Phi(0.0))})
    return [c1, c3]


def run_checks(op: OperatorTriple, space: GalerkinSpace, n_samples: int = 500, seed: int = 0,
               T: float = 1.0, r_max: float = 10.0, rho=None, eta=None, f_B=None,
               p: float = 2.0, k: int | None = None, control=None) -> list[CheckReport]:
    """Every supported check, in the order A.1-A.4, B.1, B.3, C.1, C.3, C.4."""
    control = op.Phi if control is None else control
    kw = dict(seed=seed, T=T, r_max=r_max)
    reps = [check_hemicontinuity(op, space, n_samples=max(8, n_samples // 10), **kw),
            check_local_monotonicity(op, space, n_pairs=n_samples, rho=rho, eta=eta, **kw),
            check_coercivity(op, space, n_samples=n_samples, **kw)]
    a4, b3, c4 = check_growth(op, space, n_samples=max(8, n_samples // 5), p=p, k=k,
                              control=control, **kw)
    b1 = check_noise_lipschitz(op, space, n_pairs=n_samples, rho=rho, eta=eta, f_B=f_B, k=k, **kw)
    c1, c3 = check_control_family(control, space, n_samples=n_samples,
                                  f_Phi=op.params.f_Phi if not hasattr(control, "coercivity_bound") else None,
                                  **kw)
    return reps + [a4, b1, b3, c1, c3, c4]
