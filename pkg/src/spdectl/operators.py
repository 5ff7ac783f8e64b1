"""Coefficient triples (A, Phi, B) and the built-in operators.

All coefficient callables act on batches: a state argument of shape
(..., m) gives a drift of shape (..., m), a control of shape (..., m) and a
diffusion matrix of shape (..., m, m).  Noise truncation to k channels is
applied on top by :func:`eval_B` and the simulator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels
from .errors import InvalidParameterError, OperatorEvaluationError
from .feedback import zero_feedback
from .space import GalerkinSpace, StateVec, as_coeffs, h_norm


class TimeTable:
    """Nonnegative piecewise-constant function of time.

    ``values[i]`` holds on ``[knots[i], knots[i+1])``; the last value
    extends to the right.  ``TimeTable.constant(c)`` is the common case.
    """

    def __init__(self, knots, values):
        knots = np.asarray(knots, dtype=float).reshape(-1)
        values = np.asarray(values, dtype=float).reshape(-1)
        if knots.shape != values.shape or knots.size == 0:
            raise InvalidParameterError("TimeTable needs matching non-empty knots and values")
        if np.any(np.diff(knots) <= 0):
            raise InvalidParameterError("TimeTable knots must be increasing")
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise InvalidParameterError("TimeTable values must be finite and nonnegative")
        self.knots = knots
        self.values = values

    @classmethod
    def constant(cls, c: float) -> "TimeTable":
        return cls([0.0], [c])

    @classmethod
    def coerce(cls, x) -> "TimeTable":
        return x if isinstance(x, TimeTable) else cls.constant(float(x))

    def __call__(self, t):
        i = np.searchsorted(self.knots, t, side="right") - 1
        return self.values[np.clip(i, 0, len(self.values) - 1)]

    def integral(self, T: float) -> float:
        """int_0^T of the table."""
        edges = np.append(np.clip(self.knots, 0.0, T), T)
        return float(np.sum(self.values * np.diff(edges)))

    def is_constant(self) -> bool:
        return bool(np.all(self.values == self.values[0]))

    def __repr__(self):
        if self.is_constant():
            return f"TimeTable.constant({self.values[0]!r})"
        return f"TimeTable({self.knots.tolist()}, {self.values.tolist()})"


@dataclass(frozen=True)
class HypothesisParams:
    """Exponents, bound functions and constants declared for a triple.

    ``C_coerc`` is the constant of the coercivity bound, ``C_growth`` of the
    drift growth bound, ``C_rho_eta`` bounds |rho| + |eta| and ``C_control``
    is the constant of the control growth bound.
    """

    beta: float = 2.0
    alpha_growth: float = 0.0
    zeta: float = 0.0
    f_A: TimeTable = field(default_factory=lambda: TimeTable.constant(0.0))
    g_B: TimeTable = field(default_factory=lambda: TimeTable.constant(0.0))
    f_Phi: TimeTable = field(default_factory=lambda: TimeTable.constant(0.0))
    C_coerc: float = 1.0
    C_growth: float = 1.0
    C_rho_eta: float = 1.0
    C_control: float = 1.0

    def __post_init__(self):
        if not self.beta > 1:
            raise InvalidParameterError(f"beta must exceed 1, got {self.beta}")
        for name in ("alpha_growth", "zeta"):
            if getattr(self, name) < 0:
                raise InvalidParameterError(f"{name} must be nonnegative")
        for name in ("C_coerc", "C_growth", "C_rho_eta", "C_control"):
            if not getattr(self, name) > 0:
                raise InvalidParameterError(f"{name} must be positive")
        for name in ("f_A", "g_B", "f_Phi"):
            object.__setattr__(self, name, TimeTable.coerce(getattr(self, name)))


# ---------------------------------------------------------------------------
# diffusion


class Diffusion:
    """Galerkin diffusion: ``matrix`` gives B(t,u) as (..., m, m)."""

    kind = "matrix"
    sigma = 0.0

    def __init__(self, fn: Callable | None = None):
        self.fn = fn

    def matrix(self, t, U):
        return self.fn(t, U)

    def apply(self, t, U, dW):
        """B(t,U) restricted to the first k channels, applied to dW (..., k)."""
        k = dW.shape[-1]
        return np.einsum("...ij,...j->...i", self.matrix(t, U)[..., :k], dW)


class NoDiffusion(Diffusion):
    kind = "none"

    def __init__(self):
        super().__init__()

    def matrix(self, t, U):
        U = np.asarray(U)
        m = U.shape[-1]
        return np.zeros(U.shape[:-1] + (m, m))

    def apply(self, t, U, dW):
        return np.zeros_like(U)


class AdditiveDiffusion(Diffusion):
    """B(t,u) = sigma I."""

    kind = "additive"

    def __init__(self, sigma: float):
        super().__init__()
        self.sigma = float(sigma)

    def matrix(self, t, U):
        U = np.asarray(U)
        m = U.shape[-1]
        return np.broadcast_to(self.sigma * np.eye(m), U.shape[:-1] + (m, m)).copy()

    def apply(self, t, U, dW):
        out = np.zeros_like(U)
        k = dW.shape[-1]
        out[..., :k] = self.sigma * dW
        return out


class MultiplicativeDiffusion(Diffusion):
    """B(t,u) = sigma diag(u)."""

    kind = "multiplicative"

    def __init__(self, sigma: float):
        super().__init__()
        self.sigma = float(sigma)

    def matrix(self, t, U):
        U = np.asarray(U, dtype=float)
        eye = np.eye(U.shape[-1])
        return self.sigma * U[..., None, :] * eye

    def apply(self, t, U, dW):
        out = np.zeros_like(U)
        k = dW.shape[-1]
        out[..., :k] = self.sigma * U[..., :k] * dW
        return out


def make_diffusion(kind: str, sigma: float) -> Diffusion:
    if sigma < 0:
        raise InvalidParameterError(f"sigma must be nonnegative, got {sigma}")
    if kind == "none" or sigma == 0.0:
        return NoDiffusion()
    if kind == "additive":
        return AdditiveDiffusion(sigma)
    if kind == "multiplicative":
        return MultiplicativeDiffusion(sigma)
    raise InvalidParameterError(f"unknown noise kind {kind!r}")


# ---------------------------------------------------------------------------
# drifts


class LinearDrift:
    """<A u, e_j> = (M u)_j with a constant matrix M."""

    def __init__(self, M):
        self.M = np.ascontiguousarray(M, dtype=float)
        self.M.setflags(write=False)
        d = np.diag(self.M)
        self._diag = d if np.array_equal(self.M, np.diag(d)) else None

    def __call__(self, t, U):
        U = np.asarray(U, dtype=float)
        if self._diag is not None:
            return U * self._diag
        return U @ self.M.T


class QuasilinearDrift:
    """<A(t,u), e_j> = -int [a1(t,x,u,u') e_j' + a0(t,x,u,u') e_j] dx."""

    def __init__(self, space: GalerkinSpace, a1: Callable, a0: Callable | None = None):
        self.space = space
        self.a1 = a1
        self.a0 = a0

    def __call__(self, t, U):
        sp = self.space
        U = np.asarray(U, dtype=float)
        z = U @ sp.basis_derivs
        u = U @ sp.basis_values
        x = sp.nodes
        flux = np.asarray(self.a1(t, x, u, z), dtype=float)
        _check_integrand(flux, t, U, x)
        out = -(flux * sp.weights) @ sp.basis_derivs.T
        if self.a0 is not None:
            src = np.asarray(self.a0(t, x, u, z), dtype=float)
            _check_integrand(src, t, U, x)
            out = out - (src * sp.weights) @ sp.basis_values.T
        return out


def _check_integrand(vals, t, U, x):
    if np.all(np.isfinite(vals)):
        return
    bad = np.argwhere(~np.isfinite(vals))[0]
    node = float(x[bad[-1]])
    raise OperatorEvaluationError(
        f"non-finite integrand at t={t}, x={node}", t=t,
        h_norm=float(np.max(np.linalg.norm(U, axis=-1))), node=node,
    )


class PLaplaceDrift:
    """-(|u'|^(alpha-2) u')' in weak form, via the compiled kernel."""

    def __init__(self, space: GalerkinSpace, alpha: float):
        self.space = space
        self.alpha = float(alpha)

    def __call__(self, t, U):
        sp = self.space
        U = np.asarray(U, dtype=float)
        flat = np.ascontiguousarray(U.reshape(-1, sp.m))
        out = kernels.plaplace_dual(flat, np.ascontiguousarray(sp.basis_derivs),
                                    np.ascontiguousarray(sp.weights), self.alpha)
        out = np.asarray(out).reshape(U.shape)
        if not np.all(np.isfinite(out)):
            raise OperatorEvaluationError(
                "p-Laplace drift overflowed", t=t, h_norm=float(np.max(h_norm(sp, U)))
            )
        return out


class StepDrift:
    """Deliberately discontinuous A(u) = sign(u_1) e_1 (fails hemicontinuity)."""

    def __call__(self, t, U):
        U = np.asarray(U, dtype=float)
        out = np.zeros_like(U)
        out[..., 0] = np.sign(U[..., 0])
        return out


# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class OperatorTriple:
    """Drift A, default control Phi and diffusion B with declared bounds."""

    space: GalerkinSpace
    A: Callable
    Phi: Callable
    B: Diffusion
    params: HypothesisParams
    label: str = "custom"
    linear_drift: np.ndarray | None = field(default=None, repr=False)

    @property
    def m(self) -> int:
        return self.space.m


def laplace_matrix(space: GalerkinSpace, nu: float) -> np.ndarray:
    return np.diag(-nu * space.laplace_eigenvalues)


def convection_matrix(space: GalerkinSpace) -> np.ndarray:
    """C[j, k] = int_0^L e_k'(x) e_j(x) dx (exactly skew-symmetric)."""
    m, L = space.m, space.L
    j = np.arange(1, m + 1)[:, None]
    k = np.arange(1, m + 1)[None, :]
    odd = (j + k) % 2 == 1
    with np.errstate(divide="ignore", invalid="ignore"):
        C = np.where(odd, 4.0 * j * k / (L * (j**2 - k**2)), 0.0)
    return C


def _noise_bound(diffusion: Diffusion, m: int) -> float:
    # ‖B(u)‖²_{L2} <= g_B (1 + ‖u‖²) at p = 2
    if diffusion.kind == "additive":
        return diffusion.sigma**2 * m
    if diffusion.kind == "multiplicative":
        return diffusion.sigma**2
    return 0.0


def make_heat(space: GalerkinSpace, nu: float = 1.0, sigma: float = 0.0,
              noise: str = "additive") -> OperatorTriple:
    """Heat drift nu u'' with zero control and sigma-scaled noise.

    With multiplicative noise f_A is set to sigma² so that the same
    (f_A, rho=0, eta=0) witnesses the noise Lipschitz bound.
    """
    if not nu > 0:
        raise InvalidParameterError(f"nu must be positive, got {nu}")
    if space.alpha != 2.0:
        raise InvalidParameterError("the heat operator needs alpha = 2")
    diffusion = make_diffusion(noise, sigma)
    M = laplace_matrix(space, nu)
    f_A = sigma**2 if diffusion.kind == "multiplicative" else 0.0
    params = HypothesisParams(
        beta=2.0, f_A=f_A, g_B=_noise_bound(diffusion, space.m),
        C_coerc=2.0 * nu, C_growth=nu**2,
    )
    return OperatorTriple(space, LinearDrift(M), zero_feedback(space.m), diffusion,
                          params, label="heat", linear_drift=M)


def make_sign_flipped_heat(space: GalerkinSpace, nu: float = 1.0) -> OperatorTriple:
    """Anti-diffusive +nu u'' with the heat operator's declared bounds.

    Violates coercivity and monotonicity; used to exercise failure paths.
    """
    heat = make_heat(space, nu)
    M = -heat.linear_drift
    return OperatorTriple(space, LinearDrift(M), heat.Phi, heat.B, heat.params,
                          label="sign_flipped_heat", linear_drift=M)


def make_step_operator(space: GalerkinSpace) -> OperatorTriple:
    """A(u) = sign(u_1) e_1; discontinuous in the hemicontinuity sense."""
    return OperatorTriple(space, StepDrift(), zero_feedback(space.m), NoDiffusion(),
                          HypothesisParams(), label="step")


def make_convection_diffusion(space: GalerkinSpace, nu: float = 1.0, b: float = 0.0,
                              sigma: float = 0.0, noise: str = "additive") -> OperatorTriple:
    """nu u'' - b u'; the convection part is skew and drops out of <A u, u>."""
    if not nu > 0:
        raise InvalidParameterError(f"nu must be positive, got {nu}")
    if space.alpha != 2.0:
        raise InvalidParameterError("convection-diffusion needs alpha = 2")
    diffusion = make_diffusion(noise, sigma)
    M = laplace_matrix(space, nu) - b * convection_matrix(space)
    f_A = sigma**2 if diffusion.kind == "multiplicative" else 0.0
    params = HypothesisParams(
        beta=2.0, f_A=f_A, g_B=_noise_bound(diffusion, space.m),
        C_coerc=2.0 * nu, C_growth=(nu + abs(b) * space.L / math.pi) ** 2,
    )
    return OperatorTriple(space, LinearDrift(M), zero_feedback(space.m), diffusion,
                          params, label="convection_diffusion", linear_drift=M)


def make_quasilinear(space: GalerkinSpace, a1: Callable | None = None,
                     a0: Callable | None = None, alpha: float | None = None,
                     params: HypothesisParams | None = None, sigma: float = 0.0,
                     noise: str = "additive") -> OperatorTriple:
    """Divergence-form quasilinear drift.

    ``a1(t, x, u, z)`` and ``a0(t, x, u, z)`` are vectorized over node
    arrays.  Without ``a1`` the p-Laplace instance a1 = |z|^(alpha-2) z,
    a0 = 0 is built and evaluated by the compiled kernel.
    """
    alpha = space.alpha if alpha is None else float(alpha)
    if alpha != space.alpha:
        raise InvalidParameterError(
            f"operator exponent alpha={alpha} does not match space alpha={space.alpha}"
        )
    diffusion = make_diffusion(noise, sigma)
    if a1 is None and a0 is None:
        A = PLaplaceDrift(space, alpha)
        label = "p_laplace"
        if params is None:
            # 2<A u,u> = -2‖u‖_V^a and ‖A u‖_{V*} <= ‖u‖_V^(a-1)
            params = HypothesisParams(beta=alpha, C_coerc=2.0, C_growth=1.0,
                                      g_B=_noise_bound(diffusion, space.m))
    else:
        if a1 is None:
            raise InvalidParameterError("a1 is required when a0 is given")
        A = QuasilinearDrift(space, a1, a0)
        label = "quasilinear"
        if params is None:
            params = HypothesisParams(beta=alpha, g_B=_noise_bound(diffusion, space.m))
    return OperatorTriple(space, A, zero_feedback(space.m), diffusion, params, label=label)


# ---------------------------------------------------------------------------
# evaluation with contracts


def _state_context(space, u):
    c = as_coeffs(space, u)
    return c, float(np.max(np.atleast_1d(h_norm(space, c))))


def eval_A(op: OperatorTriple, t: float, u) -> np.ndarray:
    """Dual coordinates <A(t,u), e_j>; raises on non-finite output."""
    c, nrm = _state_context(op.space, u)
    out = np.asarray(op.A(t, c), dtype=float)
    if not np.all(np.isfinite(out)):
        raise OperatorEvaluationError(f"A({t}, u) is not finite (‖u‖_H = {nrm:.6g})",
                                      t=t, h_norm=nrm)
    return out


def eval_Phi(op: OperatorTriple, t: float, u) -> StateVec:
    c, nrm = _state_context(op.space, u)
    out = np.asarray(op.Phi(t, c), dtype=float)
    if not np.all(np.isfinite(out)):
        raise OperatorEvaluationError(f"Phi({t}, u) is not finite (‖u‖_H = {nrm:.6g})",
                                      t=t, h_norm=nrm)
    return StateVec(out, op.m)


def eval_B(op: OperatorTriple, t: float, u, k: int | None = None) -> np.ndarray:
    """P_m B(t,u) Q_m as an m x k matrix (first k noise channels)."""
    k = op.m if k is None else int(k)
    if not 1 <= k <= op.m:
        raise InvalidParameterError(f"noise dimension k={k} must lie in 1..{op.m}")
    c, nrm = _state_context(op.space, u)
    out = np.asarray(op.B.matrix(t, c), dtype=float)[..., :k]
    if not np.all(np.isfinite(out)):
        raise OperatorEvaluationError(f"B({t}, u) is not finite (‖u‖_H = {nrm:.6g})",
                                      t=t, h_norm=nrm)
    return out


def v_norm_weight(space: GalerkinSpace, c: float, beta: float) -> Callable:
    """rho(u) = c ‖u‖_V^beta as a batch evaluator."""
    from .space import v_norm

    def rho(U):
        return c * v_norm(space, U) ** beta

    return rho


def zero_weight(U):
    return np.zeros(np.shape(U)[:-1])
