"""Spectral Galerkin realization of the triple W^{1,alpha}_0 ⊂ L² ⊂ dual on (0, L).

States are coefficient vectors in the H-orthonormal sine basis

    e_k(x) = sqrt(2/L) sin(k pi x / L),   k = 1..m,

so the H inner product is the Euclidean one and the coordinates of a dual
element are simply its values on the basis functions.  The V-norm is the
gradient seminorm (int |u'|^alpha dx)^(1/alpha), evaluated by composite
Gauss-Legendre quadrature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatchError, InvalidParameterError

PANEL_ORDER = 16


def gauss_legendre_panels(L: float, n_nodes: int, panel_order: int = PANEL_ORDER):
    """Composite Gauss-Legendre rule on (0, L) with at least ``n_nodes`` nodes.

    Returns ``(nodes, weights)``; the node count is rounded up to a whole
    number of panels of ``panel_order`` points each.
    """
    n_panels = max(1, -(-n_nodes // panel_order))
    xi, wi = np.polynomial.legendre.leggauss(panel_order)
    edges = np.linspace(0.0, L, n_panels + 1)
    h = np.diff(edges)
    nodes = (edges[:-1, None] + 0.5 * (xi[None, :] + 1.0) * h[:, None]).ravel()
    weights = (0.5 * wi[None, :] * h[:, None]).ravel()
    return nodes, weights


@dataclass(frozen=True, eq=False)
class GalerkinSpace:
    """Finite-dimensional sine-basis space on (0, L).

    Instances are immutable and safe to share between threads.  Build them
    with :func:`build_space`.
    """

    L: float
    m: int
    alpha: float
    quad_order: int
    nodes: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    basis_values: np.ndarray = field(repr=False)  # (m, Q)
    basis_derivs: np.ndarray = field(repr=False)  # (m, Q)
    deriv_gram: np.ndarray = field(repr=False)  # (e_i', e_j') by quadrature

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def wavenumbers(self) -> np.ndarray:
        """k pi / L for k = 1..m."""
        return np.arange(1, self.m + 1) * math.pi / self.L

    @property
    def laplace_eigenvalues(self) -> np.ndarray:
        """(k pi / L)^2, the Dirichlet eigenvalues of -d²/dx²."""
        return self.wavenumbers**2

    def gram(self) -> np.ndarray:
        """Quadrature Gram matrix (e_i, e_j)_H."""
        return (self.basis_values * self.weights) @ self.basis_values.T

    def state(self, coeffs) -> "StateVec":
        return StateVec(coeffs, self.m)

    def zero(self) -> "StateVec":
        return StateVec(np.zeros(self.m), self.m)

    def basis_vector(self, k: int) -> "StateVec":
        """The state e_k (1-based index)."""
        if not 1 <= k <= self.m:
            raise InvalidParameterError(f"basis index {k} outside 1..{self.m}")
        c = np.zeros(self.m)
        c[k - 1] = 1.0
        return StateVec(c, self.m)


def build_space(
    L: float = 1.0, m: int = 8, alpha: float = 2.0, quad_order: int | None = None
) -> GalerkinSpace:
    """Construct the sine-basis space.

    ``quad_order`` is the minimum node count and must be at least ``4 m``;
    the default ``16 m`` integrates quartic products of the top mode.
    """
    if not (isinstance(m, (int, np.integer)) and m >= 1):
        raise InvalidParameterError(f"m must be a positive integer, got {m!r}")
    if not alpha > 1:
        raise InvalidParameterError(f"alpha must exceed 1, got {alpha!r}")
    if not L > 0:
        raise InvalidParameterError(f"L must be positive, got {L!r}")
    if quad_order is None:
        quad_order = 16 * m
    if quad_order < 4 * m:
        raise InvalidParameterError(
            f"quad_order must be at least 4*m = {4 * m}, got {quad_order}"
        )
    nodes, weights = gauss_legendre_panels(L, int(quad_order))
    k = np.arange(1, m + 1)[:, None]
    arg = k * math.pi * nodes[None, :] / L
    scale = math.sqrt(2.0 / L)
    values = scale * np.sin(arg)
    derivs = scale * (k * math.pi / L) * np.cos(arg)
    gram = (derivs * weights) @ derivs.T
    for a in (nodes, weights, values, derivs, gram):
        a.setflags(write=False)
    return GalerkinSpace(
        L=float(L),
        m=int(m),
        alpha=float(alpha),
        quad_order=int(quad_order),
        nodes=nodes,
        weights=weights,
        basis_values=values,
        basis_derivs=derivs,
        deriv_gram=gram,
    )


class StateVec:
    """Coefficient vector of u = sum_j c_j e_j.  Rejects NaN and Inf."""

    __slots__ = ("coeffs", "dim")

    def __init__(self, coeffs, dim: int | None = None):
        c = np.array(coeffs, dtype=float, copy=True).reshape(-1)
        if dim is not None and c.shape[0] != dim:
            raise DimensionMismatchError(f"expected {dim} coefficients, got {c.shape[0]}")
        if not np.all(np.isfinite(c)):
            raise InvalidParameterError("StateVec coefficients must be finite")
        c.setflags(write=False)
        self.coeffs = c
        self.dim = c.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.coeffs if dtype is None else self.coeffs.astype(dtype)

    def __repr__(self):
        return f"StateVec({np.array2string(self.coeffs, precision=6)})"

    def __eq__(self, other):
        return isinstance(other, StateVec) and np.array_equal(self.coeffs, other.coeffs)

    __hash__ = None


def as_coeffs(space: GalerkinSpace, u) -> np.ndarray:
    """Coefficient array of ``u`` (StateVec or array, last axis of length m)."""
    c = u.coeffs if isinstance(u, StateVec) else np.asarray(u, dtype=float)
    if c.shape[-1:] != (space.m,):
        raise DimensionMismatchError(
            f"state has trailing dimension {c.shape[-1:]}, space has m={space.m}"
        )
    return c


def h_norm(space: GalerkinSpace, u) -> float | np.ndarray:
    """‖u‖_H; the basis is orthonormal so this is the Euclidean norm."""
    return np.linalg.norm(as_coeffs(space, u), axis=-1)


def v_norm(space: GalerkinSpace, u) -> float | np.ndarray:
    """Gradient seminorm (int |u'|^alpha)^(1/alpha) by quadrature.

    At alpha = 2 the quadrature is folded into the derivative Gram matrix;
    otherwise leading axes are processed in blocks to bound memory.
    """
    c = as_coeffs(space, u)
    a = space.alpha
    if a == 2.0:
        q = np.sum((c @ space.deriv_gram) * c, axis=-1)
        return np.sqrt(np.maximum(q, 0.0))
    flat = c.reshape(-1, space.m)
    out = np.empty(flat.shape[0])
    block = max(1, 2**20 // space.n_nodes)
    for s in range(0, flat.shape[0], block):
        du = flat[s:s + block] @ space.basis_derivs
        out[s:s + block] = np.sum(space.weights * np.abs(du) ** a, axis=-1) ** (1.0 / a)
    return out.reshape(c.shape[:-1]) if c.ndim > 1 else float(out[0])


def evaluate(space: GalerkinSpace, u) -> np.ndarray:
    """Values of u at the quadrature nodes."""
    return as_coeffs(space, u) @ space.basis_values


def evaluate_derivative(space: GalerkinSpace, u) -> np.ndarray:
    """Values of u' at the quadrature nodes."""
    return as_coeffs(space, u) @ space.basis_derivs


def project(space: GalerkinSpace, f) -> StateVec:
    """P_m f from samples of f at the quadrature nodes."""
    f = np.asarray(f, dtype=float)
    if f.shape != (space.n_nodes,):
        raise DimensionMismatchError(
            f"expected {space.n_nodes} samples at the quadrature nodes, got {f.shape}"
        )
    return StateVec(space.basis_values @ (space.weights * f), space.m)


def dual_pairing(space: GalerkinSpace, w, u) -> float | np.ndarray:
    """<F, u> for a functional with components w_j = <F, e_j>."""
    w = np.asarray(w, dtype=float)
    if w.shape[-1:] != (space.m,):
        raise DimensionMismatchError(f"dual vector has {w.shape[-1:]} entries, space has m={space.m}")
    return np.sum(w * as_coeffs(space, u), axis=-1)


def random_states(space: GalerkinSpace, rng: np.random.Generator, n: int, r_max: float = 10.0):
    """Gaussian directions rescaled to H-norms uniform in [0, r_max]."""
    g = rng.standard_normal((n, space.m))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return g * rng.uniform(0.0, r_max, size=(n, 1))
