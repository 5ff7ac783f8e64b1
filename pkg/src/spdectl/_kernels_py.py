"""Pure-NumPy versions of the hot kernels.

Semantics match ``_kernels.pyx`` exactly; results agree to rounding.
"""

import numpy as np

NOISE_NONE = 0
NOISE_ADDITIVE = 1
NOISE_MULTIPLICATIVE = 2


def plaplace_dual(U, derivs, weights, alpha):
    """out[p, j] = -sum_q w_q |z_pq|^(alpha-2) z_pq e_j'(x_q), z = U @ derivs."""
    z = U @ derivs
    if alpha == 2.0:
        flux = z
    else:
        flux = np.abs(z) ** (alpha - 2.0) * z
    return -(flux * weights) @ derivs.T


def _offset(t, knot_t, knot_c):
    nk = knot_t.shape[0]
    if nk == 0:
        return None
    if nk == 1 or t <= knot_t[0]:
        return knot_c[0]
    if t >= knot_t[nk - 1]:
        return knot_c[nk - 1]
    i = int(np.searchsorted(knot_t, t, side="right")) - 1
    s = (t - knot_t[i]) / (knot_t[i + 1] - knot_t[i])
    return knot_c[i] + s * (knot_c[i + 1] - knot_c[i])


def saturated_affine(t, Z, K, knot_t, knot_c, kappa):
    """clamp_kappa(-K z - c(t)) row-wise."""
    v = -(Z @ K.T)
    c = _offset(t, knot_t, knot_c)
    if c is not None:
        v = v - c
    if np.isfinite(kappa):
        nrm = np.sqrt(np.sum(v * v, axis=-1))
        over = nrm > kappa
        if np.any(over):
            v = v.copy()
            v[over] *= (kappa / nrm[over])[:, None]
    return v


@np.errstate(over="ignore", invalid="ignore")  # divergence is reported via status
def em_affine(x0, dW, M, dt, K, knot_t, knot_c, kappa, noise_kind, sigma,
              tamed, taming_power, driver, out):
    """Euler-Maruyama for linear drift + saturated affine feedback.

    Control and diffusion are evaluated on ``driver[:, n]`` when a driver
    path is given (auxiliary mode), else on the current state.  Fills
    ``out`` with shape (P, N+1, m) and returns, per path, the index of the
    first step that produced a non-finite state (-1 if none).
    """
    P, N, k = dW.shape
    status = np.full(P, -1, dtype=np.int64)
    x = np.array(x0, dtype=float, copy=True)
    out[:, 0] = x
    alive = np.ones(P, dtype=bool)
    for n in range(N):
        t = n * dt
        z = x if driver is None else driver[:, n]
        D = x @ M.T + saturated_affine(t, z, K, knot_t, knot_c, kappa)
        if tamed:
            dn = np.sqrt(np.sum(D * D, axis=1))
            D = D / (1.0 + dt * dn**taming_power)[:, None]
        x = x + dt * D
        if noise_kind == NOISE_ADDITIVE:
            x[:, :k] += sigma * dW[:, n]
        elif noise_kind == NOISE_MULTIPLICATIVE:
            x[:, :k] += sigma * z[:, :k] * dW[:, n]
        bad = alive & ~np.all(np.isfinite(x), axis=1)
        if np.any(bad):
            status[bad] = n
            alive &= ~bad
            x[bad] = np.nan
        out[:, n + 1] = x
    return status
