import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spdectl.feedback import ControlParams, SaturatedAffineFeedback, linear_feedback, zero_feedback
from spdectl.hypotheses import (check_coercivity, check_control_family, check_growth,
                                check_hemicontinuity, check_local_monotonicity,
                                check_noise_lipschitz, dual_norm, run_checks)
from spdectl.operators import (make_convection_diffusion, make_heat, make_quasilinear,
                               make_sign_flipped_heat, make_step_operator, v_norm_weight)
from spdectl.space import build_space, dual_pairing, v_norm

ORDER = ["A.1", "A.2", "A.3", "A.4", "B.1", "B.3", "C.1", "C.3", "C.4"]


def test_heat_passes_everything():
    sp = build_space(m=8)
    reps = run_checks(make_heat(sp, sigma=0.2), sp, n_samples=200)
    assert [r.hypothesis for r in reps] == ORDER
    assert all(r.passed for r in reps), [(r.hypothesis, r.margin) for r in reps]


def test_step_operator_fails_hemicontinuity_at_the_jump():
    sp = build_space(m=3)
    rep = check_hemicontinuity(make_step_operator(sp), sp, n_samples=64, n_lambda=64)
    assert not rep.passed and rep.status == "fail"
    # the jump sits at u_1 = 0 up to one fine grid cell along v
    assert abs(rep.witness["u"][0]) <= 1.0 / 63 + 1e-12
    w = rep.witness
    h = 0.5 / 63  # half a fine cell on each side of the midpoint
    left = make_step_operator(sp).A(w["t"], w["u"] - h * w["v"])
    right = make_step_operator(sp).A(w["t"], w["u"] + h * w["v"])
    assert abs((left - right) @ w["w"]) > 0.1


def test_hemicontinuity_smooth_operators():
    sp = build_space(m=4, alpha=3.0)
    assert check_hemicontinuity(make_quasilinear(sp), sp, n_samples=32).passed
    sp2 = build_space(m=4)
    assert check_hemicontinuity(make_heat(sp2), sp2, n_samples=32).passed


def test_hemicontinuity_rejects_coarse_grid():
    sp = build_space(m=2)
    with pytest.raises(ValueError):
        check_hemicontinuity(make_heat(sp), sp, n_lambda=4)


def test_reports_are_deterministic():
    sp = build_space(m=4)
    op = make_sign_flipped_heat(sp)
    a = run_checks(op, sp, n_samples=100, seed=3)
    b = run_checks(op, sp, n_samples=100, seed=3)
    for x, y in zip(a, b):
        assert x.row() == y.row()
        assert x.margin == y.margin


def test_sign_flip_fails_with_sound_witness():
    sp = build_space(m=6)
    op = make_sign_flipped_heat(sp)
    rep = check_coercivity(op, sp, n_samples=200)
    assert not rep.passed
    t, u = rep.witness["t"], rep.witness["u"]
    prm = op.params
    lhs = 2 * dual_pairing(sp, op.A(t, u), u)
    rhs = prm.f_A(t) * (1 + u @ u) - prm.C_coerc * v_norm(sp, u) ** prm.beta
    assert lhs - rhs > rep.tolerance
    assert rhs - lhs == pytest.approx(rep.margin, rel=1e-12)

    mono = check_local_monotonicity(op, sp, n_pairs=200)
    assert not mono.passed
    u, v = mono.witness["u"], mono.witness["v"]
    assert 2 * dual_pairing(sp, op.A(0.0, u) - op.A(0.0, v), u - v) > np.sum((u - v) ** 2)


@pytest.mark.parametrize("check", [check_coercivity, check_local_monotonicity])
def test_margin_monotone_under_refinement(check):
    sp = build_space(m=5)
    op = make_sign_flipped_heat(sp)
    n = 150
    small = check(op, sp, n, seed=11)
    large = check(op, sp, 2 * n, seed=11)
    assert large.margin <= small.margin


@pytest.mark.parametrize("alpha", [2.0, 1.5, 3.0, 4.0, 6.0])
def test_dual_norm_against_dense_sphere(alpha):
    sp = build_space(m=3, alpha=alpha)
    rng = np.random.default_rng(5)
    # dense sample of the unit V-sphere of the 3-dim Galerkin space
    D = rng.standard_normal((200_000, 3))
    D /= v_norm(sp, D)[:, None]
    for _ in range(5):
        w = rng.standard_normal(3)
        val, ok = dual_norm(sp, w)
        oracle = float(np.max(D @ w))
        assert ok
        assert val >= oracle * (1 - 1e-12)
        assert val <= oracle * (1 + 1e-3)


def test_dual_norm_closed_form_at_alpha2():
    sp = build_space(m=6)
    rng = np.random.default_rng(6)
    for _ in range(10):
        w = rng.standard_normal(6)
        val, ok = dual_norm(sp, w)
        assert ok and val == pytest.approx(math.sqrt(np.sum(w**2 / sp.laplace_eigenvalues)),
                                          rel=1e-12)
    assert dual_norm(sp, np.zeros(6)) == (0.0, True)


def test_growth_flags_unconverged_dual_norm_as_indeterminate():
    sp = build_space(m=4, alpha=4.0)
    reps = check_growth(make_quasilinear(sp), sp, n_samples=64)
    a4 = reps[0]
    assert a4.hypothesis == "A.4"
    assert a4.status in ("pass", "indeterminate")
    if a4.extras["unconverged"] == 0:
        assert a4.status == "pass"


def test_control_family_constants():
    sp = build_space(m=4)
    c1, c3 = check_control_family(linear_feedback(np.eye(4)), sp, n_samples=500)
    assert c1.passed and c3.passed
    assert c1.extras["lam"] == 0.0
    assert c1.extras["alpha_lip"] == pytest.approx(1.0, rel=1e-12)
    c1, _ = check_control_family(zero_feedback(4), sp, n_samples=500)
    assert (c1.extras["lam"], c1.extras["alpha_lip"]) == (0.0, 0.0)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.5, 10.0))
def test_lipschitz_estimate_below_operator_norm(seed, kappa):
    sp = build_space(m=3)
    rng = np.random.default_rng(seed)
    K = rng.standard_normal((3, 3))
    c = rng.standard_normal((2, 3))
    Phi = SaturatedAffineFeedback(ControlParams(K, c, kappa), knot_times=[0.0, 1.0])
    c1, c3 = check_control_family(Phi, sp, n_samples=200, seed=seed % 1000)
    assert c1.passed and c3.passed
    # sampled ratios never exceed the analytic constants (equality when unclamped)
    raw_alpha = c1.extras["alpha_lip"] / c1.extras["joint_factor"]
    raw_lam = c1.extras["lam"] / c1.extras["joint_factor"]
    assert raw_alpha <= np.linalg.norm(K, 2) ** 2 * (1 + 1e-9)
    assert raw_lam <= Phi.time_slope_bound() ** 2 * (1 + 1e-9)


def test_convection_with_v_weight():
    sp = build_space(m=6)
    op = make_convection_diffusion(sp, nu=1.0, b=2.0)
    rho = v_norm_weight(sp, 0.5, 2.0)
    rep = check_local_monotonicity(op, sp, n_pairs=500, rho=rho, r_max=5.0)
    assert rep.passed and rep.extras["side_margin"] >= 0
    reps = run_checks(op, sp, n_samples=200, r_max=5.0, rho=rho)
    assert all(r.passed for r in reps)


def test_side_bound_violation_fails():
    sp = build_space(m=4)
    rho = v_norm_weight(sp, 10.0, 3.0)
    rep = check_local_monotonicity(make_heat(sp), sp, n_pairs=200, rho=rho)
    assert rep.extras["side_margin"] < 0 and not rep.passed


def test_multiplicative_noise_margins():
    sp = build_space(m=4)
    op = make_heat(sp, sigma=0.5, noise="multiplicative")
    reps = {r.hypothesis: r for r in run_checks(op, sp, n_samples=200)}
    assert all(r.passed for r in reps.values())
    # ‖B u‖² = sigma² ‖u‖² against sigma² (1 + ‖u‖²)
    assert reps["B.3"].margin == pytest.approx(0.25, rel=1e-9)
    assert reps["B.1"].margin == pytest.approx(0.0, abs=1e-9)


def test_independent_noise_bound_option():
    sp = build_space(m=4)
    op = make_heat(sp, sigma=0.5, noise="multiplicative")
    assert not check_noise_lipschitz(op, sp, n_pairs=100, f_B=0.1).passed
    assert check_noise_lipschitz(op, sp, n_pairs=100, f_B=0.3).passed


def test_report_row_fields():
    sp = build_space(m=3)
    row = check_coercivity(make_heat(sp), sp, n_samples=10).row()
    assert list(row) == ["id", "status", "pass", "margin", "tolerance", "n_samples",
                         "witness_t", "witness_u_norm", "witness_v_norm"]
    assert row["id"] == "A.3" and row["pass"] == 1 and row["witness_v_norm"] == ""
