import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spdectl.control import (CostSpec, FeedbackFamily, convergence_diag, estimate_cost,
                             minimize, path_costs)
from spdectl.errors import InvalidParameterError, OptimizationError
from spdectl.feedback import ControlParams
from spdectl.operators import make_heat, make_sign_flipped_heat
from spdectl.sim import SimConfig, simulate_path
from spdectl.space import build_space, v_norm


@pytest.fixture
def setup():
    sp = build_space(m=4)
    return sp, make_heat(sp, sigma=0.5), SimConfig(T=0.1, n_steps=100, k_noise=4, seed=3)


def test_saturation_bound():
    fam = FeedbackFamily(m=5, gain="full", n_knots=3, kappa=2.0, T=1.0)
    rng = np.random.default_rng(0)
    theta = 5 * rng.standard_normal(fam.dim)
    Phi = fam.feedback(theta)
    X = 20 * rng.standard_normal((100_000, 5))
    t = rng.uniform(0, 1)
    assert np.max(np.linalg.norm(Phi(t, X), axis=1)) <= 2.0 * (1 + 1e-12)


def test_unsaturated_affine_form():
    fam = FeedbackFamily(m=3, gain="diagonal", n_knots=2, T=1.0)
    theta = np.array([1.0, 2.0, 3.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0])
    x = np.array([1.0, 1.0, 1.0])
    # offset interpolates linearly between the knots at t = 0 and t = 1
    assert np.allclose(fam.feedback(theta)(0.5, x), [-1.5, -2.5, -3.5])


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(["scalar", "diagonal", "full"]), st.integers(1, 4), st.integers(0, 3),
       st.integers(0, 2**31))
def test_vectorize_round_trip(gain, m, n_knots, seed):
    fam = FeedbackFamily(m=m, gain=gain, n_knots=n_knots)
    theta = np.random.default_rng(seed).standard_normal(fam.dim)
    assert np.array_equal(fam.vectorize(fam.unvectorize(theta)), theta)


def test_vectorize_rejects_wrong_structure():
    fam = FeedbackFamily(m=2, gain="diagonal")
    with pytest.raises(InvalidParameterError):
        fam.vectorize(ControlParams(np.ones((2, 2)), np.zeros((0, 2)), math.inf))
    with pytest.raises(InvalidParameterError):
        fam.unvectorize(np.zeros(3))
    with pytest.raises(InvalidParameterError):
        FeedbackFamily(m=2, gain="banded")


def test_path_costs_against_loop(setup):
    sp, heat, cfg = setup
    fam = FeedbackFamily(m=4, gain="scalar", n_knots=0, kappa=1.0)
    ctl = fam.feedback([2.0])
    path = simulate_path(sp, heat, ctl, np.ones(4), cfg)
    spec = CostSpec(q=1.5, r=0.7, q_T=2.0, x_ref=[0.1, 0, 0, 0], x_T=[0, 0.2, 0, 0])
    f, g, h = path_costs(sp, spec, ctl, cfg.times, path.states[None])
    ff = gg = 0.0
    for n in range(cfg.n_steps):
        x, t = path.states[n], cfg.times[n]
        ff += 1.5 * np.sum((x - [0.1, 0, 0, 0]) ** 2) * cfg.dt
        gg += 0.7 * np.sum(ctl(t, x) ** 2) * cfg.dt
    hh = 2.0 * np.sum((path.states[-1] - [0, 0.2, 0, 0]) ** 2)
    assert (f[0], g[0], h[0]) == pytest.approx((ff, gg, hh), rel=1e-12)


def test_vpenalty_cap(setup):
    sp, heat, cfg = setup
    path = simulate_path(sp, heat, None, 3 * np.ones(4), cfg)
    spec = CostSpec(f_mode="vpenalty", q=1.0, cap=50.0)
    f, _, _ = path_costs(sp, spec, heat.Phi, cfg.times, path.states[None])
    manual = np.sum(np.minimum(v_norm(sp, path.states[:-1]) ** 2, 50.0)) * cfg.dt
    assert f[0] == pytest.approx(manual, rel=1e-12)


def test_joint_cost_folds_into_f(setup):
    sp, heat, cfg = setup
    fam = FeedbackFamily(m=4, gain="scalar")
    plain = CostSpec(q=1.0, r=1.0)
    joint = CostSpec(q=1.0, r=1.0, joint=True, s=0.0)
    a = estimate_cost(sp, heat, fam, [1.0], plain, np.ones(4), cfg, 20)
    b = estimate_cost(sp, heat, fam, [1.0], joint, np.ones(4), cfg, 20)
    assert b.g == 0.0 and b.f == pytest.approx(a.f + a.g, rel=1e-12)
    with pytest.raises(InvalidParameterError):
        CostSpec(q=1.0, r=1.0, joint=True, s=2.5)


def test_cost_decomposition_and_zero_control(setup):
    sp, heat, cfg = setup
    fam = FeedbackFamily(m=4, gain="full")
    spec = CostSpec(q=1.0, r=1.0, q_T=1.0)
    est = estimate_cost(sp, heat, fam, fam.zero(), spec, np.ones(4), cfg, 50)
    assert est.g == 0.0
    assert est.J == est.f + est.g + est.h
    assert est.n_paths == 50 and est.stderr > 0


def test_stationary_zero_has_zero_cost():
    sp = build_space(m=3)
    fam = FeedbackFamily(m=3, gain="scalar")
    est = estimate_cost(sp, make_heat(sp), fam, [0.3], CostSpec(q=1.0, r=1.0, q_T=1.0),
                        np.zeros(3), SimConfig(T=0.1, n_steps=50), 10)
    assert (est.J, est.stderr) == (0.0, 0.0)


def test_terminal_cost_of_decaying_mode():
    sp = build_space(m=4)
    cfg = SimConfig(T=0.1, n_steps=1000)
    fam = FeedbackFamily(m=4, gain="scalar")
    est = estimate_cost(sp, make_heat(sp), fam, [0.0], CostSpec(q_T=1.0), sp.basis_vector(1),
                        cfg, 1)
    assert est.J == pytest.approx((1 - math.pi**2 * cfg.dt) ** (2 * cfg.n_steps), rel=1e-12)
    assert est.J == pytest.approx(math.exp(-2 * math.pi**2 * 0.1), abs=2e-4)


def test_exit_fraction_diagnostic(setup):
    sp, heat, cfg = setup
    fam = FeedbackFamily(m=4, gain="scalar")
    x0 = np.ones(4)
    lo = estimate_cost(sp, heat, fam, [0.0], CostSpec(q=1.0, exit_level=1e-6), x0, cfg, 20)
    hi = estimate_cost(sp, heat, fam, [0.0], CostSpec(q=1.0, exit_level=1e9), x0, cfg, 20)
    assert lo.exit_fraction == 1.0 and hi.exit_fraction == 0.0
    assert lo.J == hi.J


def test_budget_one_evaluates_start_only(setup):
    sp, heat, cfg = setup
    fam = FeedbackFamily(m=4, gain="scalar")
    res = minimize(sp, heat, fam, CostSpec(q=1.0), np.ones(4), cfg, 20, budget=1)
    assert res.n_evals == 1 and np.array_equal(res.theta, [0.0])
    with pytest.raises(InvalidParameterError):
        minimize(sp, heat, fam, CostSpec(q=1.0), np.ones(4), cfg, 20, budget=0)
    with pytest.raises(InvalidParameterError):
        minimize(sp, heat, fam, CostSpec(q=1.0), np.ones(4), cfg, 20, method="bfgs")


@pytest.mark.parametrize("method", ["nelder-mead", "random-search", "spsa"])
def test_methods_decrease_and_respect_budget(setup, method):
    sp, heat, cfg = setup
    fam = FeedbackFamily(m=4, gain="diagonal")
    spec = CostSpec(q=10.0, r=0.1, q_T=1.0)
    res = minimize(sp, heat, fam, spec, np.ones(4), cfg, 40, method=method, budget=30, seed=1)
    acc = res.accepted_J
    assert res.n_evals <= 30
    assert all(b < a for a, b in zip(acc, acc[1:]))
    assert res.J == acc[-1] < acc[0]
    again = estimate_cost(sp, heat, fam, res.theta, spec, np.ones(4), cfg, 40)
    assert again.J == res.J


def test_expensive_control_stays_near_zero(setup):
    sp, heat, cfg = setup
    fam = FeedbackFamily(m=4, gain="scalar")
    spec = CostSpec(q=1.0, r=1e6)
    res = minimize(sp, heat, fam, spec, np.ones(4), cfg, 30, budget=40, step=0.1)
    zero = estimate_cost(sp, heat, fam, [0.0], spec, np.ones(4), cfg, 30)
    assert res.J <= zero.J
    assert abs(res.theta[0]) < 0.05


def test_common_random_numbers_reduce_variance(setup):
    sp, heat, cfg = setup
    fam = FeedbackFamily(m=4, gain="scalar")
    spec = CostSpec(q=1.0, r=0.1)
    x0 = np.ones(4)

    def J(theta, seed):
        return estimate_cost(sp, heat, fam, [theta], spec, x0, cfg.with_(seed=seed), 50).J

    crn = [J(1.0, s) - J(1.2, s) for s in range(12)]
    ind = [J(1.0, s) - J(1.2, 100 + s) for s in range(12)]
    assert np.var(crn) < 0.1 * np.var(ind)


def test_all_candidates_diverging_raises():
    sp = build_space(m=16)
    op = make_sign_flipped_heat(sp)
    fam = FeedbackFamily(m=16, gain="scalar")
    cfg = SimConfig(T=20.0, n_steps=200)
    with pytest.raises(OptimizationError):
        minimize(sp, op, fam, CostSpec(q=1.0), np.ones(16), cfg, 2, budget=3)


def test_convergence_diag_limit_in_sequence(setup):
    sp, heat, cfg = setup
    fam = FeedbackFamily(m=4, gain="diagonal", n_knots=2, T=cfg.T)
    lim = np.array([1.0, 0.5, 0.2, 0.0, 0.1, 0.1, 0.1, 0.1, 0.0, 0.0, 0.0, 0.0])
    rows = convergence_diag(sp, heat, fam, [lim, lim + 0.1], lim, np.ones(4), cfg, 20,
                            n_probe=64)
    assert [r.n for r in rows] == [1, 2]
    assert (rows[0].control_gap, rows[0].aux_gap, rows[0].direct_gap) == (0.0, 0.0, 0.0)
    assert rows[1].control_gap > 0 and rows[1].aux_gap > 0 and rows[1].direct_gap > 0
