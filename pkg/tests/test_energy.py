import math
from dataclasses import replace

import numpy as np
import pytest

from spdectl.energy import GapWeights, aldous_statistic, energy_stats, uniqueness_gap
from spdectl.errors import ContractError, InvalidParameterError
from spdectl.operators import TimeTable, make_heat, make_quasilinear, make_sign_flipped_heat
from spdectl.sim import SimConfig, run_ensemble, simulate_path
from spdectl.space import build_space


@pytest.fixture
def det_heat():
    sp = build_space(m=4)
    cfg = SimConfig(T=0.1, n_steps=100)
    path = simulate_path(sp, make_heat(sp), None, sp.basis_vector(1), cfg)
    return sp, cfg, path


def test_deterministic_decay_moments(det_heat):
    sp, cfg, path = det_heat
    st = energy_stats(path, sp, p=2.0)
    assert st.est_sup_H == 1.0 and st.se_sup_H == 0.0
    # sum of pi² r^(2n) dt over n < N, r = 1 - pi² dt
    r = 1 - math.pi**2 * cfg.dt
    exact = math.pi**2 * cfg.dt * (1 - r ** (2 * cfg.n_steps)) / (1 - r**2)
    assert st.est_int_V == pytest.approx(exact, rel=1e-12)
    assert energy_stats(path, sp, p=4.0).est_int_V == pytest.approx(exact**2, rel=1e-12)


def test_zero_data_gives_zero():
    sp = build_space(m=3)
    ens = run_ensemble(sp, make_heat(sp), None, np.zeros(3), SimConfig(n_steps=20), 4)
    st = energy_stats(ens, sp, p=3.0, C_p=1.0)
    assert (st.est_sup_H, st.est_int_V) == (0.0, 0.0)
    assert st.satisfied and st.bound_rhs == 1.0


def test_bound_check_uses_guard():
    sp = build_space(m=4)
    ens = run_ensemble(sp, make_heat(sp, sigma=1.0), None, np.ones(4),
                       SimConfig(T=0.1, n_steps=100, k_noise=4, seed=1), 200)
    st = energy_stats(ens, sp, p=2.0, C_p=1e-3)
    assert st.satisfied is False
    assert energy_stats(ens, sp, p=2.0, C_p=100.0).satisfied is True


def test_energy_rejects_small_p(det_heat):
    sp, _, path = det_heat
    with pytest.raises(InvalidParameterError):
        energy_stats(path, sp, p=1.5)


def test_ensemble_and_path_agree():
    sp = build_space(m=4, alpha=3.0)
    op = make_quasilinear(sp, sigma=0.2)
    cfg = SimConfig(T=0.05, n_steps=200, k_noise=2, seed=3)
    ens = run_ensemble(sp, op, None, np.ones(4), cfg, 3, keep_states=True)
    single = energy_stats(ens.path(1), sp, p=2.0, beta=3.0)
    sub = replace(ens, stream_ids=ens.stream_ids[1:2], h2=ens.h2[1:2], vnorm=ens.vnorm[1:2],
                  tau_exit=ens.tau_exit[1:2], status=ens.status[1:2],
                  terminal=ens.terminal[1:2], states=ens.states[1:2])
    batch = energy_stats(sub, sp, p=2.0)
    assert batch.beta == 3.0
    assert single.est_int_V == pytest.approx(batch.est_int_V, rel=1e-12)
    assert single.est_sup_H == pytest.approx(batch.est_sup_H, rel=1e-12)


def test_aldous_constant_path_is_zero():
    sp = build_space(m=3)
    cfg = SimConfig(T=0.1, n_steps=100)
    path = simulate_path(sp, make_heat(sp), None, np.zeros(3), cfg)
    assert aldous_statistic(path, sp, 0.01) == (0.0, 0.0)


def test_aldous_deterministic_value(det_heat):
    sp, cfg, path = det_heat
    s, N, r = 5, cfg.n_steps, 1 - math.pi**2 * cfg.dt
    exact = sum((r ** (n + s) - r**n) ** 2 for n in range(N - s)) * cfg.dt
    est, se = aldous_statistic(path, sp, s * cfg.dt)
    assert est == pytest.approx(exact, rel=1e-12) and se == 0.0


@pytest.mark.parametrize("delta", [0.0, -0.01, 0.0105, 0.1, 0.2])
def test_aldous_rejects_bad_delta(det_heat, delta):
    sp, _, path = det_heat
    with pytest.raises(InvalidParameterError):
        aldous_statistic(path, sp, delta)


def test_aldous_invariant_under_path_permutation():
    sp = build_space(m=4)
    cfg = SimConfig(T=0.1, n_steps=100, k_noise=4, seed=8)
    ens = run_ensemble(sp, make_heat(sp, sigma=0.5), None, np.ones(4), cfg, 50,
                       keep_states=True)
    perm = np.random.default_rng(0).permutation(50)
    shuffled = replace(ens, states=ens.states[perm], status=ens.status[perm])
    a, b = aldous_statistic(ens, sp, 0.02), aldous_statistic(shuffled, sp, 0.02)
    assert a[0] == pytest.approx(b[0], rel=1e-13) and a[1] == pytest.approx(b[1], rel=1e-10)


def test_aldous_needs_states():
    sp = build_space(m=2)
    ens = run_ensemble(sp, make_heat(sp), None, [1.0, 0.0], SimConfig(n_steps=10), 2)
    with pytest.raises(ContractError):
        aldous_statistic(ens, sp, 0.01)


def test_uniqueness_weight_starts_at_one_and_decays():
    sp = build_space(m=4)
    op = make_heat(sp, sigma=0.5, noise="multiplicative")
    cfg = SimConfig(T=0.1, n_steps=100, k_noise=4, seed=2)
    a = run_ensemble(sp, op, None, np.ones(4), cfg, 20, keep_states=True)
    b = run_ensemble(sp, op, None, 0.5 * np.ones(4), cfg, 20, keep_states=True)
    gap = uniqueness_gap(a, b, sp, GapWeights.from_params(op.params))
    assert np.all(gap.phi[:, 0] == 1.0)
    assert np.allclose(gap.phi, np.exp(-2 * 0.25 * gap.times)[None, :], rtol=1e-13)
    assert gap.initial_gap == pytest.approx(1.0)
    assert gap.mean[0] == pytest.approx(1.0)


def test_uniqueness_equal_starts_give_zero_gap():
    sp = build_space(m=3)
    op = make_heat(sp, sigma=0.3)
    cfg = SimConfig(T=0.05, n_steps=50, k_noise=3, seed=4)
    a = simulate_path(sp, op, None, np.ones(3), cfg)
    b = simulate_path(sp, op, None, np.ones(3), cfg)
    gap = uniqueness_gap(a, b, sp, GapWeights(TimeTable.constant(0.0)))
    assert gap.max_mean == 0.0 and gap.growth_rate() == 0.0


def test_uniqueness_noise_mismatch():
    sp = build_space(m=3)
    op = make_heat(sp, sigma=0.3)
    cfg = SimConfig(T=0.05, n_steps=50, k_noise=3, seed=4)
    a = simulate_path(sp, op, None, np.ones(3), cfg, stream=0)
    b = simulate_path(sp, op, None, np.ones(3), cfg, stream=1)
    w = GapWeights(TimeTable.constant(0.0))
    with pytest.raises(ContractError):
        uniqueness_gap(a, b, sp, w)
    c = simulate_path(sp, op, None, np.ones(3), cfg.with_(n_steps=25))
    with pytest.raises(ContractError):
        uniqueness_gap(a, c, sp, w)
    ens = run_ensemble(sp, op, None, np.ones(3), cfg, 2, keep_states=True)
    with pytest.raises(ContractError):
        uniqueness_gap(a, ens, sp, w)


def test_growth_rate_definition():
    sp = build_space(m=2)
    op = make_sign_flipped_heat(sp)
    cfg = SimConfig(T=0.01, n_steps=10)
    a = simulate_path(sp, op, None, [1.0, 0.0], cfg)
    b = simulate_path(sp, op, None, [0.0, 0.0], cfg)
    gap = uniqueness_gap(a, b, sp, GapWeights(TimeTable.constant(0.0)))
    r2 = (1 + math.pi**2 * cfg.dt) ** 2
    # largest one-step increase is the last one: r2^(N-1) (r2 - 1)
    expect = r2 ** (cfg.n_steps - 1) * (r2 - 1) / cfg.dt
    assert gap.growth_rate() == pytest.approx(expect, rel=1e-12)
