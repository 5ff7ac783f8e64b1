import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from spdectl.errors import InvalidParameterError, OperatorEvaluationError
from spdectl.operators import (HypothesisParams, TimeTable, convection_matrix, eval_A, eval_B,
                               eval_Phi, make_convection_diffusion, make_heat, make_quasilinear,
                               make_sign_flipped_heat, make_step_operator)
from spdectl.space import build_space, dual_pairing, random_states, v_norm


def test_heat_eigenvalues():
    sp = build_space(m=8)
    heat = make_heat(sp)
    assert dual_pairing(sp, eval_A(heat, 0.0, sp.basis_vector(1)), sp.basis_vector(1)) == \
        pytest.approx(-math.pi**2, rel=1e-14)
    half = make_heat(sp, nu=0.5)
    w = eval_A(half, 0.0, sp.basis_vector(2))
    assert w[1] == pytest.approx(-2 * math.pi**2, rel=1e-14)
    assert np.count_nonzero(w) == 1


def test_heat_rejects_bad_parameters():
    with pytest.raises(InvalidParameterError):
        make_heat(build_space(m=4), nu=0.0)
    with pytest.raises(InvalidParameterError):
        make_heat(build_space(m=4, alpha=3.0))


def test_sign_flipped_heat_reverses_drift():
    sp = build_space(m=4)
    u = np.array([1.0, -0.5, 0.2, 0.0])
    assert np.allclose(eval_A(make_sign_flipped_heat(sp), 0.0, u), -eval_A(make_heat(sp), 0.0, u))


def test_plaplace_alpha2_is_laplacian():
    sp = build_space(m=6)
    op = make_quasilinear(sp)
    assert op.label == "p_laplace"
    u = np.array([0.3, -1.0, 0.5, 0.0, 0.1, 0.2])
    assert np.allclose(eval_A(op, 0.0, u), eval_A(make_heat(sp), 0.0, u), atol=1e-10)
    assert dual_pairing(sp, eval_A(op, 0.0, sp.basis_vector(1)), sp.basis_vector(1)) == \
        pytest.approx(-math.pi**2, rel=1e-10)


def test_plaplace_alpha4_e1_against_quadrature():
    sp = build_space(m=4, alpha=4.0)
    w = eval_A(make_quasilinear(sp), 0.0, sp.basis_vector(1))
    ref = -quad(lambda x: (math.sqrt(2) * math.pi * math.cos(math.pi * x)) ** 4, 0, 1,
                epsabs=1e-14)[0]
    assert w[0] == pytest.approx(ref, rel=1e-12)
    assert ref == pytest.approx(-1.5 * math.pi**4, rel=1e-12)


def test_plaplace_quadrature_refinement():
    coarse = build_space(m=4, alpha=4.0, quad_order=64)
    fine = build_space(m=4, alpha=4.0, quad_order=256)
    U = random_states(coarse, np.random.default_rng(0), 20, r_max=3.0)
    a = np.array([eval_A(make_quasilinear(coarse), 0.0, u) for u in U])
    b = np.array([eval_A(make_quasilinear(fine), 0.0, u) for u in U])
    assert np.max(np.abs(a - b)) <= 1e-6 * max(1.0, np.max(np.abs(b)))


def test_plaplace_coercivity_identity():
    sp = build_space(m=5, alpha=3.0)
    op = make_quasilinear(sp)
    for u in random_states(sp, np.random.default_rng(1), 20):
        assert dual_pairing(sp, eval_A(op, 0.0, u), u) == \
            pytest.approx(-v_norm(sp, u) ** 3, rel=1e-10)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=8, max_size=8))
def test_plaplace_monotone(vals):
    sp = build_space(m=4, alpha=4.0)
    op = make_quasilinear(sp)
    u, v = np.array(vals[:4]), np.array(vals[4:])
    gap = dual_pairing(sp, eval_A(op, 0.0, u) - eval_A(op, 0.0, v), u - v)
    assert gap <= 1e-9 * (1 + np.sum(u**2) + np.sum(v**2)) ** 2


def test_quasilinear_linear_coefficient_matches_heat():
    sp = build_space(m=5)
    op = make_quasilinear(sp, a1=lambda t, x, u, z: z)
    u = np.array([1.0, 0.0, -0.3, 0.2, 0.1])
    assert np.allclose(eval_A(op, 0.0, u), eval_A(make_heat(sp), 0.0, u), atol=1e-10)


def test_quasilinear_rejects_alpha_mismatch_and_lone_a0():
    sp = build_space(m=3, alpha=3.0)
    with pytest.raises(InvalidParameterError):
        make_quasilinear(sp, alpha=4.0)
    with pytest.raises(InvalidParameterError):
        make_quasilinear(sp, a0=lambda t, x, u, z: u)


def test_quasilinear_nonfinite_raises():
    sp = build_space(m=3)
    op = make_quasilinear(sp, a1=lambda t, x, u, z: z + np.inf)
    with pytest.raises(OperatorEvaluationError):
        eval_A(op, 0.0, [1.0, 0.0, 0.0])


def test_convection_component():
    sp = build_space(m=4)
    op = make_convection_diffusion(sp, nu=1.0, b=1.0)
    w = eval_A(op, 0.0, sp.basis_vector(1))
    assert w[1] == pytest.approx(-8 / 3, rel=1e-14)
    assert w[0] == pytest.approx(-math.pi**2, rel=1e-14)


def test_convection_matrix_against_quadrature():
    sp = build_space(L=2.0, m=4)
    C = convection_matrix(sp)
    L = 2.0
    for j in range(1, 5):
        for k in range(1, 5):
            ref = quad(lambda x: (2 / L) * (k * math.pi / L) * math.cos(k * math.pi * x / L)
                       * math.sin(j * math.pi * x / L), 0, L, epsabs=1e-13)[0]
            assert C[j - 1, k - 1] == pytest.approx(ref, abs=1e-12)
    assert np.allclose(C, -C.T)


def test_convection_drops_out_of_energy():
    sp = build_space(m=6)
    conv = make_convection_diffusion(sp, nu=1.0, b=3.0)
    heat = make_heat(sp)
    for u in random_states(sp, np.random.default_rng(2), 20):
        a = dual_pairing(sp, eval_A(conv, 0.0, u), u)
        assert a == pytest.approx(dual_pairing(sp, eval_A(heat, 0.0, u), u), rel=1e-12)


def test_additive_noise_norm():
    sp = build_space(m=6)
    op = make_heat(sp, sigma=0.3)
    for k in (1, 3, 6):
        B = eval_B(op, 0.0, np.ones(6), k=k)
        assert B.shape == (6, k)
        assert np.linalg.norm(B) == pytest.approx(0.3 * math.sqrt(k), rel=1e-14)
    with pytest.raises(InvalidParameterError):
        eval_B(op, 0.0, np.ones(6), k=7)


def test_multiplicative_noise_norm():
    sp = build_space(m=4)
    op = make_heat(sp, sigma=0.5, noise="multiplicative")
    u = np.array([1.0, -2.0, 0.5, 0.0])
    assert np.linalg.norm(eval_B(op, 0.0, u)) == pytest.approx(0.5 * np.linalg.norm(u))
    assert op.params.f_A(0.3) == pytest.approx(0.25)


def test_heat_coercivity_identity():
    sp = build_space(m=8)
    heat = make_heat(sp, nu=0.7)
    for u in random_states(sp, np.random.default_rng(3), 20):
        assert 2 * dual_pairing(sp, eval_A(heat, 0.0, u), u) == \
            pytest.approx(-2 * 0.7 * v_norm(sp, u) ** 2, rel=1e-12)


def test_step_operator():
    sp = build_space(m=3)
    op = make_step_operator(sp)
    assert np.array_equal(eval_A(op, 0.0, [0.5, 1.0, 1.0]), [1.0, 0.0, 0.0])
    assert np.array_equal(eval_A(op, 0.0, [-0.5, 1.0, 1.0]), [-1.0, 0.0, 0.0])


def test_default_control_is_zero():
    sp = build_space(m=3)
    assert not np.any(eval_Phi(make_heat(sp), 0.2, [1.0, 2.0, 3.0]).coeffs)


def test_hypothesis_params_validation():
    with pytest.raises(InvalidParameterError):
        HypothesisParams(beta=1.0)
    with pytest.raises(InvalidParameterError):
        HypothesisParams(C_coerc=0.0)
    with pytest.raises(InvalidParameterError):
        HypothesisParams(zeta=-1.0)


def test_time_table():
    tab = TimeTable([0.0, 1.0], [1.0, 3.0])
    assert tab(0.5) == 1.0 and tab(1.0) == 3.0 and tab(9.0) == 3.0
    assert tab.integral(2.0) == pytest.approx(4.0)
    with pytest.raises(InvalidParameterError):
        TimeTable([0.0, 1.0], [1.0, -1.0])
    assert TimeTable.constant(2.5)(7.0) == 2.5
    assert TimeTable.constant(2.5).is_constant()
