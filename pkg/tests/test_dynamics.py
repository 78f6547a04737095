import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tiltrl.allocation import hover_solution
from tiltrl.dynamics import (
    DT,
    DomainError,
    IntegrationFault,
    PlatformParams,
    SimState,
    angular_momentum_I,
    build_allocation_matrix,
    inertia_tensor,
    rotor_power,
    servo_update,
    step,
    total_power,
    wrench_from_thrusts,
)
from tiltrl.rotation import quat_exp, random_quat

PARAMS = PlatformParams()
SYM = PlatformParams(coaxial_efficiency=1.0)
alphas = st.floats(0.0, 2.0 * math.pi / 3.0)


def reference_allocation(params, alpha):
    """Column-by-column cross-product construction of the allocation matrix."""
    sa, ca = math.sin(alpha), math.cos(alpha)
    A = np.zeros((5, 6))
    for i in range(6):
        if i < 4:
            side = 1.0 if i < 2 else -1.0
            r = np.array([0.0, side * params.l_y, 0.0]) + params.d_off * np.array([ca, 0.0, -sa])
            u = np.array([sa, 0.0, ca])
        else:
            r = np.array([-params.l_f, 0.0, 0.0])
            u = np.array([0.0, 0.0, 1.0])
        eta = params.coaxial_efficiency if i in (1, 3, 5) else 1.0
        m = np.cross(r, u) + params.spin_signs[i] * params.k_m * u
        A[:, i] = eta * np.concatenate([[u[0], u[2]], m])
    return A


def reference_inertia(params, alpha):
    """Nominal inertia plus point masses at the four tilting rotor centres."""
    sa, ca = math.sin(alpha), math.cos(alpha)
    J = params.inertia_nominal.copy()
    for side in (1.0, 1.0, -1.0, -1.0):
        r = np.array([params.d_off * ca, side * params.l_y, -params.d_off * sa])
        J += params.rotor_mass * (r @ r * np.eye(3) - np.outer(r, r))
    return J


def test_allocation_column_level():
    A = build_allocation_matrix(SYM, 0.0)
    s1 = SYM.spin_signs[0]
    np.testing.assert_allclose(A[:, 0], [0.0, 1.0, 0.130, -0.075, s1 * SYM.k_m], atol=1e-15)


def test_allocation_column_tilted():
    A = build_allocation_matrix(SYM, math.pi / 2)
    s1 = SYM.spin_signs[0]
    np.testing.assert_allclose(A[:, 0], [1.0, 0.0, s1 * SYM.k_m, -0.075, -0.130], atol=1e-15)


@given(alphas)
def test_allocation_matches_cross_product_oracle(alpha):
    for params in (PARAMS, SYM):
        np.testing.assert_allclose(build_allocation_matrix(params, alpha),
                                   reference_allocation(params, alpha), atol=1e-15)


def test_equal_thrust_level_wrench():
    A = build_allocation_matrix(SYM, 0.0)
    w = wrench_from_thrusts(A, np.full(6, 3.0))
    assert w.fx == 0.0
    assert w.m[0] == pytest.approx(0.0, abs=1e-15)
    assert w.m[2] == pytest.approx(0.0, abs=1e-15)
    # four tilting rotors ahead of the fixed pair: -4 d T + 2 l_f T
    assert w.m[1] == pytest.approx(3.0 * (2 * SYM.l_f - 4 * SYM.d_off))


def test_allocation_rejects_out_of_range():
    with pytest.raises(DomainError):
        build_allocation_matrix(PARAMS, -0.1)
    with pytest.raises(DomainError):
        build_allocation_matrix(PARAMS, 2.2)


def test_wrench_zero_and_naive_sum():
    rng = np.random.default_rng(3)
    A = build_allocation_matrix(PARAMS, 0.7)
    assert np.all(wrench_from_thrusts(A, np.zeros(6)).as_array() == 0.0)
    for _ in range(20):
        T = rng.uniform(0, PARAMS.thrust_max, 6)
        acc = np.zeros(5)
        for i in range(6):
            acc = acc + A[:, i] * T[i]
        np.testing.assert_allclose(wrench_from_thrusts(A, T).as_array(), acc, atol=1e-12)


@given(alphas, st.lists(st.floats(0.0, 14.2), min_size=6, max_size=6))
def test_literal_pair_swap_keeps_forces(alpha, T):
    T = np.array(T)
    swapped = T[[2, 3, 0, 1, 4, 5]]
    A = build_allocation_matrix(PARAMS, alpha)
    a, b = wrench_from_thrusts(A, T), wrench_from_thrusts(A, swapped)
    assert a.fx == pytest.approx(b.fx, abs=1e-12)
    assert a.fz == pytest.approx(b.fz, abs=1e-12)


@given(alphas)
def test_inertia_matches_parallel_axis_oracle(alpha):
    J = inertia_tensor(PARAMS, alpha)
    np.testing.assert_allclose(J, reference_inertia(PARAMS, alpha), atol=1e-15)
    np.testing.assert_array_equal(J, J.T)
    assert np.linalg.eigvalsh(J).min() > 0


def test_inertia_level_and_continuity():
    np.testing.assert_allclose(inertia_tensor(PARAMS, 0.0), reference_inertia(PARAMS, 0.0), atol=1e-15)
    for alpha in np.linspace(0.0, 2.0, 21):
        diff = inertia_tensor(PARAMS, alpha + 1e-6) - inertia_tensor(PARAMS, alpha)
        assert np.abs(diff).max() < 1e-4


def test_params_validation():
    with pytest.raises(DomainError):
        PlatformParams(mass=0.0)
    with pytest.raises(DomainError):
        PlatformParams(spin_signs=(1, 1, -1, 1, 1, -1))
    with pytest.raises(DomainError):
        PlatformParams(inertia_nominal=np.diag([0.01, -0.01, 0.02]))
    assert PARAMS.alpha_max == pytest.approx(2 * math.pi / 3)


def test_rotor_power_values():
    assert rotor_power(0.0, PARAMS) == 0.0
    p = PlatformParams(rotor_disk_area=0.01267, air_density=1.225)
    two_a_rho = 2 * 0.01267 * 1.225
    assert rotor_power(two_a_rho, p) == pytest.approx(two_a_rho, rel=1e-14)
    assert rotor_power(4.0, p) == pytest.approx(4.0 * math.sqrt(4.0 / two_a_rho), rel=1e-14)
    assert rotor_power(4.0, p) == pytest.approx(45.4, abs=0.05)
    with pytest.raises(DomainError):
        rotor_power(-1.0, PARAMS)


def test_rotor_power_monotone_convex():
    T = np.linspace(1e-3, PARAMS.thrust_max, 2000)
    P = rotor_power(T, PARAMS)
    assert np.all(np.diff(P) > 0)
    assert np.all(np.diff(P, 2) > 0)
    assert total_power(np.full(6, 2.0), PARAMS) == pytest.approx(6 * rotor_power(2.0, PARAMS))


def test_servo_update_properties():
    assert servo_update(0.5, 0.5, DT, PARAMS) == 0.5
    a = 0.0
    for _ in range(400):
        nxt = servo_update(a, PARAMS.alpha_max, DT, PARAMS)
        assert nxt - a <= PARAMS.servo_rate_max * DT + 1e-15
        a = nxt


def test_servo_settling_time():
    # slew-limited until the first-order rate drops below the limit, then exponential
    target = 2 * math.pi / 3
    a, t = 0.0, 0.0
    while abs(a - target) > 0.05 * target:
        a = servo_update(a, target, DT, PARAMS)
        t += DT
    tau, rate = PARAMS.tau_servo, PARAMS.servo_rate_max
    e_switch = rate * tau
    t_oracle = (target - e_switch) / rate + tau * math.log(e_switch / (0.05 * target))
    assert t <= 0.9
    assert t == pytest.approx(t_oracle, abs=0.02)


def test_free_fall_one_step():
    s = SimState.at_rest(p_I=(0, 0, 10))
    s2 = step(s, np.zeros(6), 0.0, PARAMS)
    assert s2.v_I[2] == pytest.approx(-PARAMS.gravity * DT, abs=1e-9)


def test_ballistic_closed_form():
    rng = np.random.default_rng(0)
    for _ in range(5):
        q = random_quat(rng)
        v0 = rng.uniform(-2, 2, 3)
        s = SimState(rng.uniform(-1, 1, 3), q, np.zeros(3), rng.uniform(-1, 1, 3), 0.3, np.zeros(6))
        s.v_B = s.R_IB.T @ v0
        p0 = s.p_I.copy()
        for _ in range(200):
            s = step(s, np.zeros(6), 0.3, PARAMS)
        t = 1.0
        expect = p0 + v0 * t + 0.5 * np.array([0, 0, -PARAMS.gravity]) * t * t
        np.testing.assert_allclose(s.p_I, expect, atol=1e-6)


def test_torque_free_momentum_conserved():
    rng = np.random.default_rng(1)
    for alpha in (0.0, 1.0, 2.0):
        s = SimState(np.zeros(3), random_quat(rng), np.zeros(3), rng.uniform(-3, 3, 3), alpha, np.zeros(6))
        L0 = angular_momentum_I(s, PARAMS)
        for _ in range(200):
            s = step(s, np.zeros(6), alpha, PARAMS)
            assert abs(np.linalg.norm(s.q_IB) - 1.0) < 1e-9
        L1 = angular_momentum_I(s, PARAMS)
        assert np.linalg.norm(L1 - L0) <= 1e-4 * np.linalg.norm(L0)


def test_hover_feedforward_holds_position():
    T, theta = hover_solution(PARAMS, 0.0)
    s = SimState.at_rest(thrust=T)
    for _ in range(200):
        s = step(s, T, 0.0, PARAMS)
    assert np.linalg.norm(s.p_I) < 1e-3


def test_step_saturates_thrust_and_alpha():
    s = SimState.at_rest()
    s = step(s, np.full(6, 100.0), 5.0, PARAMS)
    assert np.all(s.thrust_cur <= PARAMS.thrust_max)
    assert PARAMS.alpha_min <= s.alpha_cur <= PARAMS.alpha_max


def test_step_nonfinite_is_fault():
    s = SimState.at_rest()
    s.w_B = np.array([np.inf, 0.0, 0.0])
    with pytest.raises(IntegrationFault), np.errstate(invalid="ignore"):
        step(s, np.zeros(6), 0.0, PARAMS)


def test_step_rejects_bad_dt():
    with pytest.raises(DomainError):
        step(SimState.at_rest(), np.zeros(6), 0.0, PARAMS, dt=0.0)


def test_step_is_deterministic():
    rng = np.random.default_rng(5)
    s = SimState(np.zeros(3), random_quat(rng), rng.normal(size=3), rng.normal(size=3), 0.2, np.full(6, 3.0))
    T = rng.uniform(0, 8, 6)
    a = step(s, T, 1.0, PARAMS, disturbance=np.array([0.3, -0.1, 0.0]))
    b = step(s, T, 1.0, PARAMS, disturbance=np.array([0.3, -0.1, 0.0]))
    for f in ("p_I", "q_IB", "v_B", "w_B", "thrust_cur"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))


@settings(max_examples=30)
@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_quaternion_norm_after_step(w):
    s = SimState(np.zeros(3), quat_exp(np.array([0.3, -0.2, 0.1])), np.zeros(3), np.array(w), 0.0,
                 np.full(6, 3.0))
    for _ in range(5):
        s = step(s, np.full(6, 3.0), 0.0, PARAMS)
    assert abs(np.linalg.norm(s.q_IB) - 1.0) < 1e-9
