"""Rigid-body flight dynamics of the tilting coaxial hexacopter.

Rotor numbering (see ``docs/allocation.md``):

* rotors 0..3 (1..4 one-based) form two coaxial pairs on the tilting axle,
  pair (0, 1) on the +y side and pair (2, 3) on the -y side;
* rotors 4, 5 (5, 6 one-based) are the fixed coaxial pair behind the axle.

Within each pair the first index is the upper rotor and the second the lower
one; lower rotors see the coaxial efficiency factor.

Frames: inertial z points up, body x forward, body z along the fixed
rotors' thrust. Quaternions map body vectors into the inertial frame.
"""
import math
from dataclasses import dataclass, field, replace

import numpy as np

from tiltrl.rotation import quat_exp, quat_mul, quat_normalize, quat_to_rot

DT = 0.005
N_ROTORS = 6
TILT_ROTORS = (0, 1, 2, 3)
LOWER_ROTORS = (1, 3, 5)
COAXIAL_PAIRS = ((0, 1), (2, 3), (4, 5))


class DomainError(ValueError):
    """An argument lies outside the physical domain of an operation."""


class InfeasibleError(ValueError):
    """No thrust vector within the actuator box realizes the request."""


class IntegrationFault(FloatingPointError):
    """The integrator produced a non-finite state."""


@dataclass(frozen=True, eq=False)
class PlatformParams:
    mass: float = 1.9
    inertia_nominal: np.ndarray = field(default_factory=lambda: np.diag([0.012, 0.015, 0.020]))
    d_off: float = 0.075
    l_y: float = 0.130
    l_f: float = 0.200
    k_m: float = 0.016
    rotor_disk_area: float = math.pi * 0.0635 ** 2
    air_density: float = 1.225
    thrust_max: float = 14.2
    alpha_min: float = 0.0
    alpha_max: float = 2.0 * math.pi / 3.0
    servo_rate_max: float = 3.0
    gravity: float = 9.81
    spin_signs: tuple = (1, -1, -1, 1, 1, -1)
    rotor_mass: float = 0.04
    coaxial_efficiency: float = 0.85
    tau_rotor: float = 0.02
    tau_servo: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "inertia_nominal", np.array(self.inertia_nominal, dtype=float))
        object.__setattr__(self, "spin_signs", tuple(int(s) for s in self.spin_signs))
        self.validate()
        object.__setattr__(self, "_cache", {})

    def validate(self):
        if not self.mass > 0:
            raise DomainError("mass must be positive")
        J = self.inertia_nominal
        if J.shape != (3, 3) or not np.allclose(J, J.T) or np.linalg.eigvalsh(J).min() <= 0:
            raise DomainError("inertia_nominal must be symmetric positive definite")
        for name in ("d_off", "l_y", "l_f", "rotor_disk_area", "air_density", "thrust_max",
                     "servo_rate_max", "gravity", "tau_rotor", "tau_servo"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive")
        if self.k_m < 0 or self.rotor_mass < 0:
            raise DomainError("k_m and rotor_mass must be non-negative")
        if not 0 < self.coaxial_efficiency <= 1:
            raise DomainError("coaxial_efficiency must lie in (0, 1]")
        if not self.alpha_min < self.alpha_max:
            raise DomainError("alpha_min must be below alpha_max")
        if len(self.spin_signs) != N_ROTORS or any(s not in (1, -1) for s in self.spin_signs):
            raise DomainError("spin_signs must hold six entries of +1/-1")
        for i, j in COAXIAL_PAIRS:
            if self.spin_signs[i] + self.spin_signs[j] != 0:
                raise DomainError("coaxial pairs must counter-rotate")

    def replace(self, **changes):
        return replace(self, **changes)

    @property
    def efficiency(self):
        eta = np.ones(N_ROTORS)
        eta[list(LOWER_ROTORS)] = self.coaxial_efficiency
        return eta

    @property
    def power_coeff(self):
        """c in P = c * T**1.5."""
        return 1.0 / math.sqrt(2.0 * self.rotor_disk_area * self.air_density)


@dataclass
class SimState:
    p_I: np.ndarray
    q_IB: np.ndarray
    v_B: np.ndarray
    w_B: np.ndarray
    alpha_cur: float = 0.0
    thrust_cur: np.ndarray = field(default_factory=lambda: np.zeros(N_ROTORS))

    def __post_init__(self):
        self.p_I = np.asarray(self.p_I, dtype=float)
        self.q_IB = np.asarray(self.q_IB, dtype=float)
        self.v_B = np.asarray(self.v_B, dtype=float)
        self.w_B = np.asarray(self.w_B, dtype=float)
        self.alpha_cur = float(self.alpha_cur)
        self.thrust_cur = np.asarray(self.thrust_cur, dtype=float)

    @classmethod
    def at_rest(cls, p_I=(0.0, 0.0, 0.0), q_IB=(1.0, 0.0, 0.0, 0.0), alpha=0.0, thrust=None):
        return cls(np.array(p_I, float), np.array(q_IB, float), np.zeros(3), np.zeros(3), alpha,
                   np.zeros(N_ROTORS) if thrust is None else np.array(thrust, float))

    @property
    def R_IB(self):
        return quat_to_rot(self.q_IB)

    @property
    def v_I(self):
        return self.R_IB @ self.v_B

    def copy(self):
        return SimState(self.p_I.copy(), self.q_IB.copy(), self.v_B.copy(), self.w_B.copy(),
                        self.alpha_cur, self.thrust_cur.copy())

    def is_finite(self):
        return bool(np.all(np.isfinite(self.p_I)) and np.all(np.isfinite(self.q_IB))
                    and np.all(np.isfinite(self.v_B)) and np.all(np.isfinite(self.w_B))
                    and math.isfinite(self.alpha_cur) and np.all(np.isfinite(self.thrust_cur)))


@dataclass
class Wrench:
    """Controllable body-frame wrench [F_x, F_z, M_x, M_y, M_z]."""
    fx: float
    fz: float
    m: np.ndarray

    @classmethod
    def from_array(cls, a):
        a = np.asarray(a, dtype=float)
        return cls(float(a[0]), float(a[1]), a[2:5].copy())

    def as_array(self):
        return np.concatenate([[self.fx, self.fz], self.m])

    @property
    def force(self):
        return np.array([self.fx, 0.0, self.fz])


def _check_alpha(params, alpha):
    if not params.alpha_min - 1e-12 <= alpha <= params.alpha_max + 1e-12:
        raise DomainError(f"tilt angle {alpha:.6g} rad outside "
                          f"[{params.alpha_min:.6g}, {params.alpha_max:.6g}]")


def rotor_geometry(params, alpha):
    """Rotor positions and unit thrust directions in the body frame, 6x3 each."""
    sa, ca = math.sin(alpha), math.cos(alpha)
    u_tilt = np.array([sa, 0.0, ca])
    offset = params.d_off * np.array([ca, 0.0, -sa])
    pos = np.empty((N_ROTORS, 3))
    dirs = np.empty((N_ROTORS, 3))
    for i, side in zip(TILT_ROTORS, (1.0, 1.0, -1.0, -1.0)):
        pos[i] = np.array([0.0, side * params.l_y, 0.0]) + offset
        dirs[i] = u_tilt
    pos[4] = pos[5] = (-params.l_f, 0.0, 0.0)
    dirs[4] = dirs[5] = (0.0, 0.0, 1.0)
    return pos, dirs


def _alpha_terms(params, alpha):
    """Allocation matrix, inertia and its inverse at ``alpha`` (cached, read-only)."""
    cache = params._cache
    hit = cache.get(alpha)
    if hit is not None:
        return hit
    sa, ca = math.sin(alpha), math.cos(alpha)
    d, ly, lf, k = params.d_off, params.l_y, params.l_f, params.k_m
    s = params.spin_signs
    A = np.empty((5, N_ROTORS))
    for i, side in zip(TILT_ROTORS, (1.0, 1.0, -1.0, -1.0)):
        # r x u with r = (d ca, side ly, -d sa), u = (sa, 0, ca); drag torque along u
        A[:, i] = (sa, ca, side * ly * ca + s[i] * k * sa, -d, -side * ly * sa + s[i] * k * ca)
    for i in (4, 5):
        A[:, i] = (0.0, 1.0, 0.0, lf, s[i] * k)
    A *= params.efficiency[None, :]

    m4 = 4.0 * params.rotor_mass
    J = params.inertia_nominal + m4 * np.array([
        [ly * ly + d * d * sa * sa, 0.0, d * d * ca * sa],
        [0.0, d * d, 0.0],
        [d * d * ca * sa, 0.0, ly * ly + d * d * ca * ca],
    ])
    terms = (A, J, np.linalg.inv(J))
    for arr in terms:
        arr.flags.writeable = False
    if len(cache) > 4096:
        cache.clear()
    cache[alpha] = terms
    return terms


def build_allocation_matrix(params, alpha):
    """5x6 map from per-rotor thrust to [F_x, F_z, M_x, M_y, M_z]."""
    _check_alpha(params, alpha)
    return _alpha_terms(params, alpha)[0].copy()


def wrench_from_thrusts(A, T):
    return Wrench.from_array(A @ np.asarray(T, dtype=float))


def inertia_tensor(params, alpha):
    """Nominal inertia plus point-mass terms of the four tilting rotors."""
    return _alpha_terms(params, alpha)[1].copy()


def rotor_power(T, params):
    """Ideal induced power P = T * sqrt(T / (2 A rho)); works on scalars and arrays."""
    T = np.asarray(T, dtype=float)
    if np.any(T < 0):
        raise DomainError("thrust must be non-negative")
    P = params.power_coeff * T * np.sqrt(T)
    return float(P) if P.ndim == 0 else P


def total_power(T, params):
    return float(np.sum(rotor_power(np.clip(T, 0.0, None), params)))


def servo_update(alpha_cur, alpha_des, dt, params):
    """First-order servo tracking with slew limit, clamped to the tilt range."""
    alpha_des = min(max(alpha_des, params.alpha_min), params.alpha_max)
    delta = (alpha_des - alpha_cur) * (1.0 - math.exp(-dt / params.tau_servo))
    lim = params.servo_rate_max * dt
    delta = min(max(delta, -lim), lim)
    return min(max(alpha_cur + delta, params.alpha_min), params.alpha_max)


def step(state, T_cmd, alpha_des, params, dt=DT, disturbance=None):
    """Advance the vehicle by one control period.

    Actuators are updated first (servo, first-order rotor lag); the wrench
    they produce then drives a semi-implicit update. Translation runs in the
    inertial frame with a trapezoidal position update, rotation in momentum
    form so that torque-free motion conserves inertial angular momentum.
    ``disturbance`` is an inertial-frame force in newtons.
    """
    if not dt > 0:
        raise DomainError("dt must be positive")
    T_cmd = np.clip(np.asarray(T_cmd, dtype=float), 0.0, params.thrust_max)

    alpha = servo_update(state.alpha_cur, alpha_des, dt, params)
    lag = 1.0 - math.exp(-dt / params.tau_rotor)
    thrust = np.clip(state.thrust_cur + lag * (T_cmd - state.thrust_cur), 0.0, params.thrust_max)

    A, J_new, J_inv = _alpha_terms(params, alpha)
    w = A @ thrust
    R = quat_to_rot(state.q_IB)

    force_I = R @ np.array([w[0], 0.0, w[1]])
    if disturbance is not None:
        force_I = force_I + disturbance
    acc_I = force_I / params.mass
    acc_I[2] -= params.gravity
    v_I = R @ state.v_B
    v_I_new = v_I + acc_I * dt
    p_new = state.p_I + 0.5 * (v_I + v_I_new) * dt

    J_old = J_new if alpha == state.alpha_cur else _alpha_terms(params, state.alpha_cur)[1]
    L_I = R @ (J_old @ state.w_B + w[2:] * dt)
    w_rot = J_inv @ (R.T @ L_I)
    q_new = quat_normalize(quat_mul(state.q_IB, quat_exp(w_rot * dt)))
    R_new = quat_to_rot(q_new)
    w_new = J_inv @ (R_new.T @ L_I)

    new = SimState(p_new, q_new, R_new.T @ v_I_new, w_new, alpha, thrust)
    if not new.is_finite():
        raise IntegrationFault("non-finite state after integration step")
    return new


def angular_momentum_I(state, params):
    return state.R_IB @ (inertia_tensor(params, state.alpha_cur) @ state.w_B)
