"""Goal-centric state encoding and left-right mirror augmentation.

The 19-dim network input is laid out as::

    [0:9)   R_B^G row-major
    [9:12)  position of the body in {G}, scaled
    [12:15) inertial velocity expressed in {G}, scaled
    [15:18) angular velocity expressed in {G}, scaled
    [18]    current tilt angle, scaled

The mirror map reflects the vehicle across the x_G-z_G plane. Rotor pairs
swap sides and, because a reflection reverses spin direction, the two
rotors of the fixed coaxial pair exchange roles as well.
"""
import math
from dataclasses import dataclass, field, replace

import numpy as np

from tiltrl.dynamics import SimState
from tiltrl.rotation import quat_mul, quat_z, rot_to_quat, rot_z

STATE_DIM = 19
ROT = slice(0, 9)
POS = slice(9, 12)
VEL = slice(12, 15)
ANG = slice(15, 18)
ALPHA = 18

# reflection across the x-z plane
REFLECT = np.diag([1.0, -1.0, 1.0])
# polar vectors flip y, pseudovectors flip x and z
_POLAR = np.array([1.0, -1.0, 1.0])
_AXIAL = np.array([-1.0, 1.0, -1.0])
MIRROR_PERMUTATION = (2, 3, 0, 1, 5, 4)


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    a = math.atan2(math.sin(a), math.cos(a))
    return math.pi if a == -math.pi else a


@dataclass
class GoalFrame:
    p_G_I: np.ndarray = field(default_factory=lambda: np.zeros(3))
    psi_G: float = 0.0

    def __post_init__(self):
        self.p_G_I = np.asarray(self.p_G_I, dtype=float)
        self.psi_G = wrap_angle(float(self.psi_G))

    @property
    def R_IG(self):
        return rot_z(self.psi_G)


@dataclass(frozen=True)
class StateScaling:
    position: float = 1.0
    velocity: float = 1.0
    angular_velocity: float = 2.0
    alpha: float = 2.0 * math.pi / 3.0

    def block_scales(self):
        """Per-entry scale of the 19-vector (rotation entries are unscaled)."""
        return np.concatenate([np.ones(9), np.full(3, self.position), np.full(3, self.velocity),
                               np.full(3, self.angular_velocity), [self.alpha]])


DEFAULT_SCALING = StateScaling()


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    logp: float
    r: float
    v: float
    done: bool


def encode_goal_state(state, goal, scaling=DEFAULT_SCALING):
    R_IG = goal.R_IG
    R_GB = R_IG.T @ state.R_IB
    p = R_IG.T @ (state.p_I - goal.p_G_I)
    v = R_GB @ state.v_B
    w = R_GB @ state.w_B
    x = np.empty(STATE_DIM)
    x[ROT] = R_GB.ravel()
    x[POS] = p / scaling.position
    x[VEL] = v / scaling.velocity
    x[ANG] = w / scaling.angular_velocity
    x[ALPHA] = state.alpha_cur / scaling.alpha
    return x


def decode_goal_state(x, goal, scaling=DEFAULT_SCALING, thrust=None):
    """Inverse of ``encode_goal_state`` (rotor thrusts are not encoded)."""
    R_IG = goal.R_IG
    R_GB = x[ROT].reshape(3, 3)
    R_IB = R_IG @ R_GB
    p_I = goal.p_G_I + R_IG @ (x[POS] * scaling.position)
    v_B = R_GB.T @ (x[VEL] * scaling.velocity)
    w_B = R_GB.T @ (x[ANG] * scaling.angular_velocity)
    q = rot_to_quat(R_IB)
    return SimState(p_I, q, v_B, w_B, x[ALPHA] * scaling.alpha,
                    np.zeros(6) if thrust is None else thrust)


def mirror_state(x):
    """Reflect an encoded state (or a batch of them) across the x_G-z_G plane."""
    x = np.asarray(x, dtype=float)
    out = x.copy()
    R = x[..., ROT].reshape(x.shape[:-1] + (3, 3))
    out[..., ROT] = (REFLECT @ R @ REFLECT).reshape(x.shape[:-1] + (9,))
    out[..., POS] = x[..., POS] * _POLAR
    out[..., VEL] = x[..., VEL] * _POLAR
    out[..., ANG] = x[..., ANG] * _AXIAL
    return out


def mirror_action(T):
    """Thrusts of the reflected vehicle: tilting pairs swap sides, fixed pair swaps spin roles."""
    return np.asarray(T)[..., MIRROR_PERMUTATION]


def mirror_sim_state(state, goal):
    """Reflect a full simulator state across the goal frame's x-z plane."""
    R_IG = goal.R_IG
    M = R_IG @ REFLECT @ R_IG.T
    p_I = goal.p_G_I + M @ (state.p_I - goal.p_G_I)
    # q_GB -> (w, -x, y, -z) is the quaternion of REFLECT R_GB REFLECT
    qz = quat_z(goal.psi_G)
    qz_inv = qz * np.array([1.0, -1.0, -1.0, -1.0])
    q_GB = quat_mul(qz_inv, state.q_IB)
    q_GB_m = q_GB * np.array([1.0, -1.0, 1.0, -1.0])
    q_IB = quat_mul(qz, q_GB_m)
    return SimState(p_I, q_IB, state.v_B * _POLAR, state.w_B * _AXIAL, state.alpha_cur,
                    mirror_action(state.thrust_cur))


def augment_trajectory(traj, logprob_fn=None, value_fn=None):
    """Mirrored copy of a trajectory of ``Transition`` records.

    Rewards and done flags carry over unchanged. Log-probabilities and
    values are recomputed through ``logprob_fn(s, a)`` / ``value_fn(s)``
    when given (the networks are not mirror-equivariant); otherwise they are
    copied and the caller is responsible for refreshing them.
    """
    out = []
    for tr in traj:
        s = mirror_state(tr.s)
        a = mirror_action(tr.a)
        logp = tr.logp if logprob_fn is None else float(logprob_fn(s, a))
        v = tr.v if value_fn is None else float(value_fn(s))
        out.append(replace(tr, s=s, a=a, logp=logp, v=v))
    return out


def rotation_block(x):
    return np.asarray(x)[..., ROT].reshape(np.shape(x)[:-1] + (3, 3))


def yaw_error(R_GB):
    """Heading of the body y axis about z_G; stays defined at any pitch."""
    return math.atan2(-R_GB[0, 1], R_GB[1, 1])


def orthonormalize(R):
    U, _, Vt = np.linalg.svd(R)
    Q = U @ Vt
    if np.linalg.det(Q) < 0:
        U[:, -1] *= -1
        Q = U @ Vt
    return Q

