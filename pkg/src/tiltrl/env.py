"""Episodes, reward, domain randomization, curriculum and vectorized rollouts."""
import math
from dataclasses import dataclass, field, replace

import numpy as np

from tiltrl.allocation import hover_solution, null_space
from tiltrl.dynamics import DT, IntegrationFault, SimState, build_allocation_matrix, rotor_power, step
from tiltrl.frames import (
    DEFAULT_SCALING,
    MIRROR_PERMUTATION,
    ROT,
    STATE_DIM,
    GoalFrame,
    augment_trajectory,
    encode_goal_state,
    mirror_action,
    mirror_state,
    orthonormalize,
    yaw_error,
    Transition,
)
from tiltrl.net import ActionMap, forward, gaussian_logprob
from tiltrl.ppo import RolloutBuffer
from tiltrl.rotation import quat_mul, quat_exp, rot_to_quat, rot_y


@dataclass(frozen=True)
class RewardWeights:
    c_p: float = -2.0
    c_psi: float = -1.0
    c_w: float = -0.1
    c_E: float = -0.005
    alive: float = 1.0

    def __post_init__(self):
        if max(self.c_p, self.c_psi, self.c_w, self.c_E) > 0:
            raise ValueError("reward weights are costs and must be <= 0")
        if min(abs(self.c_p), abs(self.c_psi)) <= max(abs(self.c_w), abs(self.c_E)):
            raise ValueError("position and heading weights must dominate the rate and power weights")


@dataclass(frozen=True)
class CurriculumStage:
    index: int
    name: str
    pos_range: float
    vel_range: float
    angvel_range: float
    attitude_cone: float
    yaw_range: float
    alphas: tuple = (0.0,)
    noise_frac: float = 0.0
    wind_max: float = 0.0
    threshold_frac: float = 0.9

    def __post_init__(self):
        for name in ("pos_range", "vel_range", "angvel_range", "attitude_cone", "yaw_range", "wind_max"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.noise_frac <= 0.2:
            raise ValueError("noise_frac must lie in [0, 0.2]")
        if self.attitude_cone >= math.pi / 2:
            raise ValueError("attitude cone must keep the thrust axis above the horizon")
        if not self.alphas:
            raise ValueError("stage needs at least one tilt angle")


def default_schedule():
    """Hover with little randomness, full randomness, then tilted hover at growing angles."""
    full = dict(pos_range=1.0, vel_range=1.0, angvel_range=1.0, attitude_cone=math.radians(60.0),
                yaw_range=math.pi, noise_frac=0.05, wind_max=1.0)
    stages = [
        CurriculumStage(0, "hover-easy", 0.2, 0.2, 0.2, 0.2, 0.2),
        CurriculumStage(1, "hover-full", alphas=(0.0,), **full),
    ]
    alphas = [0.0]
    for k, deg in enumerate((30, 60, 90, 110)):
        alphas.append(math.radians(deg))
        stages.append(CurriculumStage(2 + k, f"tilt-{deg}", alphas=tuple(alphas), **full))
    return stages


@dataclass(frozen=True)
class EpisodeConfig:
    dt: float = DT
    max_steps: int = 1200
    goal: GoalFrame = field(default_factory=GoalFrame)
    radius: float = 5.0
    attitude_limit: float = math.pi / 2
    crash_penalty: float = -10.0
    weights: RewardWeights = field(default_factory=RewardWeights)
    action_scale: float = 0.1
    augment: bool = False


class HoverReference:
    """Cached hover equilibria of the nominal platform, one per tilt angle."""

    def __init__(self, params):
        self.params = params
        self._cache = {}

    def __call__(self, alpha):
        alpha = float(alpha)
        if alpha not in self._cache:
            self._cache[alpha] = hover_solution(self.params, alpha)
        return self._cache[alpha]

    def action_map(self, action_scale, basis="wrench"):
        """Thrust map centred on the mirror-symmetrized level hover thrust.

        ``basis="wrench"`` aligns the Gaussian coordinates with thrust
        patterns that produce F_z, M_x, M_y, M_z and the two null-space
        directions at zero tilt; ``"rotor"`` perturbs each rotor on its own.
        """
        T, _ = self(0.0)
        center = 0.5 * (T + mirror_action(T))
        scale = action_scale * self.params.thrust_max
        if basis == "rotor":
            return ActionMap(center, scale, self.params.thrust_max)
        if basis != "wrench":
            raise ValueError(f"unknown action basis {basis!r}")
        B, signs = wrench_basis(self.params)
        return ActionMap(center, scale, self.params.thrust_max, B, tuple(range(6)), signs)


def wrench_basis(params):
    """Unit thrust patterns for F_z, M_x, M_y, M_z and two null directions at zero tilt.

    The allocation matrix is symmetrized under the mirror map first, so
    every pattern is mapped onto plus or minus itself by ``mirror_action``.
    Returns ``(basis, signs)`` with ``mirror_action(basis) = basis * signs``.
    """
    A = build_allocation_matrix(params, 0.0)[1:]
    P = np.eye(6)[list(MIRROR_PERMUTATION)]
    D = np.diag([1.0, -1.0, 1.0, -1.0])
    A_s = 0.5 * (A + D @ A @ P)
    W = np.linalg.pinv(A_s)
    N = null_space(A_s)
    eig, V = np.linalg.eigh(N.T @ P @ N)
    B = np.hstack([W, N @ V])
    B /= np.linalg.norm(B, axis=0)
    signs = np.concatenate([np.diag(D), np.round(eig)])
    return B, signs


def sample_initial_state(stage, rng, goal=None, hover=None):
    """Uniform box in position, velocity and rates; thrust axis uniform on the stage's cap.

    Tilted stages sample around the hover pitch of the episode's tilt
    angle, so the cone is measured from the thrust axis of that attitude.
    """
    goal = GoalFrame() if goal is None else goal
    alpha = float(stage.alphas[rng.integers(len(stage.alphas))])
    theta, thrust = 0.0, np.zeros(6)
    if hover is not None:
        thrust, theta = hover(alpha)
        thrust = thrust.copy()
    p_G = rng.uniform(-stage.pos_range, stage.pos_range, 3)
    v_G = rng.uniform(-stage.vel_range, stage.vel_range, 3)
    w_B = rng.uniform(-stage.angvel_range, stage.angvel_range, 3)
    # uniform direction on the cap {angle to z < cone}
    cos_tilt = rng.uniform(math.cos(stage.attitude_cone), 1.0)
    tilt = math.acos(cos_tilt)
    azimuth = rng.uniform(-math.pi, math.pi)
    yaw = rng.uniform(-stage.yaw_range, stage.yaw_range)
    axis = np.array([-math.sin(azimuth), math.cos(azimuth), 0.0])
    q_tilt = quat_exp(axis * tilt)
    q_yaw = np.array([math.cos(0.5 * (yaw + goal.psi_G)), 0.0, 0.0, math.sin(0.5 * (yaw + goal.psi_G))])
    q_pitch = rot_to_quat(rot_y(-theta))
    q_IB = quat_mul(quat_mul(q_tilt, q_yaw), q_pitch)
    R_IG = goal.R_IG
    R_IB = SimState(np.zeros(3), q_IB, np.zeros(3), np.zeros(3)).R_IB
    v_B = R_IB.T @ (R_IG @ v_G)
    return SimState(goal.p_G_I + R_IG @ p_G, q_IB, v_B, w_B, alpha, thrust)


def reward(state, goal, T, weights, params, dt=DT):
    """Alive bonus plus weighted position, heading, rate and energy costs."""
    R_IG = goal.R_IG
    d = state.p_I - goal.p_G_I
    p_norm = float(np.linalg.norm(d))
    R_GB = R_IG.T @ state.R_IB
    psi = abs(yaw_error(R_GB))
    w_norm = float(np.linalg.norm(state.w_B))
    energy = float(np.sum(rotor_power(np.clip(T, 0.0, None), params))) * dt
    return (weights.alive + weights.c_p * p_norm + weights.c_psi * psi
            + weights.c_w * w_norm + weights.c_E * energy)


def domain_randomize(params, stage, rng):
    """Perturbed copy of ``params`` and a constant inertial wind force for one episode."""
    f = stage.noise_frac
    if not 0.0 <= f <= 0.2:
        raise ValueError("noise_frac must lie in [0, 0.2]")
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    wind = direction * rng.uniform(0.0, stage.wind_max)
    if f == 0.0:
        return params, wind
    u = rng.uniform(1.0 - f, 1.0 + f, 7)
    J = params.inertia_nominal.copy()
    J[np.diag_indices(3)] *= u[1:4]
    new = params.replace(
        mass=params.mass * u[0],
        inertia_nominal=J,
        thrust_max=params.thrust_max * u[4],
        k_m=params.k_m * u[5],
        coaxial_efficiency=min(1.0, params.coaxial_efficiency * u[6]),
    )
    return new, wind


def thrust_axis_up(state, theta_ref):
    """Inertial z component of the hover thrust axis for the reference pitch."""
    R = state.R_IB
    return R[2, 0] * math.sin(theta_ref) + R[2, 2] * math.cos(theta_ref)


@dataclass
class Episode:
    state: SimState
    params: object
    wind: np.ndarray
    alpha_des: float
    theta_ref: float
    t: int = 0
    ret: float = 0.0


def observe(state, cfg, stage, rng):
    x = encode_goal_state(state, cfg.goal, DEFAULT_SCALING)
    if stage.noise_frac > 0.0:
        x = x + stage.noise_frac * rng.standard_normal(STATE_DIM)
        x[ROT] = orthonormalize(x[ROT].reshape(3, 3)).ravel()
    return x


def reset_episode(params, stage, cfg, rng, hover):
    state = sample_initial_state(stage, rng, cfg.goal, hover)
    _, theta = hover(state.alpha_cur)
    ep_params, wind = domain_randomize(params, stage, rng)
    return Episode(state, ep_params, wind, state.alpha_cur, theta)


def episode_step(ep, action, cfg, stage, rng):
    """Advance one control step; returns ``(obs, reward, done, terminal)``.

    ``terminal`` distinguishes crashes (no bootstrap) from the step-limit
    cut. The episode record is updated in place.
    """
    try:
        ep.state = step(ep.state, action, ep.alpha_des, ep.params, cfg.dt, ep.wind)
    except IntegrationFault:
        ep.t += 1
        ep.ret += cfg.crash_penalty
        return np.zeros(STATE_DIM), cfg.crash_penalty, True, True
    ep.t += 1
    r = reward(ep.state, cfg.goal, ep.state.thrust_cur, cfg.weights, ep.params, cfg.dt)
    crashed = (np.linalg.norm(ep.state.p_I - cfg.goal.p_G_I) > cfg.radius
               or thrust_axis_up(ep.state, ep.theta_ref) <= math.cos(cfg.attitude_limit))
    if crashed:
        r += cfg.crash_penalty
    ep.ret += r
    obs = observe(ep.state, cfg, stage, rng)
    return obs, r, bool(crashed or ep.t >= cfg.max_steps), bool(crashed)


def oracle_step_reward(weights, hover, alpha, params, dt=DT):
    T, _ = hover(alpha)
    energy = float(np.sum(rotor_power(T, params))) * dt
    return weights.alive + weights.c_E * energy


def stage_threshold(stage, cfg, hover):
    """Fraction of the steady-hover return, averaged over the stage's tilt angles."""
    per_step = np.mean([oracle_step_reward(cfg.weights, hover, a, hover.params, cfg.dt) for a in stage.alphas])
    return stage.threshold_frac * per_step * cfg.max_steps


def curriculum_advance(history, stage, schedule, threshold, window=10):
    """Next stage once the moving average of mean returns clears ``threshold``."""
    recent = [h for h in history[-window:] if math.isfinite(h)]
    if len(recent) < window or stage.index + 1 >= len(schedule):
        return stage
    return schedule[stage.index + 1] if np.mean(recent) > threshold else stage


def _policy_mean(policy, obs):
    mean, _ = forward(policy, obs)
    return mean


def _values(value, obs, value_scale):
    v, _ = forward(value, obs)
    return value_scale * v[:, 0]


def rollout(policy, value, params, cfg, stage, rng_seeds, steps_per_env, value_scale, hover, amap):
    """Collect ``steps_per_env`` steps from one independent stream per seed.

    Streams share batched network evaluations but nothing else; each owns
    its rng. With ``cfg.augment`` every stream is followed by its mirror
    image with log-probabilities and values recomputed by the networks.
    """
    n_envs = len(rng_seeds)
    rngs = [np.random.default_rng(s) for s in rng_seeds]
    episodes = [reset_episode(params, stage, cfg, rng, hover) for rng in rngs]
    obs = np.stack([observe(ep.state, cfg, stage, rng) for ep, rng in zip(episodes, rngs)])
    n = n_envs * steps_per_env
    shape = (n_envs, steps_per_env)
    O = np.empty(shape + (STATE_DIM,))
    U = np.empty(shape + (6,))
    A = np.empty(shape + (6,))
    LP = np.empty(shape)
    RW = np.empty(shape)
    V = np.empty(shape)
    DN = np.zeros(shape, dtype=bool)
    EN = np.zeros(shape, dtype=bool)
    # observation at each cut segment, used for bootstrap values
    boot_obs = {}
    returns = []
    log_std = policy.log_std
    std = np.exp(log_std)
    for t in range(steps_per_env):
        mean = _policy_mean(policy, obs)
        vals = _values(value, obs, value_scale)
        O[:, t] = obs
        V[:, t] = vals
        for e, (ep, rng) in enumerate(zip(episodes, rngs)):
            u = mean[e] + std * rng.standard_normal(6)
            T = amap.to_thrust(u)
            U[e, t] = u
            A[e, t] = T
            nxt, r, done, terminal = episode_step(ep, T, cfg, stage, rng)
            RW[e, t] = r
            last = t == steps_per_env - 1
            if done or last:
                EN[e, t] = True
                DN[e, t] = terminal
                if not terminal:
                    boot_obs[(e, t)] = nxt
                if done:
                    returns.append(ep.ret)
                    episodes[e] = reset_episode(params, stage, cfg, rng, hover)
                    nxt = observe(episodes[e].state, cfg, stage, rng)
            obs[e] = nxt
        LP[:, t] = gaussian_logprob(mean, log_std, U[:, t])

    NV = np.zeros(shape)
    if boot_obs:
        keys = sorted(boot_obs)
        vb = _values(value, np.stack([boot_obs[k] for k in keys]), value_scale)
        for k, v in zip(keys, vb):
            NV[k] = v
    buf = RolloutBuffer(O.reshape(n, STATE_DIM), U.reshape(n, 6), A.reshape(n, 6), LP.reshape(n),
                        RW.reshape(n), V.reshape(n), DN.reshape(n), EN.reshape(n), NV.reshape(n), returns)
    if cfg.augment:
        buf = RolloutBuffer.concat([buf, mirror_buffer(buf, policy, value, value_scale, amap, boot_obs,
                                                        steps_per_env)])
    return buf


def mirror_buffer(buf, policy, value, value_scale, amap, boot_obs=None, steps_per_env=None):
    """Mirror image of a buffer with recomputed log-probabilities and values.

    States and thrusts go through ``augment_trajectory``; the raw Gaussian
    coordinates follow ``amap.mirror_raw``, exact because the action centre
    is mirror-symmetric.
    """
    traj = [Transition(s, a, 0.0, r, 0.0, d) for s, a, r, d in zip(buf.obs, buf.actions, buf.rewards, buf.dones)]
    mirrored = augment_trajectory(traj)
    obs = np.stack([tr.s for tr in mirrored]) if mirrored else buf.obs.copy()
    actions = np.stack([tr.a for tr in mirrored]) if mirrored else buf.actions.copy()
    raw = amap.mirror_raw(buf.raw)
    mean, _ = forward(policy, obs)
    logp = gaussian_logprob(mean, policy.log_std, raw)
    vals = _values(value, obs, value_scale)
    nv = np.zeros(len(buf))
    if boot_obs:
        keys = sorted(boot_obs)
        flat = [e * steps_per_env + t for e, t in keys]
        nv[flat] = _values(value, mirror_state(np.stack([boot_obs[k] for k in keys])), value_scale)
    return RolloutBuffer(obs, raw, actions, logp, buf.rewards.copy(), vals,
                         buf.dones.copy(), buf.ends.copy(), nv, list(buf.episode_returns))
