"""Flight logs: CSV reading and writing, trajectory splitting, and PPO fine-tuning on logged data.

A log row holds the vehicle state at time ``t`` together with the thrust
command issued from that state. Consecutive rows form one transition;
the reward of a transition is evaluated on the later state with the
earlier command, which mirrors the simulator up to rotor lag.
"""
import csv
import math
from dataclasses import dataclass

import numpy as np

from tiltrl.dynamics import DT, IntegrationFault, SimState, step
from tiltrl.env import mirror_buffer, reward
from tiltrl.frames import GoalFrame, encode_goal_state
from tiltrl.net import forward, gaussian_logprob
from tiltrl.ppo import RolloutBuffer, train_iteration

LOG_COLUMNS = (["t", "px", "py", "pz", "qw", "qx", "qy", "qz", "vx", "vy", "vz", "wx", "wy", "wz", "alpha"]
               + [f"T{i}" for i in range(1, 7)] + ["alpha_des", "goal_x", "goal_y", "goal_z", "goal_psi"])
GAP_FACTOR = 3.0


class DataError(ValueError):
    """Unusable flight-log input."""


@dataclass
class FlightTrajectory:
    """Contiguous block of log rows, stored as one float array with ``LOG_COLUMNS`` columns."""
    data: np.ndarray

    def __len__(self):
        return len(self.data)

    @property
    def t(self):
        return self.data[:, 0]

    def state(self, k):
        r = self.data[k]
        return SimState(r[1:4], r[4:8], r[8:11], r[11:14], r[14])

    def action(self, k):
        return self.data[k, 15:21]

    def goal(self, k):
        r = self.data[k]
        return GoalFrame(r[22:25].copy(), r[25])

    @property
    def duration(self):
        return float(self.t[-1] - self.t[0]) if len(self) else 0.0


def split_indices(t, dt=DT, gap_factor=GAP_FACTOR):
    """Start/stop index pairs of runs whose consecutive time steps never exceed ``gap_factor * dt``."""
    t = np.asarray(t, dtype=float)
    if t.size == 0:
        return []
    breaks = np.nonzero(np.diff(t) > gap_factor * dt)[0] + 1
    bounds = np.concatenate([[0], breaks, [t.size]])
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


def read_flight_log(path, dt=DT):
    """Parse a log into trajectories; returns ``(trajectories, skipped_rows)``.

    Rows with the wrong field count, non-numeric or non-finite fields, or
    a timestamp that does not increase are skipped and counted. Segments
    shorter than two rows carry no transition and are dropped.
    """
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot read flight log {path}: {exc}") from None
    with fh:
        lines = (ln for ln in fh if not ln.startswith("#"))
        reader = csv.reader(lines)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != LOG_COLUMNS:
            raise DataError(f"{path}: header does not match the flight-log column order")
        rows, skipped, last_t = [], 0, -math.inf
        for fields in reader:
            if len(fields) != len(LOG_COLUMNS):
                skipped += 1
                continue
            try:
                values = [float(x) for x in fields]
            except ValueError:
                skipped += 1
                continue
            if not all(math.isfinite(v) for v in values) or values[0] <= last_t:
                skipped += 1
                continue
            last_t = values[0]
            rows.append(values)
    if not rows:
        return [], skipped
    data = np.array(rows)
    trajs = [FlightTrajectory(data[a:b]) for a, b in split_indices(data[:, 0], dt) if b - a >= 2]
    return trajs, skipped


def write_flight_log(path, trajectories, config_hash=None):
    with open(path, "w", newline="") as fh:
        if config_hash is not None:
            fh.write(f"# config_hash: {config_hash}\n")
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for traj in trajectories:
            for row in traj.data:
                writer.writerow([repr(float(x)) for x in row])


def _log_row(t, state, action, alpha_des, goal):
    return np.concatenate([[t], state.p_I, state.q_IB, state.v_B, state.w_B, [state.alpha_cur], action,
                           [alpha_des], goal.p_G_I, [goal.psi_G]])


def record_flight(policy, amap, params, state, goal, alpha_des, n_steps, rng=None, t0=0.0, dt=DT):
    """Fly the policy in the simulator and return the run as a log trajectory.

    With ``rng`` actions are sampled from the Gaussian policy, otherwise
    the mean is flown. The final row carries the last state with the
    command that would have been issued from it.
    """
    rows = []
    std = np.exp(policy.log_std)
    for k in range(n_steps + 1):
        mean, _ = forward(policy, encode_goal_state(state, goal))
        u = mean if rng is None else mean + std * rng.standard_normal(mean.shape)
        T = amap.to_thrust(u)
        rows.append(_log_row(t0 + k * dt, state, T, alpha_des, goal))
        if k == n_steps:
            break
        try:
            state = step(state, T, alpha_des, params, dt)
        except IntegrationFault:
            break
    return FlightTrajectory(np.array(rows))


def trajectory_buffer(traj, policy, value, amap, params, weights, value_scale, dt=DT):
    """Rollout buffer for one logged trajectory under the current networks.

    Log-probabilities are recomputed for the logged commands, so the PPO
    ratio starts at one. The segment is a truncation, bootstrapped with the
    value of the final logged state.
    """
    n = len(traj) - 1
    obs = np.stack([encode_goal_state(traj.state(k), traj.goal(k)) for k in range(n + 1)])
    actions = traj.data[:n, 15:21].copy()
    raw = amap.to_raw(actions)
    mean, _ = forward(policy, obs[:n])
    logp = gaussian_logprob(mean, policy.log_std, raw)
    v, _ = forward(value, obs)
    values = value_scale * v[:, 0]
    rewards = np.array([reward(traj.state(k + 1), traj.goal(k), actions[k], weights, params, dt) for k in range(n)])
    dones = np.zeros(n, dtype=bool)
    ends = np.zeros(n, dtype=bool)
    ends[-1] = True
    nv = np.zeros(n)
    nv[-1] = values[n]
    ret = float(np.sum(rewards))
    return RolloutBuffer(obs[:n], raw, actions, logp, rewards, values[:n], dones, ends, nv, [ret]), obs[n]


def logs_to_buffer(trajectories, policy, value, amap, params, weights, value_scale, augment=True, dt=DT):
    """Concatenate per-trajectory buffers; with ``augment`` every one gets its mirror image."""
    if not trajectories:
        raise DataError("no usable trajectories in the flight logs")
    parts = []
    for traj in trajectories:
        buf, last_obs = trajectory_buffer(traj, policy, value, amap, params, weights, value_scale, dt)
        parts.append(buf)
        if augment:
            boot = {(0, len(buf) - 1): last_obs}
            parts.append(mirror_buffer(buf, policy, value, value_scale, amap, boot, len(buf)))
    return RolloutBuffer.concat(parts)


def replay_finetune(agent, trajectories, ppo_cfg, amap, params, weights, rng, iterations=1, augment=True,
                    dt=DT):
    """PPO updates that treat the logged trajectories as rollout buffers.

    Buffers are rebuilt each iteration so log-probabilities and values
    follow the networks being trained. Returns ``(agent, metrics_list,
    samples_consumed)``.
    """
    history, consumed = [], 0
    for _ in range(iterations):
        buf = logs_to_buffer(trajectories, agent.policy, agent.value, amap, params, weights, ppo_cfg.value_scale,
                             augment, dt)
        consumed += len(buf)
        agent, metrics = train_iteration(agent, buf, ppo_cfg, rng)
        history.append(metrics)
    return agent, history, consumed
