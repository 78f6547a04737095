"""Closed-loop evaluations of a trained policy: tilt sweep, step response, power comparison."""
import csv
import math
from dataclasses import dataclass

import numpy as np

from tiltrl.dynamics import DT, IntegrationFault, SimState, rotor_power, step
from tiltrl.env import reward
from tiltrl.frames import GoalFrame, encode_goal_state
from tiltrl.net import forward
from tiltrl.rotation import pitch_up_angle, rot_to_quat, rot_y

TRAJECTORY_COLUMNS = (["t", "px", "py", "pz", "qw", "qx", "qy", "qz", "vx", "vy", "vz", "wx", "wy", "wz", "alpha"]
                      + [f"T{i}" for i in range(1, 7)] + ["power", "reward"])


class PolicyController:
    """Deterministic controller: the Gaussian mean pushed through the action map."""

    def __init__(self, policy, amap):
        self.policy = policy
        self.amap = amap

    def __call__(self, obs):
        mean, _ = forward(self.policy, obs)
        return self.amap.to_thrust(mean)


@dataclass
class Trajectory:
    t: np.ndarray
    p: np.ndarray
    q: np.ndarray
    v: np.ndarray
    w: np.ndarray
    alpha: np.ndarray
    alpha_des: np.ndarray
    thrust: np.ndarray
    power: np.ndarray
    reward: np.ndarray
    faulted: bool = False

    def __len__(self):
        return len(self.t)

    @property
    def pitch(self):
        return np.array([pitch_up_angle(SimState(np.zeros(3), q, np.zeros(3), np.zeros(3)).R_IB) for q in self.q])

    def rows(self):
        for k in range(len(self)):
            yield ([self.t[k], *self.p[k], *self.q[k], *self.v[k], *self.w[k], self.alpha[k], *self.thrust[k],
                    self.power[k], self.reward[k]])


def hover_state(hover, alpha, position=(0.0, 0.0, 0.0), yaw=0.0):
    """Vehicle at rest in the hover attitude and thrust of tilt angle ``alpha``."""
    T, theta = hover(alpha)
    R = np.array([[math.cos(yaw), -math.sin(yaw), 0.0], [math.sin(yaw), math.cos(yaw), 0.0], [0.0, 0.0, 1.0]])
    q = rot_to_quat(R @ rot_y(-theta))
    return SimState(np.array(position, dtype=float), q, np.zeros(3), np.zeros(3), alpha, T.copy())


def simulate(controller, params, state, goal, alpha_des, n_steps, weights, dt=DT, wind=None):
    """Closed-loop run; ``alpha_des`` is a scalar or a callable of the step index.

    Row k holds the state after step k together with the thrust command
    that produced it. An integration fault ends the run early.
    """
    alpha_fn = alpha_des if callable(alpha_des) else (lambda k: alpha_des)
    cols = {name: [] for name in ("t", "p", "q", "v", "w", "alpha", "alpha_des", "thrust", "power", "reward")}
    faulted = False
    for k in range(n_steps):
        T = controller(encode_goal_state(state, goal))
        ad = alpha_fn(k)
        try:
            state = step(state, T, ad, params, dt, wind)
        except IntegrationFault:
            faulted = True
            break
        cols["t"].append((k + 1) * dt)
        cols["p"].append(state.p_I)
        cols["q"].append(state.q_IB)
        cols["v"].append(state.v_B)
        cols["w"].append(state.w_B)
        cols["alpha"].append(state.alpha_cur)
        cols["alpha_des"].append(ad)
        cols["thrust"].append(T)
        cols["power"].append(float(np.sum(rotor_power(state.thrust_cur, params))))
        cols["reward"].append(reward(state, goal, state.thrust_cur, weights, params, dt))
    arrays = {k: np.array(v, dtype=float) for k, v in cols.items()}
    for key, width in (("p", 3), ("q", 4), ("v", 3), ("w", 3), ("thrust", 6)):
        arrays[key] = arrays[key].reshape(-1, width)
    return Trajectory(**arrays, faulted=faulted)


def write_trajectory_csv(path, traj, config_hash):
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash: {config_hash}\n")
        writer = csv.writer(fh)
        writer.writerow(TRAJECTORY_COLUMNS)
        for row in traj.rows():
            writer.writerow([repr(float(x)) for x in row])


def write_table_csv(path, rows, columns, config_hash):
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash: {config_hash}\n")
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([repr(float(row[c])) if isinstance(row[c], float) else row[c] for c in columns])


@dataclass
class SweepSegment:
    alpha_deg: float
    max_deviation: float
    z_error: float
    pitch_deg: float
    hover_pitch_deg: float
    alpha_reached_deg: float
    mean_power: float
    thrust_oscillation: float

    def as_dict(self):
        return dict(self.__dict__)


SWEEP_COLUMNS = ("alpha_deg", "max_deviation", "z_error", "pitch_deg", "hover_pitch_deg", "alpha_reached_deg",
                 "mean_power", "thrust_oscillation")


def steady_window(n, frac=0.3):
    """Index slice covering the last ``frac`` of a segment."""
    return slice(max(0, n - max(1, int(round(frac * n)))), n)


def alpha_sweep(controller, params, hover, alphas_deg, hold_s, weights, goal=None, dt=DT, steady_frac=0.3):
    """Hold the goal fixed and step the tilt command through ``alphas_deg``, ``hold_s`` seconds each.

    Returns the trajectory and one ``SweepSegment`` per tilt angle; the
    steady-state figures use the last ``steady_frac`` of each hold.
    """
    goal = GoalFrame() if goal is None else goal
    alphas = [math.radians(a) for a in alphas_deg]
    per = int(round(hold_s / dt))
    start = hover_state(hover, alphas[0], goal.p_G_I, goal.psi_G)
    traj = simulate(controller, params, start, goal, lambda k: alphas[min(k // per, len(alphas) - 1)],
                    per * len(alphas), weights, dt)
    segments = []
    for i, a in enumerate(alphas_deg):
        lo, hi = i * per, min((i + 1) * per, len(traj))
        if hi - lo < 2:
            break
        seg = slice(lo, hi)
        win = steady_window(hi - lo, steady_frac)
        p = traj.p[seg] - goal.p_G_I
        pitch = traj.pitch[seg]
        thrust = traj.thrust[seg][win]
        segments.append(SweepSegment(
            alpha_deg=float(a),
            max_deviation=float(np.max(np.linalg.norm(p, axis=1))),
            z_error=float(abs(np.mean(p[win, 2]))),
            pitch_deg=float(math.degrees(np.mean(pitch[win]))),
            hover_pitch_deg=float(math.degrees(hover(math.radians(a))[1])),
            alpha_reached_deg=float(math.degrees(np.mean(traj.alpha[seg][win]))),
            mean_power=float(np.mean(traj.power[seg][win])),
            thrust_oscillation=float(np.mean(np.std(thrust, axis=0))),
        ))
    return traj, segments


@dataclass
class StepMetrics:
    alpha_deg: float
    axis: str
    magnitude: float
    rise_time: float
    overshoot: float
    steady_error: float
    z_error: float

    def as_dict(self):
        return dict(self.__dict__)


STEP_COLUMNS = ("alpha_deg", "axis", "magnitude", "rise_time", "overshoot", "steady_error", "z_error")
AXES = {"x": 0, "y": 1, "z": 2}


def step_response(controller, params, hover, alpha_deg, axis, magnitude, duration_s, weights, dt=DT,
                  steady_frac=0.2):
    """Goal jumps by ``magnitude`` along inertial ``axis`` at t=0 from hover at tilt ``alpha_deg``.

    ``rise_time`` is the 10-90 % time, ``overshoot`` the peak excess as a
    fraction of the step, ``steady_error`` the mean absolute tracking error
    over the final window; all are zero for a zero-magnitude step except
    the tracking and z errors.
    """
    a = math.radians(alpha_deg)
    k = AXES[axis]
    target = np.zeros(3)
    target[k] = magnitude
    goal = GoalFrame(target, 0.0)
    n = int(round(duration_s / dt))
    traj = simulate(controller, params, hover_state(hover, a), goal, a, n, weights, dt)
    x = traj.p[:, k]
    win = steady_window(len(traj), steady_frac)
    steady = float(np.mean(np.abs(x[win] - magnitude))) if len(traj) else float("nan")
    z_error = float(abs(np.mean(traj.p[win, 2] - target[2]))) if len(traj) else float("nan")
    if magnitude == 0.0 or not len(traj):
        return traj, StepMetrics(alpha_deg, axis, magnitude, 0.0, 0.0, steady, z_error)
    frac = x / magnitude
    t10 = np.argmax(frac >= 0.1) if np.any(frac >= 0.1) else None
    t90 = np.argmax(frac >= 0.9) if np.any(frac >= 0.9) else None
    rise = float((t90 - t10) * dt) if t10 is not None and t90 is not None else float("inf")
    overshoot = float(max(0.0, np.max(frac) - 1.0))
    return traj, StepMetrics(alpha_deg, axis, magnitude, rise, overshoot, steady, z_error)


def power_compare(controller_a, controller_b, params, hover, alphas_deg, hold_s, weights, dt=DT):
    """Sweep both controllers identically; per-angle power and oscillation of each and their differences."""
    _, seg_a = alpha_sweep(controller_a, params, hover, alphas_deg, hold_s, weights, dt=dt)
    _, seg_b = alpha_sweep(controller_b, params, hover, alphas_deg, hold_s, weights, dt=dt)
    rows = []
    for sa, sb in zip(seg_a, seg_b):
        rows.append({
            "alpha_deg": sa.alpha_deg,
            "power_a": sa.mean_power,
            "power_b": sb.mean_power,
            "power_diff": sa.mean_power - sb.mean_power,
            "oscillation_a": sa.thrust_oscillation,
            "oscillation_b": sb.thrust_oscillation,
            "oscillation_diff": sa.thrust_oscillation - sb.thrust_oscillation,
        })
    return rows


POWER_COLUMNS = ("alpha_deg", "power_a", "power_b", "power_diff", "oscillation_a", "oscillation_b",
                 "oscillation_diff")


def gnuplot_script(csv_name, title, x_col, y_cols, ylabel):
    """Minimal gnuplot script plotting ``y_cols`` against ``x_col`` of a CSV written by this module."""
    lines = [
        "set datafile separator ','",
        "set key autotitle columnhead",
        f"set title '{title}'",
        f"set xlabel '{x_col}'",
        f"set ylabel '{ylabel}'",
        "set grid",
    ]
    plots = [f"'{csv_name}' using '{x_col}':'{y}' with lines title '{y}'" for y in y_cols]
    lines.append("plot " + ", \\\n     ".join(plots))
    return "\n".join(lines) + "\n"
