"""PPO-clip training core: returns, GAE, value regression and the update loop."""
import csv
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from tiltrl.net import (
    AdamState,
    adam_step,
    backward,
    forward,
    gaussian_entropy,
    gaussian_logprob,
    grad_norm,
)


class NumericFault(FloatingPointError):
    """A loss, gradient or parameter went non-finite during an update."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class PpoConfig:
    steps_per_env: int = 1200
    epochs: int = 10
    minibatches: int = 10
    c1: float = 0.5
    lr: float = 5e-5
    gamma: float = 0.998
    lam: float = 0.95
    epsilon_clip: float = 0.2
    n_envs: int = 16
    value_scale: float = 100.0
    value_target: str = "mc"
    max_grad_norm: float = 0.0

    def __post_init__(self):
        for name in ("gamma", "lam", "epsilon_clip"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("steps_per_env", "epochs", "minibatches", "n_envs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0 or self.value_scale <= 0 or self.c1 < 0:
            raise ValueError("lr and value_scale must be positive, c1 non-negative")
        if self.value_target not in ("mc", "gae"):
            raise ValueError("value_target must be 'mc' or 'gae'")


@dataclass
class RolloutBuffer:
    """Flat transition arrays, stream after stream.

    ``ends`` marks the last step of every segment (terminal or truncated);
    ``next_values`` holds V(s_{t+1}) where a segment is cut without a
    terminal state and zero elsewhere at segment ends.
    """
    obs: np.ndarray
    raw: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    ends: np.ndarray
    next_values: np.ndarray
    episode_returns: list = field(default_factory=list)

    def __len__(self):
        return len(self.rewards)

    def validate(self):
        n = len(self.rewards)
        for name in ("obs", "raw", "actions", "logp", "values", "dones", "ends", "next_values"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"buffer field {name} has inconsistent length")
        if n and not self.ends[-1]:
            raise ValueError("buffer does not close its last segment")
        if np.any(self.dones & ~self.ends):
            raise ValueError("terminal step not marked as a segment end")
        if np.any(self.next_values[self.dones] != 0.0):
            raise ValueError("terminal steps cannot carry a bootstrap value")

    @classmethod
    def concat(cls, parts):
        parts = list(parts)
        kw = {f: np.concatenate([getattr(p, f) for p in parts])
              for f in ("obs", "raw", "actions", "logp", "rewards", "values", "dones", "ends", "next_values")}
        return cls(**kw, episode_returns=[r for p in parts for r in p.episode_returns])


def _discounted_backward(x, ends, tail, decay):
    """y_t = x_t + decay_t * y_{t+1}, restarting at segment ends with ``tail``."""
    out = np.empty(len(x))
    acc = 0.0
    for t in range(len(x) - 1, -1, -1):
        if ends[t]:
            acc = tail[t]
        acc = x[t] + decay[t] * acc
        out[t] = acc
    return out


def _single_stream(dones, bootstrap):
    dones = np.asarray(dones, dtype=bool)
    ends = dones.copy()
    tail = np.zeros(len(dones))
    if len(dones) and not dones[-1]:
        ends[-1] = True
        tail[-1] = bootstrap
    return dones, ends, tail


def compute_returns(rewards, dones, gamma, bootstrap=0.0):
    """Discounted reward-to-go per episode; a non-terminal tail continues with ``bootstrap``."""
    rewards = np.asarray(rewards, dtype=float)
    _, ends, tail = _single_stream(dones, bootstrap)
    return _discounted_backward(rewards, ends, tail, np.full(len(rewards), gamma))


def gae(rewards, values, dones, gamma, lam, bootstrap=0.0):
    """Generalized advantage estimates by the backward recursion over TD residuals."""
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones, ends, tail = _single_stream(dones, bootstrap)
    next_values = np.append(values[1:], 0.0)
    next_values[ends] = tail[ends]
    return gae_segments(rewards, values, next_values, ends, gamma, lam)


def gae_segments(rewards, values, next_values, ends, gamma, lam):
    """GAE over a buffer of several segments with explicit next-state values."""
    delta = rewards + gamma * next_values - values
    return _discounted_backward(delta, ends, np.zeros(len(delta)), np.full(len(delta), gamma * lam))


def returns_segments(rewards, next_values, ends, gamma):
    return _discounted_backward(rewards, ends, next_values, np.full(len(rewards), gamma))


def buffer_targets(buf, cfg):
    """Advantages and value targets for a full buffer."""
    next_v = np.append(buf.values[1:], 0.0)
    next_v[buf.ends] = buf.next_values[buf.ends]
    adv = gae_segments(buf.rewards, buf.values, next_v, buf.ends, cfg.gamma, cfg.lam)
    if cfg.value_target == "gae":
        ret = adv + buf.values
    else:
        ret = returns_segments(buf.rewards, buf.next_values, buf.ends, cfg.gamma)
    return adv, ret


def normalize_advantages(adv):
    std = adv.std()
    return (adv - adv.mean()) / (std if std > 1e-12 else 1.0)


def value_loss(values_pred, returns):
    """Mean squared error and its gradient with respect to the predictions."""
    diff = np.asarray(values_pred, dtype=float) - np.asarray(returns, dtype=float)
    k = diff.size
    return float(np.mean(diff * diff)), 2.0 * diff / k


def clip_surrogate(logp_new, logp_old, adv, epsilon_clip):
    """Per-sample ``min(rho*A, g(eps, A))`` and its derivative with respect to ``logp_new``."""
    rho = np.exp(np.asarray(logp_new) - np.asarray(logp_old))
    adv = np.asarray(adv, dtype=float)
    g = np.where(adv >= 0.0, (1.0 + epsilon_clip) * adv, (1.0 - epsilon_clip) * adv)
    unclipped = rho * adv
    active = unclipped <= g
    term = np.where(active, unclipped, g)
    return term, np.where(active, unclipped, 0.0)


def ppo_clip_objective(logp_new, logp_old, adv, epsilon_clip, value_term=0.0, c1=0.5):
    """Clipped surrogate averaged over samples, minus ``c1 * value_term`` (to be maximized)."""
    term, _ = clip_surrogate(logp_new, logp_old, adv, epsilon_clip)
    return float(np.mean(term)) - c1 * value_term


@dataclass
class Batch:
    obs: np.ndarray
    raw: np.ndarray
    logp_old: np.ndarray
    adv: np.ndarray
    returns: np.ndarray


@dataclass
class AgentState:
    policy: object
    value: object
    policy_opt: AdamState
    value_opt: AdamState

    @classmethod
    def fresh(cls, policy, value, lr):
        return cls(policy, value, AdamState.for_params(policy, lr=lr), AdamState.for_params(value, lr=lr))


def composite_loss(policy, value, batch, cfg):
    """Negated PPO objective with value regression; returns ``(loss, policy_grads, value_grads, info)``."""
    k = len(batch.adv)
    mean, pcache = forward(policy, batch.obs)
    log_std = policy.log_std
    logp_new = gaussian_logprob(mean, log_std, batch.raw)
    term, dterm = clip_surrogate(logp_new, batch.logp_old, batch.adv, cfg.epsilon_clip)

    v_out, vcache = forward(value, batch.obs)
    v_pred = cfg.value_scale * v_out[:, 0]
    vloss, dv = value_loss(v_pred, batch.returns)
    loss = -float(np.mean(term)) + cfg.c1 * vloss

    # d(-mean term)/d logp_new, then through the Gaussian density
    dlogp = -dterm / k
    inv_var = np.exp(-2.0 * log_std)
    diff = batch.raw - mean
    pgrads, _ = backward(policy, pcache, dlogp[:, None] * diff * inv_var)
    pgrads.log_std = np.sum(dlogp[:, None] * (diff * diff * inv_var - 1.0), axis=0)
    vgrads, _ = backward(value, vcache, (cfg.c1 * cfg.value_scale * dv)[:, None])

    rho = np.exp(logp_new - batch.logp_old)
    info = {
        "value_loss": vloss,
        "clip_fraction": float(np.mean(np.abs(rho - 1.0) > cfg.epsilon_clip)),
        "surrogate": float(np.mean(term)),
    }
    return loss, pgrads, vgrads, info


def _clip_grads(grads, max_norm):
    n = grad_norm(grads)
    if max_norm > 0.0 and n > max_norm:
        s = max_norm / n
        grads = grads.with_arrays([a * s for a in grads.arrays()])
    return grads, n


def train_iteration(agent, rollouts, cfg, rng):
    """Epochs of minibatch Adam updates on one rollout buffer; returns ``(agent, metrics)``."""
    adv, ret = buffer_targets(rollouts, cfg)
    adv = normalize_advantages(adv)
    n = len(adv)
    policy, value = agent.policy, agent.value
    popt, vopt = agent.policy_opt, agent.value_opt
    sums = {"value_loss": 0.0, "clip_fraction": 0.0, "policy_grad_norm": 0.0, "value_grad_norm": 0.0}
    count = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for idx in np.array_split(perm, cfg.minibatches):
            if idx.size == 0:
                continue
            batch = Batch(rollouts.obs[idx], rollouts.raw[idx], rollouts.logp[idx], adv[idx], ret[idx])
            loss, pg, vg, info = composite_loss(policy, value, batch, cfg)
            pg, pn = _clip_grads(pg, cfg.max_grad_norm)
            vg, vn = _clip_grads(vg, cfg.max_grad_norm)
            if not (math.isfinite(loss) and math.isfinite(pn) and math.isfinite(vn)):
                raise NumericFault("non-finite loss or gradient in PPO update",
                                   snapshot={"loss": loss, "policy": policy, "value": value, "batch": batch})
            policy, popt = adam_step(policy, pg, popt)
            value, vopt = adam_step(value, vg, vopt)
            if not (policy.is_finite() and value.is_finite()):
                raise NumericFault("parameters became non-finite", snapshot={"batch": batch})
            sums["value_loss"] += info["value_loss"]
            sums["clip_fraction"] += info["clip_fraction"]
            sums["policy_grad_norm"] += pn
            sums["value_grad_norm"] += vn
            count += 1
    metrics = {k: v / max(count, 1) for k, v in sums.items()}
    metrics["mean_reward"] = float(np.mean(rollouts.rewards))
    rets = rollouts.episode_returns
    metrics["mean_return"] = float(np.mean(rets)) if rets else float("nan")
    metrics["entropy"] = gaussian_entropy(policy.log_std)
    metrics["steps"] = n
    return replace(agent, policy=policy, value=value, policy_opt=popt, value_opt=vopt), metrics


METRIC_COLUMNS = ("iteration", "steps", "mean_reward", "mean_return", "value_loss",
                  "clip_fraction", "entropy", "policy_grad_norm", "value_grad_norm", "stage", "wall_time")


class MetricsLog:
    """Append-only metrics CSV with a config-hash comment line and a header."""

    def __init__(self, path, config_hash, append=False):
        self.path = path
        fresh = not append or not os.path.exists(path) or os.path.getsize(path) == 0
        self._fh = open(path, "a" if append else "w", newline="")
        self._writer = csv.writer(self._fh)
        if fresh:
            self._fh.write(f"# config_hash: {config_hash}\n")
            self._writer.writerow(METRIC_COLUMNS)
            self._fh.flush()

    def write(self, row):
        self._writer.writerow([_fmt(row.get(c, "")) for c in METRIC_COLUMNS])
        self._fh.flush()

    def close(self):
        self._fh.close()


def _fmt(x):
    return repr(float(x)) if isinstance(x, (float, np.floating)) else x


def read_metrics(path):
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))
