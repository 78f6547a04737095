"""Curriculum PPO training loop with metrics logging, checkpoints and exact resume."""
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from tiltrl.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from tiltrl.config import ConfigError
from tiltrl.env import HoverReference, curriculum_advance, rollout, stage_threshold
from tiltrl.net import POLICY_LAYOUT, VALUE_LAYOUT, mlp_init
from tiltrl.ppo import AgentState, MetricsLog, NumericFault, train_iteration


@dataclass
class TrainState:
    agent: AgentState
    rng: np.random.Generator
    iteration: int = 0
    steps: int = 0
    stage: int = 0
    history: list = field(default_factory=list)


def init_agent(cfg):
    t = cfg.training
    policy = mlp_init(10 * t.seed + 1, POLICY_LAYOUT, log_std_init=math.log(t.init_std), out_gain=t.out_gain)
    value = mlp_init(10 * t.seed + 2, VALUE_LAYOUT, out_gain=t.out_gain)
    return AgentState.fresh(policy, value, cfg.ppo.lr)


def fresh_state(cfg):
    return TrainState(init_agent(cfg), np.random.default_rng(cfg.training.seed))


def to_checkpoint(state, cfg):
    return Checkpoint(state.agent, state.iteration, state.steps, state.stage, cfg.training.seed,
                      state.rng.bit_generator.state, list(state.history), cfg.hash(),
                      {"resume_key": cfg.resume_key()})


def from_checkpoint(ckpt):
    rng = np.random.default_rng()
    rng.bit_generator.state = ckpt.rng_state
    return TrainState(ckpt.agent, rng, ckpt.iteration, ckpt.steps, ckpt.stage, list(ckpt.history))


def iteration_seeds(seed, iteration, n_envs):
    """Independent rollout streams, a pure function of (seed, iteration, env index)."""
    return [np.random.SeedSequence([seed, iteration, e]) for e in range(n_envs)]


def steps_per_iteration(cfg):
    return cfg.ppo.n_envs * cfg.ppo.steps_per_env


class Trainer:
    """Owns the static pieces of a run: platform, hover reference, action map and schedule."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.params = cfg.platform_params()
        self.episode = cfg.episode_config()
        self.hover = HoverReference(self.params)
        self.amap = self.hover.action_map(cfg.episode.action_scale, cfg.episode.action_basis)
        self.schedule = cfg.schedule()
        self.thresholds = [stage_threshold(s, self.episode, self.hover) for s in self.schedule]

    def iterate(self, state):
        """One rollout plus PPO update; returns the new state and the metrics row."""
        cfg = self.cfg
        stage = self.schedule[state.stage]
        seeds = iteration_seeds(cfg.training.seed, state.iteration, cfg.ppo.n_envs)
        buf = rollout(state.agent.policy, state.agent.value, self.params, self.episode, stage, seeds,
                      cfg.ppo.steps_per_env, cfg.ppo.value_scale, self.hover, self.amap)
        agent, metrics = train_iteration(state.agent, buf, cfg.ppo, state.rng)
        row = dict(metrics)
        for key in ("mean_reward", "value_loss", "clip_fraction", "entropy"):
            if not math.isfinite(row[key]):
                raise NumericFault(f"non-finite metric {key}", snapshot={"iteration": state.iteration})
        steps = state.steps + steps_per_iteration(cfg)
        row.update(iteration=state.iteration, steps=steps, stage=state.stage)
        history = state.history + [metrics["mean_return"]]
        nxt = curriculum_advance(history, stage, self.schedule, self.thresholds[state.stage],
                                 cfg.training.curriculum_window)
        stage_index = nxt.index if nxt is not stage else state.stage
        if stage_index != state.stage:
            history = []
        new = TrainState(agent, state.rng, state.iteration + 1, steps, stage_index, history)
        return new, row


def train(cfg, out_dir, resume=None, max_iterations=None, progress=None):
    """Run (or continue) training until the step budget or ``max_iterations`` is used up.

    Writes ``metrics.csv``, ``config.yaml``, periodic ``ckpt_NNNNNN.ckpt``
    files and ``final.ckpt`` to ``out_dir``. On a numeric fault the last
    good state is saved to ``fault.ckpt`` before the error propagates.
    """
    os.makedirs(out_dir, exist_ok=True)
    trainer = Trainer(cfg)
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.extra.get("resume_key") != cfg.resume_key():
            raise ConfigError("checkpoint was written under a different configuration "
                              "(only total_steps, final_stage and checkpoint_every may change on resume)")
        state = from_checkpoint(ckpt)
        if state.stage >= len(trainer.schedule):
            raise ConfigError(f"checkpoint stage {state.stage} lies beyond final_stage")
    else:
        state = fresh_state(cfg)
    cfg.dump(os.path.join(out_dir, "config.yaml"))
    log = MetricsLog(os.path.join(out_dir, "metrics.csv"), cfg.hash(), append=resume is not None)
    per_iter = steps_per_iteration(cfg)
    done = 0
    t0 = time.perf_counter()
    try:
        while state.steps + per_iter <= cfg.training.total_steps:
            if max_iterations is not None and done >= max_iterations:
                break
            try:
                new, row = trainer.iterate(state)
            except NumericFault:
                save_checkpoint(os.path.join(out_dir, "fault.ckpt"), to_checkpoint(state, cfg))
                raise
            state = new
            done += 1
            row["wall_time"] = time.perf_counter() - t0
            log.write(row)
            if progress is not None:
                progress(row)
            if state.iteration % cfg.training.checkpoint_every == 0:
                save_checkpoint(os.path.join(out_dir, f"ckpt_{state.iteration:06d}.ckpt"), to_checkpoint(state, cfg))
    finally:
        log.close()
    save_checkpoint(os.path.join(out_dir, "final.ckpt"), to_checkpoint(state, cfg))
    return state
