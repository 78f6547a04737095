"""Run configuration: a YAML tree mapped onto dataclasses, with strict key checking."""
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
import yaml

from tiltrl.dynamics import DT, PlatformParams
from tiltrl.env import CurriculumStage, EpisodeConfig, RewardWeights, default_schedule
from tiltrl.ppo import PpoConfig


class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""


@dataclass
class EpisodeSection:
    max_steps: int = 1200
    radius: float = 5.0
    attitude_limit_deg: float = 90.0
    crash_penalty: float = -10.0
    action_scale: float = 0.1
    action_basis: str = "wrench"
    augment: bool = False

    def __post_init__(self):
        if self.max_steps <= 0 or self.radius <= 0:
            raise ConfigError("max_steps and radius must be positive")
        if not 0.0 < self.attitude_limit_deg <= 180.0:
            raise ConfigError("attitude_limit_deg must lie in (0, 180]")
        if self.action_basis not in ("wrench", "rotor"):
            raise ConfigError("action_basis must be 'wrench' or 'rotor'")
        if self.action_scale <= 0:
            raise ConfigError("action_scale must be positive")


@dataclass
class TrainingSection:
    seed: int = 0
    total_steps: int = 500_000
    checkpoint_every: int = 10
    init_std: float = 0.1
    out_gain: float = 0.01
    final_stage: int = -1
    curriculum_window: int = 10

    def __post_init__(self):
        if self.total_steps <= 0 or self.checkpoint_every <= 0 or self.curriculum_window <= 0:
            raise ConfigError("total_steps, checkpoint_every and curriculum_window must be positive")
        if not 0.01 <= self.init_std <= 1.0:
            raise ConfigError("init_std must lie in [0.01, 1]")


BUDGET_KEYS = ("total_steps", "final_stage", "checkpoint_every")


def _digest(tree):
    blob = json.dumps(tree, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


_STAGE_KEYS = {"name", "pos_range", "vel_range", "angvel_range", "attitude_cone_deg", "yaw_range_deg",
               "alphas_deg", "noise_frac", "wind_max", "threshold_frac"}


def _stage_from_dict(index, d):
    unknown = set(d) - _STAGE_KEYS
    if unknown:
        raise ConfigError(f"unknown curriculum stage keys: {sorted(unknown)}")
    try:
        return CurriculumStage(
            index, str(d.get("name", f"stage-{index}")), float(d["pos_range"]), float(d["vel_range"]),
            float(d["angvel_range"]), math.radians(float(d["attitude_cone_deg"])),
            math.radians(float(d["yaw_range_deg"])),
            tuple(math.radians(float(a)) for a in d.get("alphas_deg", [0.0])),
            float(d.get("noise_frac", 0.0)), float(d.get("wind_max", 0.0)), float(d.get("threshold_frac", 0.9)))
    except KeyError as exc:
        raise ConfigError(f"curriculum stage {index} is missing {exc.args[0]!r}") from None
    except ValueError as exc:
        raise ConfigError(f"curriculum stage {index}: {exc}") from None


def _stage_to_dict(stage):
    return {"name": stage.name, "pos_range": stage.pos_range, "vel_range": stage.vel_range,
            "angvel_range": stage.angvel_range, "attitude_cone_deg": math.degrees(stage.attitude_cone),
            "yaw_range_deg": math.degrees(stage.yaw_range), "alphas_deg": [math.degrees(a) for a in stage.alphas],
            "noise_frac": stage.noise_frac, "wind_max": stage.wind_max, "threshold_frac": stage.threshold_frac}


@dataclass
class RunConfig:
    platform: dict = field(default_factory=dict)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    reward: RewardWeights = field(default_factory=RewardWeights)
    episode: EpisodeSection = field(default_factory=EpisodeSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    curriculum: list = field(default_factory=default_schedule)

    def platform_params(self):
        return PlatformParams(**self.platform)

    def episode_config(self):
        e = self.episode
        return EpisodeConfig(dt=DT, max_steps=e.max_steps, radius=e.radius,
                             attitude_limit=math.radians(e.attitude_limit_deg), crash_penalty=e.crash_penalty,
                             weights=self.reward, action_scale=e.action_scale, augment=e.augment)

    def schedule(self):
        """Curriculum truncated at ``training.final_stage`` (negative counts from the end)."""
        last = self.training.final_stage % len(self.curriculum)
        return self.curriculum[:last + 1]

    def to_dict(self):
        platform = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.platform.items()}
        return {
            "platform": platform,
            "ppo": dataclasses.asdict(self.ppo),
            "reward": dataclasses.asdict(self.reward),
            "episode": dataclasses.asdict(self.episode),
            "training": dataclasses.asdict(self.training),
            "curriculum": [_stage_to_dict(s) for s in self.curriculum],
        }

    def hash(self):
        return _digest(self.to_dict())

    def resume_key(self):
        """Hash of everything except the budget fields, so a run can be extended on resume."""
        d = self.to_dict()
        for key in BUDGET_KEYS:
            d["training"].pop(key)
        return _digest(d)

    def dump(self, path):
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)


def _section(cls, data, name):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section {name!r}: {exc}") from None


def config_from_dict(data):
    data = {} if data is None else data
    if not isinstance(data, dict):
        raise ConfigError("configuration root must be a mapping")
    unknown = set(data) - {"platform", "ppo", "reward", "episode", "training", "curriculum"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    platform = data.get("platform") or {}
    if not isinstance(platform, dict):
        raise ConfigError("section 'platform' must be a mapping")
    names = {f.name for f in dataclasses.fields(PlatformParams)}
    unknown = set(platform) - names
    if unknown:
        raise ConfigError(f"unknown keys in 'platform': {sorted(unknown)}")
    try:
        PlatformParams(**platform)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section 'platform': {exc}") from None
    curriculum = data.get("curriculum")
    if curriculum is None:
        stages = default_schedule()
    else:
        if not isinstance(curriculum, list) or not curriculum:
            raise ConfigError("'curriculum' must be a non-empty list of stages")
        stages = [_stage_from_dict(i, d) for i, d in enumerate(curriculum)]
    return RunConfig(
        platform=dict(platform),
        ppo=_section(PpoConfig, data.get("ppo"), "ppo"),
        reward=_section(RewardWeights, data.get("reward"), "reward"),
        episode=_section(EpisodeSection, data.get("episode"), "episode"),
        training=_section(TrainingSection, data.get("training"), "training"),
        curriculum=stages,
    )


def load_config(path):
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML in {path}: {exc}") from None
    return config_from_dict(data)
