"""Run configuration: ``key=value`` text files with ``#`` comments."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace

from .policy import HyperParams
from .worldsim import SceneProfile

OBJECTIVES = ("pg", "idm", "simclr", "cpc")
REWARD_MODES = ("rnd", "crl")
_PATH_KEYS = ("out_dir",)


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        self.key = key
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")


@dataclass
class RunConfig:
    # PPO / GAE
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.1
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    ppo_epochs: int = 4
    ppo_minibatches: int = 2
    lr: float = 2.5e-4
    # representation and reward learners
    idm_lr: float = 2.5e-4
    reward_lr: float = 1e-4
    idm_steps: int = 8
    idm_epochs: int = 4
    reward_epochs: int = 4
    contrast_temperature: float = 0.07
    momentum: float = 0.99
    rnd_encoder: str = "momentum"
    # collection
    window: int = 64
    num_envs: int = 8
    total_frames: int = 200_000
    max_episode_steps: int = 256
    reward_mode: str = "rnd"
    objectives: tuple = ("pg", "idm")
    alp: bool = True
    seed: int = 0
    # world
    scene_seed_base: int = 0
    n_train_scenes: int = 25
    n_test_scenes: int = 5
    scene_min_size: float = 6.0
    scene_max_size: float = 9.0
    image_size: int = 64
    channels: tuple = (8, 16, 32)
    feature_dim: int = 128
    hidden_dim: int = 128
    # labeled-data sampling
    label_events: int = 10
    label_budget: int = 10
    # outputs
    checkpoint_every: int = 0
    log_trajectories: bool = True
    out_dir: str = "runs/alp"
    # downstream
    finetune_task: str = "segmentation"
    finetune_epochs: int = 20
    finetune_lr: float = 1e-3
    finetune_batch: int = 16
    eval_train_frames: int = 50
    eval_test_frames: int = 100

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.reward_mode not in REWARD_MODES:
            raise ConfigError(f"reward_mode must be one of {REWARD_MODES}", "reward_mode")
        if self.rnd_encoder not in ("momentum", "random"):
            raise ConfigError("rnd_encoder must be 'momentum' or 'random'", "rnd_encoder")
        bad = [o for o in self.objectives if o not in OBJECTIVES]
        if bad:
            raise ConfigError(f"unknown objectives {bad}", "objectives")
        if self.alp and not ({"pg", "idm"} & set(self.objectives)):
            raise ConfigError("ALP mode needs at least one of pg, idm", "objectives")
        if self.finetune_task not in ("segmentation", "depth", "presence"):
            raise ConfigError("unknown finetune_task", "finetune_task")
        try:
            self.hyperparams()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def hyperparams(self) -> HyperParams:
        return HyperParams(
            gamma=self.gamma, gae_lambda=self.gae_lambda, clip_eps=self.clip_eps,
            entropy_coef=self.entropy_coef, value_coef=self.value_coef, max_grad_norm=self.max_grad_norm,
            ppo_epochs=self.ppo_epochs, ppo_minibatches=self.ppo_minibatches, lr=self.lr,
            idm_lr=self.idm_lr, reward_lr=self.reward_lr, idm_steps=self.idm_steps,
            idm_epochs=self.idm_epochs, window=self.window, num_envs=self.num_envs,
            total_frames=self.total_frames)

    def profile(self) -> SceneProfile:
        return SceneProfile(min_size=self.scene_min_size, max_size=self.scene_max_size,
                            n_train=self.n_train_scenes, n_test=self.n_test_scenes,
                            seed_base=self.scene_seed_base)

    def with_(self, **kw) -> "RunConfig":
        return replace(self, **kw)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _parse_value(name: str, text: str):
    default = _FIELDS[name].default
    if isinstance(default, bool):
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(default, int):
        return int(float(text)) if "e" in text.lower() else int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        items = tuple(v.strip() for v in text.split(",") if v.strip())
        if default and isinstance(default[0], int):
            return tuple(int(v) for v in items)
        return items
    return text


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str) -> RunConfig:
    """Parse ``key=value`` lines; absent keys keep their defaults."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {raw.strip()!r}", line=lineno)
        key, _, val = (s.strip() for s in line.partition("="))
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}", key=key, line=lineno)
        try:
            values[key] = _parse_value(key, val)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}", key=key, line=lineno) from exc
    try:
        return RunConfig(**values)
    except ConfigError as exc:
        if exc.key in values:
            lines = [i for i, raw in enumerate(text.splitlines(), 1) if raw.split("=")[0].strip() == exc.key]
            raise ConfigError(str(exc), key=exc.key, line=lines[-1] if lines else None) from exc
        raise


def serialize_config(cfg: RunConfig) -> str:
    return "".join(f"{f.name}={_format_value(getattr(cfg, f.name))}\n" for f in fields(cfg))


def config_hash(cfg: RunConfig) -> str:
    """Hash of every setting except output paths."""
    body = "".join(f"{f.name}={_format_value(getattr(cfg, f.name))}\n"
                   for f in fields(cfg) if f.name not in _PATH_KEYS)
    return hashlib.sha256(body.encode("utf-8")).hexdigest()[:16]
