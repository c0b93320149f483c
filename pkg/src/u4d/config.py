"""Flat `section.key = value` run configuration.

One file drives every subcommand; `#` starts a comment, unknown keys are
collected rather than fatal, and dump(load(f)) reparses to an equal
config so runs stay diffable.
"""

from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .range_geometry import PROFILES


def _int(s):
    return int(s, 10)


def _float(s):
    return float(s)


def _bool(s):
    low = s.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(s)


def _int_tuple(s):
    return tuple(int(part.strip(), 10) for part in s.split(","))


@dataclass
class RunConfig:
    profile: str
    seed: int = 0
    n_frames: int = 6
    n_boxes: int = 4
    n_poles: int = 6
    topk_ratio: float = 0.2
    window_len: int = 2
    level_channels: tuple = (8, 16)
    blocks_per_level: int = 1
    time_dim: int = 8
    train_steps: int = 200
    train_batch: int = 2
    train_lr: float = 0.002
    train_warmup: int = 20
    ema_decay: float = 0.995
    ema_every: int = 10
    lam: float = 1.0
    gamma_reg: float = 0.01
    weight_decay: float = 0.0
    checkpoint_every: int = 0
    sample_steps: int = 24
    sample_length: int = 2
    sample_deterministic: bool = False
    eval_extent: float = 40.0
    eval_bins: int = 32
    eval_intervals: tuple = (1,)
    render_size: int = 128
    unknown_keys: tuple = field(default=(), compare=False)


# config key -> (RunConfig attribute, value parser)
SCHEMA = {
    "run.profile": ("profile", str),
    "run.seed": ("seed", _int),
    "synth.n_frames": ("n_frames", _int),
    "synth.n_boxes": ("n_boxes", _int),
    "synth.n_poles": ("n_poles", _int),
    "topk.ratio": ("topk_ratio", _float),
    "window.length": ("window_len", _int),
    "model.level_channels": ("level_channels", _int_tuple),
    "model.blocks_per_level": ("blocks_per_level", _int),
    "model.time_dim": ("time_dim", _int),
    "train.steps": ("train_steps", _int),
    "train.batch": ("train_batch", _int),
    "train.lr": ("train_lr", _float),
    "train.warmup": ("train_warmup", _int),
    "train.ema_decay": ("ema_decay", _float),
    "train.ema_every": ("ema_every", _int),
    "train.lam": ("lam", _float),
    "train.gamma_reg": ("gamma_reg", _float),
    "train.weight_decay": ("weight_decay", _float),
    "train.checkpoint_every": ("checkpoint_every", _int),
    "diffusion.steps": ("sample_steps", _int),
    "sample.length": ("sample_length", _int),
    "sample.deterministic": ("sample_deterministic", _bool),
    "eval.extent": ("eval_extent", _float),
    "eval.bins": ("eval_bins", _int),
    "eval.intervals": ("eval_intervals", _int_tuple),
    "render.size": ("render_size", _int),
}


def _validate(cfg: RunConfig):
    if cfg.profile not in PROFILES:
        raise ConfigError(
            f"run.profile must be one of {sorted(PROFILES)}, got {cfg.profile!r}")
    if not 0.0 < cfg.topk_ratio <= 1.0:
        raise ConfigError(f"topk.ratio must be in (0, 1], got {cfg.topk_ratio}")
    positive = [
        ("synth.n_frames", cfg.n_frames),
        ("window.length", cfg.window_len),
        ("model.blocks_per_level", cfg.blocks_per_level),
        ("train.steps", cfg.train_steps),
        ("train.batch", cfg.train_batch),
        ("train.warmup", cfg.train_warmup),
        ("train.ema_every", cfg.ema_every),
        ("diffusion.steps", cfg.sample_steps),
        ("sample.length", cfg.sample_length),
        ("eval.bins", cfg.eval_bins),
    ]
    for key, val in positive:
        if val < 1:
            raise ConfigError(f"{key} must be at least 1, got {val}")
    if cfg.seed < 0:
        raise ConfigError(f"run.seed must be non-negative, got {cfg.seed}")
    if cfg.train_lr <= 0.0:
        raise ConfigError(f"train.lr must be positive, got {cfg.train_lr}")
    if cfg.eval_extent <= 0.0:
        raise ConfigError(f"eval.extent must be positive, got {cfg.eval_extent}")
    if not cfg.level_channels or any(c < 1 for c in cfg.level_channels):
        raise ConfigError("model.level_channels needs positive channel counts")
    if any(k < 1 for k in cfg.eval_intervals):
        raise ConfigError("eval.intervals entries must be at least 1")
    if cfg.render_size < 2:
        raise ConfigError(f"render.size must be at least 2, got {cfg.render_size}")


def load_config(path) -> RunConfig:
    values = {}
    unknown = []
    with open(path, encoding="utf-8") as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, eq, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if not eq or "." not in key or not val:
                raise ConfigError(
                    f"{path}: line {ln}: expected 'section.key = value'")
            if key not in SCHEMA:
                unknown.append(key)
                continue
            attr, parse = SCHEMA[key]
            try:
                values[attr] = parse(val)
            except ValueError:
                raise ConfigError(
                    f"{path}: line {ln}: {key} got unparseable value {val!r}"
                ) from None
    if "profile" not in values:
        raise ConfigError(f"{path}: missing required key run.profile")
    cfg = RunConfig(unknown_keys=tuple(unknown), **values)
    _validate(cfg)
    return cfg


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(cfg: RunConfig, path=None) -> str:
    lines = [f"{key} = {_format(getattr(cfg, attr))}"
             for key, (attr, _) in SCHEMA.items()]
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text
