"""Model, training and dataset configuration.

Configs are plain dataclasses plus a flat ``key=value`` text format used by the
CLI.  Parsing is strict: unknown keys and type errors are reported by name so a
bad config fails loudly instead of silently training the wrong model.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

VARIANTS = ("full", "no_detail", "no_interactive", "vq_detail")

# Stage-2 rate weights; the index into this grid identifies a rate point.
LAMBDA_GRID = (5.8, 8.5, 16.0, 28.0)

# Sentinel lambda_index for checkpoints that are not tied to a rate point
# (stage-0 / stage-1 models).
LAMBDA_INDEX_NONE = 255


class ConfigError(ValueError):
    """Raised for unknown keys, bad values or inconsistent config files."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyper-parameters of the dual-branch codec.

    The window geometry (16x16 grid tokens + 32 one-dimensional tokens per
    window, 16-pixel patches) is part of the bitstream format and is not
    configurable.
    """

    embed_dim: int = 128           # width of the embedded grid / semantic tokens
    detail_dim: int = 32           # width of the detail bottleneck
    num_stages: int = 4            # encoder stages; decoder mirrors
    num_heads: int = 4
    mlp_ratio: float = 2.0
    detail_window: int = 8         # shifted-window size on the token grid
    codebook_size: int = 4096      # semantic VQ codebook entries
    detail_codebook_size: int = 256  # vq_detail ablation codebook
    sym_max: int = 127             # SQ symbols clipped to [-sym_max, sym_max]
    entropy_hidden: int = 48       # context-model hidden width
    gen_base: int = 64             # generator width at the coarsest scale
    aux_base: int = 64             # auxiliary-encoder width at the coarsest scale
    variant: str = "full"

    # Fixed format constants (not settable via config files).
    patch: int = 16
    window: int = 16               # window side in grid tokens
    num_semantic_tokens: int = 32

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError("embed_dim must be divisible by num_heads")
        if self.window % self.detail_window != 0:
            raise ConfigError("detail_window must divide the 16-token window")
        if self.sym_max < 1 or self.sym_max > 32767:
            raise ConfigError("sym_max out of range")

    @property
    def window_pixels(self) -> int:
        return self.patch * self.window  # 256

    @property
    def tokens_per_window(self) -> int:
        return self.window * self.window  # 256

    @property
    def seq_len(self) -> int:
        # grid tokens + 1-D tokens per window
        return self.tokens_per_window + self.num_semantic_tokens  # 288


@dataclass
class TrainConfig:
    """One training stage (0 = auxiliary pretrain, 1 = latent alignment,
    2 = end-to-end pixel fine-tune)."""

    stage: int = 0
    steps: int = 1000
    batch_size: int = 8
    lr: float | None = None        # None -> stage default (1e-3 / 4e-5 / 2e-5)
    seed: int = 0
    crop_size: int = 256
    crop_size_late: int | None = None   # optional stage-2 crop switch
    crop_switch_step: int | None = None

    # Rate weight. Stage 1 follows the warmup/ramp/hold schedule below; stage 2
    # uses the fixed value `lam` (one model per rate point).
    lam: float | None = None
    lambda_index: int = LAMBDA_INDEX_NONE
    warmup_value: float = 0.001
    warmup_steps: int = 10_000
    ramp_start: float = 2.0
    ramp_end: float = 24.0
    ramp_steps: int = 90_000
    hold_value: float = 24.0
    schedule_scale: float = 1.0    # multiplies warmup_steps and ramp_steps

    beta: float = 0.25             # codebook commitment weight
    lambda_adv: float = 0.8        # adversarial weight when the plug-in is on
    adversarial: bool = False
    perceptual: str = "pyramid"    # "pyramid" | "none"
    variant: str = "full"

    init_checkpoint: str | None = None  # prerequisite stage checkpoint
    out_dir: str = "runs/stage"
    checkpoint_every: int = 500
    log_every: int = 1

    def __post_init__(self):
        if self.stage not in (0, 1, 2):
            raise ConfigError(f"stage must be 0, 1 or 2, got {self.stage}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.crop_size % 16 != 0:
            raise ConfigError("crop_size must be a multiple of 16")
        if self.crop_size_late is not None and self.crop_size_late % 16 != 0:
            raise ConfigError("crop_size_late must be a multiple of 16")
        if self.lam is not None and self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.perceptual not in ("pyramid", "none"):
            raise ConfigError("perceptual must be 'pyramid' or 'none'")
        if self.stage == 2 and self.lam is None:
            raise ConfigError("stage 2 requires an explicit lam (rate weight)")

    @property
    def effective_lr(self) -> float:
        if self.lr is not None:
            return self.lr
        return {0: 1e-3, 1: 4e-5, 2: 2e-5}[self.stage]

    @property
    def effective_warmup_steps(self) -> int:
        return max(0, round(self.warmup_steps * self.schedule_scale))

    @property
    def effective_ramp_steps(self) -> int:
        return max(1, round(self.ramp_steps * self.schedule_scale))


@dataclass
class DatasetSpec:
    """Where training/eval images come from and how they are cropped.

    ``root`` is either an image directory (PNG/PPM) or the synthetic sentinel
    ``synthetic:<count>[:<size>]`` for procedurally generated toy images.
    """

    root: str = "synthetic:64"
    crop_size: int = 256
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0
    max_images: int | None = None

    def __post_init__(self):
        if self.crop_size % 16 != 0:
            raise ConfigError("crop_size must be a multiple of 16")
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigError(f"split ratios must sum to 1, got {self.split}")
        if any(s < 0 for s in self.split):
            raise ConfigError("split ratios must be non-negative")


# -- flat key=value config files ----------------------------------------------

_MODEL_PREFIX = "model."
_DATA_PREFIX = "data."

_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _coerce(name: str, raw: str, typ) -> object:
    raw = raw.strip()
    origin = getattr(typ, "__origin__", None)
    # Optional[X] and X | None
    args = getattr(typ, "__args__", ())
    if raw.lower() == "none":
        if type(None) in args or typ is type(None):
            return None
        raise ConfigError(f"key {name!r} does not accept 'none'")
    if args and type(None) in args:
        typ = next(a for a in args if a is not type(None))
        origin = getattr(typ, "__origin__", None)
    if typ is bool:
        low = raw.lower()
        if low in _BOOL_TRUE:
            return True
        if low in _BOOL_FALSE:
            return False
        raise ConfigError(f"key {name!r} expects a boolean, got {raw!r}")
    if typ is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"key {name!r} expects an integer, got {raw!r}") from None
    if typ is float:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"key {name!r} expects a number, got {raw!r}") from None
    if typ is str:
        return raw
    if origin is tuple:
        parts = [p for p in raw.replace(",", " ").split() if p]
        elem = typ.__args__[0]
        return tuple(_coerce(name, p, elem) for p in parts)
    raise ConfigError(f"key {name!r} has unsupported type {typ!r}")


def _field_types(cls) -> dict[str, object]:
    import typing

    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def parse_config_text(text: str) -> tuple[TrainConfig, ModelConfig, DatasetSpec]:
    """Parse a flat key=value config.

    Bare keys configure training; ``model.*`` keys the architecture and
    ``data.*`` keys the dataset.  Blank lines and ``#`` comments are ignored.
    Unknown keys raise :class:`ConfigError` naming the offending key.
    """
    train_kw: dict[str, object] = {}
    model_kw: dict[str, object] = {}
    data_kw: dict[str, object] = {}
    train_types = _field_types(TrainConfig)
    model_types = _field_types(ModelConfig)
    data_types = _field_types(DatasetSpec)
    # Format constants are fixed; offering them as knobs would break bitstreams.
    for locked in ("patch", "window", "num_semantic_tokens"):
        model_types.pop(locked, None)

    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key.startswith(_MODEL_PREFIX):
            name = key[len(_MODEL_PREFIX):]
            if name not in model_types:
                raise ConfigError(f"unknown config key {key!r}")
            model_kw[name] = _coerce(key, raw, model_types[name])
        elif key.startswith(_DATA_PREFIX):
            name = key[len(_DATA_PREFIX):]
            if name not in data_types:
                raise ConfigError(f"unknown config key {key!r}")
            data_kw[name] = _coerce(key, raw, data_types[name])
        else:
            if key not in train_types:
                raise ConfigError(f"unknown config key {key!r}")
            train_kw[key] = _coerce(key, raw, train_types[key])

    train = TrainConfig(**train_kw)
    if "variant" not in model_kw:
        model_kw["variant"] = train.variant
    model = ModelConfig(**model_kw)
    if model.variant != train.variant:
        raise ConfigError(
            f"variant mismatch: model.variant={model.variant!r} vs variant={train.variant!r}"
        )
    data = DatasetSpec(**data_kw)
    return train, model, data


def load_config(path: str | Path) -> tuple[TrainConfig, ModelConfig, DatasetSpec]:
    return parse_config_text(Path(path).read_text())


def dump_effective_config(train: TrainConfig, model: ModelConfig, data: DatasetSpec) -> str:
    """Render the fully resolved configuration as key=value lines."""
    out = []
    for f in fields(TrainConfig):
        out.append(f"{f.name}={getattr(train, f.name)}")
    out.append(f"effective_lr={train.effective_lr}")
    out.append(f"effective_warmup_steps={train.effective_warmup_steps}")
    out.append(f"effective_ramp_steps={train.effective_ramp_steps}")
    for f in fields(ModelConfig):
        out.append(f"model.{f.name}={getattr(model, f.name)}")
    for f in fields(DatasetSpec):
        out.append(f"data.{f.name}={getattr(data, f.name)}")
    return "\n".join(out) + "\n"


def model_config_hash(cfg: ModelConfig) -> str:
    """Stable hash of the architecture; stored in checkpoints and validated on load."""
    payload = json.dumps(dataclasses.asdict(cfg), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]
