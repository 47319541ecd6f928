"""Run configuration: a flat key/value document with dotted sections.

Format, one entry per line::

    # comment
    seed = 2018
    aug.erase_prob = 0.5
    synth.class_counts = 23,135,11,7,22,3,3

Parsing is strict: unknown and duplicate keys are fatal (a silent typo in
an augmentation knob would invalidate an experiment), `seed` is mandatory
(no wall-clock defaults anywhere), and every other key falls back to the
documented default. ``serialize_config`` emits the fully resolved
configuration; parse -> serialize -> parse is a fixpoint, and every CLI
run echoes the resolved document into its output directory so results are
reproducible from that artifact plus the input data.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .augment import AugConfig
from .errors import ConfigError, DermaugError
from .imagedata import SynthSpec
from .meanteacher import MeanTeacherConfig
from .nn import ModelSpec


@dataclass(frozen=True)
class DataPaths:
    """Optional file-based data sources; empty strings mean 'use synthetic'."""

    labels_csv: str = ""
    image_dir: str = ""
    unlabeled_dir: str = ""


@dataclass(frozen=True)
class RunConfig:
    seed: int
    k: int = 5
    output_dir: str = "out"
    image_format: str = "ppm"
    data: DataPaths = field(default_factory=DataPaths)
    synth: SynthSpec = field(default_factory=SynthSpec)
    aug: AugConfig = field(default_factory=AugConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: MeanTeacherConfig = field(default_factory=MeanTeacherConfig)

    def uses_synthetic(self) -> bool:
        return not self.data.labels_csv


# --------------------------------------------------------------------------
# Key registry: key path -> (section attr or None, field name, codec)


def _parse_int(s: str) -> int:
    try:
        return int(s)
    except ValueError:
        raise ValueError(f"not an integer: {s!r}") from None


def _parse_float(s: str) -> float:
    try:
        return float(s)
    except ValueError:
        raise ValueError(f"not a number: {s!r}") from None


def _parse_str(s: str) -> str:
    return s


def _parse_int_tuple(n: int | None):
    def parse(s: str) -> tuple[int, ...]:
        parts = [p.strip() for p in s.split(",") if p.strip()]
        if n is not None and len(parts) != n:
            raise ValueError(f"expected {n} comma-separated integers, got {len(parts)}")
        if not parts:
            raise ValueError("expected at least one integer")
        return tuple(_parse_int(p) for p in parts)

    return parse


def _parse_float_pair(s: str) -> tuple[float, float]:
    parts = [p.strip() for p in s.split(",")]
    if len(parts) != 2:
        raise ValueError(f"expected two comma-separated numbers, got {len(parts)}")
    return (_parse_float(parts[0]), _parse_float(parts[1]))


def _parse_int_pair(s: str) -> tuple[int, int]:
    parts = [p.strip() for p in s.split(",")]
    if len(parts) != 2:
        raise ValueError(f"expected two comma-separated integers, got {len(parts)}")
    return (_parse_int(parts[0]), _parse_int(parts[1]))


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# (section attribute on RunConfig or None for top level, field name, parser)
_KEYS: dict[str, tuple[str | None, str, object]] = {
    "seed": (None, "seed", _parse_int),
    "k": (None, "k", _parse_int),
    "output_dir": (None, "output_dir", _parse_str),
    "image_format": (None, "image_format", _parse_str),
    "data.labels_csv": ("data", "labels_csv", _parse_str),
    "data.image_dir": ("data", "image_dir", _parse_str),
    "data.unlabeled_dir": ("data", "unlabeled_dir", _parse_str),
    "synth.image_size": ("synth", "image_size", _parse_int),
    "synth.class_counts": ("synth", "class_counts", _parse_int_tuple(7)),
    "synth.unlabeled_count": ("synth", "unlabeled_count", _parse_int),
    "aug.crop_size": ("aug", "crop_size", _parse_int),
    "aug.flip_prob": ("aug", "flip_prob", _parse_float),
    "aug.rotation_mode": ("aug", "rotation_mode", _parse_str),
    "aug.erase_prob": ("aug", "erase_prob", _parse_float),
    "aug.erase_area_range": ("aug", "erase_area_range", _parse_float_pair),
    "aug.erase_aspect_range": ("aug", "erase_aspect_range", _parse_float_pair),
    "aug.bc_prob": ("aug", "bc_prob", _parse_float),
    "aug.hair_prob": ("aug", "hair_prob", _parse_float),
    "aug.hair_count_range": ("aug", "hair_count_range", _parse_int_pair),
    "aug.hair_length_range": ("aug", "hair_length_range", _parse_float_pair),
    "aug.hair_thickness_range": ("aug", "hair_thickness_range", _parse_float_pair),
    "aug.hair_darkness_range": ("aug", "hair_darkness_range", _parse_float_pair),
    "aug.hair_curvature_max": ("aug", "hair_curvature_max", _parse_float),
    "model.input_size": ("model", "input_size", _parse_int),
    "model.channels": ("model", "channels", _parse_int_tuple(None)),
    "model.se_reduction": ("model", "se_reduction", _parse_int),
    "model.class_count": ("model", "class_count", _parse_int),
    "train.ema_alpha": ("train", "ema_alpha", _parse_float),
    "train.consistency_max_weight": ("train", "consistency_max_weight", _parse_float),
    "train.rampup_epochs": ("train", "rampup_epochs", _parse_int),
    "train.epochs": ("train", "epochs", _parse_int),
    "train.batch_size_labeled": ("train", "batch_size_labeled", _parse_int),
    "train.batch_size_unlabeled": ("train", "batch_size_unlabeled", _parse_int),
    "train.lr": ("train", "lr", _parse_float),
    "train.momentum": ("train", "momentum", _parse_float),
    "train.ema_granularity": ("train", "ema_granularity", _parse_str),
}

_SECTION_TYPES = {
    "data": DataPaths,
    "synth": SynthSpec,
    "aug": AugConfig,
    "model": ModelSpec,
    "train": MeanTeacherConfig,
}


def parse_config(text: str) -> RunConfig:
    """Parse a config document into a fully validated RunConfig."""
    raw: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        _, _, codec = _KEYS[key]
        try:
            raw[key] = codec(value)
        except ValueError as e:
            raise ConfigError(f"{key}: {e}") from None
    if "seed" not in raw:
        raise ConfigError("seed: mandatory key is missing (runs must be reproducible)")
    return _build(raw)


def _build(raw: dict[str, object]) -> RunConfig:
    top: dict[str, object] = {}
    sections: dict[str, dict[str, object]] = {name: {} for name in _SECTION_TYPES}
    for key, value in raw.items():
        section, attr, _ = _KEYS[key]
        if section is None:
            top[attr] = value
        else:
            sections[section][attr] = value
    try:
        parts = {name: typ(**sections[name]) for name, typ in _SECTION_TYPES.items()}
        cfg = RunConfig(**top, **parts)
    except DermaugError as e:
        raise ConfigError(str(e)) from None
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if cfg.k < 2:
        raise ConfigError(f"k: need at least 2 folds, got {cfg.k}")
    if cfg.image_format not in ("ppm", "png"):
        raise ConfigError(f"image_format: must be 'ppm' or 'png', got {cfg.image_format!r}")
    if cfg.aug.crop_size != cfg.model.input_size:
        raise ConfigError(
            f"aug.crop_size: must equal model.input_size "
            f"({cfg.aug.crop_size} != {cfg.model.input_size})"
        )
    if cfg.uses_synthetic():
        if cfg.synth.image_size < cfg.aug.crop_size:
            raise ConfigError(
                f"synth.image_size: {cfg.synth.image_size} smaller than "
                f"aug.crop_size {cfg.aug.crop_size}"
            )
        try:
            cfg.synth.check_fold_feasibility(cfg.k)
        except DermaugError as e:
            raise ConfigError(f"synth.class_counts: {e}") from None


def serialize_config(cfg: RunConfig) -> str:
    """Emit the fully resolved configuration, one key per line."""
    lines = []
    for key, (section, attr, _) in _KEYS.items():
        holder = cfg if section is None else getattr(cfg, section)
        lines.append(f"{key} = {_fmt(getattr(holder, attr))}")
    return "\n".join(lines) + "\n"


def default_config_text(seed: int = 2018) -> str:
    """The documented defaults, as a ready-to-edit config document."""
    return serialize_config(RunConfig(seed=seed))


def with_output_dir(cfg: RunConfig, output_dir: str) -> RunConfig:
    return replace(cfg, output_dir=output_dir)
