"""Label ingestion, normalization statistics, and synthetic dataset generation.

The ground-truth CSV follows the ISIC-2018 challenge layout (``image`` id
column plus seven per-class columns), so real challenge files load without
modification. Soft rows are accepted: any row whose values sum to 1 within
1e-6 parses, which lets cached between-class-mixed labels round-trip.

The synthetic generator renders class-colored textured ellipses on a
skin-toned background. It exists so the full train/predict/evaluate loop is
exercisable in seconds while preserving the strong class imbalance of real
dermoscopy collections.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import codecs
from .errors import DataError, LabelCsvError
from .rng import RngStream
from .types import CLASS_NAMES, NUM_CLASSES, Dataset, Image, NormStats, Sample, SoftLabel

LABELS_HEADER = "image," + ",".join(CLASS_NAMES)

#: Constant channels get their std floored here to keep division sane.
STD_FLOOR = 1e-6

_SYNTH_STREAM = 101


# ---------------------------------------------------------------------------
# Ground-truth / prediction CSV


def load_labels_csv(text: str) -> list[tuple[str, SoftLabel]]:
    """Parse an ISIC-style ground-truth CSV into (id, label) pairs.

    Rows are validated strictly: the header must match ``LABELS_HEADER``
    exactly, every row needs an id plus seven numeric fields, and the
    fields must sum to 1 within 1e-6. Accepted rows are renormalized to
    unit sum before constructing the label.
    """
    lines = text.splitlines()
    if not lines:
        raise LabelCsvError("line 1: empty file, expected header")
    if lines[0].strip() != LABELS_HEADER:
        raise LabelCsvError(
            f"line 1: bad header {lines[0].strip()!r}, expected {LABELS_HEADER!r}"
        )
    out: list[tuple[str, SoftLabel]] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 1 + NUM_CLASSES:
            raise LabelCsvError(
                f"line {lineno}: expected {1 + NUM_CLASSES} fields, got {len(parts)}"
            )
        sample_id = parts[0].strip()
        if not sample_id:
            raise LabelCsvError(f"line {lineno}: empty image id")
        try:
            vals = np.array([float(v) for v in parts[1:]])
        except ValueError as e:
            raise LabelCsvError(f"line {lineno}: non-numeric field ({e})") from None
        if np.any(vals < 0) or np.any(vals > 1):
            raise LabelCsvError(f"line {lineno}: values outside [0, 1]")
        s = float(vals.sum())
        if abs(s - 1.0) > 1e-6:
            raise LabelCsvError(f"line {lineno}: values sum to {s!r}, expected 1 +- 1e-6")
        out.append((sample_id, SoftLabel(vals / s)))
    return out


def dump_labels_csv(rows: list[tuple[str, SoftLabel]]) -> str:
    """Serialize (id, label) pairs in the same schema load_labels_csv reads."""
    lines = [LABELS_HEADER]
    for sample_id, label in rows:
        fields = ",".join(format(v, ".17g") for v in label.probs)
        lines.append(f"{sample_id},{fields}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Normalization


def compute_norm_stats(dataset: Dataset) -> NormStats:
    """Per-channel mean/std over every pixel of every image in the dataset.

    Population statistics (ddof=0); std is floored at ``STD_FLOOR``.
    Compute these on the training split only, never on held-out data.
    """
    if len(dataset) == 0:
        raise DataError("cannot compute normalization stats of an empty dataset")
    stacked = np.stack([s.image.pixels for s in dataset])  # (N, H, W, 3)
    mean = stacked.mean(axis=(0, 1, 2))
    std = np.maximum(stacked.std(axis=(0, 1, 2)), STD_FLOOR)
    return NormStats(mean, std)


def normalize(image: Image, stats: NormStats) -> Image:
    return Image((image.pixels - stats.mean) / stats.std)


def denormalize(image: Image, stats: NormStats) -> Image:
    """Exact inverse of :func:`normalize` given the same stats."""
    return Image(image.pixels * stats.std + stats.mean)


# ---------------------------------------------------------------------------
# Synthetic lesion-like dataset


@dataclass(frozen=True)
class BlobStyle:
    """Rendering recipe for one synthetic class."""

    hue_range: tuple[float, float]
    radius_range: tuple[float, float]  # fractions of image size
    texture_amp: float


def default_styles() -> tuple[BlobStyle, ...]:
    """One visually distinct style per class: hues spread over the wheel,
    radii and texture strength varied so classes differ in more than color."""
    styles = []
    radii = [(0.28, 0.42), (0.24, 0.38), (0.30, 0.44), (0.22, 0.34),
             (0.26, 0.40), (0.20, 0.32), (0.24, 0.36)]
    amps = [0.08, 0.03, 0.10, 0.05, 0.08, 0.02, 0.06]
    for c in range(NUM_CLASSES):
        hue = c / NUM_CLASSES
        styles.append(BlobStyle((hue - 0.03, hue + 0.03), radii[c], amps[c]))
    return tuple(styles)


@dataclass(frozen=True)
class SynthSpec:
    """Shape of a synthetic dataset: size, per-class counts, unlabeled pool."""

    image_size: int = 32
    class_counts: tuple[int, ...] = (23, 135, 11, 7, 22, 3, 3)
    unlabeled_count: int = 40
    styles: tuple[BlobStyle, ...] = field(default_factory=default_styles)

    def __post_init__(self):
        if self.image_size < 8:
            raise DataError(f"synthetic image_size must be >= 8, got {self.image_size}")
        if len(self.class_counts) != NUM_CLASSES:
            raise DataError(
                f"class_counts needs {NUM_CLASSES} entries, got {len(self.class_counts)}"
            )
        if any(c < 0 for c in self.class_counts) or self.unlabeled_count < 0:
            raise DataError("sample counts must be non-negative")
        if len(self.styles) != NUM_CLASSES:
            raise DataError("need one blob style per class")

    def check_fold_feasibility(self, k: int) -> None:
        """Stratified folds degenerate unless a couple of classes can fill
        every fold with at least two samples."""
        if sum(1 for c in self.class_counts if c >= 2 * k) < 2:
            raise DataError(
                f"need at least 2 classes with count >= {2 * k} for k={k} folds"
            )


def _render_synthetic(size: int, cls: int, style: BlobStyle, rng: RngStream) -> Image:
    """Draw one textured ellipse of the class hue over a skin-toned field."""
    base = np.array([0.80, 0.60, 0.48])
    bg_shift = rng.uniform(-0.05, 0.05, 3)
    bg = np.clip(base + bg_shift, 0.0, 1.0)
    pixels = np.broadcast_to(bg, (size, size, 3)).copy()
    pixels += rng.uniform(-0.02, 0.02, (size, size, 3))

    hue = rng.uniform(*style.hue_range) % 1.0
    sat = rng.uniform(0.7, 0.9)
    # Alternate brightness by class parity so neighbors on the hue wheel
    # also differ in value.
    val_lo = 0.25 if cls % 2 == 0 else 0.5
    val = rng.uniform(val_lo, val_lo + 0.15)
    color = np.array(colorsys.hsv_to_rgb(hue, sat, val))

    cx = size * (0.5 + rng.uniform(-0.15, 0.15))
    cy = size * (0.5 + rng.uniform(-0.15, 0.15))
    rx = size * rng.uniform(*style.radius_range)
    ry = size * rng.uniform(*style.radius_range)
    phi = rng.uniform(0.0, np.pi)

    ys, xs = np.mgrid[0:size, 0:size]
    dx, dy = xs + 0.5 - cx, ys + 0.5 - cy
    u = dx * np.cos(phi) + dy * np.sin(phi)
    v = -dx * np.sin(phi) + dy * np.cos(phi)
    # Signed radial coordinate: 1 on the ellipse boundary.
    rho = np.sqrt((u / rx) ** 2 + (v / ry) ** 2)
    feather = 1.5 / min(rx, ry)
    alpha = np.clip((1.0 - rho) / feather + 0.5, 0.0, 1.0)

    fx, fy = rng.uniform(2.0, 6.0), rng.uniform(2.0, 6.0)
    phase = rng.uniform(0.0, 2 * np.pi)
    tex = style.texture_amp * np.sin(2 * np.pi * (fx * xs / size + fy * ys / size) + phase)
    lesion = np.clip(color + tex[..., None], 0.0, 1.0)

    out = pixels * (1.0 - alpha[..., None]) + lesion * alpha[..., None]
    return Image(np.clip(out, 0.0, 1.0))


def make_synthetic_dataset(spec: SynthSpec, seed: int) -> Dataset:
    """Deterministically generate a dataset matching ``spec`` exactly.

    Labeled samples appear class by class in CLASS_NAMES order; the
    unlabeled pool follows, rendered from classes drawn at random but
    carrying no label. The result is a pure function of (spec, seed).
    """
    rng = RngStream(seed, _SYNTH_STREAM)
    samples: list[Sample] = []
    idx = 0
    for cls, count in enumerate(spec.class_counts):
        for _ in range(count):
            img = _render_synthetic(spec.image_size, cls, spec.styles[cls], rng.substream(idx))
            samples.append(Sample(f"SYN_{idx:05d}", img, SoftLabel.one_hot(cls)))
            idx += 1
    cls_stream = rng.substream(1 << 20)
    for j in range(spec.unlabeled_count):
        cls = cls_stream.integers(0, NUM_CLASSES)
        img = _render_synthetic(spec.image_size, cls, spec.styles[cls], rng.substream(idx))
        samples.append(Sample(f"SYNU_{j:05d}", img, None))
        idx += 1
    return Dataset(tuple(samples))


# ---------------------------------------------------------------------------
# Filesystem loading (CLI support)

_EXTENSIONS = (".ppm", ".png")


def read_image_file(path: Path) -> Image:
    data = Path(path).read_bytes()
    try:
        fmt = codecs.sniff_format(data)
    except Exception:
        fmt = Path(path).suffix.lstrip(".").lower()
    return codecs.decode_image(data, fmt)


def write_image_file(path: Path, image: Image) -> None:
    path = Path(path)
    fmt = path.suffix.lstrip(".").lower()
    if fmt == "ppm":
        path.write_bytes(codecs.encode_ppm(image))
    elif fmt == "png":
        path.write_bytes(codecs.encode_png(image))
    else:
        raise DataError(f"cannot write image format {fmt!r} ({path})")


def load_labeled_dataset(labels_csv: Path, image_dir: Path) -> Dataset:
    """Join a ground-truth CSV with image files named ``<id>.ppm|png``."""
    rows = load_labels_csv(Path(labels_csv).read_text())
    image_dir = Path(image_dir)
    samples = []
    for sample_id, label in rows:
        path = _find_image(image_dir, sample_id)
        samples.append(Sample(sample_id, read_image_file(path), label))
    return Dataset(tuple(samples))


def load_unlabeled_dataset(image_dir: Path) -> Dataset:
    image_dir = Path(image_dir)
    files = sorted(p for p in image_dir.iterdir() if p.suffix.lower() in _EXTENSIONS)
    return Dataset(tuple(Sample(p.stem, read_image_file(p), None) for p in files))


def _find_image(image_dir: Path, sample_id: str) -> Path:
    for ext in _EXTENSIONS:
        p = image_dir / f"{sample_id}{ext}"
        if p.exists():
            return p
    raise DataError(f"no image file for id {sample_id!r} under {image_dir}")
