"""Core domain types: images, soft labels, samples, datasets, channel stats.

All pixel data is float64, shape (H, W, 3), row-major. Raw decoded images
live in [0, 1]; normalized images are unrestricted but must stay finite.
Instances are immutable: the wrapped arrays are marked read-only so that
augmentations and trainers cannot mutate shared inputs by accident.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ShapeError

CLASS_NAMES = ("MEL", "NV", "BCC", "AKIEC", "BKL", "DF", "VASC")
NUM_CLASSES = len(CLASS_NAMES)

#: Tolerance on a soft label's probability mass at construction time.
LABEL_SUM_TOL = 1e-9


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Image:
    """An H x W x 3 float64 pixel array."""

    pixels: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float64)
        if p.ndim != 3 or p.shape[2] != 3:
            raise ShapeError(f"image must be (H, W, 3), got {p.shape}")
        if p.shape[0] < 1 or p.shape[1] < 1:
            raise ShapeError(f"image has empty spatial extent {p.shape[:2]}")
        if not np.all(np.isfinite(p)):
            raise ShapeError("image contains non-finite pixels")
        object.__setattr__(self, "pixels", _frozen(p))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def __eq__(self, other) -> bool:
        return isinstance(other, Image) and np.array_equal(self.pixels, other.pixels)


@dataclass(frozen=True, eq=False)
class SoftLabel:
    """A probability vector over the seven lesion classes (CLASS_NAMES order).

    Entries must lie in [0, 1] and sum to 1 within ``LABEL_SUM_TOL``. Mixed
    (non-one-hot) labels are first-class citizens: between-class mixing
    produces them and the losses consume them directly.
    """

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.shape != (NUM_CLASSES,):
            raise ShapeError(f"soft label must have shape ({NUM_CLASSES},), got {p.shape}")
        if not np.all(np.isfinite(p)):
            raise ShapeError("soft label contains non-finite entries")
        if np.any(p < -1e-12) or np.any(p > 1 + 1e-12):
            raise ShapeError(f"soft label entries outside [0, 1]: {p}")
        s = float(p.sum())
        if abs(s - 1.0) > LABEL_SUM_TOL:
            raise ShapeError(f"soft label sums to {s!r}, expected 1 +- {LABEL_SUM_TOL}")
        object.__setattr__(self, "probs", _frozen(np.clip(p, 0.0, 1.0)))

    @classmethod
    def one_hot(cls, cls_index: int) -> "SoftLabel":
        p = np.zeros(NUM_CLASSES)
        p[cls_index] = 1.0
        return cls(p)

    @property
    def argmax(self) -> int:
        """Most probable class; ties broken toward the lowest index."""
        return int(np.argmax(self.probs))

    def __eq__(self, other) -> bool:
        return isinstance(other, SoftLabel) and np.array_equal(self.probs, other.probs)


@dataclass(frozen=True)
class Sample:
    """One dataset entry. ``label is None`` marks the sample as unlabeled."""

    id: str
    image: Image
    label: SoftLabel | None = None

    @property
    def is_labeled(self) -> bool:
        return self.label is not None


@dataclass(frozen=True)
class Dataset:
    """An immutable collection of samples with unique ids and uniform size."""

    samples: tuple[Sample, ...]

    def __post_init__(self):
        samples = tuple(self.samples)
        object.__setattr__(self, "samples", samples)
        seen = set()
        for s in samples:
            if s.id in seen:
                raise DataError(f"duplicate sample id {s.id!r}")
            seen.add(s.id)
        if samples:
            h, w = samples[0].image.height, samples[0].image.width
            for s in samples:
                if (s.image.height, s.image.width) != (h, w):
                    raise DataError(
                        f"sample {s.id!r} is {s.image.height}x{s.image.width}, "
                        f"expected {h}x{w}"
                    )

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]

    @property
    def image_size(self) -> tuple[int, int]:
        if not self.samples:
            raise DataError("empty dataset has no image size")
        img = self.samples[0].image
        return img.height, img.width

    def labeled(self) -> "Dataset":
        return Dataset(tuple(s for s in self.samples if s.is_labeled))

    def unlabeled(self) -> "Dataset":
        return Dataset(tuple(s for s in self.samples if not s.is_labeled))

    def subset(self, indices) -> "Dataset":
        return Dataset(tuple(self.samples[i] for i in indices))


@dataclass(frozen=True, eq=False)
class NormStats:
    """Per-channel mean and standard deviation used for input normalization."""

    mean: np.ndarray = field()
    std: np.ndarray = field()

    def __post_init__(self):
        m = np.asarray(self.mean, dtype=np.float64).reshape(3)
        s = np.asarray(self.std, dtype=np.float64).reshape(3)
        if np.any(s <= 0):
            raise ShapeError(f"std entries must be positive, got {s}")
        object.__setattr__(self, "mean", _frozen(m))
        object.__setattr__(self, "std", _frozen(s))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, NormStats)
            and np.array_equal(self.mean, other.mean)
            and np.array_equal(self.std, other.std)
        )
