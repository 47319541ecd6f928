"""Training-time augmentations and deterministic test-time views.

Four stochastic stages, applied to raw [0, 1] images in a fixed order:

1. geometric: random crop, horizontal flip, rotation;
2. body hair overlay: pseudo-hair strokes dropped with uniform position and
   orientation (the classical needle-drop geometry), rendered as
   anti-aliased quadratic curves;
3. random erasing: a rectangle refilled with uniform noise;
4. between-class mixing: a convex combination of two labeled samples,
   mixing pixels and labels with the same ratio.

Hair precedes erasing so an erased patch can occlude hair, as real
occlusions do; mixing runs last because it combines whole augmented
samples. Every stage is a pure function of (inputs, rng, config): fixed
seeds replay bit-identical outputs, which the test suite leans on heavily.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import DataError, ShapeError
from .rng import RngStream
from .types import Image, Sample, SoftLabel

#: Reference hair color; per-stroke tints are random shades of this brown,
#: down to near-black.
HAIR_BROWN = np.array([0.45, 0.30, 0.15])


@dataclass(frozen=True)
class AugConfig:
    """All augmentation knobs in one validated record.

    Ranges are inclusive. ``hair_length_range`` is in fractions of the
    image diagonal, ``hair_thickness_range`` in pixels, and
    ``hair_darkness_range`` sets the stroke opacity. ``hair_curvature_max``
    bounds how far the curve's control point may deviate from the chord,
    as a fraction of stroke length (0 means straight hairs).
    """

    crop_size: int = 32
    flip_prob: float = 0.5
    rotation_mode: str = "quarter_turns"  # or "arbitrary"
    erase_prob: float = 0.5
    erase_area_range: tuple[float, float] = (0.02, 0.4)
    erase_aspect_range: tuple[float, float] = (0.3, 3.33)
    bc_prob: float = 0.5
    hair_prob: float = 0.5
    hair_count_range: tuple[int, int] = (5, 30)
    hair_length_range: tuple[float, float] = (0.1, 0.5)
    hair_thickness_range: tuple[float, float] = (1.0, 3.0)
    hair_darkness_range: tuple[float, float] = (0.6, 0.95)
    hair_curvature_max: float = 0.2

    def __post_init__(self):
        for name in ("flip_prob", "erase_prob", "bc_prob", "hair_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DataError(f"{name} must be in [0, 1], got {v}")
        if self.rotation_mode not in ("quarter_turns", "arbitrary"):
            raise DataError(f"unknown rotation_mode {self.rotation_mode!r}")
        lo, hi = self.erase_area_range
        if not 0.0 < lo <= hi < 1.0:
            raise DataError(f"erase_area_range must satisfy 0 < lo <= hi < 1, got {lo, hi}")
        lo, hi = self.erase_aspect_range
        if not 0.0 < lo <= hi:
            raise DataError(f"erase_aspect_range must satisfy 0 < lo <= hi, got {lo, hi}")
        lo, hi = self.hair_count_range
        if not 0 <= lo <= hi:
            raise DataError(f"hair_count_range must satisfy 0 <= lo <= hi, got {lo, hi}")
        lo, hi = self.hair_length_range
        if not 0.0 < lo <= hi <= 1.5:
            raise DataError(f"hair_length_range out of bounds: {lo, hi}")
        lo, hi = self.hair_thickness_range
        if not 0.0 < lo <= hi:
            raise DataError(f"hair_thickness_range out of bounds: {lo, hi}")
        lo, hi = self.hair_darkness_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise DataError(f"hair_darkness_range must lie in [0, 1], got {lo, hi}")
        if self.hair_curvature_max < 0:
            raise DataError("hair_curvature_max must be >= 0")
        if self.crop_size < 1:
            raise DataError("crop_size must be >= 1")

    def without_stochastic_stages(self) -> "AugConfig":
        """A copy with every random stage disabled (identity except crop)."""
        return replace(self, flip_prob=0.0, erase_prob=0.0, bc_prob=0.0, hair_prob=0.0)


# ---------------------------------------------------------------------------
# Geometric stage


def geometric_augment(sample: Sample, rng: RngStream, cfg: AugConfig) -> Sample:
    """Random crop to ``crop_size``, then flip/rotation. Label untouched.

    Draw order: crop top, crop left, flip uniform, rotation draw.
    Quarter-turn mode permutes pixels exactly (no resampling); arbitrary
    mode rotates by a uniform angle with bilinear sampling and reflect
    padding.
    """
    img = sample.image
    c = cfg.crop_size
    if c > img.height or c > img.width:
        raise ShapeError(
            f"crop_size {c} exceeds image {img.height}x{img.width}"
        )
    top = rng.integers(0, img.height - c + 1)
    left = rng.integers(0, img.width - c + 1)
    out = img.pixels[top : top + c, left : left + c, :]
    if rng.uniform() < cfg.flip_prob:
        out = out[:, ::-1, :]
    if cfg.rotation_mode == "quarter_turns":
        k = rng.integers(0, 4)
        out = np.rot90(out, k, axes=(0, 1))
    else:
        angle = rng.uniform(0.0, 360.0)
        out = _rotate_bilinear(out, angle)
    return Sample(sample.id, Image(np.ascontiguousarray(out)), sample.label)


def _reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    """Mirror out-of-range indices back into [0, n) (edge-repeat reflect)."""
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * n - 2
    idx = np.abs(idx) % period
    return np.where(idx >= n, period - idx, idx)


def _rotate_bilinear(pixels: np.ndarray, angle_deg: float) -> np.ndarray:
    h, w = pixels.shape[:2]
    theta = math.radians(angle_deg)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.mgrid[0:h, 0:w]
    dy, dx = ys - cy, xs - cx
    # Inverse map: rotate target coords by -angle to find source coords.
    sx = cx + dx * math.cos(theta) + dy * math.sin(theta)
    sy = cy - dx * math.sin(theta) + dy * math.cos(theta)
    x0, y0 = np.floor(sx).astype(int), np.floor(sy).astype(int)
    fx, fy = sx - x0, sy - y0
    out = np.zeros_like(pixels)
    for oy in (0, 1):
        for ox in (0, 1):
            wgt = (fy if oy else 1 - fy) * (fx if ox else 1 - fx)
            yy = _reflect_index(y0 + oy, h)
            xx = _reflect_index(x0 + ox, w)
            out += wgt[..., None] * pixels[yy, xx, :]
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Random erasing


def random_erase(image: Image, rng: RngStream, cfg: AugConfig) -> Image:
    """With probability ``erase_prob``, fill a random rectangle with noise.

    The rectangle's realized area fraction must land inside
    ``erase_area_range`` after integer rounding and its aspect ratio is
    drawn from ``erase_aspect_range``; sampling retries up to 100 times and
    returns the image unchanged on exhaustion. Pixels outside the rectangle
    are bit-identical to the input.
    """
    if rng.uniform() >= cfg.erase_prob:
        return image
    h, w = image.height, image.width
    area = h * w
    lo, hi = cfg.erase_area_range
    for _ in range(100):
        frac = rng.uniform(lo, hi)
        aspect = rng.uniform(*cfg.erase_aspect_range)
        eh = int(round(math.sqrt(frac * area * aspect)))
        ew = int(round(math.sqrt(frac * area / aspect)))
        if eh < 1 or ew < 1 or eh > h or ew > w:
            continue
        if not lo <= (eh * ew) / area <= hi:
            continue
        top = rng.integers(0, h - eh + 1)
        left = rng.integers(0, w - ew + 1)
        out = image.pixels.copy()
        out[top : top + eh, left : left + ew, :] = rng.uniform(0.0, 1.0, (eh, ew, 3))
        return Image(out)
    return image


# ---------------------------------------------------------------------------
# Between-class mixing


def mix_samples(a: Sample, b: Sample, r: float) -> Sample:
    """Convex combination of two labeled samples with a given ratio.

    ``image = r*a + (1-r)*b`` pixelwise, same for labels; the mixed label
    is renormalized to unit sum so downstream invariants hold exactly.
    """
    if a.label is None or b.label is None:
        raise DataError("between-class mixing requires two labeled samples")
    if (a.image.height, a.image.width) != (b.image.height, b.image.width):
        raise ShapeError("cannot mix samples with different image sizes")
    pixels = r * a.image.pixels + (1.0 - r) * b.image.pixels
    probs = r * a.label.probs + (1.0 - r) * b.label.probs
    probs = probs / probs.sum()
    return Sample(f"{a.id}+{b.id}", Image(pixels), SoftLabel(probs))


def bc_mix(a: Sample, b: Sample, rng: RngStream) -> Sample:
    """Mix two labeled samples with ratio r drawn uniformly on (0, 1)."""
    r = rng.uniform()
    while r == 0.0:  # open interval
        r = rng.uniform()
    return mix_samples(a, b, r)


# ---------------------------------------------------------------------------
# Body hair overlay


@dataclass(frozen=True)
class HairStroke:
    """One pseudo-hair: a quadratic curve with thickness, opacity and tint."""

    start: tuple[float, float]  # (x, y)
    control: tuple[float, float]
    end: tuple[float, float]
    thickness: float
    darkness: float
    tint: tuple[float, float, float]

    @property
    def is_straight(self) -> bool:
        mx = (self.start[0] + self.end[0]) / 2.0
        my = (self.start[1] + self.end[1]) / 2.0
        return self.control == (mx, my)


def sample_hair_stroke(rng: RngStream, cfg: AugConfig, height: int, width: int) -> HairStroke:
    """Draw one stroke: center uniform over the image, orientation uniform
    on [0, pi) as in a needle drop, length uniform in the configured
    fraction of the image diagonal.

    Draw order: center x, center y, angle, length, curvature offset,
    thickness, darkness, tint shade.
    """
    cx = rng.uniform(0.0, width)
    cy = rng.uniform(0.0, height)
    theta = rng.uniform(0.0, math.pi)
    diag = math.hypot(height, width)
    length = rng.uniform(*cfg.hair_length_range) * diag
    bend = rng.uniform(-cfg.hair_curvature_max, cfg.hair_curvature_max) * length
    thickness = rng.uniform(*cfg.hair_thickness_range)
    darkness = rng.uniform(*cfg.hair_darkness_range)
    shade = rng.uniform(0.0, 0.8)
    dx, dy = math.cos(theta), math.sin(theta)
    half = length / 2.0
    p0 = (cx - half * dx, cy - half * dy)
    p2 = (cx + half * dx, cy + half * dy)
    # Control point deviates perpendicular to the chord.
    ctrl = (cx - bend * dy, cy + bend * dx)
    tint = tuple(shade * HAIR_BROWN)
    return HairStroke(p0, ctrl, p2, thickness, darkness, tint)


def render_stroke(pixels: np.ndarray, stroke: HairStroke) -> None:
    """Alpha-blend one stroke into ``pixels`` (in place, raw [0, 1] scale).

    Coverage comes from the distance to a polyline approximation of the
    curve: full inside the stroke core, falling to zero within one pixel
    past ``thickness / 2``. Pixels farther away are left untouched.
    """
    h, w = pixels.shape[:2]
    pts = _bezier_polyline(stroke)
    half = stroke.thickness / 2.0
    margin = half + 1.0
    x_lo = max(int(math.floor(pts[:, 0].min() - margin)), 0)
    x_hi = min(int(math.ceil(pts[:, 0].max() + margin)) + 1, w)
    y_lo = max(int(math.floor(pts[:, 1].min() - margin)), 0)
    y_hi = min(int(math.ceil(pts[:, 1].max() + margin)) + 1, h)
    if x_lo >= x_hi or y_lo >= y_hi:
        return
    ys, xs = np.mgrid[y_lo:y_hi, x_lo:x_hi]
    px = xs + 0.5  # pixel centers
    py = ys + 0.5
    dist = _min_distance_to_polyline(px, py, pts)
    cov = np.clip(0.5 + (half - dist), 0.0, 1.0)
    alpha = stroke.darkness * cov
    region = pixels[y_lo:y_hi, x_lo:x_hi, :]
    tint = np.asarray(stroke.tint)
    region *= 1.0 - alpha[..., None]
    region += alpha[..., None] * tint


def _bezier_polyline(stroke: HairStroke) -> np.ndarray:
    p0 = np.array(stroke.start)
    p1 = np.array(stroke.control)
    p2 = np.array(stroke.end)
    length = np.linalg.norm(p2 - p0)
    segments = int(np.clip(math.ceil(length / 2.0), 4, 32))
    if stroke.is_straight:
        segments = 1
    t = np.linspace(0.0, 1.0, segments + 1)[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t**2 * p2


def _min_distance_to_polyline(px: np.ndarray, py: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Distance from each (px, py) to the nearest polyline segment."""
    a = pts[:-1]  # (S, 2)
    d = pts[1:] - a  # segment vectors
    seg_len2 = np.maximum((d**2).sum(axis=1), 1e-12)
    # (H, W, S) projections of each pixel onto each segment, clamped.
    relx = px[..., None] - a[:, 0]
    rely = py[..., None] - a[:, 1]
    t = np.clip((relx * d[:, 0] + rely * d[:, 1]) / seg_len2, 0.0, 1.0)
    ex = relx - t * d[:, 0]
    ey = rely - t * d[:, 1]
    return np.sqrt(ex**2 + ey**2).min(axis=-1)


def hair_overlay(image: Image, rng: RngStream, cfg: AugConfig) -> Image:
    """With probability ``hair_prob``, blend a random number of pseudo-hair
    strokes over the image. Label-preserving, pure in (image, rng, cfg)."""
    if rng.uniform() >= cfg.hair_prob:
        return image
    n = rng.integers(cfg.hair_count_range[0], cfg.hair_count_range[1] + 1)
    if n == 0:
        return image
    out = image.pixels.copy()
    for _ in range(n):
        stroke = sample_hair_stroke(rng, cfg, image.height, image.width)
        render_stroke(out, stroke)
    return Image(np.clip(out, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Pipeline and test-time views


def apply_pipeline(
    sample: Sample,
    partner: Sample | None,
    rng: RngStream,
    cfg: AugConfig,
) -> Sample:
    """Full training augmentation: geometry, hair, erasing, then optional
    between-class mixing with an independently-augmented partner.

    Rng consumption order: the sample's three stages; if a partner is
    given, one uniform gate against ``bc_prob``; on success the partner's
    three stages and finally the mixing ratio.
    """
    out = geometric_augment(sample, rng, cfg)
    out = Sample(out.id, hair_overlay(out.image, rng, cfg), out.label)
    out = Sample(out.id, random_erase(out.image, rng, cfg), out.label)
    if partner is not None and rng.uniform() < cfg.bc_prob:
        p = geometric_augment(partner, rng, cfg)
        p = Sample(p.id, hair_overlay(p.image, rng, cfg), p.label)
        p = Sample(p.id, random_erase(p.image, rng, cfg), p.label)
        out = bc_mix(out, p, rng)
    return out


#: Number of deterministic test-time views.
TTA_VIEW_COUNT = 8


def tta_views(image: Image, cfg: AugConfig | None = None) -> list[Image]:
    """The fixed dihedral view set used at prediction time.

    Views 0..3 are quarter-turn rotations (0, 90, 180, 270 degrees CCW) of
    the image; views 4..7 are the same rotations of its horizontal flip.
    View 0 is the identity. Deterministic by design: reproducibility beats
    marginal extra diversity at this scale.
    """
    del cfg  # present for interface symmetry; the view set is fixed
    out = []
    for flipped in (False, True):
        base = image.pixels[:, ::-1, :] if flipped else image.pixels
        for k in range(4):
            out.append(Image(np.ascontiguousarray(np.rot90(base, k, axes=(0, 1)))))
    return out


def tta_inverse(view: Image, view_index: int) -> Image:
    """Invert the transform that produced ``tta_views(...)[view_index]``."""
    if not 0 <= view_index < TTA_VIEW_COUNT:
        raise DataError(f"view index {view_index} out of range")
    k = view_index % 4
    out = np.rot90(view.pixels, -k, axes=(0, 1))
    if view_index >= 4:
        out = out[:, ::-1, :]
    return Image(np.ascontiguousarray(out))
