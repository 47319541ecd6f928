"""Stratified fold planning, per-fold training, and averaged prediction.

One model is trained per fold (training on everything except that fold,
which becomes the member's validation split), each with normalization
statistics computed from its own training split so folds stay hermetic.
Prediction averages softmax outputs over the fixed test-time view set and
then uniformly over members; member averaging uses exactly rounded
summation so the result is independent of member order, bit for bit.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .augment import tta_views
from .errors import DataError, DermaugError, ShapeError
from .imagedata import compute_norm_stats, dump_labels_csv, normalize
from .meanteacher import AugConfig, EpochStats, MeanTeacherConfig, dataset_balanced_accuracy, train_fold
from .rng import RngStream
from .types import Dataset, Image, NormStats, SoftLabel

logger = logging.getLogger(__name__)

_FOLD_STREAM = 31


@dataclass(frozen=True)
class FoldPlan:
    """k disjoint index lists that together cover every labeled index."""

    k: int
    folds: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if self.k != len(self.folds):
            raise DataError(f"plan says k={self.k} but has {len(self.folds)} folds")
        seen: set[int] = set()
        for fold in self.folds:
            overlap = seen.intersection(fold)
            if overlap:
                raise DataError(f"index {min(overlap)} appears in two folds")
            seen.update(fold)

    @property
    def total(self) -> int:
        return sum(len(f) for f in self.folds)

    def train_indices(self, fold: int) -> tuple[int, ...]:
        return tuple(
            i for f, members in enumerate(self.folds) if f != fold for i in members
        )


def stratified_kfold(labels: Sequence[SoftLabel], k: int, seed: int) -> FoldPlan:
    """Per class: shuffle indices by seed, deal them round-robin into folds.

    Per-class fold counts differ by at most one. Classes with fewer than k
    samples will be missing from some folds; that is logged, not fatal.
    """
    if k < 2:
        raise DataError(f"need k >= 2 folds, got {k}")
    rng = RngStream(seed, _FOLD_STREAM)
    by_class: dict[int, list[int]] = {}
    for i, lab in enumerate(labels):
        by_class.setdefault(lab.argmax, []).append(i)
    folds: list[list[int]] = [[] for _ in range(k)]
    for cls in sorted(by_class):
        idxs = by_class[cls]
        if len(idxs) < k:
            logger.info(
                "class %d has %d samples (< k=%d); some folds will lack it",
                cls, len(idxs), k,
            )
        perm = rng.substream(cls).permutation(len(idxs))
        for pos, p in enumerate(perm):
            folds[pos % k].append(idxs[p])
    return FoldPlan(k, tuple(tuple(sorted(f)) for f in folds))


@dataclass(frozen=True)
class EnsembleMember:
    params: nn.ParamSet
    stats: NormStats
    val_bacc: float | None = None


@dataclass(frozen=True)
class EnsembleModel:
    spec: nn.ModelSpec
    members: tuple[EnsembleMember, ...]

    def __post_init__(self):
        if not self.members:
            raise DataError("ensemble needs at least one member")
        shapes = nn.param_shapes(self.spec)
        for i, m in enumerate(self.members):
            for name, shape in shapes.items():
                if name not in m.params or m.params[name].shape != shape:
                    raise ShapeError(f"member {i} is incompatible with the model spec ({name})")


def train_ensemble(
    dataset: Dataset,
    unlabeled: Dataset | None,
    plan: FoldPlan,
    spec: nn.ModelSpec,
    cfg: MeanTeacherConfig,
    aug_cfg: AugConfig,
    seed: int,
) -> tuple[EnsembleModel, list[list[EpochStats]]]:
    """Train one teacher per fold; fold i is member i's validation split.

    Each member gets normalization statistics from its own training split
    and never sees its validation indices during training. Held-out
    balanced accuracy per member is logged and stored on the member.
    """
    labeled = dataset.labeled()
    if plan.total != len(labeled) or any(
        i < 0 or i >= len(labeled) for fold in plan.folds for i in fold
    ):
        raise DataError(
            f"fold plan covers {plan.total} indices but dataset has "
            f"{len(labeled)} labeled samples"
        )
    members: list[EnsembleMember] = []
    histories: list[list[EpochStats]] = []
    for fold in range(plan.k):
        train_split = labeled.subset(plan.train_indices(fold))
        val_split = labeled.subset(plan.folds[fold])
        _, teacher, history = train_fold(
            train_split, unlabeled, spec, cfg, aug_cfg, seed, fold_id=fold
        )
        stats = compute_norm_stats(train_split)
        val_bacc = None
        if len(val_split):
            val_bacc = dataset_balanced_accuracy(teacher, spec, stats, val_split)
        logger.info("fold %d: %d train / %d val, held-out balanced accuracy %s",
                    fold, len(train_split), len(val_split),
                    "n/a" if val_bacc is None else f"{val_bacc:.4f}")
        members.append(EnsembleMember(teacher, stats, val_bacc))
        histories.append(history)
    return EnsembleModel(spec, tuple(members)), histories


# ---------------------------------------------------------------------------
# Prediction


def _exact_mean(rows: list[np.ndarray]) -> np.ndarray:
    """Columnwise mean with exactly rounded summation (order-independent)."""
    n = len(rows)
    return np.array([math.fsum(r[c] for r in rows) / n for c in range(rows[0].shape[0])])


def _member_probs(member: EnsembleMember, spec: nn.ModelSpec, image: Image, use_tta: bool) -> np.ndarray:
    normed = normalize(image, member.stats)
    views = tta_views(normed) if use_tta else [normed]
    batch = np.stack([v.pixels for v in views]).transpose(0, 3, 1, 2)
    logits, _ = nn.forward(member.params, spec, batch)
    probs = nn.softmax(logits)
    return _exact_mean([probs[i] for i in range(probs.shape[0])])


def predict(model: EnsembleModel, image: Image, use_tta: bool = True) -> SoftLabel:
    """Average softmax outputs over views, then uniformly over members."""
    if (image.height, image.width) != (model.spec.input_size, model.spec.input_size):
        raise ShapeError(
            f"image is {image.height}x{image.width}, model expects "
            f"{model.spec.input_size}x{model.spec.input_size}"
        )
    per_member = [_member_probs(m, model.spec, image, use_tta) for m in model.members]
    return SoftLabel(_exact_mean(per_member))


def predict_dataset(
    model: EnsembleModel,
    dataset: Dataset,
    use_tta: bool = True,
    out_path: Path | None = None,
) -> list[tuple[str, SoftLabel]]:
    """Predict every sample; optionally write the predictions CSV.

    The CSV uses the exact ground-truth schema, so outputs re-parse with
    the same loader that reads gold labels.
    """
    rows: list[tuple[str, SoftLabel]] = []
    for sample in dataset:
        try:
            rows.append((sample.id, predict(model, sample.image, use_tta)))
        except DermaugError as e:
            raise type(e)(f"sample {sample.id!r}: {e}") from e
    if out_path is not None:
        try:
            Path(out_path).write_text(dump_labels_csv(rows))
        except OSError as e:
            raise DataError(f"failed writing predictions to {out_path}: {e}") from e
    return rows


# ---------------------------------------------------------------------------
# Manifest + checkpoint persistence


def save_ensemble(model: EnsembleModel, out_dir: Path) -> Path:
    """Write member checkpoints plus a manifest describing the ensemble."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, m in enumerate(model.members):
        name = f"member_{i}.params"
        nn.save_params(m.params, out_dir / name)
        entries.append(
            {
                "params": name,
                "norm_mean": [float(v) for v in m.stats.mean],
                "norm_std": [float(v) for v in m.stats.std],
                "val_bacc": m.val_bacc,
            }
        )
    manifest = {
        "model": {
            "input_size": model.spec.input_size,
            "channels": list(model.spec.channels),
            "se_reduction": model.spec.se_reduction,
            "class_count": model.spec.class_count,
        },
        "members": entries,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_ensemble(manifest_path: Path) -> EnsembleModel:
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read manifest {manifest_path}: {e}") from e
    try:
        spec = nn.ModelSpec(
            input_size=doc["model"]["input_size"],
            channels=tuple(doc["model"]["channels"]),
            se_reduction=doc["model"]["se_reduction"],
            class_count=doc["model"]["class_count"],
        )
        members = []
        for entry in doc["members"]:
            params = nn.load_params(manifest_path.parent / entry["params"])
            stats = NormStats(np.array(entry["norm_mean"]), np.array(entry["norm_std"]))
            members.append(EnsembleMember(params, stats, entry.get("val_bacc")))
    except (KeyError, TypeError) as e:
        raise DataError(f"malformed manifest {manifest_path}: {e}") from e
    return EnsembleModel(spec, tuple(members))
