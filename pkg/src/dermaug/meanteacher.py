"""Semi-supervised student/teacher training.

The student learns by gradient descent on a combined objective: cross
entropy against the gold labels plus a ramped consistency penalty tying
its predictions to the teacher's. Student and teacher see independently
noised views of every input (labeled and unlabeled alike), and the teacher
is refreshed as an exponential moving average of student weights. The
teacher, being the smoother of the two, is the model used for inference.

Randomness discipline: all draws come from named substreams of one base
stream (initialization, per-epoch shuffles, student views, teacher views,
mixing). Teacher-side and unlabeled-side draws never touch the streams the
student's labeled path uses, so with consistency weight 0 and no unlabeled
pool the student's trajectory is bit-identical to plain supervised
training. :func:`train_supervised` is that reference trainer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .augment import AugConfig, geometric_augment, hair_overlay, mix_samples, random_erase
from .errors import DataError, ShapeError
from .imagedata import compute_norm_stats
from .metrics import balanced_accuracy, confusion_matrix
from .rng import RngStream
from .types import Dataset, Image, NormStats, Sample, SoftLabel

_TRAIN_STREAM = 23

# Substream purposes. Keeping labeled-path ids disjoint from teacher and
# unlabeled ids is what makes the supervised-equivalence guarantee hold.
_INIT = 0
_SHUFFLE_LABELED = 1
_SHUFFLE_UNLABELED = 2
_STUDENT_VIEW = 3
_TEACHER_VIEW = 4
_MIX = 5
_STUDENT_VIEW_UNLABELED = 6
_TEACHER_VIEW_UNLABELED = 7

_MAX_PARTNER_TRIES = 64


@dataclass(frozen=True)
class MeanTeacherConfig:
    # ema_alpha is scaled to desk-scale step counts: the EMA horizon
    # 1/(1-alpha) should be a fraction of the total optimizer steps, and
    # runs here take a few hundred steps, not tens of thousands.
    ema_alpha: float = 0.95
    consistency_max_weight: float = 1.0
    rampup_epochs: int = 10
    epochs: int = 30
    batch_size_labeled: int = 16
    batch_size_unlabeled: int = 8
    lr: float = 0.05
    momentum: float = 0.9
    ema_granularity: str = "step"  # or "epoch"

    def __post_init__(self):
        if not 0.0 <= self.ema_alpha < 1.0:
            raise DataError(f"ema_alpha must be in [0, 1), got {self.ema_alpha}")
        if self.consistency_max_weight < 0:
            raise DataError("consistency_max_weight must be >= 0")
        if self.rampup_epochs < 0 or self.rampup_epochs > max(self.epochs, 0):
            raise DataError("need 0 <= rampup_epochs <= epochs")
        if self.epochs < 0:
            raise DataError("epochs must be >= 0")
        if self.batch_size_labeled < 1 or self.batch_size_unlabeled < 0:
            raise DataError("batch sizes must be positive (unlabeled may be 0)")
        if self.lr <= 0:
            raise DataError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise DataError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.ema_granularity not in ("step", "epoch"):
            raise DataError(f"ema_granularity must be 'step' or 'epoch'")


@dataclass
class TrainState:
    student: nn.ParamSet
    teacher: nn.ParamSet
    velocity: nn.ParamSet
    epoch: int
    global_step: int
    rng: RngStream


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    class_loss: float
    cons_loss: float
    cons_weight: float
    train_bacc: float


HISTORY_HEADER = "epoch,class_loss,cons_loss,cons_weight,train_bacc"


def history_to_csv(history: list[EpochStats]) -> str:
    lines = [HISTORY_HEADER]
    for h in history:
        lines.append(
            f"{h.epoch},{h.class_loss:.10g},{h.cons_loss:.10g},"
            f"{h.cons_weight:.10g},{h.train_bacc:.10g}"
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# EMA and consistency schedule


def ema_update(teacher: nn.ParamSet, student: nn.ParamSet, alpha: float) -> nn.ParamSet:
    """teacher <- alpha * teacher + (1 - alpha) * student, coordinatewise."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if not teacher.shape_compatible(student):
        raise ShapeError("teacher and student parameter sets are not shape-compatible")
    for name, t in teacher.items():
        t *= alpha
        t += (1.0 - alpha) * student[name]
    teacher.touch()
    return teacher


def consistency_weight(epoch: int, cfg: MeanTeacherConfig) -> float:
    """Sigmoid-shaped ramp: max_weight * exp(-5 (1 - min(e/rampup, 1))^2).

    Reaches exactly ``consistency_max_weight`` at the end of the ramp and
    stays there; monotone non-decreasing in the epoch.
    """
    if epoch < 0:
        raise DataError("epoch must be >= 0")
    if cfg.rampup_epochs <= 0:
        frac = 1.0
    else:
        frac = min(epoch / cfg.rampup_epochs, 1.0)
    return cfg.consistency_max_weight * math.exp(-5.0 * (1.0 - frac) ** 2)


# ---------------------------------------------------------------------------
# View construction


def _noise_view(sample: Sample, rng: RngStream, aug_cfg: AugConfig) -> Sample:
    """One augmentation noise: geometry, hair, erasing. No mixing here."""
    out = geometric_augment(sample, rng, aug_cfg)
    out = Sample(out.id, hair_overlay(out.image, rng, aug_cfg), out.label)
    return Sample(out.id, random_erase(out.image, rng, aug_cfg), out.label)


def _draw_partner(sample: Sample, pool, rng: RngStream) -> Sample | None:
    """A random pool member whose class differs from the sample's."""
    own = sample.label.argmax
    for _ in range(_MAX_PARTNER_TRIES):
        cand = pool[rng.integers(0, len(pool))]
        if cand.label is not None and cand.label.argmax != own:
            return cand
    return None


def _mix_plan(
    sample: Sample, base: RngStream, step: int, j: int, aug_cfg: AugConfig, partner_pool
) -> tuple[Sample | None, float]:
    """Decide whether sample j mixes this step, with whom, and how much.

    Drawn from the dedicated mixing substream so the decision is shared by
    every view of the sample (and by the supervised reference trainer).
    """
    mix_rng = base.substream(_MIX, step, j)
    if partner_pool is None or len(partner_pool) < 2:
        return None, 0.0
    if mix_rng.uniform() >= aug_cfg.bc_prob:
        return None, 0.0
    partner = _draw_partner(sample, partner_pool, mix_rng)
    if partner is None:
        return None, 0.0
    ratio = mix_rng.uniform()
    while ratio == 0.0:  # mixing ratio lives on the open interval (0, 1)
        ratio = mix_rng.uniform()
    return partner, ratio


def _labeled_views(
    sample: Sample,
    base: RngStream,
    step: int,
    j: int,
    aug_cfg: AugConfig,
    partner_pool,
) -> tuple[Sample, Sample]:
    """Two independently noised views of one labeled sample.

    When between-class mixing fires, both views mix with the same partner
    and the same ratio (so they stay views of the same underlying mixture)
    but the partner is noised independently per view.
    """
    partner, ratio = _mix_plan(sample, base, step, j, aug_cfg, partner_pool)
    student = _noise_view(sample, base.substream(_STUDENT_VIEW, step, j, 0), aug_cfg)
    teacher = _noise_view(sample, base.substream(_TEACHER_VIEW, step, j, 0), aug_cfg)
    if partner is not None:
        sp = _noise_view(partner, base.substream(_STUDENT_VIEW, step, j, 1), aug_cfg)
        tp = _noise_view(partner, base.substream(_TEACHER_VIEW, step, j, 1), aug_cfg)
        student = mix_samples(student, sp, ratio)
        teacher = mix_samples(teacher, tp, ratio)
    return student, teacher


def _supervised_view(
    sample: Sample, base: RngStream, step: int, j: int, aug_cfg: AugConfig, partner_pool
) -> Sample:
    """The student half of :func:`_labeled_views`, drawing the exact same
    streams, for the reference supervised trainer."""
    partner, ratio = _mix_plan(sample, base, step, j, aug_cfg, partner_pool)
    student = _noise_view(sample, base.substream(_STUDENT_VIEW, step, j, 0), aug_cfg)
    if partner is not None:
        sp = _noise_view(partner, base.substream(_STUDENT_VIEW, step, j, 1), aug_cfg)
        student = mix_samples(student, sp, ratio)
    return student


def _to_batch(images: list[Image], stats: NormStats) -> np.ndarray:
    """Normalize and stack HWC images into an (N, 3, H, W) array."""
    arr = np.stack([(img.pixels - stats.mean) / stats.std for img in images])
    return arr.transpose(0, 3, 1, 2)


# ---------------------------------------------------------------------------
# Training steps and loops


def train_step(
    state: TrainState,
    labeled: list[Sample],
    unlabeled: list[Image],
    cfg: MeanTeacherConfig,
    aug_cfg: AugConfig,
    spec: nn.ModelSpec,
    stats: NormStats,
    partner_pool=None,
) -> tuple[TrainState, float, float]:
    """One optimizer step on the student.

    Builds student and teacher views (two independent noises per input),
    runs the student on all student views and the teacher, gradient-free,
    on all teacher views. The loss is cross entropy on the labeled rows
    plus the ramped consistency weight times the mean squared difference
    of the two prediction sets over every row. The teacher's weights are
    not modified here; EMA merges happen in the epoch loop.
    """
    if not labeled:
        raise DataError("training step needs a non-empty labeled batch")
    if any(s.label is None for s in labeled):
        raise DataError("labeled batch contains an unlabeled sample")
    base = state.rng
    step = state.global_step
    student_views: list[Image] = []
    teacher_views: list[Image] = []
    labels: list[SoftLabel] = []
    for j, sample in enumerate(labeled):
        sv, tv = _labeled_views(sample, base, step, j, aug_cfg, partner_pool)
        student_views.append(sv.image)
        teacher_views.append(tv.image)
        labels.append(sv.label)
    for k, img in enumerate(unlabeled):
        holder = Sample(f"u{k}", img, None)
        sv = _noise_view(holder, base.substream(_STUDENT_VIEW_UNLABELED, step, k), aug_cfg)
        tv = _noise_view(holder, base.substream(_TEACHER_VIEW_UNLABELED, step, k), aug_cfg)
        student_views.append(sv.image)
        teacher_views.append(tv.image)

    n_labeled = len(labeled)
    student_batch = _to_batch(student_views, stats)
    teacher_batch = _to_batch(teacher_views, stats)
    logits_s, cache = nn.forward(state.student, spec, student_batch)
    probs_s = nn.softmax(logits_s)
    logits_t, _ = nn.forward(state.teacher, spec, teacher_batch)
    probs_t = nn.softmax(logits_t)

    class_loss, dlogits_class = nn.softmax_cross_entropy(logits_s[:n_labeled], labels)
    cons_loss, dprobs = nn.mse_consistency(probs_s, probs_t)
    weight = consistency_weight(state.epoch, cfg)
    dlogits = np.zeros_like(logits_s)
    dlogits[:n_labeled] = dlogits_class
    if weight != 0.0:
        dlogits = dlogits + weight * nn.softmax_backward(probs_s, dprobs)
    grads = nn.backward(cache, dlogits)
    nn.sgd_update(state.student, grads, cfg.lr, cfg.momentum, state.velocity)
    state.global_step += 1
    return state, class_loss, cons_loss


def _check_trainable(labeled: list[Sample]) -> None:
    classes = {s.label.argmax for s in labeled if s.label is not None}
    if len(labeled) == 0 or len(classes) < 2:
        raise DataError(
            f"degenerate fold: {len(labeled)} labeled samples covering "
            f"{len(classes)} classes (need >= 2)"
        )


def dataset_balanced_accuracy(
    params: nn.ParamSet,
    spec: nn.ModelSpec,
    stats: NormStats,
    dataset: Dataset,
    chunk: int = 64,
) -> float:
    """Balanced accuracy of plain (un-augmented) predictions on a dataset."""
    samples = [s for s in dataset if s.is_labeled]
    preds: list[SoftLabel] = []
    for at in range(0, len(samples), chunk):
        part = samples[at : at + chunk]
        batch = _to_batch([s.image for s in part], stats)
        logits, _ = nn.forward(params, spec, batch)
        probs = nn.softmax(logits)
        preds.extend(SoftLabel(row / row.sum()) for row in probs)
    golds = [s.label for s in samples]
    return balanced_accuracy(confusion_matrix(preds, golds))


def train_fold(
    train: Dataset,
    unlabeled: Dataset | None,
    spec: nn.ModelSpec,
    cfg: MeanTeacherConfig,
    aug_cfg: AugConfig,
    seed: int,
    fold_id: int = 0,
) -> tuple[nn.ParamSet, nn.ParamSet, list[EpochStats]]:
    """Train one student/teacher pair on one fold's training split.

    Normalization statistics come from this split alone. The teacher is
    merged from the student after every optimizer step (or once per epoch
    when ``ema_granularity='epoch'``) and is the model to use for
    inference. Returns (student, teacher, per-epoch history).
    """
    labeled = [s for s in train if s.is_labeled]
    _check_trainable(labeled)
    stats = compute_norm_stats(train)
    base = RngStream(seed, _TRAIN_STREAM, (fold_id,))
    student = nn.init_params(spec, base.substream(_INIT))
    state = TrainState(
        student=student,
        teacher=student.copy(),
        velocity=student.zeros_like(),
        epoch=0,
        global_step=0,
        rng=base,
    )
    unlabeled_images = [s.image for s in unlabeled] if unlabeled is not None else []
    n_unlabeled = len(unlabeled_images)
    history: list[EpochStats] = []
    for epoch in range(cfg.epochs):
        state.epoch = epoch
        order = base.substream(_SHUFFLE_LABELED, epoch).permutation(len(labeled))
        if n_unlabeled:
            uorder = base.substream(_SHUFFLE_UNLABELED, epoch).permutation(n_unlabeled)
        class_losses: list[float] = []
        cons_losses: list[float] = []
        n_steps = math.ceil(len(labeled) / cfg.batch_size_labeled)
        for s_i in range(n_steps):
            batch = [labeled[i] for i in order[s_i * cfg.batch_size_labeled : (s_i + 1) * cfg.batch_size_labeled]]
            ubatch: list[Image] = []
            if n_unlabeled and cfg.batch_size_unlabeled:
                ubatch = [
                    unlabeled_images[uorder[(s_i * cfg.batch_size_unlabeled + t) % n_unlabeled]]
                    for t in range(cfg.batch_size_unlabeled)
                ]
            _, cl, co = train_step(state, batch, ubatch, cfg, aug_cfg, spec, stats, labeled)
            class_losses.append(cl)
            cons_losses.append(co)
            if cfg.ema_granularity == "step":
                ema_update(state.teacher, state.student, cfg.ema_alpha)
        if cfg.ema_granularity == "epoch":
            ema_update(state.teacher, state.student, cfg.ema_alpha)
        history.append(
            EpochStats(
                epoch=epoch,
                class_loss=float(np.mean(class_losses)),
                cons_loss=float(np.mean(cons_losses)),
                cons_weight=consistency_weight(epoch, cfg),
                train_bacc=dataset_balanced_accuracy(state.teacher, spec, stats, train),
            )
        )
    return state.student, state.teacher, history


def train_supervised(
    train: Dataset,
    spec: nn.ModelSpec,
    cfg: MeanTeacherConfig,
    aug_cfg: AugConfig,
    seed: int,
    fold_id: int = 0,
) -> nn.ParamSet:
    """Plain supervised reference trainer.

    Same initialization, shuffling, augmentation draws and optimizer as
    :func:`train_fold`'s student path, with no teacher, no consistency
    term and no unlabeled data. Exists as the equivalence oracle for the
    semi-supervised machinery.
    """
    labeled = [s for s in train if s.is_labeled]
    _check_trainable(labeled)
    stats = compute_norm_stats(train)
    base = RngStream(seed, _TRAIN_STREAM, (fold_id,))
    params = nn.init_params(spec, base.substream(_INIT))
    velocity = params.zeros_like()
    global_step = 0
    for epoch in range(cfg.epochs):
        order = base.substream(_SHUFFLE_LABELED, epoch).permutation(len(labeled))
        n_steps = math.ceil(len(labeled) / cfg.batch_size_labeled)
        for s_i in range(n_steps):
            batch = [labeled[i] for i in order[s_i * cfg.batch_size_labeled : (s_i + 1) * cfg.batch_size_labeled]]
            views = [
                _supervised_view(sample, base, global_step, j, aug_cfg, labeled)
                for j, sample in enumerate(batch)
            ]
            x = _to_batch([v.image for v in views], stats)
            logits, cache = nn.forward(params, spec, x)
            _, dlogits = nn.softmax_cross_entropy(logits, [v.label for v in views])
            grads = nn.backward(cache, dlogits)
            nn.sgd_update(params, grads, cfg.lr, cfg.momentum, velocity)
            global_step += 1
    return params
