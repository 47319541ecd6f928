"""Command-line orchestration.

Commands::

    dermaug synth-data -c run.cfg
    dermaug augment-preview -c run.cfg -n 16
    dermaug train -c run.cfg
    dermaug predict -c run.cfg [--model manifest.json] [--no-tta]
    dermaug evaluate --pred predictions.csv --gold labels.csv [--out DIR]

Every config-driven command echoes the fully resolved configuration into
the output directory, so a finished run is reproducible from that file
plus the input data. Exit codes: 0 success, 1 usage/config error, 2 data
error, 3 internal failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import augment, imagedata, metrics
from .config import RunConfig, parse_config, serialize_config
from .ensemble import load_ensemble, predict_dataset, save_ensemble, stratified_kfold, train_ensemble
from .errors import ConfigError, DataError, DecodeError, DermaugError, LabelCsvError
from .meanteacher import history_to_csv
from .rng import RngStream
from .types import Dataset, Image, Sample

logger = logging.getLogger(__name__)

_PREVIEW_STREAM = 41


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; route them through ConfigError so
    # the documented exit code (1) applies.
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dermaug", description="desk-scale skin lesion pipeline")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sp = sub.add_parser("synth-data", help="generate the synthetic dataset on disk")
    sp.add_argument("-c", "--config", required=True)

    ap = sub.add_parser("augment-preview", help="write per-stage augmentation galleries")
    ap.add_argument("-c", "--config", required=True)
    ap.add_argument("-n", "--count", type=int, default=16)

    tp = sub.add_parser("train", help="stratified k-fold mean-teacher training")
    tp.add_argument("-c", "--config", required=True)

    pp = sub.add_parser("predict", help="write ensemble predictions CSV")
    pp.add_argument("-c", "--config", required=True)
    pp.add_argument("--model", default=None, help="manifest path (default: <output_dir>/manifest.json)")
    pp.add_argument("--no-tta", action="store_true")

    ep = sub.add_parser("evaluate", help="score predictions against ground truth")
    ep.add_argument("--pred", required=True)
    ep.add_argument("--gold", required=True)
    ep.add_argument("--out", default=None, help="report directory (default: next to --pred)")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.command == "evaluate":
            cmd_evaluate(Path(args.pred), Path(args.gold), args.out)
            return 0
        cfg = _load_config(Path(args.config))
        run(args.command, cfg, args)
        return 0
    except ConfigError as e:
        print(f"dermaug: config error: {e}", file=sys.stderr)
        return 1
    except (DecodeError, LabelCsvError, DataError) as e:
        print(f"dermaug: data error: {e}", file=sys.stderr)
        return 2
    except DermaugError as e:
        print(f"dermaug: internal error: {e}", file=sys.stderr)
        return 3
    except Exception as e:  # noqa: BLE001 - last-resort mapping to exit code
        print(f"dermaug: internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 3


def console_entry() -> None:  # pragma: no cover - thin wrapper
    raise SystemExit(main())


def run(command: str, cfg: RunConfig, args=None) -> None:
    """Dispatch one config-driven command."""
    if command == "synth-data":
        cmd_synth_data(cfg)
    elif command == "augment-preview":
        cmd_augment_preview(cfg, args.count if args else 16)
    elif command == "train":
        cmd_train(cfg)
    elif command == "predict":
        model_path = Path(args.model) if args and args.model else None
        cmd_predict(cfg, model_path, use_tta=not (args and args.no_tta))
    else:
        raise ConfigError(f"unknown command {command!r}")


# ---------------------------------------------------------------------------
# Shared helpers


def _load_config(path: Path) -> RunConfig:
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config(text)


def _echo_config(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.cfg").write_text(serialize_config(cfg))
    return out


def _source_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """(labeled, unlabeled) from files when configured, else synthetic."""
    if cfg.uses_synthetic():
        ds = imagedata.make_synthetic_dataset(cfg.synth, cfg.seed)
        return ds.labeled(), ds.unlabeled()
    if not cfg.data.image_dir:
        raise ConfigError("data.image_dir: required when data.labels_csv is set")
    labeled = imagedata.load_labeled_dataset(Path(cfg.data.labels_csv), Path(cfg.data.image_dir))
    if cfg.data.unlabeled_dir:
        unlabeled = imagedata.load_unlabeled_dataset(Path(cfg.data.unlabeled_dir))
    else:
        unlabeled = Dataset(())
    return labeled, unlabeled


def _center_crop(image: Image, size: int) -> Image:
    if image.height < size or image.width < size:
        raise DataError(
            f"image {image.height}x{image.width} smaller than model input {size}"
        )
    top = (image.height - size) // 2
    left = (image.width - size) // 2
    return Image(np.ascontiguousarray(image.pixels[top : top + size, left : left + size, :]))


# ---------------------------------------------------------------------------
# Commands


def cmd_synth_data(cfg: RunConfig) -> None:
    out = _echo_config(cfg)
    ds = imagedata.make_synthetic_dataset(cfg.synth, cfg.seed)
    data_dir = out / "data"
    images_dir = data_dir / "images"
    unlabeled_dir = data_dir / "unlabeled"
    images_dir.mkdir(parents=True, exist_ok=True)
    unlabeled_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for s in ds.labeled():
        imagedata.write_image_file(images_dir / f"{s.id}.{cfg.image_format}", s.image)
        rows.append((s.id, s.label))
    (data_dir / "labels.csv").write_text(imagedata.dump_labels_csv(rows))
    for s in ds.unlabeled():
        imagedata.write_image_file(unlabeled_dir / f"{s.id}.{cfg.image_format}", s.image)
    logger.info(
        "wrote %d labeled and %d unlabeled synthetic images under %s",
        len(ds.labeled()), len(ds.unlabeled()), data_dir,
    )


def _tile(images: list[Image], cols: int, gutter: int = 2) -> Image:
    h, w = images[0].height, images[0].width
    rows = math.ceil(len(images) / cols)
    canvas = np.ones((rows * h + (rows - 1) * gutter, cols * w + (cols - 1) * gutter, 3))
    for i, img in enumerate(images):
        r, c = divmod(i, cols)
        top, left = r * (h + gutter), c * (w + gutter)
        canvas[top : top + h, left : left + w, :] = img.pixels
    return Image(canvas)


def cmd_augment_preview(cfg: RunConfig, count: int) -> None:
    if count < 1:
        raise ConfigError(f"-n: need at least 1 variant, got {count}")
    out = _echo_config(cfg)
    labeled, _ = _source_datasets(cfg)
    if not len(labeled):
        raise DataError("no labeled samples available to preview")
    sample = labeled[0]
    partner = next(
        (s for s in labeled if s.label.argmax != sample.label.argmax), None
    )
    rng = RngStream(cfg.seed, _PREVIEW_STREAM)
    # Per-stage configs force that stage to fire so the gallery shows the
    # effect, not a coin flip.
    aug = cfg.aug
    stages: dict[str, object] = {
        "geometric": lambda r: augment.geometric_augment(sample, r, aug).image,
        "hair": lambda r: augment.hair_overlay(
            _crop(sample, aug).image, r, replace(aug, hair_prob=1.0)
        ),
        "erase": lambda r: augment.random_erase(
            _crop(sample, aug).image, r, replace(aug, erase_prob=1.0)
        ),
        "pipeline": lambda r: augment.apply_pipeline(sample, partner, r, aug).image,
    }
    if partner is not None:
        stages["mix"] = lambda r: augment.bc_mix(
            _crop(sample, aug), _crop(partner, aug), r
        ).image
    preview_dir = out / "preview"
    preview_dir.mkdir(parents=True, exist_ok=True)
    cols = math.ceil(math.sqrt(count))
    for stage_idx, (name, fn) in enumerate(stages.items()):
        variants = [fn(rng.substream(stage_idx, i)) for i in range(count)]
        gallery = _tile(variants, cols)
        imagedata.write_image_file(preview_dir / f"{name}.{cfg.image_format}", gallery)
    views = augment.tta_views(_crop(sample, aug).image)
    imagedata.write_image_file(preview_dir / f"tta.{cfg.image_format}", _tile(views, 4))
    logger.info("wrote previews for %s under %s", ", ".join(stages), preview_dir)


def _crop(sample: Sample, aug: "augment.AugConfig") -> Sample:
    return Sample(sample.id, _center_crop(sample.image, aug.crop_size), sample.label)


def cmd_train(cfg: RunConfig) -> None:
    out = _echo_config(cfg)
    labeled, unlabeled = _source_datasets(cfg)
    plan = stratified_kfold([s.label for s in labeled], cfg.k, cfg.seed)
    model, histories = train_ensemble(
        labeled, unlabeled, plan, cfg.model, cfg.train, cfg.aug, cfg.seed
    )
    manifest = save_ensemble(model, out)
    for i, history in enumerate(histories):
        (out / f"history_fold{i}.csv").write_text(history_to_csv(history))
    baccs = [m.val_bacc for m in model.members if m.val_bacc is not None]
    logger.info(
        "trained %d members; mean held-out balanced accuracy %.4f; manifest %s",
        plan.k, float(np.mean(baccs)) if baccs else float("nan"), manifest,
    )


def cmd_predict(cfg: RunConfig, model_path: Path | None, use_tta: bool) -> None:
    out = _echo_config(cfg)
    manifest = model_path if model_path is not None else out / "manifest.json"
    if not Path(manifest).exists():
        raise DataError(f"model manifest not found: {manifest}")
    model = load_ensemble(manifest)
    if cfg.uses_synthetic():
        ds = imagedata.make_synthetic_dataset(cfg.synth, cfg.seed)
    elif cfg.data.image_dir:
        ds = imagedata.load_unlabeled_dataset(Path(cfg.data.image_dir))
    else:
        raise ConfigError("data.image_dir: no prediction inputs configured")
    size = model.spec.input_size
    cropped = Dataset(
        tuple(Sample(s.id, _center_crop(s.image, size), s.label) for s in ds)
    )
    pred_path = out / "predictions.csv"
    rows = predict_dataset(model, cropped, use_tta=use_tta, out_path=pred_path)
    logger.info("wrote %d predictions to %s (tta=%s)", len(rows), pred_path, use_tta)


def cmd_evaluate(pred_path: Path, gold_path: Path, out_dir: str | None) -> None:
    try:
        pred_rows = imagedata.load_labels_csv(Path(pred_path).read_text())
        gold_rows = imagedata.load_labels_csv(Path(gold_path).read_text())
    except OSError as e:
        raise DataError(f"cannot read input: {e}") from None
    preds_by_id = dict(pred_rows)
    if not gold_rows:
        raise DataError(f"{gold_path}: no gold rows to score")
    matched = []
    for sample_id, gold in gold_rows:
        if sample_id not in preds_by_id:
            raise DataError(f"prediction missing for id {sample_id!r}")
        matched.append((preds_by_id[sample_id], gold))
    extra = len(pred_rows) - len(gold_rows)
    if extra > 0:
        logger.info("ignoring %d prediction rows without gold labels", extra)
    m = metrics.confusion_matrix([p for p, _ in matched], [g for _, g in matched])
    report = metrics.format_report(m)
    print(report, end="")
    target = Path(out_dir) if out_dir else Path(pred_path).parent
    target.mkdir(parents=True, exist_ok=True)
    (target / "metrics.csv").write_text(metrics.report_csv(m))
    (target / "confusion.csv").write_text(metrics.confusion_csv(m))
