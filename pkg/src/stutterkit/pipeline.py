"""Training loop, inference, F1 evaluation, and the ablation runner.

Everything is deterministic given (seed, config, manifest): data shuffling,
dropout and augmentation draw from named seed streams, mining draws from a
per-clip stream seeded with seed XOR clip index, and the optimizer walks
parameters in name order.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as tc
from .dataio import (
    ClipRecord,
    LABEL_NAMES,
    N_CLASSES,
    read_features,
    read_manifest,
    resolve_feature_path,
)
from .errors import NumericalError, ValidationError
from .features import FeatureSequence, spec_mask
from .losses import ContrastConfig, clip_loss
from .model import ClassifierConfig, EncoderConfig, StutterModel
from .optim import Adam

VARIANTS = ("baseline", "fgcl", "fgcl_st_only", "fgcl_fl_only")
LOG_COLUMNS = ("step", "l_cls", "l_st", "l_fl", "l_sc", "total", "skipped_reason", "param_digest")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    contrast_weight: float = 0.05
    temperature: float = 0.07
    binarize_threshold: float = 0.5
    small_mask: int = 3
    large_mask: int = 6
    confusing_ratio: int = 10
    easy_ratio: int = 20
    seed: int = 0
    variant: str = "fgcl"
    augment: bool = True
    track_train_f1: bool = False
    encoder: EncoderConfig = EncoderConfig()
    classifier: ClassifierConfig = ClassifierConfig()

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if not 0.0 < self.binarize_threshold < 1.0:
            raise ValidationError("binarize_threshold must lie in (0, 1)")
        # the remaining fields are validated by ContrastConfig/Adam at use time

    def contrast(self) -> ContrastConfig | None:
        if self.variant == "baseline":
            return None
        return ContrastConfig(
            contrast_weight=self.contrast_weight,
            temperature=self.temperature,
            binarize_threshold=self.binarize_threshold,
            small_mask=self.small_mask,
            large_mask=self.large_mask,
            confusing_ratio=self.confusing_ratio,
            easy_ratio=self.easy_ratio,
            use_stuttered_side=self.variant in ("fgcl", "fgcl_st_only"),
            use_fluent_side=self.variant in ("fgcl", "fgcl_fl_only"),
        )


@dataclass
class StepRecord:
    step: int
    l_cls: float
    l_st: float
    l_fl: float
    l_sc: float
    total: float
    skipped_reason: str
    param_digest: str


@dataclass
class TrainResult:
    model: StutterModel
    config: TrainConfig
    log: list[StepRecord]
    train_f1: list[float]
    checkpoint_path: Path | None
    log_path: Path | None


def _param_digest(model: StutterModel) -> str:
    h = hashlib.sha256()
    for name in sorted(model.params):
        h.update(model.params[name].value.tobytes())
    return h.hexdigest()[:16]


def _load_clips(manifest_path: str | Path) -> tuple[list[ClipRecord], list[np.ndarray]]:
    records = read_manifest(manifest_path)
    feats = [read_features(resolve_feature_path(manifest_path, r)) for r in records]
    return records, feats


def _format_float(x: float) -> str:
    return repr(float(x))


def write_train_log(path: str | Path, log: list[StepRecord]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_COLUMNS)
    for r in log:
        writer.writerow(
            [
                r.step,
                _format_float(r.l_cls),
                _format_float(r.l_st),
                _format_float(r.l_fl),
                _format_float(r.l_sc),
                _format_float(r.total),
                r.skipped_reason,
                r.param_digest,
            ]
        )
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def train(
    config: TrainConfig,
    train_manifest: str | Path,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Fit a model on the manifest's clips; returns the model plus step log.

    With out_dir set, writes checkpoint.fgck and train_log.csv there. A step
    that turns non-finite aborts with the last good parameters saved to
    checkpoint_lastgood.fgck.
    """
    records, all_feats = _load_clips(train_manifest)
    model = StutterModel(config.encoder, config.classifier, seed=config.seed)
    optimizer = Adam(
        model.params,
        learning_rate=config.learning_rate,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.adam_eps,
    )
    contrast = config.contrast()

    shuffle_ss, dropout_ss, augment_ss = np.random.SeedSequence(config.seed).spawn(3)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    dropout_rng = np.random.default_rng(dropout_ss)
    augment_rng = np.random.default_rng(augment_ss)

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    log: list[StepRecord] = []
    train_f1: list[float] = []
    step = 0
    n = len(records)
    last_good = {name: p.value.copy() for name, p in model.params.items()}

    try:
        for _epoch in range(config.epochs):
            order = shuffle_rng.permutation(n)
            for start in range(0, n, config.batch_size):
                batch = order[start : start + config.batch_size]
                optimizer.zero_grad()
                totals: list[tc.Node] = []
                sums = {"l_cls": 0.0, "l_st": 0.0, "l_fl": 0.0, "l_sc": 0.0, "total": 0.0}
                skip_counts: dict[str, int] = {}
                for ci in batch:
                    feats = all_feats[ci]
                    if config.augment:
                        feats = spec_mask(FeatureSequence(feats), augment_rng).frames
                    total, breakdown, _ = clip_loss(
                        model,
                        feats,
                        records[ci].labels,
                        contrast,
                        train=True,
                        dropout_rng=dropout_rng,
                        mining_rng=np.random.default_rng(config.seed ^ int(ci)),
                    )
                    totals.append(total)
                    for key in sums:
                        sums[key] += getattr(breakdown, key)
                    for reason in breakdown.skipped:
                        skip_counts[reason] = skip_counts.get(reason, 0) + 1

                batch_total = totals[0]
                for extra in totals[1:]:
                    batch_total = tc.add(batch_total, extra)
                batch_total = tc.mul(batch_total, 1.0 / len(batch))
                tc.backward(batch_total)
                last_good = {name: p.value.copy() for name, p in model.params.items()}
                optimizer.step()

                step += 1
                b = len(batch)
                skipped = ";".join(f"{k}={v}" for k, v in sorted(skip_counts.items()))
                log.append(
                    StepRecord(
                        step,
                        sums["l_cls"] / b,
                        sums["l_st"] / b,
                        sums["l_fl"] / b,
                        sums["l_sc"] / b,
                        sums["total"] / b,
                        skipped,
                        _param_digest(model),
                    )
                )
            if config.track_train_f1:
                preds = predict(model, records, all_feats)
                train_f1.append(evaluate(preds, records).macro_f1)
    except NumericalError:
        for name, value in last_good.items():
            model.params[name].value = value
        if out_path is not None:
            model.save(out_path / "checkpoint_lastgood.fgck")
            write_train_log(out_path / "train_log.csv", log)
        raise

    checkpoint_path = log_path = None
    if out_path is not None:
        checkpoint_path = out_path / "checkpoint.fgck"
        model.save(checkpoint_path)
        log_path = out_path / "train_log.csv"
        write_train_log(log_path, log)
    return TrainResult(model, config, log, train_f1, checkpoint_path, log_path)


# ---------------------------------------------------------------------------
# inference


@dataclass(frozen=True)
class Prediction:
    clip_id: str
    scores: tuple[float, ...]
    pred: tuple[int, ...]


@dataclass
class InferResult:
    predictions: list[Prediction]
    skipped: list[str]


DEFAULT_THRESHOLDS = (0.5,) * N_CLASSES


def predict(
    model: StutterModel,
    records: list[ClipRecord],
    all_feats: list[np.ndarray],
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS,
) -> list[Prediction]:
    """Clip scores and strict-greater-than thresholded predictions.

    Threshold 0 therefore predicts every class positive; threshold 1 never
    fires (scores are sigmoid outputs in (0, 1)).
    """
    if len(thresholds) != N_CLASSES:
        raise ValidationError(f"need {N_CLASSES} thresholds")
    if any(not 0.0 <= t <= 1.0 for t in thresholds):
        raise ValidationError("thresholds must lie in [0, 1]")
    out = []
    for record, feats in zip(records, all_feats):
        y = model.audio_probs(model.encode(feats)).value
        pred = tuple(int(y[c] > thresholds[c]) for c in range(N_CLASSES))
        out.append(Prediction(record.clip_id, tuple(float(v) for v in y), pred))
    return out


def infer(
    checkpoint_path: str | Path,
    manifest_path: str | Path,
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS,
    out_path: str | Path | None = None,
) -> InferResult:
    """Score every clip in the manifest; unreadable feature files are skipped
    with a warning and recorded in the result."""
    model = StutterModel.load(checkpoint_path)
    records = read_manifest(manifest_path)
    usable_records: list[ClipRecord] = []
    usable_feats: list[np.ndarray] = []
    skipped: list[str] = []
    for r in records:
        path = resolve_feature_path(manifest_path, r)
        try:
            usable_feats.append(read_features(path))
        except (OSError, ValidationError) as err:
            print(f"warning: skipping clip {r.clip_id}: {err}", file=sys.stderr)
            skipped.append(r.clip_id)
            continue
        usable_records.append(r)
    predictions = predict(model, usable_records, usable_feats, thresholds)
    if out_path is not None:
        write_predictions(out_path, predictions)
    return InferResult(predictions, skipped)


def write_predictions(path: str | Path, predictions: list[Prediction]) -> None:
    lines = [
        json.dumps(
            {"id": p.clip_id, "scores": list(p.scores), "pred": list(p.pred)}, sort_keys=True
        )
        for p in predictions
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_predictions(path: str | Path) -> list[Prediction]:
    out = []
    for ln, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            out.append(
                Prediction(
                    str(obj["id"]),
                    tuple(float(v) for v in obj["scores"]),
                    tuple(int(v) for v in obj["pred"]),
                )
            )
        except (json.JSONDecodeError, KeyError, TypeError) as err:
            raise ValidationError(f"{path}:{ln}: invalid prediction line ({err})") from err
    if not out:
        raise ValidationError(f"{path}: empty predictions")
    return out


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class ClassMetrics:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    undefined: bool


@dataclass
class EvalReport:
    per_class: dict[str, ClassMetrics]
    macro_f1: float

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["class", "tp", "fp", "fn", "precision", "recall", "f1", "undefined"])
        for name in LABEL_NAMES:
            m = self.per_class[name]
            writer.writerow(
                [name, m.tp, m.fp, m.fn, _format_float(m.precision),
                 _format_float(m.recall), _format_float(m.f1), int(m.undefined)]
            )
        writer.writerow(["Avg", "", "", "", "", "", _format_float(self.macro_f1), ""])
        return buf.getvalue()

    def to_markdown(self) -> str:
        cells = " | ".join(f"{self.per_class[n].f1:.4f}" for n in LABEL_NAMES)
        return (
            f"| {' | '.join(LABEL_NAMES)} | Avg |\n"
            f"|{'---|' * (N_CLASSES + 1)}\n"
            f"| {cells} | {self.macro_f1:.4f} |\n"
        )


def evaluate(predictions: list[Prediction], records: list[ClipRecord]) -> EvalReport:
    """Per-class binary F1 over clips plus the unweighted macro average.

    A class that is never predicted and never present scores F1 = 0 under the
    0/0 -> 0 rule and is flagged undefined.
    """
    pred_by_id = {p.clip_id: p for p in predictions}
    if len(pred_by_id) != len(predictions):
        raise ValidationError("duplicate clip ids in predictions")
    gt_ids = {r.clip_id for r in records}
    if gt_ids != set(pred_by_id):
        raise ValidationError(
            f"prediction/ground-truth id mismatch: {sorted(gt_ids ^ set(pred_by_id))[:5]} ..."
        )
    per_class: dict[str, ClassMetrics] = {}
    f1_sum = 0.0
    for c, name in enumerate(LABEL_NAMES):
        tp = fp = fn = 0
        for r in records:
            predicted = bool(pred_by_id[r.clip_id].pred[c])
            actual = bool(r.labels[c])
            tp += predicted and actual
            fp += predicted and not actual
            fn += actual and not predicted
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_class[name] = ClassMetrics(tp, fp, fn, precision, recall, f1, tp + fp + fn == 0)
        f1_sum += f1
    return EvalReport(per_class, f1_sum / N_CLASSES)


# ---------------------------------------------------------------------------
# ablation harness


@dataclass
class AblationRow:
    label: str
    overrides: dict
    report: EvalReport


def variant_ablation_grid() -> list[tuple[str, dict]]:
    """Loss-term ablation rows: no contrast, each side alone, both sides."""
    return [
        ("baseline", {"variant": "baseline"}),
        ("+fluent_contrast", {"variant": "fgcl_fl_only"}),
        ("+stuttered_contrast", {"variant": "fgcl_st_only"}),
        ("+both_contrasts", {"variant": "fgcl"}),
    ]


def mask_ablation_grid() -> list[tuple[str, dict]]:
    """Cascade ablation rows over (small_mask, large_mask)."""
    return [
        ("m=1,M=6", {"variant": "fgcl", "small_mask": 1, "large_mask": 6}),
        ("m=1,M=4", {"variant": "fgcl", "small_mask": 1, "large_mask": 4}),
        ("m=3,M=6", {"variant": "fgcl", "small_mask": 3, "large_mask": 6}),
    ]


def ablate(
    base_config: TrainConfig,
    grid: list[tuple[str, dict]],
    train_manifest: str | Path,
    test_manifest: str | Path,
    out_dir: str | Path | None = None,
) -> list[AblationRow]:
    """Train one model per grid row (shared seed) and evaluate on the test set."""
    test_records, test_feats = _load_clips(test_manifest)
    rows = []
    for label, overrides in grid:
        cfg = dataclasses.replace(base_config, **overrides)
        result = train(cfg, train_manifest)
        preds = predict(result.model, test_records, test_feats)
        rows.append(AblationRow(label, dict(overrides), evaluate(preds, test_records)))
    if out_dir is not None:
        out_path = Path(out_dir)
        out_path.mkdir(parents=True, exist_ok=True)
        (out_path / "ablation.csv").write_text(ablation_csv(rows), encoding="utf-8")
        (out_path / "ablation.md").write_text(ablation_markdown(rows), encoding="utf-8")
    return rows


def ablation_csv(rows: list[AblationRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["label", *LABEL_NAMES, "Avg"])
    for row in rows:
        writer.writerow(
            [row.label]
            + [_format_float(row.report.per_class[n].f1) for n in LABEL_NAMES]
            + [_format_float(row.report.macro_f1)]
        )
    return buf.getvalue()


def ablation_markdown(rows: list[AblationRow]) -> str:
    lines = [
        f"| method | {' | '.join(LABEL_NAMES)} | Avg |",
        f"|---|{'---|' * (N_CLASSES + 1)}",
    ]
    for row in rows:
        cells = " | ".join(f"{row.report.per_class[n].f1:.4f}" for n in LABEL_NAMES)
        lines.append(f"| {row.label} | {cells} | {row.report.macro_f1:.4f} |")
    return "\n".join(lines) + "\n"
