"""Command-line entry points.

Exit codes: 0 success, 2 validation error (bad input or config), 3 numerical
failure (non-finite computation or a failed numeric self-check).
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from .dataio import ClipRecord, write_features, write_manifest
from .errors import NumericalError, ValidationError
from .pipeline import (
    DEFAULT_THRESHOLDS,
    ablate,
    evaluate,
    infer,
    mask_ablation_grid,
    read_manifest,
    read_predictions,
    train,
    variant_ablation_grid,
)


def _parse_thresholds(raw: str) -> tuple[float, ...]:
    try:
        values = tuple(float(v) for v in raw.split(","))
    except ValueError as err:
        raise ValidationError(f"bad threshold list {raw!r}") from err
    return values


def _cmd_synth(args) -> int:
    from .configfile import load_synth_spec
    from .features import synth_dataset

    spec = load_synth_spec(args.spec, seed=args.seed)
    records = synth_dataset(spec, args.out_dir)
    print(f"wrote {len(records)} clips to {args.out_dir}")
    return 0


def _cmd_extract(args) -> int:
    from .features import Waveform, fbank

    wav_dir = Path(args.wav_dir)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    wavs = sorted(wav_dir.glob("*.wav"))
    if not wavs:
        raise ValidationError(f"no .wav files under {wav_dir}")
    records = []
    for wav in wavs:
        feats = fbank(Waveform.from_wav(wav))
        name = wav.stem + ".fgc"
        write_features(out_dir / name, feats.frames)
        # labels are unknown at extraction time; fill once annotated
        records.append(ClipRecord(wav.stem, name, (False,) * 5))
    write_manifest(out_dir / "manifest.jsonl", records)
    print(f"extracted {len(records)} clips to {out_dir}")
    return 0


def _cmd_train(args) -> int:
    from .configfile import load_train_config

    config = load_train_config(args.config, seed=args.seed)
    result = train(config, args.train_manifest, args.out_dir)
    print(f"trained {config.variant} for {config.epochs} epochs, "
          f"{len(result.log)} steps -> {result.checkpoint_path}")
    return 0


def _cmd_infer(args) -> int:
    thresholds = _parse_thresholds(args.thresholds) if args.thresholds else DEFAULT_THRESHOLDS
    result = infer(args.checkpoint, args.manifest, thresholds, args.out)
    print(f"scored {len(result.predictions)} clips "
          f"({len(result.skipped)} skipped) -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    predictions = read_predictions(args.predictions)
    records = read_manifest(args.manifest)
    report = evaluate(predictions, records)
    if args.out_prefix:
        Path(args.out_prefix + ".csv").write_text(report.to_csv_text(), encoding="utf-8")
        Path(args.out_prefix + ".md").write_text(report.to_markdown(), encoding="utf-8")
    print(report.to_markdown(), end="")
    return 0


def _cmd_ablate(args) -> int:
    from .configfile import load_train_config
    from .pipeline import ablation_markdown

    config = load_train_config(args.config, seed=args.seed)
    grid = variant_ablation_grid() if args.grid == "variants" else mask_ablation_grid()
    rows = ablate(config, grid, args.train_manifest, args.test_manifest, args.out_dir)
    print(ablation_markdown(rows), end="")
    return 0


def _cmd_grad_check(args) -> int:
    from .gradcheck import run_gradient_checks

    start = time.time()
    cases = run_gradient_checks(seed=args.seed or 0)
    failures = [c for c in cases if not c.passed]
    for case in cases:
        status = "ok" if case.passed else "FAIL"
        print(f"{status:4s} {case.name:32s} rel_err={case.rel_err:.3e} tol={case.tol:g}")
    print(f"{len(cases) - len(failures)}/{len(cases)} gradient checks passed "
          f"in {time.time() - start:.1f}s")
    if failures:
        raise NumericalError(f"{len(failures)} gradient checks failed")
    return 0


def _cmd_mine(args) -> int:
    from .mining import run_morphology_check

    if not args.check:
        raise ValidationError("mine currently only supports --check")
    start = time.time()
    result = run_morphology_check(seed=args.seed or 0)
    status = "pass" if result.ok else "FAIL"
    print(f"{status}: fast min/max filters vs naive scan, "
          f"{result.cases} cases, {result.mismatches} mismatches "
          f"in {time.time() - start:.1f}s")
    if not result.ok:
        raise NumericalError("morphology filters disagree with the naive scan")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stutterkit",
        description="Weakly supervised stuttering event detection toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic clip dataset")
    p.add_argument("--spec", help="key=value synthesis spec file")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("extract", help="extract log-mel features from wav files")
    p.add_argument("--wav-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_extract)

    p = sub.add_parser("train", help="train a model on a manifest")
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", help="key=value training config file")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", help="score clips with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--thresholds", help="5 comma-separated per-class thresholds")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--predictions", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-prefix", help="write <prefix>.csv and <prefix>.md")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation grid")
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--test-manifest", required=True)
    p.add_argument("--out-dir")
    p.add_argument("--grid", choices=("variants", "masks"), default="variants")
    p.add_argument("--config", help="key=value training config file")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("grad-check", help="finite-difference checks for every op")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_grad_check)

    p = sub.add_parser("mine", help="mining self-checks")
    p.add_argument("--check", action="store_true", help="verify filters against the naive scan")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_mine)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
