"""Acceptance gate: one test per criterion, each printing a pass/fail line.

Run with `pytest tests/test_acceptance.py -v -s`. The synthetic benchmark
(criterion 7) trains 10 models and takes a couple of minutes; everything else
finishes in seconds.
"""

import dataclasses
import hashlib
import math
import time
from pathlib import Path

import numpy as np
import pytest

from stutterkit import mining, tensor as tc
from stutterkit.cli import main as cli_main
from stutterkit.dataio import read_features
from stutterkit.features import SyntheticSpec, synth_dataset
from stutterkit.gradcheck import run_gradient_checks
from stutterkit.losses import contrast_side
from stutterkit.model import EncoderConfig
from stutterkit.pipeline import TrainConfig, _load_clips, evaluate, predict, train

TONE_WAV = Path(__file__).parent / "data" / "tone_1khz_1s.wav"
TONE_FEATURE_SHA256 = "8a7cf636942517dcf409b46b4176d0170e4b4217d83b3e55f60ee69e474c3a6e"

BENCH_ENCODER = EncoderConfig(
    input_dim=32, model_dim=32, n_blocks=2, n_heads=4, conv_kernel=7, dropout=0.0
)
BENCH_DATA = dict(
    t_min=32, t_max=64, feature_dim=32, event_min=12, event_max=20,
    insert_probs=(0.3, 0.45, 0.35, 0.4, 0.25),
)


def _report(criterion: str, passed: bool, detail: str) -> None:
    print(f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}")
    assert passed, f"{criterion}: {detail}"


def test_criterion_1_gradient_correctness():
    start = time.time()
    cases = run_gradient_checks(seed=0)
    elapsed = time.time() - start
    failures = [c for c in cases if not c.passed]
    worst = max(c.rel_err for c in cases)
    _report(
        "criterion 1 (gradient correctness)",
        not failures and worst < 1e-4 and elapsed < 60.0,
        f"{len(cases)} checks, worst rel err {worst:.2e}, {elapsed:.1f}s",
    )


def test_criterion_2_morphology_oracle_equivalence():
    result = mining.run_morphology_check(n_random=10_000, max_t=1000, seed=0)
    _report(
        "criterion 2 (morphology oracle equivalence)",
        result.ok,
        f"{result.cases} cases (exhaustive T<=16 x l in {{1,2,3,6,9}} plus 10k random), "
        f"{result.mismatches} mismatches",
    )


def test_criterion_3_mask_one_identity():
    checked = 0
    ok = True
    for t in range(1, 13):
        bits = ((np.arange(2 ** t)[:, None] >> np.arange(t)) & 1).astype(np.uint8)
        for row in bits:
            ok = ok and np.array_equal(mining.erode(row, 1), row)
            ok = ok and np.array_equal(mining.dilate(row, 1), row)
            checked += 1
    rng = np.random.default_rng(1)
    for _ in range(200):
        b = rng.integers(0, 2, int(rng.integers(1, 1000))).astype(np.uint8)
        ok = ok and np.array_equal(mining.erode(b, 1), b)
        ok = ok and np.array_equal(mining.dilate(b, 1), b)
        checked += 1
    _report("criterion 3 (mask-1 identity)", ok, f"{checked} masks, erode/dilate both identity")


def test_criterion_4_mining_set_properties():
    rng = np.random.default_rng(2)
    gamma_c, gamma_e = 10, 20
    ok = True
    for _ in range(10_000):
        t = int(rng.integers(1, 400))
        p = rng.random(t)
        b = mining.binarize(p, 0.5)
        idx = mining.mine_indices(
            p, threshold=0.5, small_mask=3, large_mask=6,
            confusing_ratio=gamma_c, easy_ratio=gamma_e, rng=rng,
        )
        kc = max(1, t // gamma_c)
        ke = max(1, t // gamma_e)
        ok = ok and all(b[i] == 1 for i in idx.confusing_stuttered)
        ok = ok and all(b[i] == 0 for i in idx.confusing_fluent)
        ok = ok and len(idx.easy_stuttered) == ke and len(idx.easy_fluent) == ke
        ok = ok and len(idx.confusing_stuttered) <= kc and len(idx.confusing_fluent) <= kc
        ok = ok and mining.selection_count(t, gamma_c) == kc
        ok = ok and mining.selection_count(t, gamma_e) == ke
        all_idx = (idx.confusing_stuttered + idx.confusing_fluent
                   + idx.easy_stuttered + idx.easy_fluent)
        ok = ok and all(0 <= i < t for i in all_idx)
        if not ok:
            break
    _report(
        "criterion 4 (mining set properties)",
        ok,
        "10000 random sequences: candidate subsets, |easy| == k_e, k formulas exact",
    )


def test_criterion_5_contrast_loss_analytic_anchors():
    v = np.array([0.4, -0.9, 1.3])
    errors = []
    for k_neg in (1, 3, 7):
        loss = contrast_side(
            tc.constant(np.tile(v, (2, 1))),
            tc.constant(np.tile(v, (3, 1))),
            tc.constant(np.tile(v, (k_neg, 1))),
            temperature=0.07,
        )
        errors.append(abs(float(loss.value) - math.log(1 + k_neg)))

    x = np.array([[1.0, 0.0]])
    n = np.array([[0.0, 1.0]])
    loss = contrast_side(tc.constant(x), tc.constant(x), tc.constant(n), temperature=0.07)
    errors.append(abs(float(loss.value) - math.log(1.0 + math.exp(-1.0 / 0.07))))
    worst = max(errors)
    _report(
        "criterion 5 (contrast-loss analytic anchors)",
        worst < 1e-9,
        f"log(1+k) ties and the (1, 0, tau=0.07) case, worst abs err {worst:.2e}",
    )


@pytest.fixture(scope="module")
def small_clips(tmp_path_factory):
    root = tmp_path_factory.mktemp("acc_small")
    spec = SyntheticSpec(
        n_clips=32, t_min=24, t_max=48, feature_dim=16, seed=5,
        insert_probs=(0.4,) * 5,
    )
    synth_dataset(spec, root / "train")
    synth_dataset(dataclasses.replace(spec, n_clips=16, seed=55), root / "test")
    return root


def test_criterion_6_baseline_recovery(small_clips, tmp_path):
    encoder = EncoderConfig(
        input_dim=16, model_dim=16, n_blocks=1, n_heads=2, conv_kernel=5, dropout=0.1
    )
    shared = dict(
        epochs=2, batch_size=8, learning_rate=2e-3, seed=0, augment=True, encoder=encoder
    )
    manifest = small_clips / "train" / "manifest.jsonl"
    fgcl0 = train(
        TrainConfig(variant="fgcl", contrast_weight=0.0, **shared), manifest, tmp_path / "a"
    )
    base = train(TrainConfig(variant="baseline", **shared), manifest, tmp_path / "b")
    same_steps = [r.param_digest for r in fgcl0.log] == [r.param_digest for r in base.log]
    same_bytes = (
        fgcl0.checkpoint_path.read_bytes() == base.checkpoint_path.read_bytes()
    )
    _report(
        "criterion 6 (baseline recovery at zero contrast weight)",
        same_steps and same_bytes,
        f"{len(base.log)} steps bit-identical, checkpoints byte-equal",
    )


def test_criterion_7_synthetic_benchmark(tmp_path):
    start = time.time()
    synth_dataset(SyntheticSpec(n_clips=500, seed=11, **BENCH_DATA), tmp_path / "train")
    synth_dataset(SyntheticSpec(n_clips=100, seed=1211, **BENCH_DATA), tmp_path / "test")
    records, feats = _load_clips(tmp_path / "test" / "manifest.jsonl")

    scores: dict[str, list[float]] = {"baseline": [], "fgcl": []}
    f1_track: list[float] = []
    for seed in range(5):
        for variant in ("baseline", "fgcl"):
            cfg = TrainConfig(
                epochs=4, batch_size=8, learning_rate=3e-3, contrast_weight=0.02,
                seed=seed, variant=variant, augment=False, encoder=BENCH_ENCODER,
                track_train_f1=(seed == 0 and variant == "baseline"),
            )
            result = train(cfg, tmp_path / "train" / "manifest.jsonl")
            report = evaluate(predict(result.model, records, feats), records)
            scores[variant].append(report.macro_f1)
            if result.train_f1:
                f1_track = result.train_f1
    elapsed = time.time() - start

    wins = sum(f >= b for f, b in zip(scores["fgcl"], scores["baseline"]))
    baseline_ok = min(scores["baseline"]) >= 0.90
    climb_ok = f1_track[-1] >= 0.90 and f1_track[-1] >= f1_track[0]
    _report(
        "criterion 7 (synthetic benchmark)",
        baseline_ok and wins >= 4 and climb_ok and elapsed < 1800.0,
        f"baseline F1 {[f'{v:.3f}' for v in scores['baseline']]}, "
        f"fgcl F1 {[f'{v:.3f}' for v in scores['fgcl']]}, "
        f"fgcl >= baseline on {wins}/5 seeds, train-F1 climb "
        f"{f1_track[0]:.3f}->{f1_track[-1]:.3f}, {elapsed:.0f}s (< 1800s)",
    )


def test_criterion_8_ablation_row_structure(small_clips, tmp_path):
    from stutterkit.pipeline import ablate, mask_ablation_grid, variant_ablation_grid

    cfg = TrainConfig(
        epochs=1, batch_size=8, learning_rate=2e-3, seed=0, variant="fgcl", augment=False,
        encoder=EncoderConfig(
            input_dim=16, model_dim=16, n_blocks=1, n_heads=2, conv_kernel=5, dropout=0.0
        ),
    )
    train_manifest = small_clips / "train" / "manifest.jsonl"
    test_manifest = small_clips / "test" / "manifest.jsonl"

    variant_rows = ablate(cfg, variant_ablation_grid(), train_manifest, test_manifest,
                          tmp_path / "variants")
    mask_rows = ablate(cfg, mask_ablation_grid(), train_manifest, test_manifest,
                       tmp_path / "masks")

    variant_csv = (tmp_path / "variants" / "ablation.csv").read_text().strip().splitlines()
    mask_csv = (tmp_path / "masks" / "ablation.csv").read_text().strip().splitlines()
    structure_ok = (
        [r.label for r in variant_rows]
        == ["baseline", "+fluent_contrast", "+stuttered_contrast", "+both_contrasts"]
        and [r.label for r in mask_rows] == ["m=1,M=6", "m=1,M=4", "m=3,M=6"]
        and [(r.overrides.get("small_mask"), r.overrides.get("large_mask")) for r in mask_rows]
        == [(1, 6), (1, 4), (3, 6)]
        and variant_csv[0] == "label,/p,/b,/r,/wr,/i,Avg"
        and len(variant_csv) == 5
        and len(mask_csv) == 4
    )
    _report(
        "criterion 8 (ablation row structure)",
        structure_ok,
        "4 loss-variant rows and mask rows (1,6),(1,4),(3,6) with machine-readable CSV",
    )


def test_criterion_9_feature_determinism(tmp_path):
    wav_dir = tmp_path / "wavs"
    wav_dir.mkdir()
    (wav_dir / "tone.wav").write_bytes(TONE_WAV.read_bytes())
    assert cli_main(["extract", "--wav-dir", str(wav_dir), "--out-dir", str(tmp_path / "a")]) == 0
    assert cli_main(["extract", "--wav-dir", str(wav_dir), "--out-dir", str(tmp_path / "b")]) == 0
    blob_a = (tmp_path / "a" / "tone.fgc").read_bytes()
    blob_b = (tmp_path / "b" / "tone.fgc").read_bytes()
    frames = read_features(tmp_path / "a" / "tone.fgc")
    digest = hashlib.sha256(blob_a).hexdigest()
    _report(
        "criterion 9 (feature determinism)",
        frames.shape[0] == 98 and blob_a == blob_b and digest == TONE_FEATURE_SHA256,
        f"98 frames, repeat runs byte-identical, sha256 {digest[:12]}... matches frozen value",
    )
