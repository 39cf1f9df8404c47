import math

import numpy as np
import pytest

from stutterkit import losses, tensor as tc
from stutterkit.errors import ValidationError
from stutterkit.gradcheck import central_difference, relative_error
from stutterkit.mining import MinedIndices, gather_mined
from stutterkit.model import ClassifierConfig, EncoderConfig, StutterModel

TINY = EncoderConfig(input_dim=8, model_dim=8, n_blocks=1, n_heads=2, conv_kernel=5, dropout=0.0)


class TestClipBce:
    def test_uniform_probs_cost_ln2(self):
        y = tc.constant(np.full(5, 0.5))
        for gt in [(1, 0, 0, 1, 1), (0, 0, 0, 0, 0), (1, 1, 1, 1, 1)]:
            loss = losses.clip_bce_loss(y, gt)
            assert float(loss.value) == pytest.approx(math.log(2.0), rel=1e-12)

    def test_exact_predictions_cost_almost_zero(self):
        gt = (1, 0, 1, 0, 0)
        y = tc.constant(np.array(gt, dtype=np.float64))
        loss = losses.clip_bce_loss(y, gt)
        assert float(loss.value) < 1e-9

    def test_matches_hand_computed_bce(self):
        rng = np.random.default_rng(0)
        y = rng.uniform(0.05, 0.95, 5)
        gt = (1, 0, 0, 1, 0)
        expected = -np.mean(
            [g * math.log(p) + (1 - g) * math.log(1 - p) for g, p in zip(gt, y)]
        )
        loss = losses.clip_bce_loss(tc.constant(y), gt)
        assert float(loss.value) == pytest.approx(expected, rel=1e-12)

    def test_nonnegative_and_differentiable(self):
        rng = np.random.default_rng(1)
        y0 = rng.uniform(0.1, 0.9, 5)
        gt = (0, 1, 1, 0, 1)
        leaf = tc.parameter(y0)
        loss = losses.clip_bce_loss(leaf, gt)
        assert float(loss.value) >= 0.0
        tc.backward(loss)
        numeric = central_difference(
            lambda y: float(losses.clip_bce_loss(tc.constant(y), gt).value), y0
        )
        assert relative_error(leaf.grad, numeric) < 1e-6


class TestContrastSide:
    def test_identical_embeddings_cost_log_1_plus_k(self):
        v = np.array([0.3, -1.2, 0.7, 0.1])
        for k_neg in (1, 2, 5):
            loss = losses.contrast_side(
                tc.constant(np.tile(v, (3, 1))),
                tc.constant(np.tile(v, (2, 1))),
                tc.constant(np.tile(v, (k_neg, 1))),
                temperature=0.07,
            )
            assert float(loss.value) == pytest.approx(math.log(1.0 + k_neg), abs=1e-9)

    def test_orthogonal_negative_anchor(self):
        x = np.array([[1.0, 0.0, 0.0]])
        n = np.array([[0.0, 1.0, 0.0]])
        loss = losses.contrast_side(
            tc.constant(x), tc.constant(x), tc.constant(n), temperature=0.07
        )
        expected = math.log(1.0 + math.exp(-1.0 / 0.07))
        assert float(loss.value) == pytest.approx(expected, abs=1e-9)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        q0 = rng.uniform(-1, 1, (2, 4))
        p0 = rng.uniform(-1, 1, (2, 4))
        n0 = rng.uniform(-1, 1, (3, 4))

        q, p, n = tc.parameter(q0), tc.parameter(p0), tc.parameter(n0)
        tc.backward(losses.contrast_side(q, p, n, 0.07))

        def f(which, x):
            args = {"q": q0, "p": p0, "n": n0}
            args[which] = x
            return float(
                losses.contrast_side(
                    tc.constant(args["q"]), tc.constant(args["p"]), tc.constant(args["n"]), 0.07
                ).value
            )

        assert relative_error(q.grad, central_difference(lambda x: f("q", x), q0)) < 1e-4
        assert relative_error(p.grad, central_difference(lambda x: f("p", x), p0)) < 1e-4
        assert relative_error(n.grad, central_difference(lambda x: f("n", x), n0)) < 1e-4

    def test_zero_norm_embedding_is_clamped_not_fatal(self):
        q = tc.parameter(np.zeros((1, 3)))
        p = tc.constant(np.eye(3)[:1])
        n = tc.constant(np.eye(3)[1:2])
        loss = losses.contrast_side(q, p, n, 0.07)
        assert np.isfinite(loss.value)
        tc.backward(loss)
        assert np.all(np.isfinite(q.grad))

    def test_monotone_in_similarities(self):
        # negatives moving away from the query can only lower the loss,
        # positives moving toward it can only lower the loss
        def side(pos_angle, neg_angle):
            x = np.array([[1.0, 0.0]])
            p = np.array([[math.cos(pos_angle), math.sin(pos_angle)]])
            n = np.array([[math.cos(neg_angle), math.sin(neg_angle)]])
            return float(
                losses.contrast_side(tc.constant(x), tc.constant(p), tc.constant(n), 0.25).value
            )

        angles = np.linspace(0.0, math.pi, 12)
        pos_sweep = [side(a, math.pi / 2) for a in angles]
        assert all(a <= b + 1e-12 for a, b in zip(pos_sweep, pos_sweep[1:]))
        neg_sweep = [side(0.3, a) for a in angles]
        assert all(a >= b - 1e-12 for a, b in zip(neg_sweep, neg_sweep[1:]))

    def test_always_nonnegative(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            loss = losses.contrast_side(
                tc.constant(rng.normal(size=(2, 6))),
                tc.constant(rng.normal(size=(3, 6))),
                tc.constant(rng.normal(size=(4, 6))),
                temperature=float(rng.uniform(0.03, 1.0)),
            )
            assert float(loss.value) >= 0.0

    def test_rejects_empty_and_bad_temperature(self):
        good = tc.constant(np.ones((1, 2)))
        with pytest.raises(ValidationError):
            losses.contrast_side(good, good, good, 0.0)
        with pytest.raises(ValidationError):
            losses.contrast_side(tc.constant(np.ones((0, 2))), good, good, 0.07)


class TestStutterContrast:
    def _mined(self, conf_st, conf_fl):
        rng = np.random.default_rng(4)
        emb = tc.constant(rng.normal(size=(12, 6)))
        idx = MinedIndices(conf_st, conf_fl, (0, 1), (10, 11))
        return gather_mined(emb, idx), emb

    def test_empty_stuttered_side_leaves_only_fluent(self):
        mined, _ = self._mined((), (3, 4))
        l_st, l_fl, skipped = losses.stutter_contrast_loss(mined, 0.07)
        assert l_st is None and l_fl is not None
        assert skipped == (losses.SKIP_NO_CONFUSING_STUTTERED,)

    def test_both_sides_sum_matches_independent_sides(self):
        mined, emb = self._mined((2, 5), (3, 4))
        l_st, l_fl, skipped = losses.stutter_contrast_loss(mined, 0.07)
        assert skipped == ()
        manual_st = losses.contrast_side(
            tc.gather_rows(emb, [2, 5]), tc.gather_rows(emb, [0, 1]),
            tc.gather_rows(emb, [10, 11]), 0.07,
        )
        manual_fl = losses.contrast_side(
            tc.gather_rows(emb, [3, 4]), tc.gather_rows(emb, [10, 11]),
            tc.gather_rows(emb, [0, 1]), 0.07,
        )
        assert float(l_st.value) == pytest.approx(float(manual_st.value), rel=1e-12)
        assert float(l_fl.value) == pytest.approx(float(manual_fl.value), rel=1e-12)
        combined = tc.add(l_st, l_fl)
        assert float(combined.value) == pytest.approx(
            float(manual_st.value) + float(manual_fl.value), rel=1e-12
        )

    def test_side_flags_respect_variant_switches(self):
        mined, _ = self._mined((2,), (3,))
        l_st, l_fl, _ = losses.stutter_contrast_loss(mined, 0.07, use_fluent_side=False)
        assert l_st is not None and l_fl is None
        l_st, l_fl, _ = losses.stutter_contrast_loss(mined, 0.07, use_stuttered_side=False)
        assert l_st is None and l_fl is not None


class TestTotalLoss:
    def test_zero_weight_recovers_classification_loss(self):
        l_cls = tc.constant(0.81)
        l_sc = tc.constant(2.5)
        assert float(losses.total_loss(l_cls, l_sc, 0.0).value) == 0.81

    def test_weighted_sum_value(self):
        l = losses.total_loss(tc.constant(math.log(2.0)), tc.constant(math.log(2.0)), 0.05)
        assert float(l.value) == pytest.approx(1.05 * math.log(2.0), rel=1e-12)
        assert float(l.value) == pytest.approx(0.72776, abs=5e-5)


class TestClipLoss:
    def test_fluent_clip_skips_contrast(self):
        model = StutterModel(TINY, ClassifierConfig(), seed=0)
        feats = np.random.default_rng(5).normal(size=(20, 8))
        total, breakdown, indices = losses.clip_loss(
            model, feats, (False,) * 5, losses.ContrastConfig(),
            mining_rng=np.random.default_rng(0),
        )
        assert indices is None
        assert breakdown.l_sc == 0.0
        assert breakdown.skipped == (losses.SKIP_NO_STUTTER_LABEL,)
        assert float(total.value) == pytest.approx(breakdown.l_cls, rel=1e-12)

    def test_breakdown_invariants_hold(self):
        model = StutterModel(TINY, ClassifierConfig(), seed=1)
        rng = np.random.default_rng(6)
        cfg = losses.ContrastConfig(contrast_weight=0.05)
        for _ in range(10):
            feats = rng.normal(size=(rng.integers(5, 60), 8))
            total, b, _ = losses.clip_loss(
                model, feats, (True, False, True, False, False), cfg,
                mining_rng=np.random.default_rng(7),
            )
            assert b.l_sc == pytest.approx(b.l_st + b.l_fl, rel=1e-12)
            assert b.total == pytest.approx(b.l_cls + 0.05 * b.l_sc, rel=1e-12)
            assert b.l_cls >= 0 and b.l_st >= 0 and b.l_fl >= 0
            assert float(total.value) == pytest.approx(b.total, rel=1e-12)

    def test_zero_weight_gradients_match_classification_only(self):
        model_a = StutterModel(TINY, ClassifierConfig(), seed=2)
        model_b = StutterModel(TINY, ClassifierConfig(), seed=2)
        feats = np.random.default_rng(8).normal(size=(24, 8))
        labels = (True, True, False, False, False)

        total_a, _, _ = losses.clip_loss(
            model_a, feats, labels, losses.ContrastConfig(contrast_weight=0.0),
            mining_rng=np.random.default_rng(9),
        )
        tc.backward(total_a)
        total_b, _, _ = losses.clip_loss(model_b, feats, labels, None)
        tc.backward(total_b)

        for name in model_a.params:
            ga = model_a.params[name].grad
            gb = model_b.params[name].grad
            if gb is None:
                assert ga is None or np.all(ga == 0.0)
            else:
                np.testing.assert_array_equal(ga, gb)
