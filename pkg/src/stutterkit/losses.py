"""Clip-level classification loss, stutter contrast losses, total objective.

The contrast term treats each confusing embedding as a query against a
prototype of the same-status easy embeddings (positives) and the individual
opposite-status easy embeddings (negatives). All embeddings are L2-normalized
before the dot products, the positive prototype is the renormalized mean of
the normalized positives, and the per-query loss is the temperature-scaled
softmax cross-entropy of the positive against the negatives. Queries average.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .errors import ValidationError
from .mining import MinedFrames, MinedIndices, frame_stutter_probability, gather_mined, mine_indices

NORM_FLOOR = 1e-12
PROB_CLAMP = 1e-12

SKIP_NO_STUTTER_LABEL = "no_stutter_label"
SKIP_NO_CONFUSING_STUTTERED = "no_confusing_stuttered"
SKIP_NO_CONFUSING_FLUENT = "no_confusing_fluent"


@dataclass(frozen=True)
class ContrastConfig:
    """Knobs for mining and the contrast objective."""

    contrast_weight: float = 0.05
    temperature: float = 0.07
    binarize_threshold: float = 0.5
    small_mask: int = 3
    large_mask: int = 6
    confusing_ratio: int = 10
    easy_ratio: int = 20
    use_stuttered_side: bool = True
    use_fluent_side: bool = True

    def __post_init__(self):
        if self.contrast_weight < 0:
            raise ValidationError("contrast_weight must be >= 0")
        if self.temperature <= 0:
            raise ValidationError("temperature must be > 0")
        if self.small_mask >= self.large_mask:
            raise ValidationError("small_mask must be < large_mask")
        if self.confusing_ratio < 1 or self.easy_ratio < 1:
            raise ValidationError("selection ratios must be >= 1")


@dataclass
class LossBreakdown:
    """Scalar view of one clip or one step; total == l_cls + weight * l_sc."""

    l_cls: float
    l_st: float
    l_fl: float
    l_sc: float
    total: float
    skipped: tuple[str, ...] = ()


def clip_bce_loss(y: tc.Node, labels) -> tc.Node:
    """Mean per-class binary cross-entropy on already-sigmoided probabilities.

    Probabilities are clamped to [1e-12, 1 - 1e-12] so saturated heads cannot
    produce infinities.
    """
    target = np.asarray(labels, dtype=np.float64)
    if y.ndim != 1 or target.ndim != 1 or y.shape[0] != target.size:
        raise ValidationError(f"probabilities {y.shape} and labels {target.shape} disagree")
    yc = tc.clip(y, PROB_CLAMP, 1.0 - PROB_CLAMP)
    hit = tc.mul(tc.constant(target), tc.log(yc))
    miss = tc.mul(tc.constant(1.0 - target), tc.log(tc.sub(1.0, yc)))
    return tc.neg(tc.reduce_mean(tc.add(hit, miss)))


def _normalize_rows(x: tc.Node) -> tc.Node:
    sumsq = tc.reduce_sum(tc.mul(x, x), axis=1)
    norm = tc.sqrt(tc.clip(sumsq, NORM_FLOOR * NORM_FLOOR, None))
    return tc.scale_rows(x, tc.div(1.0, norm))


def _normalize_vec(x: tc.Node) -> tc.Node:
    sumsq = tc.reduce_sum(tc.mul(x, x))
    norm = tc.sqrt(tc.clip(sumsq, NORM_FLOOR * NORM_FLOOR, None))
    return tc.div(x, norm)


def _softplus(u: tc.Node) -> tc.Node:
    # log(1 + e^u) = max(u, 0) + log(1 + e^-|u|), stable for any u
    pos = tc.relu(u)
    absu = tc.add(pos, tc.relu(tc.neg(u)))
    return tc.add(pos, tc.log(tc.add(1.0, tc.exp(tc.neg(absu)))))


def contrast_side(
    query: tc.Node, positives: tc.Node, negatives: tc.Node, temperature: float
) -> tc.Node:
    """One directional contrast term, averaged over query rows.

    For query x with positive prototype p and negatives n_t, the per-query
    loss is -log(e^{x.p/tau} / (e^{x.p/tau} + sum_t e^{x.n_t/tau})), always
    non-negative and equal to log(1 + k_neg) when every similarity ties.
    """
    if temperature <= 0:
        raise ValidationError("temperature must be > 0")
    for name, node in (("query", query), ("positives", positives), ("negatives", negatives)):
        if node.ndim != 2 or node.shape[0] < 1:
            raise ValidationError(f"{name} must be a non-empty [k, d] embedding matrix")
    d = query.shape[1]
    if positives.shape[1] != d or negatives.shape[1] != d:
        raise ValidationError("embedding dimensions disagree")

    qn = _normalize_rows(query)
    proto = _normalize_vec(tc.reduce_mean(_normalize_rows(positives), axis=0))
    proto_row = tc.reshape(proto, (1, d))
    neg_t = tc.transpose(_normalize_rows(negatives))
    inv_t = 1.0 / temperature

    total: tc.Node | None = None
    k_query = query.shape[0]
    for i in range(k_query):
        x = tc.gather_rows(qn, [i])
        pos_sim = tc.reduce_sum(tc.mul(x, proto_row))
        neg_scaled = tc.mul(tc.matmul(x, neg_t), inv_t)
        peak = tc.reduce_max(neg_scaled)
        lse = tc.add(peak, tc.log(tc.reduce_sum(tc.exp(tc.sub(neg_scaled, peak)))))
        term = _softplus(tc.sub(lse, tc.mul(pos_sim, inv_t)))
        total = term if total is None else tc.add(total, term)
    return tc.mul(total, 1.0 / k_query)


def stutter_contrast_loss(
    mined: MinedFrames,
    temperature: float,
    *,
    use_stuttered_side: bool = True,
    use_fluent_side: bool = True,
) -> tuple[tc.Node | None, tc.Node | None, tuple[str, ...]]:
    """Both directional terms for one clip's mined frames.

    A side whose confusing selection is empty contributes nothing and is
    reported in the skip reasons.
    """
    skipped: list[str] = []
    l_st = l_fl = None
    if use_stuttered_side:
        if mined.emb_confusing_stuttered is None:
            skipped.append(SKIP_NO_CONFUSING_STUTTERED)
        else:
            l_st = contrast_side(
                mined.emb_confusing_stuttered,
                mined.emb_easy_stuttered,
                mined.emb_easy_fluent,
                temperature,
            )
    if use_fluent_side:
        if mined.emb_confusing_fluent is None:
            skipped.append(SKIP_NO_CONFUSING_FLUENT)
        else:
            l_fl = contrast_side(
                mined.emb_confusing_fluent,
                mined.emb_easy_fluent,
                mined.emb_easy_stuttered,
                temperature,
            )
    return l_st, l_fl, tuple(skipped)


def total_loss(l_cls: tc.Node, l_sc: tc.Node | None, contrast_weight: float) -> tc.Node:
    if contrast_weight < 0:
        raise ValidationError("contrast_weight must be >= 0")
    if l_sc is None:
        return l_cls
    return tc.add(l_cls, tc.mul(l_sc, contrast_weight))


def clip_loss(
    model,
    feats,
    labels,
    contrast: ContrastConfig | None,
    *,
    train: bool = False,
    dropout_rng: np.random.Generator | None = None,
    mining_rng: np.random.Generator | None = None,
    frozen_indices: MinedIndices | None = None,
    n_valid: int | None = None,
) -> tuple[tc.Node, LossBreakdown, MinedIndices | None]:
    """Full objective for one clip.

    The contrast term applies only to clips whose labels contain at least one
    stutter class; fluent-only clips fall back to the classification loss and
    carry a skip flag. Mined indices come from detached probabilities
    (`frozen_indices` bypasses mining, which the gradient checker uses to keep
    the discrete selection fixed across finite-difference evaluations).
    With n_valid set, frames past it are batch padding: they are cut before
    encoding, so pooling, mining and the losses only ever see real frames.
    """
    emb = model.encode(feats, train=train, rng=dropout_rng, n_valid=n_valid)
    y = model.audio_probs(emb)
    l_cls = clip_bce_loss(y, labels)

    skipped: list[str] = []
    indices: MinedIndices | None = None
    l_st = l_fl = None
    if contrast is not None:
        if not any(labels):
            skipped.append(SKIP_NO_STUTTER_LABEL)
        else:
            if frozen_indices is not None:
                indices = frozen_indices
            else:
                if mining_rng is None:
                    raise ValidationError("mining requires an explicit rng")
                cas = model.frame_scores(emb)
                p = frame_stutter_probability(cas)
                indices = mine_indices(
                    p.value,
                    threshold=contrast.binarize_threshold,
                    small_mask=contrast.small_mask,
                    large_mask=contrast.large_mask,
                    confusing_ratio=contrast.confusing_ratio,
                    easy_ratio=contrast.easy_ratio,
                    rng=mining_rng,
                )
            mined = gather_mined(emb, indices)
            l_st, l_fl, side_skips = stutter_contrast_loss(
                mined,
                contrast.temperature,
                use_stuttered_side=contrast.use_stuttered_side,
                use_fluent_side=contrast.use_fluent_side,
            )
            skipped.extend(side_skips)

    if l_st is not None and l_fl is not None:
        l_sc: tc.Node | None = tc.add(l_st, l_fl)
    else:
        l_sc = l_st if l_st is not None else l_fl
    weight = contrast.contrast_weight if contrast is not None else 0.0
    total = total_loss(l_cls, l_sc, weight)

    breakdown = LossBreakdown(
        l_cls=float(l_cls.value),
        l_st=float(l_st.value) if l_st is not None else 0.0,
        l_fl=float(l_fl.value) if l_fl is not None else 0.0,
        l_sc=float(l_sc.value) if l_sc is not None else 0.0,
        total=float(total.value),
        skipped=tuple(skipped),
    )
    return total, breakdown, indices
