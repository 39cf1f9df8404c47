"""Frame-level likelihood, binarization, and confusing/easy frame mining.

Window convention for the binary morphology (documented because it is a
convention, not a given): erosion of a length-T mask with a length-l window
takes the minimum over positions [t - floor((l-1)/2), t + ceil((l-1)/2)],
dilation uses the reflected window [t - ceil((l-1)/2), t + floor((l-1)/2)],
and positions outside [0, T) count as 0 (outside the clip is fluent). The
reflection makes erosion and dilation an adjoint pair and l = 1 the identity
for both.

The production filters run in O(T) per sequence (two-pass block prefix/suffix
extrema); `erode_naive`/`dilate_naive` are the O(T*l) reference scans used by
`run_morphology_check` and the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .errors import ValidationError


def frame_stutter_probability(cas: tc.Node) -> tc.Node:
    """Collapse per-class frame scores [T, C] into stutter probabilities [T].

    Scores are summed across classes and squashed with a sigmoid; the result
    stays inside the autodiff graph.
    """
    if cas.ndim != 2:
        raise ValidationError(f"expected [T, C] frame scores, got shape {cas.shape}")
    return tc.sigmoid(tc.reduce_sum(cas, axis=1))


def binarize(p: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Threshold probabilities into a {0,1} mask; p[t] == threshold maps to 1."""
    if not 0.0 < threshold < 1.0:
        raise ValidationError(f"binarize threshold must lie in (0, 1), got {threshold}")
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size < 1:
        raise ValidationError("binarize expects a non-empty 1-D probability array")
    if p.min() < 0.0 or p.max() > 1.0:
        raise ValidationError("probabilities must lie in [0, 1]")
    return (p >= threshold).astype(np.uint8)


def _check_binary(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b)
    if b.ndim != 1 or b.size < 1:
        raise ValidationError("expected a non-empty 1-D binary mask")
    if not np.isin(b, (0, 1)).all():
        raise ValidationError("mask values must be 0 or 1")
    return b.astype(np.uint8)


def _check_window(l: int) -> int:
    if int(l) != l or l < 1:
        raise ValidationError(f"window length must be an integer >= 1, got {l}")
    return int(l)


def _block_extrema(x: np.ndarray, l: int, minimum: bool) -> np.ndarray:
    """Sliding min/max of every length-l window along the last axis, O(n) per row.

    Input (..., n) with n >= l; output (..., n - l + 1). Two accumulate passes
    over l-sized blocks give the window extremum as min/max of one block
    suffix and the next block prefix.
    """
    n = x.shape[-1]
    nwin = n - l + 1
    if l == 1:
        return x.copy()
    op = np.minimum if minimum else np.maximum
    pad_val = 1 if minimum else 0
    nblocks = -(-n // l)
    padded = np.concatenate(
        [x, np.full(x.shape[:-1] + (nblocks * l - n,), pad_val, dtype=x.dtype)], axis=-1
    )
    blocks = padded.reshape(x.shape[:-1] + (nblocks, l))
    prefix = op.accumulate(blocks, axis=-1).reshape(x.shape[:-1] + (nblocks * l,))
    suffix = op.accumulate(blocks[..., ::-1], axis=-1)[..., ::-1].reshape(
        x.shape[:-1] + (nblocks * l,)
    )
    return op(suffix[..., :nwin], prefix[..., l - 1 : l - 1 + nwin])


def _erode_batch(b: np.ndarray, l: int) -> np.ndarray:
    lo, hi = (l - 1) // 2, l // 2
    padded = np.concatenate(
        [
            np.zeros(b.shape[:-1] + (lo,), dtype=np.uint8),
            b,
            np.zeros(b.shape[:-1] + (hi,), dtype=np.uint8),
        ],
        axis=-1,
    )
    return _block_extrema(padded, l, minimum=True)


def _dilate_batch(b: np.ndarray, l: int) -> np.ndarray:
    lo, hi = l // 2, (l - 1) // 2
    padded = np.concatenate(
        [
            np.zeros(b.shape[:-1] + (lo,), dtype=np.uint8),
            b,
            np.zeros(b.shape[:-1] + (hi,), dtype=np.uint8),
        ],
        axis=-1,
    )
    return _block_extrema(padded, l, minimum=False)


def erode(b: np.ndarray, l: int) -> np.ndarray:
    """Window-minimum contraction of a binary mask (see module docstring)."""
    return _erode_batch(_check_binary(b), _check_window(l))


def dilate(b: np.ndarray, l: int) -> np.ndarray:
    """Window-maximum expansion of a binary mask (see module docstring)."""
    return _dilate_batch(_check_binary(b), _check_window(l))


def erode_naive(b: np.ndarray, l: int) -> np.ndarray:
    """O(T*l) reference scan with the same window and boundary convention."""
    b = _check_binary(b)
    l = _check_window(l)
    t = b.size
    lo = (l - 1) // 2
    out = np.ones(t, dtype=np.uint8)
    for i in range(t):
        for s in range(i - lo, i - lo + l):
            v = b[s] if 0 <= s < t else 0
            if v < out[i]:
                out[i] = v
    return out


def dilate_naive(b: np.ndarray, l: int) -> np.ndarray:
    b = _check_binary(b)
    l = _check_window(l)
    t = b.size
    lo = l // 2
    out = np.zeros(t, dtype=np.uint8)
    for i in range(t):
        for s in range(i - lo, i - lo + l):
            v = b[s] if 0 <= s < t else 0
            if v > out[i]:
                out[i] = v
    return out


def selection_count(t: int, ratio: int) -> int:
    """Number of frames to select from a length-t clip: max(1, floor(t/ratio))."""
    if ratio < 1:
        raise ValidationError(f"selection ratio must be >= 1, got {ratio}")
    return max(1, t // ratio)


def mine_confusing(
    b: np.ndarray,
    small_mask: int,
    large_mask: int,
    confusing_ratio: int,
    rng: np.random.Generator,
) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Sample confusing frames from the borders of the mask's 1-runs.

    Candidates on the stuttered side are frames that survive the small-window
    erosion but not the large one; on the fluent side, frames reached by the
    large-window dilation but not the small one. From each candidate set, up
    to max(1, floor(T/confusing_ratio)) indices are drawn uniformly without
    replacement. Empty candidate sets yield empty selections.
    """
    b = _check_binary(b)
    if small_mask >= large_mask:
        raise ValidationError(
            f"small mask ({small_mask}) must be shorter than large mask ({large_mask})"
        )
    stuttered_cand = np.flatnonzero(erode(b, small_mask) & ~erode(b, large_mask))
    fluent_cand = np.flatnonzero(dilate(b, large_mask) & ~dilate(b, small_mask))
    k = selection_count(b.size, confusing_ratio)

    def draw(cand: np.ndarray) -> tuple[int, ...]:
        if cand.size == 0:
            return ()
        take = min(k, cand.size)
        picked = rng.choice(cand, size=take, replace=False)
        return tuple(int(i) for i in np.sort(picked))

    return draw(stuttered_cand), draw(fluent_cand)


def mine_easy(p: np.ndarray, easy_ratio: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Pick the max(1, floor(T/easy_ratio)) most and least stutter-like frames.

    Ties break toward the lower index on both sides. For distinct
    probabilities the two selections are disjoint whenever T >= 2k; clips
    shorter than 2k (or tied values, which both sides resolve low-index
    first) can make them overlap.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size < 1:
        raise ValidationError("expected a non-empty 1-D probability array")
    k = selection_count(p.size, easy_ratio)
    descending = np.argsort(-p, kind="stable")
    ascending = np.argsort(p, kind="stable")
    stuttered = tuple(int(i) for i in np.sort(descending[:k]))
    fluent = tuple(int(i) for i in np.sort(ascending[:k]))
    return stuttered, fluent


@dataclass(frozen=True)
class MinedIndices:
    """Frame index selections for one clip (selection is not differentiable)."""

    confusing_stuttered: tuple[int, ...]
    confusing_fluent: tuple[int, ...]
    easy_stuttered: tuple[int, ...]
    easy_fluent: tuple[int, ...]


@dataclass
class MinedFrames:
    """Index selections plus the gathered embedding rows for one clip."""

    indices: MinedIndices
    emb_confusing_stuttered: tc.Node | None
    emb_confusing_fluent: tc.Node | None
    emb_easy_stuttered: tc.Node
    emb_easy_fluent: tc.Node


def mine_indices(
    p: np.ndarray,
    *,
    threshold: float,
    small_mask: int,
    large_mask: int,
    confusing_ratio: int,
    easy_ratio: int,
    rng: np.random.Generator,
) -> MinedIndices:
    """Run both miners on detached frame probabilities."""
    b = binarize(p, threshold)
    conf_st, conf_fl = mine_confusing(b, small_mask, large_mask, confusing_ratio, rng)
    easy_st, easy_fl = mine_easy(p, easy_ratio)
    return MinedIndices(conf_st, conf_fl, easy_st, easy_fl)


def gather_mined(embeddings: tc.Node, indices: MinedIndices) -> MinedFrames:
    """Gather embedding rows for the mined indices; gradients flow only there."""
    def pick(idx: tuple[int, ...]) -> tc.Node | None:
        return tc.gather_rows(embeddings, list(idx)) if idx else None

    easy_st = tc.gather_rows(embeddings, list(indices.easy_stuttered))
    easy_fl = tc.gather_rows(embeddings, list(indices.easy_fluent))
    return MinedFrames(
        indices,
        pick(indices.confusing_stuttered),
        pick(indices.confusing_fluent),
        easy_st,
        easy_fl,
    )


@dataclass
class MorphologyCheckResult:
    cases: int
    mismatches: int

    @property
    def ok(self) -> bool:
        return self.mismatches == 0


def _naive_batch(bits: np.ndarray, l: int, minimum: bool) -> np.ndarray:
    """Window scan over a batch of masks, written without the block trick."""
    n_seq, t = bits.shape
    lo = (l - 1) // 2 if minimum else l // 2
    padded = np.zeros((n_seq, t + 2 * l), dtype=np.uint8)
    padded[:, l : l + t] = bits
    out = np.ones((n_seq, t), dtype=np.uint8) if minimum else np.zeros((n_seq, t), dtype=np.uint8)
    for off in range(l):
        window = padded[:, l - lo + off : l - lo + off + t]
        out = np.minimum(out, window) if minimum else np.maximum(out, window)
    return out


def run_morphology_check(
    n_random: int = 10_000, max_t: int = 1000, seed: int = 0
) -> MorphologyCheckResult:
    """Compare the O(T) filters against the naive scans.

    Exhaustive over every binary sequence with T <= 16 for window lengths
    {1, 2, 3, 6, 9}, then `n_random` random sequences with T up to `max_t`
    and window lengths up to 32.
    """
    cases = 0
    mismatches = 0
    for t in range(1, 17):
        bits = ((np.arange(2 ** t)[:, None] >> np.arange(t)) & 1).astype(np.uint8)
        for l in (1, 2, 3, 6, 9):
            fast_e = _erode_batch(bits, l)
            fast_d = _dilate_batch(bits, l)
            naive_e = _naive_batch(bits, l, minimum=True)
            naive_d = _naive_batch(bits, l, minimum=False)
            cases += 2 * bits.shape[0]
            mismatches += int(np.any(fast_e != naive_e, axis=1).sum())
            mismatches += int(np.any(fast_d != naive_d, axis=1).sum())

    rng = np.random.default_rng(seed)
    for _ in range(n_random):
        t = int(rng.integers(1, max_t + 1))
        l = int(rng.integers(1, 33))
        b = rng.integers(0, 2, t).astype(np.uint8)
        cases += 2
        if not np.array_equal(erode(b, l), _naive_batch(b[None, :], l, minimum=True)[0]):
            mismatches += 1
        if not np.array_equal(dilate(b, l), _naive_batch(b[None, :], l, minimum=False)[0]):
            mismatches += 1
    return MorphologyCheckResult(cases, mismatches)
