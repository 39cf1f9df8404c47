"""Feature file and manifest I/O.

Feature file layout (little-endian): magic "FGC1", u32 frame count T, u32
feature dim D, then T*D float32 values row-major. Values are float32 on disk
regardless of the float64 math that produced them.

Manifests are JSON lines: {"id", "feature_path", "labels": [5 ints 0/1]} with
an optional "frame_truth" of run-length [start, len] pairs (synthetic data
diagnostics only).
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FeatureFileError, ValidationError

FEATURE_MAGIC = b"FGC1"
LABEL_NAMES = ("/p", "/b", "/r", "/wr", "/i")
N_CLASSES = len(LABEL_NAMES)
_U32_MAX = 0xFFFFFFFF


def write_features(path: str | Path, frames: np.ndarray) -> None:
    """Write a [T, D] feature array atomically (temp file + rename)."""
    frames = np.asarray(frames)
    if frames.ndim != 2:
        raise ValidationError(f"features must be [T, D], got shape {frames.shape}")
    t, d = frames.shape
    if t < 1 or d < 1:
        raise ValidationError(f"features need at least one frame and one dim, got {t}x{d}")
    if t > _U32_MAX or d > _U32_MAX:
        raise FeatureFileError(f"dimensions {t}x{d} overflow the file format", "dimension")
    if not np.all(np.isfinite(frames)):
        raise ValidationError("features contain NaN/Inf")
    path = Path(path)
    payload = frames.astype("<f4").tobytes(order="C")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<II", t, d))
        f.write(payload)
    os.replace(tmp, path)


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FeatureFileError(f"truncated feature file: short read in {what}", "truncated")
    return data


def read_features(path: str | Path) -> np.ndarray:
    """Read a feature file back as float64 [T, D] (bit-exact float32 payload)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != FEATURE_MAGIC:
            raise FeatureFileError(f"bad feature file magic {magic!r}", "bad_magic")
        t, d = struct.unpack("<II", _read_exact(f, 8, "header"))
        if t < 1 or d < 1:
            raise FeatureFileError(f"invalid dimensions {t}x{d}", "dimension")
        if t * d > 1 << 31:
            raise FeatureFileError(f"dimensions {t}x{d} overflow a sane payload", "dimension")
        payload = _read_exact(f, 4 * t * d, "payload")
        if f.read(1):
            raise FeatureFileError("trailing bytes after payload", "truncated")
    return np.frombuffer(payload, dtype="<f4").reshape(t, d).astype(np.float64)


def encode_spans(mask: np.ndarray) -> tuple[tuple[int, int], ...]:
    """Run-length encode a boolean mask into (start, length) pairs."""
    mask = np.asarray(mask, dtype=bool)
    edges = np.flatnonzero(np.diff(np.concatenate([[False], mask, [False]])))
    starts, ends = edges[::2], edges[1::2]
    return tuple((int(s), int(e - s)) for s, e in zip(starts, ends))


def decode_spans(spans, t: int) -> np.ndarray:
    mask = np.zeros(t, dtype=bool)
    for start, length in spans:
        if start < 0 or length < 0 or start + length > t:
            raise ValidationError(f"span ({start}, {length}) exceeds clip length {t}")
        mask[start : start + length] = True
    return mask


@dataclass(frozen=True)
class ClipRecord:
    """One clip: feature file reference, 5 clip-level labels, optional truth spans."""

    clip_id: str
    feature_path: str
    labels: tuple[bool, bool, bool, bool, bool]
    frame_truth: tuple[tuple[int, int], ...] | None = None

    def __post_init__(self):
        if len(self.labels) != N_CLASSES:
            raise ValidationError(f"expected {N_CLASSES} labels, got {len(self.labels)}")

    @property
    def any_stutter(self) -> bool:
        return any(self.labels)


def write_manifest(path: str | Path, records: list[ClipRecord]) -> None:
    lines = []
    for r in records:
        obj = {
            "id": r.clip_id,
            "feature_path": r.feature_path,
            "labels": [int(b) for b in r.labels],
        }
        if r.frame_truth is not None:
            obj["frame_truth"] = [list(span) for span in r.frame_truth]
        lines.append(json.dumps(obj, sort_keys=True))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def read_manifest(path: str | Path) -> list[ClipRecord]:
    records = []
    for ln, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise ValidationError(f"{path}:{ln}: invalid JSON ({e})") from e
        try:
            labels = obj["labels"]
            if len(labels) != N_CLASSES:
                raise ValidationError(f"{path}:{ln}: expected {N_CLASSES} labels")
            truth = obj.get("frame_truth")
            records.append(
                ClipRecord(
                    clip_id=str(obj["id"]),
                    feature_path=str(obj["feature_path"]),
                    labels=tuple(bool(v) for v in labels),
                    frame_truth=None if truth is None else tuple(
                        (int(s), int(l)) for s, l in truth
                    ),
                )
            )
        except KeyError as e:
            raise ValidationError(f"{path}:{ln}: missing field {e}") from e
    if not records:
        raise ValidationError(f"{path}: empty manifest")
    return records


def resolve_feature_path(manifest_path: str | Path, record: ClipRecord) -> Path:
    """Feature paths are taken relative to the manifest's directory."""
    p = Path(record.feature_path)
    return p if p.is_absolute() else Path(manifest_path).parent / p
