"""Plain-text key=value config files for the CLI.

One `key = value` pair per line; blank lines and `#` comments are ignored.
Encoder fields (input_dim, model_dim, n_blocks, n_heads, conv_kernel,
ffn_mult, dropout) are accepted as flat keys alongside the training fields.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .errors import ValidationError
from .features import SyntheticSpec
from .model import EncoderConfig
from .pipeline import TrainConfig

_ENCODER_FIELDS = {f.name for f in dataclasses.fields(EncoderConfig)}
_TRAIN_FIELDS = {
    f.name for f in dataclasses.fields(TrainConfig) if f.name not in ("encoder", "classifier")
}
_SPEC_FIELDS = {f.name for f in dataclasses.fields(SyntheticSpec)}


def parse_kv_file(path: str | Path) -> dict[str, str]:
    out: dict[str, str] = {}
    for ln, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{ln}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in out:
            raise ValidationError(f"{path}:{ln}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def _coerce(raw: str, target_type, key: str):
    try:
        if target_type is bool:
            lowered = raw.lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        if target_type is str:
            return raw
        if target_type == tuple[float, ...]:
            return tuple(float(v) for v in raw.split(","))
    except ValueError as err:
        raise ValidationError(f"config key {key!r}: {err}") from err
    raise ValidationError(f"config key {key!r} has unsupported type {target_type}")


def _field_types(cls) -> dict[str, type]:
    resolved = {}
    for f in dataclasses.fields(cls):
        resolved[f.name] = f.type if not isinstance(f.type, str) else {
            "int": int, "float": float, "bool": bool, "str": str,
            "tuple[float, ...]": tuple[float, ...],
        }.get(f.type, str)
    return resolved


def train_config_from_items(items: dict[str, str]) -> TrainConfig:
    train_types = _field_types(TrainConfig)
    enc_types = _field_types(EncoderConfig)
    train_kwargs: dict = {}
    enc_kwargs: dict = {}
    for key, raw in items.items():
        if key in _TRAIN_FIELDS:
            train_kwargs[key] = _coerce(raw, train_types[key], key)
        elif key in _ENCODER_FIELDS:
            enc_kwargs[key] = _coerce(raw, enc_types[key], key)
        else:
            raise ValidationError(f"unknown training config key {key!r}")
    return TrainConfig(encoder=EncoderConfig(**enc_kwargs), **train_kwargs)


def load_train_config(path: str | Path | None, seed: int | None = None) -> TrainConfig:
    items = parse_kv_file(path) if path is not None else {}
    if seed is not None:
        items["seed"] = str(seed)
    return train_config_from_items(items)


def load_synth_spec(path: str | Path | None, seed: int | None = None) -> SyntheticSpec:
    items = parse_kv_file(path) if path is not None else {}
    if seed is not None:
        items["seed"] = str(seed)
    types = _field_types(SyntheticSpec)
    kwargs: dict = {}
    for key, raw in items.items():
        if key not in _SPEC_FIELDS:
            raise ValidationError(f"unknown synthesis config key {key!r}")
        target = tuple[float, ...] if key == "insert_probs" else types[key]
        kwargs[key] = _coerce(raw, target, key)
    return SyntheticSpec(**kwargs)
