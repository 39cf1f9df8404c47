"""Encoder and classification heads.

The encoder is a reduced Conformer-style stack: per block, pre-norm
self-attention, then a depthwise+pointwise convolution module with SiLU,
then a feed-forward module, each wrapped in a residual connection. The
input is first projected to the model dimension and given absolute
sinusoidal position information.

The audio head mean-pools over time into per-class clip probabilities; the
frame head is two temporal convolutions (kernels 9 then 7) with a ReLU in
between, producing per-frame, per-class activation scores.
"""

from __future__ import annotations

import io
import json
import math
import os
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as tc
from .dataio import N_CLASSES
from .errors import CheckpointError, NumericalError, ValidationError

CHECKPOINT_MAGIC = b"FGCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int = 80
    model_dim: int = 64
    n_blocks: int = 3
    n_heads: int = 4
    conv_kernel: int = 15
    ffn_mult: int = 2
    dropout: float = 0.1

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ValidationError("n_blocks must be >= 1")
        if self.model_dim % self.n_heads != 0:
            raise ValidationError(
                f"model_dim {self.model_dim} must be divisible by n_heads {self.n_heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("dropout must lie in [0, 1)")
        if self.conv_kernel < 1 or self.ffn_mult < 1 or self.input_dim < 1:
            raise ValidationError("conv_kernel, ffn_mult and input_dim must be >= 1")


@dataclass(frozen=True)
class ClassifierConfig:
    """(kernel, out_channels) per temporal conv layer; ReLU between layers."""

    layers: tuple[tuple[int, int], ...] = ((9, N_CLASSES), (7, N_CLASSES))

    def __post_init__(self):
        if not self.layers:
            raise ValidationError("classifier needs at least one layer")
        if self.layers[-1][1] != N_CLASSES:
            raise ValidationError(f"final classifier width must be {N_CLASSES}")
        if any(k < 1 or o < 1 for k, o in self.layers):
            raise ValidationError("classifier kernel sizes and widths must be >= 1")


def _silu(x: tc.Node) -> tc.Node:
    return tc.mul(x, tc.sigmoid(x))


def sinusoidal_positions(t: int, d: int) -> np.ndarray:
    pos = np.arange(t, dtype=np.float64)[:, None]
    pe = np.zeros((t, d))
    for i in range(0, d, 2):
        angle = pos[:, 0] / (10_000.0 ** (i / d))
        pe[:, i] = np.sin(angle)
        if i + 1 < d:
            pe[:, i + 1] = np.cos(angle)
    return pe


class StutterModel:
    """Encoder plus audio-level and frame-level heads over one parameter table."""

    def __init__(
        self,
        encoder: EncoderConfig = EncoderConfig(),
        classifier: ClassifierConfig = ClassifierConfig(),
        seed: int = 0,
        params: dict[str, tc.Node] | None = None,
    ):
        self.encoder_config = encoder
        self.classifier_config = classifier
        self.seed = seed
        self.params = params if params is not None else self._init_params()
        expected = set(self._param_shapes())
        if set(self.params) != expected:
            missing = expected - set(self.params)
            extra = set(self.params) - expected
            raise CheckpointError(f"parameter table mismatch: missing {missing}, extra {extra}")

    def _param_shapes(self) -> dict[str, tuple[int, ...]]:
        e = self.encoder_config
        d, dh = e.model_dim, e.model_dim // e.n_heads
        shapes: dict[str, tuple[int, ...]] = {
            "in_proj.w": (e.input_dim, d),
            "in_proj.b": (d,),
        }
        for i in range(e.n_blocks):
            p = f"block{i}"
            shapes[f"{p}.attn.ln.gain"] = (d,)
            shapes[f"{p}.attn.ln.bias"] = (d,)
            for h in range(e.n_heads):
                shapes[f"{p}.attn.q{h}"] = (d, dh)
                shapes[f"{p}.attn.k{h}"] = (d, dh)
                shapes[f"{p}.attn.v{h}"] = (d, dh)
                shapes[f"{p}.attn.out{h}"] = (dh, d)
            shapes[f"{p}.conv.ln.gain"] = (d,)
            shapes[f"{p}.conv.ln.bias"] = (d,)
            shapes[f"{p}.conv.depth.w"] = (e.conv_kernel, d)
            shapes[f"{p}.conv.depth.b"] = (d,)
            shapes[f"{p}.conv.point.w"] = (d, d)
            shapes[f"{p}.conv.point.b"] = (d,)
            shapes[f"{p}.ffn.ln.gain"] = (d,)
            shapes[f"{p}.ffn.ln.bias"] = (d,)
            shapes[f"{p}.ffn.w1"] = (d, e.ffn_mult * d)
            shapes[f"{p}.ffn.b1"] = (e.ffn_mult * d,)
            shapes[f"{p}.ffn.w2"] = (e.ffn_mult * d, d)
            shapes[f"{p}.ffn.b2"] = (d,)
        shapes["audio_head.w"] = (d, N_CLASSES)
        shapes["audio_head.b"] = (N_CLASSES,)
        width = d
        for li, (k, out) in enumerate(self.classifier_config.layers):
            shapes[f"cls{li}.w"] = (k, width, out)
            shapes[f"cls{li}.b"] = (out,)
            width = out
        return shapes

    def _init_params(self) -> dict[str, tc.Node]:
        """Uniform +-sqrt(1/fan_in) init, drawn in fixed name order."""
        rng = np.random.default_rng(self.seed)
        params: dict[str, tc.Node] = {}
        for name, shape in self._param_shapes().items():
            if name.endswith("ln.gain"):
                value = np.ones(shape)
            elif name.endswith((".b", ".bias", "b1", "b2")):
                value = np.zeros(shape)
            else:
                fan_in = shape[0] if len(shape) < 3 else shape[0] * shape[1]
                bound = math.sqrt(1.0 / fan_in)
                value = rng.uniform(-bound, bound, shape)
            params[name] = tc.parameter(value)
        return params

    # ------------------------------------------------------------------
    # forward passes

    def _dropout(self, x: tc.Node, train: bool, rng: np.random.Generator | None) -> tc.Node:
        p = self.encoder_config.dropout
        if not train or p <= 0.0:
            return x
        if rng is None:
            raise ValidationError("training forward needs a dropout rng")
        mask = (rng.random(x.shape) >= p).astype(np.float64) / (1.0 - p)
        return tc.mul(x, tc.constant(mask))

    def encode(
        self,
        x,
        *,
        train: bool = False,
        rng: np.random.Generator | None = None,
        n_valid: int | None = None,
    ) -> tc.Node:
        """Encode [T, input_dim] features into [T', model_dim] embeddings.

        With n_valid set, only the first n_valid frames are real: the rest is
        batch padding and is sliced away before any computation, so padding
        can never leak into attention, convolution, pooling or mining.
        """
        e = self.encoder_config
        node = x if isinstance(x, tc.Node) else tc.constant(np.asarray(x, dtype=np.float64))
        if node.ndim != 2 or node.shape[1] != e.input_dim:
            raise ValidationError(
                f"expected [T, {e.input_dim}] features, got shape {node.shape}"
            )
        if n_valid is not None:
            if not 1 <= n_valid <= node.shape[0]:
                raise ValidationError(f"n_valid {n_valid} out of range for T={node.shape[0]}")
            if n_valid < node.shape[0]:
                node = tc.gather_rows(node, list(range(n_valid)))
        t = node.shape[0]
        p = self.params
        try:
            h = tc.add_rowvec(tc.matmul(node, p["in_proj.w"]), p["in_proj.b"])
            h = tc.add(h, tc.constant(sinusoidal_positions(t, e.model_dim)))
            for i in range(e.n_blocks):
                h = self._block(h, f"block{i}", train, rng)
        except NumericalError as err:
            raise NumericalError(f"encoder produced non-finite activations: {err}") from err
        return h

    def _block(self, h: tc.Node, prefix: str, train: bool, rng) -> tc.Node:
        p = self.params
        e = self.encoder_config
        dh = e.model_dim // e.n_heads
        scale = 1.0 / math.sqrt(dh)

        a_in = tc.layernorm(h, p[f"{prefix}.attn.ln.gain"], p[f"{prefix}.attn.ln.bias"])
        attn_out: tc.Node | None = None
        for head in range(e.n_heads):
            q = tc.matmul(a_in, p[f"{prefix}.attn.q{head}"])
            k = tc.matmul(a_in, p[f"{prefix}.attn.k{head}"])
            v = tc.matmul(a_in, p[f"{prefix}.attn.v{head}"])
            weights = tc.softmax_rows(tc.mul(tc.matmul(q, tc.transpose(k)), scale))
            ctx = tc.matmul(tc.matmul(weights, v), p[f"{prefix}.attn.out{head}"])
            attn_out = ctx if attn_out is None else tc.add(attn_out, ctx)
        h = tc.add(h, self._dropout(attn_out, train, rng))

        c_in = tc.layernorm(h, p[f"{prefix}.conv.ln.gain"], p[f"{prefix}.conv.ln.bias"])
        c = tc.depthwise_conv1d(c_in, p[f"{prefix}.conv.depth.w"], p[f"{prefix}.conv.depth.b"])
        c = tc.add_rowvec(tc.matmul(c, p[f"{prefix}.conv.point.w"]), p[f"{prefix}.conv.point.b"])
        h = tc.add(h, self._dropout(_silu(c), train, rng))

        f_in = tc.layernorm(h, p[f"{prefix}.ffn.ln.gain"], p[f"{prefix}.ffn.ln.bias"])
        f = _silu(tc.add_rowvec(tc.matmul(f_in, p[f"{prefix}.ffn.w1"]), p[f"{prefix}.ffn.b1"]))
        f = tc.add_rowvec(tc.matmul(f, p[f"{prefix}.ffn.w2"]), p[f"{prefix}.ffn.b2"])
        return tc.add(h, self._dropout(f, train, rng))

    def audio_probs(self, embeddings: tc.Node) -> tc.Node:
        """Clip-level class probabilities: mean pool, linear, sigmoid."""
        pooled = tc.reduce_mean(embeddings, axis=0)
        return tc.sigmoid(tc.add(tc.matmul(pooled, self.params["audio_head.w"]),
                                 self.params["audio_head.b"]))

    def frame_scores(self, embeddings: tc.Node) -> tc.Node:
        """Per-frame class activation scores [T, C]."""
        h = embeddings
        last = len(self.classifier_config.layers) - 1
        for li in range(last + 1):
            h = tc.conv1d(h, self.params[f"cls{li}.w"], self.params[f"cls{li}.b"])
            if li < last:
                h = tc.relu(h)
        return h

    # ------------------------------------------------------------------
    # checkpoints

    def save(self, path: str | Path) -> None:
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<I", CHECKPOINT_VERSION))
        config = {
            "encoder": asdict(self.encoder_config),
            "classifier": {"layers": [list(l) for l in self.classifier_config.layers]},
            "seed": self.seed,
        }
        blob = json.dumps(config, sort_keys=True).encode("utf-8")
        buf.write(struct.pack("<I", len(blob)))
        buf.write(blob)
        buf.write(struct.pack("<I", len(self.params)))
        for name in sorted(self.params):
            value = self.params[name].value
            encoded = name.encode("utf-8")
            buf.write(struct.pack("<H", len(encoded)))
            buf.write(encoded)
            buf.write(struct.pack("<B", value.ndim))
            for dim in value.shape:
                buf.write(struct.pack("<I", dim))
            buf.write(value.astype("<f8").tobytes(order="C"))
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(buf.getvalue())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | Path) -> "StutterModel":
        def need(f, n, what):
            data = f.read(n)
            if len(data) != n:
                raise CheckpointError(f"truncated checkpoint: short read in {what}")
            return data

        with open(path, "rb") as f:
            if f.read(4) != CHECKPOINT_MAGIC:
                raise CheckpointError(f"{path}: bad checkpoint magic")
            (version,) = struct.unpack("<I", need(f, 4, "version"))
            if version != CHECKPOINT_VERSION:
                raise CheckpointError(
                    f"{path}: unsupported checkpoint version {version} "
                    f"(expected {CHECKPOINT_VERSION})"
                )
            (json_len,) = struct.unpack("<I", need(f, 4, "config length"))
            config = json.loads(need(f, json_len, "config").decode("utf-8"))
            (n_tensors,) = struct.unpack("<I", need(f, 4, "tensor count"))
            params: dict[str, tc.Node] = {}
            for _ in range(n_tensors):
                (name_len,) = struct.unpack("<H", need(f, 2, "name length"))
                name = need(f, name_len, "name").decode("utf-8")
                (rank,) = struct.unpack("<B", need(f, 1, "rank"))
                shape = tuple(
                    struct.unpack("<I", need(f, 4, "shape"))[0] for _ in range(rank)
                )
                count = int(np.prod(shape)) if shape else 1
                data = np.frombuffer(need(f, 8 * count, f"tensor {name}"), dtype="<f8")
                params[name] = tc.parameter(data.reshape(shape))
            if f.read(1):
                raise CheckpointError(f"{path}: trailing bytes after tensor table")
        encoder = EncoderConfig(**config["encoder"])
        classifier = ClassifierConfig(
            layers=tuple(tuple(l) for l in config["classifier"]["layers"])
        )
        return cls(encoder, classifier, seed=config.get("seed", 0), params=params)
