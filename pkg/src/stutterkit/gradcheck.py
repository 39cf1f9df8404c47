"""Finite-difference verification of analytic gradients.

The numeric side only ever evaluates forward passes, so it stays independent
of the backward implementation it checks. ``run_gradient_checks`` covers every
differentiable op plus the full composite training loss on a tiny model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tc

FD_STEP = 1e-5
OP_TOL = 1e-6
COMPOSITE_TOL = 1e-4


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central finite-difference gradient of a scalar function, entry by entry."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.ravel()
    for i in range(x.size):
        xp = x.copy()
        xp.flat[i] += h
        xm = x.copy()
        xm.flat[i] -= h
        flat[i] = (f(xp) - f(xm)) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), 1e-12)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / denom)


@dataclass
class GradCheckCase:
    name: str
    rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.rel_err < self.tol


def check_node_input(
    name: str,
    build: Callable[[tc.Node], tc.Node],
    x0: np.ndarray,
    tol: float = OP_TOL,
    h: float = FD_STEP,
) -> GradCheckCase:
    """Compare backward() against central differences for one graph input.

    The op output is scalarized through a fixed random weighting so that ops
    with internal constraints (rows of a softmax sum to 1) still expose a
    nontrivial gradient.
    """
    probe = build(tc.parameter(x0))
    weights = np.random.default_rng(97).uniform(0.5, 1.5, probe.shape)

    def scalarize(node: tc.Node) -> tc.Node:
        if node.ndim == 0:
            return node
        return tc.reduce_sum(tc.mul(node, tc.constant(weights)))

    leaf = tc.parameter(x0)
    tc.backward(scalarize(build(leaf)))
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x0)

    def forward(x: np.ndarray) -> float:
        value = build(tc.parameter(x)).value
        return float(value if value.ndim == 0 else np.sum(value * weights))

    numeric = central_difference(forward, np.asarray(x0, dtype=np.float64), h=h)
    return GradCheckCase(name, relative_error(analytic, numeric), tol)


def check_op_gradients(seed: int = 0) -> list[GradCheckCase]:
    """Finite-difference every differentiable op on random inputs in [-2, 2]."""
    rng = np.random.default_rng(seed)

    def u(*shape):
        return rng.uniform(-2.0, 2.0, shape)

    cases: list[GradCheckCase] = []
    a34, b42 = u(3, 4), u(4, 2)
    x52 = u(5, 2)
    xw = u(6, 3)
    wconv = u(3, 3, 2)
    bconv = u(2)
    wdw = u(5, 3)
    bdw = u(3)
    gain, bias = u(4), u(4)
    vec = u(4)
    rows = u(5, 4)
    scales = u(5)
    pos = rng.uniform(0.5, 2.5, (4, 3))
    denom = rng.uniform(0.5, 2.5, (4, 3)) * np.where(rng.random((4, 3)) < 0.5, -1.0, 1.0)

    cases.append(check_node_input("add", lambda n: tc.add(n, tc.constant(x52)), u(5, 2)))
    cases.append(check_node_input("add_scalar", lambda n: tc.add(tc.constant(x52), tc.reduce_sum(n)), u(3)))
    cases.append(check_node_input("sub", lambda n: tc.sub(tc.constant(x52), n), u(5, 2)))
    cases.append(check_node_input("mul", lambda n: tc.mul(n, tc.constant(x52)), u(5, 2)))
    cases.append(check_node_input("mul_self", lambda n: tc.mul(n, n), u(5, 2)))
    cases.append(check_node_input("div", lambda n: tc.div(n, tc.constant(denom)), u(4, 3)))
    cases.append(check_node_input("div_denom", lambda n: tc.div(tc.constant(pos), n), denom))
    cases.append(check_node_input("neg", tc.neg, u(5, 2)))
    cases.append(check_node_input("sigmoid", tc.sigmoid, u(5, 2)))
    cases.append(check_node_input("relu", tc.relu, u(5, 2) + 0.05))
    cases.append(check_node_input("exp", tc.exp, u(5, 2)))
    cases.append(check_node_input("log", tc.log, pos))
    cases.append(check_node_input("sqrt", tc.sqrt, pos))
    cases.append(check_node_input("clip", lambda n: tc.clip(n, -1.0, 1.0), u(5, 2)))
    cases.append(check_node_input("matmul_a", lambda n: tc.matmul(n, tc.constant(b42)), a34))
    cases.append(check_node_input("matmul_b", lambda n: tc.matmul(tc.constant(a34), n), b42))
    cases.append(check_node_input("matmul_vec_mat", lambda n: tc.matmul(n, tc.constant(b42)), u(4)))
    cases.append(check_node_input("matmul_mat_vec", lambda n: tc.matmul(tc.constant(a34), n), u(4)))
    cases.append(check_node_input("matmul_dot", lambda n: tc.matmul(n, tc.constant(vec)), u(4)))
    cases.append(check_node_input("transpose", tc.transpose, u(3, 5)))
    cases.append(check_node_input("reshape", lambda n: tc.reshape(n, (2, 6)), u(3, 4)))
    cases.append(check_node_input("add_rowvec_x", lambda n: tc.add_rowvec(n, tc.constant(vec)), rows))
    cases.append(check_node_input("add_rowvec_v", lambda n: tc.add_rowvec(tc.constant(rows), n), vec))
    cases.append(check_node_input("scale_rows_x", lambda n: tc.scale_rows(n, tc.constant(scales)), rows))
    cases.append(check_node_input("scale_rows_s", lambda n: tc.scale_rows(tc.constant(rows), n), scales))
    cases.append(
        check_node_input("conv1d_x", lambda n: tc.conv1d(n, tc.constant(wconv), tc.constant(bconv)), xw)
    )
    cases.append(
        check_node_input("conv1d_w", lambda n: tc.conv1d(tc.constant(xw), n, tc.constant(bconv)), wconv)
    )
    cases.append(
        check_node_input("conv1d_bias", lambda n: tc.conv1d(tc.constant(xw), tc.constant(wconv), n), bconv)
    )
    wconv_even = u(4, 3, 2)
    cases.append(
        check_node_input(
            "conv1d_even_k",
            lambda n: tc.conv1d(n, tc.constant(wconv_even), tc.constant(bconv)),
            u(6, 3),
        )
    )
    xdw = u(7, 3)
    cases.append(
        check_node_input(
            "depthwise_x", lambda n: tc.depthwise_conv1d(n, tc.constant(wdw), tc.constant(bdw)), xdw
        )
    )
    cases.append(
        check_node_input(
            "depthwise_w", lambda n: tc.depthwise_conv1d(tc.constant(xdw), n, tc.constant(bdw)), wdw
        )
    )
    cases.append(check_node_input("reduce_sum_axis", lambda n: tc.reduce_sum(n, axis=1), u(4, 3)))
    cases.append(check_node_input("reduce_sum_all", lambda n: tc.reduce_sum(n), u(4, 3)))
    cases.append(check_node_input("reduce_mean_axis", lambda n: tc.reduce_mean(n, axis=0), u(4, 3)))
    cases.append(check_node_input("reduce_mean_all", lambda n: tc.reduce_mean(n), u(4, 3)))
    cases.append(check_node_input("reduce_max_axis", lambda n: tc.reduce_max(n, axis=1), u(4, 3)))
    cases.append(check_node_input("reduce_max_all", lambda n: tc.reduce_max(n), u(4, 3)))
    cases.append(
        check_node_input("gather_rows", lambda n: tc.gather_rows(n, [0, 2, 2, 4]), u(5, 3))
    )
    cases.append(
        check_node_input(
            "layernorm_x", lambda n: tc.layernorm(n, tc.constant(gain), tc.constant(bias)), u(5, 4)
        )
    )
    cases.append(
        check_node_input(
            "layernorm_gain", lambda n: tc.layernorm(tc.constant(rows), n, tc.constant(bias)), gain
        )
    )
    cases.append(
        check_node_input(
            "layernorm_bias", lambda n: tc.layernorm(tc.constant(rows), tc.constant(gain), n), bias
        )
    )
    cases.append(check_node_input("softmax_rows", tc.softmax_rows, u(4, 4)))
    return cases


def check_composite_loss(seed: int = 0) -> list[GradCheckCase]:
    """Finite-difference the full training loss on a tiny model.

    Mined frame indices are computed once at the base point and held fixed for
    both routes: index selection is discrete and carries no gradient, so the
    differentiable function is the loss given those indices.
    """
    from .losses import ContrastConfig, clip_loss
    from .model import ClassifierConfig, EncoderConfig, StutterModel

    rng = np.random.default_rng(seed)
    enc = EncoderConfig(input_dim=8, model_dim=8, n_blocks=1, n_heads=2, conv_kernel=5, dropout=0.0)
    model = StutterModel(enc, ClassifierConfig(), seed=seed)
    feats = rng.uniform(-2.0, 2.0, (16, 8))
    labels = (True, False, True, False, False)
    cfg = ContrastConfig()

    base_total, _, indices = clip_loss(
        model, feats, labels, cfg, mining_rng=np.random.default_rng(seed)
    )
    del base_total

    def loss_with(params_override: dict[str, np.ndarray] | None, feats_arr: np.ndarray) -> float:
        saved = {}
        if params_override:
            for name, val in params_override.items():
                saved[name] = model.params[name].value
                model.params[name].value = val
        try:
            total, _, _ = clip_loss(model, feats_arr, labels, cfg, frozen_indices=indices)
            return float(total.value)
        finally:
            for name, val in saved.items():
                model.params[name].value = val

    # analytic gradients in one backward pass
    tc.zero_grad(model.params)
    total, _, _ = clip_loss(model, feats, labels, cfg, frozen_indices=indices)
    tc.backward(total)

    cases: list[GradCheckCase] = []
    for name in sorted(model.params):
        p = model.params[name]
        analytic = p.grad if p.grad is not None else np.zeros_like(p.value)

        def f(x: np.ndarray, _name=name) -> float:
            return loss_with({_name: x}, feats)

        numeric = central_difference(f, p.value)
        cases.append(GradCheckCase(f"composite/{name}", relative_error(analytic, numeric), COMPOSITE_TOL))

    # gradient w.r.t. the input features through the whole stack
    x_leaf = tc.parameter(feats)
    tc.zero_grad(model.params)
    total, _, _ = clip_loss(model, x_leaf, labels, cfg, frozen_indices=indices)
    tc.backward(total)
    numeric = central_difference(lambda x: loss_with(None, x), feats)
    cases.append(
        GradCheckCase("composite/input", relative_error(x_leaf.grad, numeric), COMPOSITE_TOL)
    )
    return cases


def run_gradient_checks(seed: int = 0) -> list[GradCheckCase]:
    return check_op_gradients(seed) + check_composite_loss(seed)
