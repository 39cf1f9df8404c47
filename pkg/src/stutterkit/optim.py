"""Adaptive-moment gradient descent over a named parameter table."""

from __future__ import annotations

import numpy as np

from . import tensor as tc
from .errors import NumericalError, ValidationError


class Adam:
    """Standard first/second-moment optimizer with bias correction.

    Parameters update in sorted name order, so a run is fully determined by
    the gradients it sees. A step that would write non-finite values raises
    before touching the model.
    """

    def __init__(
        self,
        params: dict[str, tc.Node],
        learning_rate: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if learning_rate <= 0 or eps <= 0:
            raise ValidationError("learning_rate and eps must be positive")
        if not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0:
            raise ValidationError("beta1 and beta2 must lie in [0, 1)")
        self.params = params
        self.lr = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {name: np.zeros_like(p.value) for name, p in params.items()}
        self._v = {name: np.zeros_like(p.value) for name, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        updates = {}
        for name in sorted(self.params):
            p = self.params[name]
            g = p.grad if p.grad is not None else np.zeros_like(p.value)
            m = self._m[name] = self.beta1 * self._m[name] + (1.0 - self.beta1) * g
            v = self._v[name] = self.beta2 * self._v[name] + (1.0 - self.beta2) * (g * g)
            new_value = p.value - self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            if not np.all(np.isfinite(new_value)):
                raise NumericalError(f"optimizer produced non-finite values for {name}")
            updates[name] = new_value
        for name, value in updates.items():
            self.params[name].value = value
