"""Small dense networks with hand-written backprop, Adam and soft updates.

A :class:`DenseNet` may be *stacked*: with ``stack=k`` every weight carries a
leading axis of size ``k`` and the net evaluates ``k`` independent networks
in one batched matmul (input shape ``(k, batch, in)``). The followers use
this to update all their separate actors and critics in one pass.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

OUTPUTS = ("linear", "tanh")


class NumericalError(FloatingPointError):
    """A parameter or loss became non-finite."""


def _t(a):
    return np.swapaxes(a, -1, -2)


class DenseNet:
    def __init__(self, sizes, output: str = "linear", rng: np.random.Generator | None = None,
                 stack: int | None = None, final_scale: float = 1.0, output_bias: float = 0.0):
        if output not in OUTPUTS:
            raise ValueError(f"output must be one of {OUTPUTS}")
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        rng = rng or np.random.default_rng()
        self.sizes = tuple(int(s) for s in sizes)
        self.output = output
        self.stack = stack
        lead = () if stack is None else (stack,)
        self.params = []
        n_layers = len(self.sizes) - 1
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            scale = final_scale if i == n_layers - 1 else 1.0
            w = rng.uniform(-bound, bound, size=lead + (fan_in, fan_out)) * scale
            b = rng.uniform(-bound, bound, size=lead + (1, fan_out)) * scale
            if i == n_layers - 1:
                b += output_bias
            self.params += [w, b]

    @property
    def n_layers(self) -> int:
        return len(self.params) // 2

    def forward(self, x):
        """Return ``(y, cache)``; ``cache`` feeds :meth:`backward`."""
        a = np.asarray(x, dtype=float)
        inputs = []
        last = self.n_layers - 1
        for i in range(self.n_layers):
            w, b = self.params[2 * i], self.params[2 * i + 1]
            inputs.append(a)
            z = a @ w + b
            if i < last:
                a = np.maximum(z, 0.0)
            elif self.output == "tanh":
                a = np.tanh(z)
            else:
                a = z
        return a, (inputs, a)

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, dy):
        """Gradients of ``sum(dy * y)`` w.r.t. every parameter and the input."""
        inputs, y = cache
        dz = np.asarray(dy, dtype=float)
        if self.output == "tanh":
            dz = dz * (1.0 - y * y)
        grads = [None] * len(self.params)
        dx = None
        for i in range(self.n_layers - 1, -1, -1):
            a_in = inputs[i]
            w = self.params[2 * i]
            grads[2 * i] = _t(a_in) @ dz
            grads[2 * i + 1] = dz.sum(axis=-2, keepdims=True)
            da = dz @ _t(w)
            if i > 0:
                dz = da * (a_in > 0.0)
            else:
                dx = da
        return grads, dx

    def copy(self) -> "DenseNet":
        other = object.__new__(DenseNet)
        other.sizes, other.output, other.stack = self.sizes, self.output, self.stack
        other.params = [p.copy() for p in self.params]
        return other

    def check_finite(self, what: str = "network") -> None:
        for p in self.params:
            if not np.all(np.isfinite(p)):
                raise NumericalError(f"{what} has non-finite parameters")


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr, **kwargs) -> "AdamState":
        st = cls(lr=lr, **kwargs)
        st.m = [np.zeros_like(p) for p in params]
        st.v = [np.zeros_like(p) for p in params]
        return st


def adam_step(params, grads, state: AdamState):
    """One in-place Adam descent step; L2 ``weight_decay`` is added to the gradient."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if state.weight_decay:
            g = g + state.weight_decay * p
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def soft_update(target: DenseNet, online: DenseNet, tau: float) -> DenseNet:
    """``target <- tau * online + (1 - tau) * target`` for every parameter."""
    for t, o in zip(target.params, online.params):
        t *= 1.0 - tau
        t += tau * o
    return target
