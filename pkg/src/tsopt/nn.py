"""Small feed-forward networks with hand-written gradients.

Everything the trainers need and nothing else: dense layers, a rectifier
hidden activation, an identity or tanh output head, analytic backprop,
Adam-style moment updates, and soft target blending. Inputs may be a single
vector or a (batch, features) matrix; parameter gradients are summed over
the batch, so callers scale the upstream signal for a mean.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "NonFiniteGradientError",
    "Mlp",
    "AdamState",
    "adam_step",
    "soft_update",
    "save_mlp",
    "load_mlp",
]

_OUTPUTS = ("identity", "tanh")


class NonFiniteGradientError(ValueError):
    """A gradient stopped being finite; training has diverged."""


class Mlp:
    """Dense feed-forward map with rectifier hidden layers.

    Weights start uniform in +-1/sqrt(fan_in), biases at zero, drawn from a
    seeded generator so construction is reproducible.
    """

    def __init__(
        self,
        sizes: tuple[int, ...],
        output: str = "identity",
        seed: int | np.random.Generator | None = 0,
    ):
        if len(sizes) < 2:
            raise ValueError("an Mlp needs at least input and output sizes")
        if any(s <= 0 for s in sizes):
            raise ValueError("all layer sizes must be positive")
        if output not in _OUTPUTS:
            raise ValueError(f"output must be one of {_OUTPUTS}")
        self.sizes = tuple(int(s) for s in sizes)
        self.output = output
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            self.biases.append(np.zeros(fan_out))

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def _forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        # cache[k] is the input to layer k; the final entry is the output.
        acts = [x]
        h = x
        last = self.num_layers - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T + b
            if k < last:
                h = np.maximum(z, 0.0)
            elif self.output == "tanh":
                h = np.tanh(z)
            else:
                h = z
            acts.append(h)
        return h, acts

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.sizes[0]:
            raise ValueError(f"expected {self.sizes[0]} input features, got {x.shape[-1]}")
        y, _ = self._forward(np.atleast_2d(x))
        return y[0] if x.ndim == 1 else y

    def backward(self, x, upstream) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
        """Gradients of sum(upstream * output) w.r.t. parameters and input.

        Returns (per-layer (dW, db) pairs, gradient on the input). Batched
        inputs sum their parameter gradients.
        """
        x = np.asarray(x, dtype=float)
        upstream = np.asarray(upstream, dtype=float)
        single = x.ndim == 1
        xb = np.atleast_2d(x)
        ub = np.atleast_2d(upstream)
        if ub.shape != (xb.shape[0], self.sizes[-1]):
            raise ValueError("upstream shape does not match the network output")
        _, acts = self._forward(xb)
        grads: list[tuple[np.ndarray, np.ndarray]] = [None] * self.num_layers  # type: ignore
        delta = ub
        if self.output == "tanh":
            delta = delta * (1.0 - acts[-1] ** 2)
        for k in range(self.num_layers - 1, -1, -1):
            inp = acts[k]
            grads[k] = (delta.T @ inp, delta.sum(axis=0))
            delta = delta @ self.weights[k]
            if k > 0:
                delta = delta * (acts[k] > 0.0)
        return grads, (delta[0] if single else delta)

    def copy(self) -> "Mlp":
        clone = Mlp.__new__(Mlp)
        clone.sizes = self.sizes
        clone.output = self.output
        clone.weights = [w.copy() for w in self.weights]
        clone.biases = [b.copy() for b in self.biases]
        return clone

    def zero_(self) -> "Mlp":
        for w, b in zip(self.weights, self.biases):
            w[:] = 0.0
            b[:] = 0.0
        return self

    def to_json_dict(self) -> dict:
        return {
            "sizes": list(self.sizes),
            "output": self.output,
            "layers": [
                {"weights": w.tolist(), "biases": b.tolist()}
                for w, b in zip(self.weights, self.biases)
            ],
        }

    @classmethod
    def from_json_dict(cls, payload: dict) -> "Mlp":
        net = cls(tuple(payload["sizes"]), output=payload["output"], seed=0)
        for layer, w, b in zip(payload["layers"], net.weights, net.biases):
            w[:] = np.asarray(layer["weights"], dtype=float)
            b[:] = np.asarray(layer["biases"], dtype=float)
        return net


@dataclass
class AdamState:
    """First/second moment accumulators for one network."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    v: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    @classmethod
    def for_net(cls, net: Mlp, lr: float, beta1: float = 0.9, beta2: float = 0.999) -> "AdamState":
        state = cls(lr=lr, beta1=beta1, beta2=beta2)
        for w, b in zip(net.weights, net.biases):
            state.m.append((np.zeros_like(w), np.zeros_like(b)))
            state.v.append((np.zeros_like(w), np.zeros_like(b)))
        return state


def adam_step(net: Mlp, grads, state: AdamState) -> None:
    """One in-place descent step along the given gradients."""
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    for k, (dw, db) in enumerate(grads):
        if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(db))):
            raise NonFiniteGradientError(f"non-finite gradient in layer {k}")
        mw, mb = state.m[k]
        vw, vb = state.v[k]
        mw *= b1
        mw += (1 - b1) * dw
        mb *= b1
        mb += (1 - b1) * db
        vw *= b2
        vw += (1 - b2) * dw**2
        vb *= b2
        vb += (1 - b2) * db**2
        net.weights[k] -= state.lr * (mw / bias1) / (np.sqrt(vw / bias2) + state.eps)
        net.biases[k] -= state.lr * (mb / bias1) / (np.sqrt(vb / bias2) + state.eps)


def soft_update(target: Mlp, online: Mlp, tau: float) -> None:
    """Blend target parameters toward the online network: (1-tau)*t + tau*o."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    if target.sizes != online.sizes or target.output != online.output:
        raise ValueError("target and online networks differ in shape")
    for tw, ow in zip(target.weights, online.weights):
        tw *= 1.0 - tau
        tw += tau * ow
    for tb, ob in zip(target.biases, online.biases):
        tb *= 1.0 - tau
        tb += tau * ob


def save_mlp(net: Mlp, path: str | Path) -> None:
    Path(path).write_text(json.dumps(net.to_json_dict(), sort_keys=True))


def load_mlp(path: str | Path) -> Mlp:
    return Mlp.from_json_dict(json.loads(Path(path).read_text()))
