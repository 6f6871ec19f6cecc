"""Sequential dense networks with tape-based reverse mode, and Adam."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mathcore import Rng, ShapeError

ACTIVATIONS = ("tanh", "sigmoid", "relu", "identity")
BOUNDED = ("tanh", "sigmoid")


def _sigmoid(a):
    # split by sign so exp never overflows
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def activate(name: str, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(a)
    if name == "sigmoid":
        return _sigmoid(a)
    if name == "relu":
        return np.maximum(a, 0.0)
    if name == "identity":
        return a
    raise ValueError(f"unknown activation {name!r}")


def activation_grad(name: str, a: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Derivative of the activation given pre-activation ``a`` and output ``y``."""
    if name == "tanh":
        return 1.0 - y * y
    if name == "sigmoid":
        return y * (1.0 - y)
    if name == "relu":
        return (a > 0).astype(a.dtype)
    return np.ones_like(a)


class StaleTapeError(RuntimeError):
    pass


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"bad layer shapes {self.weight.shape}, {self.bias.shape}")

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]


@dataclass
class Tape:
    net_id: int
    version: int
    inputs: list
    pre: list
    outputs: list


@dataclass
class DenseNet:
    """A stack of fully connected layers.

    ``bounded=True`` marks a decoder mean network; its last activation must
    be tanh or sigmoid so every output stays in [-1, 1].
    """

    layers: list
    bounded: bool = False
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a network needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.n_out != nxt.n_in:
                raise ShapeError(f"layer widths do not chain: {prev.n_out} -> {nxt.n_in}")
        if self.bounded and self.layers[-1].activation not in BOUNDED:
            raise ValueError("a bounded (decoder) network must end in tanh or sigmoid")

    @classmethod
    def init(cls, sizes, activations, rng: Rng, bounded: bool = False) -> "DenseNet":
        """Glorot-uniform weights, zero biases."""
        if isinstance(activations, str):
            activations = [activations] * (len(sizes) - 1)
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        layers = []
        for k, (n_in, n_out, act) in enumerate(zip(sizes[:-1], sizes[1:], activations)):
            lim = np.sqrt(6.0 / (n_in + n_out))
            w = (2.0 * rng.split(k).uniform((n_out, n_in)) - 1.0) * lim
            layers.append(Layer(w, np.zeros(n_out), act))
        return cls(layers, bounded=bounded)

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"expected input (batch, {self.n_in}), got {x.shape}")
        inputs, pre, outputs = [], [], []
        h = x
        for layer in self.layers:
            inputs.append(h)
            a = h @ layer.weight.T + layer.bias
            h = activate(layer.activation, a)
            pre.append(a)
            outputs.append(h)
        return h, Tape(id(self), self.version, inputs, pre, outputs)

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, tape: Tape, grad_out):
        """Return ``(param_grads, grad_x)``; ``param_grads[k] = (dW, db)``."""
        if tape.net_id != id(self) or tape.version != self.version:
            raise StaleTapeError("tape does not belong to the current parameters")
        g = np.asarray(grad_out, dtype=np.float64)
        if g.shape != tape.outputs[-1].shape:
            raise ShapeError(f"gradient shape {g.shape} != output {tape.outputs[-1].shape}")
        grads = [None] * len(self.layers)
        for k in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[k]
            ga = g * activation_grad(layer.activation, tape.pre[k], tape.outputs[k])
            grads[k] = (ga.T @ tape.inputs[k], ga.sum(axis=0))
            g = ga @ layer.weight
        return grads, g

    def parameters(self, prefix: str = "") -> dict:
        out = {}
        for k, layer in enumerate(self.layers):
            out[f"{prefix}{k}.weight"] = layer.weight
            out[f"{prefix}{k}.bias"] = layer.bias
        return out

    @staticmethod
    def named_grads(grads, prefix: str = "") -> dict:
        out = {}
        for k, (gw, gb) in enumerate(grads):
            out[f"{prefix}{k}.weight"] = gw
            out[f"{prefix}{k}.bias"] = gb
        return out

    def touch(self):
        """Invalidate outstanding tapes after an in-place parameter update."""
        self.version += 1

    def to_dict(self) -> dict:
        return {
            "bounded": self.bounded,
            "layers": [
                {
                    "shape": list(l.weight.shape),
                    "activation": l.activation,
                    "weight": l.weight.ravel().tolist(),
                    "bias": l.bias.tolist(),
                }
                for l in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenseNet":
        layers = [
            Layer(
                np.array(l["weight"], dtype=np.float64).reshape(l["shape"]),
                np.array(l["bias"], dtype=np.float64),
                l["activation"],
            )
            for l in d["layers"]
        ]
        return cls(layers, bounded=d["bounded"])


class Adam:
    """Adam with bias correction; updates parameter arrays in place."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if not 1e-5 <= lr <= 1e-3:
            raise ValueError(f"learning rate {lr} outside [1e-5, 1e-3]")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
            if g.shape != params[name].shape:
                raise ShapeError(f"gradient for {name!r} has shape {g.shape}, "
                                 f"parameter has {params[name].shape}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
