"""Small dense networks with hand-written backprop and first-order optimizers.

Everything is float64 numpy; a batch is a 2-D array ``(batch, features)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

Tensor = np.ndarray

ACTIVATIONS = ("tanh", "relu", "sigmoid", "identity")


def _sigmoid(x):
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "sigmoid":
        return _sigmoid(z)
    return z


def _act_grad(name, z, a):
    """Derivative of the activation given pre-activation ``z`` and output ``a``."""
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return (z > 0).astype(float)
    if name == "sigmoid":
        return a * (1.0 - a)
    return np.ones_like(z)


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    post: list[np.ndarray]


class DenseNetwork:
    """Multi-layer perceptron.

    Args:
        widths: layer sizes including input and output, e.g. ``[3, 32, 32, 1]``.
        activations: one name per weight layer.
        rng: generator for Glorot-uniform weights (biases start at zero).
    """

    def __init__(self, widths, activations, rng: np.random.Generator | None = None):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError("need at least an input and an output layer")
        if len(activations) != len(widths) - 1:
            raise ValueError("one activation per weight layer")
        for a in activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        self.widths = widths
        self.activations = list(activations)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.n_params:
            raise ValueError("flat parameter vector has the wrong size")
        pos = 0
        for p in self.params:
            p[...] = flat[pos:pos + p.size].reshape(p.shape)
            pos += p.size

    def copy(self) -> "DenseNetwork":
        net = DenseNetwork.__new__(DenseNetwork)
        net.widths = list(self.widths)
        net.activations = list(self.activations)
        net.weights = [w.copy() for w in self.weights]
        net.biases = [b.copy() for b in self.biases]
        return net

    def forward(self, x, keep_cache: bool = False):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.shape[-1] != self.widths[0]:
            raise ValueError(f"expected {self.widths[0]} inputs, got {x.shape[-1]}")
        cache = ForwardCache([], [], []) if keep_cache else None
        a = x
        for w, b, act in zip(self.weights, self.biases, self.activations):
            z = a @ w + b
            out = _act(act, z)
            if cache is not None:
                cache.inputs.append(a)
                cache.pre.append(z)
                cache.post.append(out)
            a = out
        if single:
            a = a[0]
        return (a, cache) if keep_cache else a

    __call__ = forward

    def backward(self, cache: ForwardCache, grad_out) -> tuple[list[np.ndarray], np.ndarray]:
        """Gradients of ``sum(grad_out * output)`` w.r.t. parameters and input.

        Returns ``(grads, grad_input)`` with ``grads`` aligned to :attr:`params`.
        """
        g = np.asarray(grad_out, dtype=float)
        if g.ndim == 1:
            g = g[None, :]
        grads: list[np.ndarray] = []
        for layer in range(len(self.weights) - 1, -1, -1):
            dz = g * _act_grad(self.activations[layer], cache.pre[layer], cache.post[layer])
            grads = [cache.inputs[layer].T @ dz, dz.sum(axis=0)] + grads
            g = dz @ self.weights[layer].T
        return grads, g

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params)

    def to_dict(self) -> dict:
        return {
            "widths": self.widths,
            "activations": self.activations,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenseNetwork":
        net = cls.__new__(cls)
        net.widths = [int(w) for w in d["widths"]]
        net.activations = list(d["activations"])
        net.weights = [np.array(w, dtype=float).reshape(a, b)
                       for w, a, b in zip(d["weights"], net.widths[:-1], net.widths[1:])]
        net.biases = [np.array(b, dtype=float) for b in d["biases"]]
        return net


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
            "eps": self.eps, "step": self.step,
            "m": [a.tolist() for a in self.m], "v": [a.tolist() for a in self.v],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerState":
        st = cls(d["kind"], d["lr"], d["beta1"], d["beta2"], d["eps"], d["step"])
        st.m = [np.array(a, dtype=float) for a in d["m"]]
        st.v = [np.array(a, dtype=float) for a in d["v"]]
        return st


def apply_update(params: list[np.ndarray], grads: list[np.ndarray], opt: OptimizerState) -> bool:
    """In-place descent step.  Returns False (and changes nothing) on non-finite grads."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise ValueError("gradient shape mismatch")
        if not np.all(np.isfinite(g)):
            return False
    if opt.kind == "sgd":
        for p, g in zip(params, grads):
            p -= opt.lr * g
        opt.step += 1
        return True
    if not opt.m:
        opt.m = [np.zeros_like(p) for p in params]
        opt.v = [np.zeros_like(p) for p in params]
    opt.step += 1
    c1 = 1.0 - opt.beta1 ** opt.step
    c2 = 1.0 - opt.beta2 ** opt.step
    for p, g, m, v in zip(params, grads, opt.m, opt.v):
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        p -= opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    return True


def save_checkpoint(path, nets: dict[str, DenseNetwork], opts: dict[str, OptimizerState] | None = None,
                    extra: dict | None = None):
    doc = {
        "networks": {k: n.to_dict() for k, n in nets.items()},
        "optimizers": {k: o.to_dict() for k, o in (opts or {}).items()},
        "extra": extra or {},
    }
    # json writes floats with repr, the shortest string that round-trips exactly
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path):
    doc = json.loads(Path(path).read_text())
    nets = {k: DenseNetwork.from_dict(v) for k, v in doc["networks"].items()}
    opts = {k: OptimizerState.from_dict(v) for k, v in doc.get("optimizers", {}).items()}
    return nets, opts, doc.get("extra", {})


def numeric_gradient(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x`` (perturbs ``x`` in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g
