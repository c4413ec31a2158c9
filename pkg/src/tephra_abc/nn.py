"""Small fully connected ReLU networks trained with momentum SGD.

Hidden layers use ReLU (derivative 0 at 0), the output layer is linear.
Weight matrices are stored ``(out, in)``; batches are row-major ``(n, in)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .seeding import make_rng


class NonFiniteError(FloatingPointError):
    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message)
        self.layer = layer


@dataclass(frozen=True)
class Network:
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        ws = tuple(np.array(w, dtype=float, ndmin=2) for w in self.weights)
        bs = tuple(np.array(b, dtype=float).ravel() for b in self.biases)
        if not ws or len(ws) != len(bs):
            raise ValueError("network needs one bias per weight matrix and at least one layer")
        for k, (w, b) in enumerate(zip(ws, bs)):
            if w.shape[0] != b.size:
                raise ValueError(f"layer {k}: weight has {w.shape[0]} rows but bias has {b.size} entries")
            if k and w.shape[1] != ws[k - 1].shape[0]:
                raise ValueError(f"layer {k}: expects {w.shape[1]} inputs, previous layer gives {ws[k - 1].shape[0]}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise NonFiniteError(f"layer {k} has non-finite parameters", layer=k)
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_out(self) -> int:
        return self.weights[-1].shape[0]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def from_params(cls, params: Sequence[np.ndarray]) -> "Network":
        return cls(tuple(params[0::2]), tuple(params[1::2]))

    def to_layers(self) -> list[dict]:
        return [{"w": w.tolist(), "b": b.tolist()} for w, b in zip(self.weights, self.biases)]

    @classmethod
    def from_layers(cls, layers: Sequence[dict]) -> "Network":
        return cls(tuple(np.asarray(l["w"], dtype=float) for l in layers), tuple(np.asarray(l["b"], dtype=float) for l in layers))


def init_network(sizes: Sequence[int], seed: int) -> Network:
    """Glorot-uniform weights, zero biases."""
    if len(sizes) < 2:
        raise ValueError("need at least input and output sizes")
    rng = make_rng(int(seed), "init")
    ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        ws.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        bs.append(np.zeros(fan_out))
    return Network(tuple(ws), tuple(bs))


def _as_batch(net: Network, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != net.n_in:
        raise ValueError(f"input has {x.shape[1]} features, network expects {net.n_in}")
    return x, single


def forward(net: Network, x) -> np.ndarray:
    x, single = _as_batch(net, x)
    h = x
    last = len(net.weights) - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w.T + b
        if k < last:
            h = np.maximum(h, 0.0)
    return h[0] if single else h


def _forward_cache(net: Network, x: np.ndarray) -> list[np.ndarray]:
    acts = [x]
    last = len(net.weights) - 1
    h = x
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w.T + b
        if k < last:
            h = np.maximum(h, 0.0)
        if not np.all(np.isfinite(h)):
            raise NonFiniteError(f"non-finite activations at layer {k}", layer=k)
        acts.append(h)
    return acts


def backward(net: Network, acts: list[np.ndarray], grad_out: np.ndarray) -> list[np.ndarray]:
    """Reverse pass; returns gradients in :meth:`Network.params` order."""
    grads: list[np.ndarray] = [None] * (2 * len(net.weights))  # type: ignore[list-item]
    delta = grad_out
    for k in range(len(net.weights) - 1, -1, -1):
        if k < len(net.weights) - 1:
            delta = delta * (acts[k + 1] > 0)
        grads[2 * k] = delta.T @ acts[k]
        grads[2 * k + 1] = delta.sum(axis=0)
        if not (np.all(np.isfinite(grads[2 * k])) and np.all(np.isfinite(grads[2 * k + 1]))):
            raise NonFiniteError(f"non-finite gradient at layer {k}", layer=k)
        if k:
            delta = delta @ net.weights[k]
    return grads


LossAdjoint = Callable[[np.ndarray], tuple[float, np.ndarray]]


def gradient(net: Network, loss_adjoint: LossAdjoint, inputs) -> tuple[float, list[np.ndarray]]:
    """Loss and its gradient w.r.t. every weight and bias.

    ``loss_adjoint`` maps the ``(n, out)`` output batch to ``(loss, dloss/doutputs)``.
    """
    x, _ = _as_batch(net, inputs)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    acts = _forward_cache(net, x)
    loss, grad_out = loss_adjoint(acts[-1])
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite loss", layer=len(net.weights) - 1)
    return float(loss), backward(net, acts, np.asarray(grad_out, dtype=float))


@dataclass(frozen=True)
class SGDConfig:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    epochs: int = 400
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


def zero_velocity(net: Network) -> list[np.ndarray]:
    return [np.zeros_like(p) for p in net.params()]


def sgd_step(net: Network, grads, cfg: SGDConfig, velocity=None) -> tuple[Network, list[np.ndarray]]:
    """``v <- momentum * v - lr * grad``; ``w <- w + v``."""
    params = net.params()
    if velocity is None:
        velocity = zero_velocity(net)
    if len(grads) != len(params) or len(velocity) != len(params):
        raise ValueError("gradient/velocity structure does not match the network")
    new_params, new_vel = [], []
    for p, g, v in zip(params, grads, velocity):
        if np.shape(g) != p.shape or np.shape(v) != p.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {np.shape(g)}, velocity {np.shape(v)}")
        v = cfg.momentum * v - cfg.learning_rate * g
        new_vel.append(v)
        new_params.append(p + v)
    return Network.from_params(new_params), new_vel


def fold_input_affine(net: Network, shift, scale) -> Network:
    """Network ``x -> net((x - shift) / scale)`` expressed without preprocessing."""
    shift = np.asarray(shift, dtype=float)
    scale = np.asarray(scale, dtype=float)
    w0 = net.weights[0] / scale
    b0 = net.biases[0] - w0 @ shift
    return Network((w0,) + net.weights[1:], (b0,) + net.biases[1:])


def fold_output_affine(net: Network, shift, scale) -> Network:
    """Network ``x -> net(x) * scale + shift``."""
    shift = np.asarray(shift, dtype=float)
    scale = np.asarray(scale, dtype=float)
    wl = net.weights[-1] * scale[:, None]
    bl = net.biases[-1] * scale + shift
    return Network(net.weights[:-1] + (wl,), net.biases[:-1] + (bl,))
