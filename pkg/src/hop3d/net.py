"""Point-wise MLPs with hand-written reverse-mode gradients.

An :class:`Mlp` applies ``tanh`` on hidden layers and the identity on the
output layer. ``forward`` returns the output together with a
:class:`ForwardTape`; ``backward`` replays the tape to produce exact gradients
for every weight, bias and the input.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

IGNORE = -1


class StaleTapeError(RuntimeError):
    """Raised when a tape is replayed after the parameters it saw changed."""


def _fingerprint(arrays: Iterable[np.ndarray]) -> int:
    return hash(tuple(a.tobytes() for a in arrays))


@dataclass
class ForwardTape:
    inputs: list  # input to each layer
    outputs: list  # post-activation output of each layer
    fingerprint: int


class Mlp:
    """Stack of dense layers ``x -> tanh(x W1^T + b1) -> ... -> x Wk^T + bk``.

    Weights are stored as ``(out, in)`` matrices, so a batch of row-vector
    inputs ``X`` maps to ``X @ W.T + b``.
    """

    def __init__(self, layers: Sequence[tuple[np.ndarray, np.ndarray]]):
        if not layers:
            raise ValueError("an Mlp needs at least one layer")
        self.layers = [(np.asarray(W, dtype=np.float64), np.asarray(b, dtype=np.float64)) for W, b in layers]
        for i, (W, b) in enumerate(self.layers):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ValueError(f"layer {i}: weight {W.shape} and bias {b.shape} do not match")
            if i and W.shape[1] != self.layers[i - 1][0].shape[0]:
                raise ValueError(f"layer {i}: input dim {W.shape[1]} does not chain")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i}: non-finite parameters")

    @classmethod
    def init(cls, dims: Sequence[int], rng: np.random.Generator, scale: float = 1.0) -> "Mlp":
        """Glorot-uniform weights, zero biases."""
        layers = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            lim = scale * np.sqrt(6.0 / (fan_in + fan_out))
            layers.append((rng.uniform(-lim, lim, size=(fan_out, fan_in)), np.zeros(fan_out)))
        return cls(layers)

    @classmethod
    def zeros(cls, dims: Sequence[int]) -> "Mlp":
        return cls([(np.zeros((o, i)), np.zeros(o)) for i, o in zip(dims[:-1], dims[1:])])

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def dims(self) -> list[int]:
        return [self.in_dim] + [W.shape[0] for W, _ in self.layers]

    def tensors(self) -> list[np.ndarray]:
        out = []
        for W, b in self.layers:
            out += [W, b]
        return out

    def tensor_names(self, prefix: str) -> list[str]:
        names = []
        for i in range(len(self.layers)):
            names += [f"{prefix}.W{i}", f"{prefix}.b{i}"]
        return names

    def copy(self) -> "Mlp":
        return Mlp([(W.copy(), b.copy()) for W, b in self.layers])

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, ForwardTape]:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"input shape {x.shape} does not match layer input dim {self.in_dim}")
        inputs, outputs = [], []
        h = x
        last = len(self.layers) - 1
        for i, (W, b) in enumerate(self.layers):
            inputs.append(h)
            h = h @ W.T + b
            if i < last:
                h = np.tanh(h)
            outputs.append(h)
        return h, ForwardTape(inputs, outputs, _fingerprint(self.tensors()))

    def backward(self, tape: ForwardTape, upstream: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Return ``(param_grads, input_grad)``; grads ordered as :meth:`tensors`."""
        if tape.fingerprint != _fingerprint(self.tensors()):
            raise StaleTapeError("parameters changed since this tape was recorded")
        g = np.asarray(upstream, dtype=np.float64)
        if g.shape != tape.outputs[-1].shape:
            raise ValueError(f"upstream shape {g.shape} != output shape {tape.outputs[-1].shape}")
        grads: list[np.ndarray] = [None] * (2 * len(self.layers))
        last = len(self.layers) - 1
        for i in range(last, -1, -1):
            W, _ = self.layers[i]
            if i < last:
                g = g * (1.0 - tape.outputs[i] ** 2)
            grads[2 * i] = g.T @ tape.inputs[i]
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ W
        return grads, g


def backbone_forward(params: Mlp, point_features: np.ndarray) -> tuple[np.ndarray, ForwardTape]:
    if np.asarray(point_features).shape[0] < 1:
        raise ValueError("need at least one point")
    return params.forward(point_features)


def head_forward(params: Mlp, inputs: np.ndarray) -> tuple[np.ndarray, ForwardTape]:
    return params.forward(inputs)


def backward(params: Mlp, tape: ForwardTape, upstream: np.ndarray):
    return params.backward(tape, upstream)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: np.ndarray, labels, normalizer: int | None = None) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood over non-ignored rows and its logit gradient.

    ``labels`` holds column indices or :data:`IGNORE`. ``normalizer`` overrides
    the divisor (default: number of non-ignored rows), which lets a caller split
    one loss into several row subsets that add up to the whole.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} != ({n},)")
    mask = labels != IGNORE
    if np.any((labels[mask] < 0) | (labels[mask] >= k)):
        raise ValueError("label out of range")
    grad = np.zeros_like(logits)
    count = int(mask.sum()) if normalizer is None else normalizer
    if not mask.any() or count == 0:
        return 0.0, grad
    rows = np.flatnonzero(mask)
    lsm = log_softmax(logits[rows])
    loss = -lsm[np.arange(rows.size), labels[rows]].sum() / count
    p = np.exp(lsm)
    p[np.arange(rows.size), labels[rows]] -= 1.0
    grad[rows] = p / count
    return float(loss), grad


@dataclass(frozen=True)
class IndexEntry:
    name: str
    offset: int
    length: int
    shape: tuple


@dataclass(frozen=True)
class ParamIndex:
    """Ordered placement of named tensors inside one flat vector."""

    entries: tuple = field(default_factory=tuple)

    @property
    def size(self) -> int:
        return sum(e.length for e in self.entries)

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def entry(self, name: str) -> IndexEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    @classmethod
    def build(cls, named: Sequence[tuple[str, np.ndarray]]) -> "ParamIndex":
        entries, off = [], 0
        for name, arr in named:
            entries.append(IndexEntry(name, off, arr.size, tuple(arr.shape)))
            off += arr.size
        return cls(tuple(entries))


def flatten_tensors(named: Sequence[tuple[str, np.ndarray]]) -> tuple[np.ndarray, ParamIndex]:
    index = ParamIndex.build(named)
    if not named:
        return np.zeros(0), index
    return np.concatenate([np.ravel(a) for _, a in named]).astype(np.float64), index


def scatter_tensors(named: dict, flat: np.ndarray, index: ParamIndex) -> None:
    """Write ``flat`` back into the arrays of ``named`` in place."""
    flat = np.asarray(flat, dtype=np.float64)
    if flat.shape != (index.size,):
        raise ValueError(f"flat length {flat.shape} does not match index size {index.size}")
    for e in index.entries:
        target = named[e.name]
        if tuple(target.shape) != e.shape:
            raise ValueError(f"{e.name}: shape {target.shape} does not match index {e.shape}")
        target[...] = flat[e.offset:e.offset + e.length].reshape(e.shape)
