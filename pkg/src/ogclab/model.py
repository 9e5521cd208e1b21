"""A small ReLU MLP with hand-written backprop and clipped momentum SGD."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_MAGIC = b"OGCM"


class MlpModel:
    """Affine layers ``z = W x + b`` with ReLU between them.

    ``weights[i]`` has shape ``(dims[i+1], dims[i])``.
    """

    def __init__(self, layer_dims, weights=None, biases=None, seed: int = 0):
        self.layer_dims = [int(d) for d in layer_dims]
        if len(self.layer_dims) < 2 or min(self.layer_dims) < 1:
            raise ValueError(f"invalid layer dims {layer_dims}")
        if weights is None:
            rng = np.random.default_rng(seed)
            weights, biases = [], []
            for d_in, d_out in zip(self.layer_dims[:-1], self.layer_dims[1:]):
                bound = np.sqrt(6.0 / d_in)
                weights.append(rng.uniform(-bound, bound, size=(d_out, d_in)))
                biases.append(np.zeros(d_out))
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_dims[i + 1], self.layer_dims[i]) or b.shape != (self.layer_dims[i + 1],):
                raise ValueError(f"layer {i} has inconsistent shapes {w.shape}, {b.shape}")

    @property
    def params(self):
        """Parameters in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpModel":
        return MlpModel(self.layer_dims, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]


def _forward_cache(model: MlpModel, X):
    acts = [X]
    h = X
    n = len(model.weights)
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w.T + b
        h = np.maximum(z, 0.0) if i < n - 1 else z
        acts.append(h)
    return acts


def forward(model: MlpModel, features):
    """Logits for a single feature vector ``(d,)`` or a batch ``(N, d)``."""
    X = np.asarray(features, dtype=np.float64)
    if np.isnan(X).any():
        raise ValueError("NaN in input features")
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != model.layer_dims[0]:
        raise ValueError(f"expected {model.layer_dims[0]} features, got {X.shape[1]}")
    out = _forward_cache(model, X)[-1]
    return out[0] if single else out


def backward(model: MlpModel, features, grad_logits):
    """Parameter gradients (W0, b0, W1, b1, ...) summed over the batch."""
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    G = np.atleast_2d(np.asarray(grad_logits, dtype=np.float64))
    acts = _forward_cache(model, X)
    grads = [None] * (2 * len(model.weights))
    delta = G
    for i in reversed(range(len(model.weights))):
        grads[2 * i] = delta.T @ acts[i]
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ model.weights[i]) * (acts[i] > 0)
    return grads


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


@dataclass
class OptimizerState:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    param_clip: float = 5.0
    buffers: list = field(default_factory=list)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if not self.param_clip > 0:
            raise ValueError("param_clip must be positive")


def sgd_step(model: MlpModel, opt: OptimizerState, grads):
    """Clip the loss gradient to ``param_clip``, add weight decay, take a momentum step.

    Updates ``model`` and ``opt`` in place and returns both.
    """
    params = model.params
    if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
        raise ValueError("gradient shapes do not match parameters")
    norm = global_norm(grads)
    if not np.isfinite(norm):
        raise FloatingPointError("non-finite parameter gradient; step aborted")
    scale = opt.param_clip / norm if norm > opt.param_clip else 1.0
    if not opt.buffers:
        opt.buffers = [np.zeros_like(p) for p in params]
    for p, g, buf in zip(params, grads, opt.buffers):
        buf *= opt.momentum
        buf += scale * g + opt.weight_decay * p
        p -= opt.lr * buf
    return model, opt


@dataclass(frozen=True)
class LrSchedule:
    initial: float = 0.1
    decay_factor: float = 0.1
    milestones: tuple = ()

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError("milestones must be strictly increasing")

    def lr_at(self, epoch: int) -> float:
        passed = sum(1 for m in self.milestones if epoch >= m)
        return self.initial * self.decay_factor**passed


def save_checkpoint(model: MlpModel, path) -> None:
    """``OGCM`` magic, uint32 layer count, uint32 dims, then float64 params (all little-endian)."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(model.layer_dims)))
        fh.write(struct.pack(f"<{len(model.layer_dims)}I", *model.layer_dims))
        for p in model.params:
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_checkpoint(path) -> MlpModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not an ogclab checkpoint")
    (n,) = struct.unpack_from("<I", data, 4)
    dims = struct.unpack_from(f"<{n}I", data, 8)
    flat = np.frombuffer(data, dtype="<f8", offset=8 + 4 * n).astype(np.float64)
    expected = sum(o * i + o for i, o in zip(dims[:-1], dims[1:]))
    if flat.size != expected:
        raise ValueError(f"checkpoint holds {flat.size} floats, expected {expected}")
    weights, biases, pos = [], [], 0
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        weights.append(flat[pos : pos + d_in * d_out].reshape(d_out, d_in))
        pos += d_in * d_out
        biases.append(flat[pos : pos + d_out])
        pos += d_out
    return MlpModel(dims, weights, biases)
