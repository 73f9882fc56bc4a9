"""MLP feature extractor, growable linear classifier head and SGD.

Weights are stored as ``(fan_in, fan_out)`` so a layer computes ``x @ W + b``
on a row batch, i.e. ``W^T x`` for a single column vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import InvalidInputError, as_matrix, checksum


class ShapeError(ValueError):
    pass


def _init_uniform(rng, fan_in, fan_out):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class MlpBackbone:
    """Fully connected feature extractor with ReLU on hidden layers only."""

    def __init__(self, weights, biases):
        if len(weights) != len(biases) or not weights:
            raise ShapeError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {i}: weight {w.shape} incompatible with bias {b.shape}")
            if i and weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeError(f"layer {i}: input {w.shape[0]} != previous output {weights[i - 1].shape[1]}")
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]
        self.frozen = False
        self._cache = None

    @classmethod
    def init(cls, input_dim, hidden_dims, output_dim, rng):
        dims = [input_dim, *hidden_dims, output_dim]
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            weights.append(_init_uniform(rng, fan_in, fan_out))
            bound = 1.0 / np.sqrt(fan_in)
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(weights, biases)

    @property
    def input_dim(self):
        return self.weights[0].shape[0]

    @property
    def output_dim(self):
        return self.weights[-1].shape[1]

    def parameters(self):
        """Flat list of parameter arrays, in (W0, b0, W1, b1, ...) order."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def checksum(self):
        return checksum(*self.parameters())

    def forward(self, x, keep_cache=False):
        """Features for a batch ``(n, input_dim)`` or a single vector."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"expected input length {self.input_dim}, got shape {x.shape}")
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        self._cache = acts if keep_cache else None
        return h[0] if single else h

    def backward(self, grad_out):
        """Gradients of a loss w.r.t. every parameter, given dL/dfeatures.

        Must follow a ``forward(..., keep_cache=True)`` on the same batch.
        """
        if self._cache is None:
            raise RuntimeError("backward() needs a cached forward pass")
        acts = self._cache
        g = np.asarray(grad_out, dtype=np.float64)
        if g.ndim == 1:
            g = g[None, :]
        if g.shape != acts[-1].shape:
            raise ShapeError(f"gradient shape {g.shape} != feature shape {acts[-1].shape}")
        grads = [None] * (2 * len(self.weights))
        for i in range(len(self.weights) - 1, -1, -1):
            if i < len(self.weights) - 1:
                g = g * (acts[i + 1] > 0.0)
            grads[2 * i] = acts[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i:
                g = g @ self.weights[i].T
        return grads


class ClassifierHead:
    """Linear head; column ``k`` of ``weight`` scores class ``k``."""

    def __init__(self, weight, bias=None, session_id=0):
        self.weight = as_matrix(weight, "weight").copy()
        self.bias = None if bias is None else np.array(bias, dtype=np.float64)
        if self.bias is not None and self.bias.shape != (self.weight.shape[1],):
            raise ShapeError("bias length must equal number of head columns")
        self.session_id = session_id

    @classmethod
    def init(cls, dim, n_classes, rng, use_bias=False):
        w = _init_uniform(rng, dim, n_classes)
        b = np.zeros(n_classes) if use_bias else None
        return cls(w, b)

    @property
    def dim(self):
        return self.weight.shape[0]

    @property
    def n_classes(self):
        return self.weight.shape[1]

    def parameters(self):
        return [self.weight] if self.bias is None else [self.weight, self.bias]

    def copy(self):
        return ClassifierHead(self.weight, self.bias, self.session_id)

    def logits(self, features):
        f = np.asarray(features, dtype=np.float64)
        if f.shape[-1] != self.dim:
            raise ShapeError(f"feature dimension {f.shape[-1]} != head dimension {self.dim}")
        out = f @ self.weight
        if self.bias is not None:
            out = out + self.bias
        return out

    def backward(self, features, grad_logits):
        """Parameter gradients given dL/dlogits; also returns dL/dfeatures."""
        f = np.atleast_2d(features)
        g = np.atleast_2d(grad_logits)
        grads = [f.T @ g]
        if self.bias is not None:
            grads.append(g.sum(axis=0))
        return grads, g @ self.weight.T

    def restrict(self, n_classes):
        """Keep only the first ``n_classes`` columns."""
        bias = None if self.bias is None else self.bias[:n_classes]
        return ClassifierHead(self.weight[:, :n_classes], bias, self.session_id)


def forward_features(model, x):
    return model.forward(x)


def forward_logits(head, f):
    return head.logits(f)


def extend_head(head, new_class_prototypes, session_id=None):
    """Append one column per prototype; existing columns are copied unchanged."""
    protos = [np.asarray(p, dtype=np.float64) for p in new_class_prototypes]
    for p in protos:
        if p.shape != (head.dim,):
            raise ShapeError(f"prototype dimension {p.shape} != head dimension {head.dim}")
    sid = head.session_id if session_id is None else session_id
    if not protos:
        return ClassifierHead(head.weight, head.bias, sid)
    w = np.concatenate([head.weight, np.stack(protos, axis=1)], axis=1)
    bias = None
    if head.bias is not None:
        bias = np.concatenate([head.bias, np.zeros(len(protos))])
    return ClassifierHead(w, bias, sid)


@dataclass(frozen=True)
class HeadSnapshot:
    """Read-only copy of a head, captured at the end of a session."""

    weight: np.ndarray
    bias: np.ndarray | None
    session_id: int

    @classmethod
    def capture(cls, head):
        w = head.weight.copy()
        w.flags.writeable = False
        b = None
        if head.bias is not None:
            b = head.bias.copy()
            b.flags.writeable = False
        return cls(w, b, head.session_id)

    @property
    def n_classes(self):
        return self.weight.shape[1]

    def logits(self, features):
        out = np.asarray(features, dtype=np.float64) @ self.weight
        return out if self.bias is None else out + self.bias

    def as_head(self):
        return ClassifierHead(self.weight, self.bias, self.session_id)


@dataclass
class Sgd:
    """SGD with momentum and L2 weight decay, matching the PyTorch update rule.

    ``v <- momentum * v + (g + weight_decay * w)``; ``w <- w - lr * v``.
    Buffers are keyed by ``id`` of the parameter array, so parameters must be
    updated in place.
    """

    learning_rate: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    _buffers: dict = field(default_factory=dict, repr=False)

    def step(self, params, grads):
        if len(params) != len(grads):
            raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
        for p, g in zip(params, grads):
            if p.shape != g.shape:
                raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            d = g + self.weight_decay * p if self.weight_decay else g
            if self.momentum:
                buf = self._buffers.get(id(p))
                if buf is None or buf.shape != p.shape:
                    buf = np.array(d, dtype=np.float64)
                else:
                    buf *= self.momentum
                    buf += d
                self._buffers[id(p)] = buf
                d = buf
            p -= self.learning_rate * d


def backward_and_step(model, head, loss_gradients, optimizer):
    """Apply one optimiser step to the trainable parts of ``model`` and ``head``.

    ``loss_gradients`` maps ``"backbone"`` and/or ``"head"`` to gradient lists in
    ``parameters()`` order. A frozen backbone is never touched.
    """
    params, grads = [], []
    if "head" in loss_gradients and head is not None:
        params += head.parameters()
        grads += list(loss_gradients["head"])
    if "backbone" in loss_gradients and model is not None and not model.frozen:
        params += model.parameters()
        grads += list(loss_gradients["backbone"])
    if not np.isfinite(optimizer.learning_rate):
        raise InvalidInputError("learning rate must be finite")
    optimizer.step(params, grads)
