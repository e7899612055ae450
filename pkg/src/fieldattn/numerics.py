"""Dense layers, activations, embedding tables and Adagrad with explicit backward passes.

Every component keeps its trainable arrays in ``params`` and fills the
matching ``grads`` entries on ``backward``. Forward calls cache whatever the
next backward call needs, so forward/backward must be paired.
"""

from __future__ import annotations

import numpy as np

DICE_EPS = 1e-8


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def masked_softmax(logits, mask):
    """Softmax along the last axis restricted to positions where ``mask`` is true.

    Masked positions get weight exactly 0; a fully masked row yields all zeros.
    """
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    shifted = np.where(mask, logits, -np.inf)
    top = np.max(shifted, axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(mask, np.exp(np.where(mask, logits - top, 0.0)), 0.0)
    z = e.sum(axis=-1, keepdims=True)
    return np.divide(e, z, out=np.zeros_like(e), where=z > 0)


def masked_softmax_backward(weights, grad_weights):
    """Gradient w.r.t. the logits; masked positions come out as 0 because their weight is 0."""
    inner = np.sum(weights * grad_weights, axis=-1, keepdims=True)
    return weights * (grad_weights - inner)


class Identity:
    def __init__(self, dim=None):
        self.params, self.grads = {}, {}

    def forward(self, x, training=False, row_mask=None):
        return x

    def backward(self, g):
        return g


class Sigmoid:
    def __init__(self, dim=None):
        self.params, self.grads = {}, {}

    def forward(self, x, training=False, row_mask=None):
        self._y = sigmoid(x)
        return self._y

    def backward(self, g):
        return g * self._y * (1.0 - self._y)


class PReLU:
    """Per-unit learnable negative slope."""

    def __init__(self, dim, slope=0.25):
        self.params = {"slope": np.full(dim, float(slope))}
        self.grads = {}

    def forward(self, x, training=False, row_mask=None):
        self._x = x
        a = self.params["slope"]
        return np.where(x > 0, x, a * x)

    def backward(self, g):
        x = self._x
        pos = x > 0
        self.grads["slope"] = np.sum(np.where(pos, 0.0, g * x).reshape(-1, x.shape[-1]), axis=0)
        return np.where(pos, g, g * self.params["slope"])


class Dice:
    """Data-adaptive gate: ``p * x + (1 - p) * alpha * x`` with ``p = sigmoid(normalized x)``.

    Training mode normalizes with statistics of the current rows (restricted
    to ``row_mask`` when given) and folds them into the running estimates;
    inference mode uses the running estimates only.
    """

    def __init__(self, dim, momentum=0.99):
        self.params = {"alpha": np.zeros(dim)}
        self.grads = {}
        self.momentum = momentum
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)

    def forward(self, x, training=False, row_mask=None):
        shape = x.shape
        flat = x.reshape(-1, shape[-1])
        rows = np.ones(len(flat), dtype=bool) if row_mask is None else np.asarray(row_mask, bool).reshape(-1)
        n = int(rows.sum())
        if training and n > 0:
            sel = flat[rows]
            mean = sel.mean(axis=0)
            var = sel.var(axis=0)
            m = self.momentum
            self.running_mean = m * self.running_mean + (1.0 - m) * mean
            self.running_var = m * self.running_var + (1.0 - m) * var
            batch_stats = True
        else:
            mean, var = self.running_mean, self.running_var
            batch_stats = False
        std = np.sqrt(var + DICE_EPS)
        z = (flat - mean) / std
        p = sigmoid(z)
        alpha = self.params["alpha"]
        y = flat * (alpha + (1.0 - alpha) * p)
        self._cache = (shape, flat, rows, n, z, p, std, batch_stats)
        return y.reshape(shape)

    def backward(self, g):
        shape, x, rows, n, z, p, std, batch_stats = self._cache
        g = g.reshape(-1, shape[-1]) * rows[:, None]
        alpha = self.params["alpha"]
        self.grads["alpha"] = np.sum(g * x * (1.0 - p), axis=0)
        gx = g * (alpha + (1.0 - alpha) * p)
        gz = g * x * (1.0 - alpha) * p * (1.0 - p)
        if batch_stats:
            zr = z * rows[:, None]
            mean_gz = gz.sum(axis=0) / n
            mean_gzz = (gz * zr).sum(axis=0) / n
            gx = gx + (gz - mean_gz - z * mean_gzz) / std * rows[:, None]
        else:
            gx = gx + gz / std
        return gx.reshape(shape)


ACTIVATIONS = {"identity": Identity, "sigmoid": Sigmoid, "prelu": PReLU, "dice": Dice}


def glorot_uniform(rng, fan_in, fan_out, shape=None):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class DenseLayer:
    """``activation(x @ W + b)`` over the last axis of ``x``."""

    def __init__(self, in_dim, out_dim, activation="identity", rng=None):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = np.random.default_rng(0) if rng is None else rng
        self.in_dim, self.out_dim = int(in_dim), int(out_dim)
        self.activation_name = activation
        self.params = {"W": glorot_uniform(rng, in_dim, out_dim), "b": np.zeros(out_dim)}
        self.grads = {}
        self.activation = ACTIVATIONS[activation](out_dim)

    def all_params(self):
        out = dict(self.params)
        out.update({f"act.{k}": v for k, v in self.activation.params.items()})
        return out

    def all_grads(self):
        out = dict(self.grads)
        out.update({f"act.{k}": v for k, v in self.activation.grads.items()})
        return out

    def forward(self, x, training=False, row_mask=None):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"input width {x.shape[-1]} != layer in_dim {self.in_dim}")
        self._x = x
        pre = x @ self.params["W"] + self.params["b"]
        return self.activation.forward(pre, training=training, row_mask=row_mask)

    def backward(self, g):
        gpre = self.activation.backward(g)
        x = self._x
        self.grads["W"] = x.reshape(-1, self.in_dim).T @ gpre.reshape(-1, self.out_dim)
        self.grads["b"] = gpre.reshape(-1, self.out_dim).sum(axis=0)
        return gpre @ self.params["W"].T


def dense_forward(layer: DenseLayer, x, training=False):
    return layer.forward(x, training=training)


class EmbeddingTable:
    """One field's ``vocab x K`` table; row 0 is the padding/OOV row."""

    def __init__(self, vocab, dim, rng=None):
        if dim < 1 or vocab < 1:
            raise ValueError("vocab and dim must be >= 1")
        rng = np.random.default_rng(0) if rng is None else rng
        bound = 1.0 / np.sqrt(dim)
        self.weight = rng.uniform(-bound, bound, size=(vocab, dim))
        self.vocab, self.dim = int(vocab), int(dim)

    def lookup(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab):
            raise ValueError(f"embedding id outside [0, {self.vocab})")
        return self.weight[ids]

    def backward(self, ids, grads):
        """Sum gradients per distinct id; returns ``(rows, row_grads)`` for touched rows only."""
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        grads = np.asarray(grads, dtype=np.float64).reshape(-1, self.dim)
        rows, inverse = np.unique(ids, return_inverse=True)
        acc = np.zeros((len(rows), self.dim))
        np.add.at(acc, inverse, grads)
        return rows, acc


def embedding_lookup(table: EmbeddingTable, ids):
    return table.lookup(ids)


def embedding_backward(table: EmbeddingTable, ids, grads):
    return table.backward(ids, grads)


class Adagrad:
    """Adagrad with per-element accumulators; embedding tables update only touched rows."""

    def __init__(self, lr=0.01, eps=1e-8, initial_accumulator=0.1):
        if initial_accumulator < 0:
            raise ValueError("initial_accumulator must be >= 0")
        self.lr, self.eps, self.initial_accumulator = float(lr), float(eps), float(initial_accumulator)
        self.accumulators: dict = {}

    def _acc(self, name, like):
        acc = self.accumulators.get(name)
        if acc is None:
            acc = np.full(like.shape, self.initial_accumulator)
            self.accumulators[name] = acc
        return acc

    def update(self, name, param, grad):
        """In-place dense update of ``param``."""
        if param.shape != grad.shape:
            raise ValueError(f"{name}: grad shape {grad.shape} != param shape {param.shape}")
        acc = self._acc(name, param)
        acc += grad * grad
        param -= self.lr * grad / (np.sqrt(acc) + self.eps)
        return param

    def update_rows(self, name, table, rows, row_grads):
        """In-place update of the listed rows of ``table`` (rows must be distinct)."""
        acc = self._acc(name, table)
        a = acc[rows] + row_grads * row_grads
        acc[rows] = a
        table[rows] -= self.lr * row_grads / (np.sqrt(a) + self.eps)
        return table


def adagrad_update(state: Adagrad, name, param, grad):
    return state.update(name, param, grad)
