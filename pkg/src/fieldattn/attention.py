"""Target-attention units over behavior sequences.

All units consume a batched block: per-behavior per-field embeddings
``V`` of shape ``(B, H, P, K)``, query-field embeddings ``Q`` of shape
``(B, M, K)`` and a boolean behavior mask ``(B, H)``. Each returns the
behavior weights ``(B, H)`` and the pooled interest vectors ``(B, K)``.
A behavior embedding is the sum of its field embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Dice, glorot_uniform, masked_softmax, masked_softmax_backward

UNIT_KINDS = ("sum_pooling", "din", "maf_s", "maf_c", "dot_product", "auto_attention")


@dataclass
class BehaviorBlock:
    V: np.ndarray  # (B, H, P, K) or (H, P, K)
    mask: np.ndarray  # (B, H) or (H,)
    Q: np.ndarray  # (B, M, K) or (M, K)


@dataclass
class PairWeights:
    R: np.ndarray  # (P, M)
    b: float
    mask: np.ndarray  # (P, M), 1 keeps the pair


class AttentionUnit:
    kind = ""

    def __init__(self, M, P, K):
        self.M, self.P, self.K = int(M), int(P), int(K)
        self.params: dict = {}
        self.grads: dict = {}

    def state(self) -> dict:
        """Non-trainable arrays that a checkpoint must carry."""
        return {}

    def load_state(self, state: dict) -> None:
        pass

    def _check(self, V, Q, mask):
        if V.ndim != 4 or V.shape[2:] != (self.P, self.K):
            raise ValueError(f"behavior block shape {V.shape} does not match (B, H, {self.P}, {self.K})")
        if Q.shape[1:] != (self.M, self.K) or Q.shape[0] != V.shape[0]:
            raise ValueError(f"query block shape {Q.shape} does not match ({V.shape[0]}, {self.M}, {self.K})")
        if mask.shape != V.shape[:2]:
            raise ValueError(f"mask shape {mask.shape} does not match {V.shape[:2]}")

    def forward(self, V, Q, mask, training=False):
        V = np.asarray(V, dtype=np.float64)
        Q = np.asarray(Q, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        self._check(V, Q, mask)
        v = V.sum(axis=2)
        logits = self._logits(V, v, Q, mask, training)
        w = masked_softmax(logits, mask)
        interest = np.einsum("bh,bhk->bk", w, v)
        self._cache = (V, v, Q, mask, w)
        return w, interest

    def backward(self, g_interest):
        """Returns ``(gV, gQ)`` and fills ``self.grads``."""
        V, v, Q, mask, w = self._cache
        g_w = np.einsum("bk,bhk->bh", g_interest, v)
        gv = w[:, :, None] * g_interest[:, None, :]
        gs = masked_softmax_backward(w, g_w)
        gV_extra, gv_extra, gQ = self._logits_backward(gs)
        if gv_extra is not None:
            gv = gv + gv_extra
        gV = np.broadcast_to(gv[:, :, None, :], V.shape).copy()
        if gV_extra is not None:
            gV += gV_extra
        return gV, gQ

    def _logits(self, V, v, Q, mask, training):
        raise NotImplementedError

    def _logits_backward(self, gs):
        raise NotImplementedError


class SumPooling(AttentionUnit):
    kind = "sum_pooling"

    def forward(self, V, Q, mask, training=False):
        V = np.asarray(V, dtype=np.float64)
        Q = np.asarray(Q, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        self._check(V, Q, mask)
        w = mask.astype(np.float64)
        v = V.sum(axis=2)
        self._cache = (V.shape, Q.shape, w)
        return w, np.einsum("bh,bhk->bk", w, v)

    def backward(self, g_interest):
        vshape, qshape, w = self._cache
        gv = w[:, :, None] * g_interest[:, None, :]
        return np.broadcast_to(gv[:, :, None, :], vshape).copy(), np.zeros(qshape)


class DotProduct(AttentionUnit):
    """Logit ``b + <v_i, sum_j e_j>``."""

    kind = "dot_product"

    def __init__(self, M, P, K, bias=0.0):
        super().__init__(M, P, K)
        self.params = {"b": np.array([float(bias)])}

    def _logits(self, V, v, Q, mask, training):
        q = Q.sum(axis=1)
        self._q = q
        return self.params["b"][0] + np.einsum("bhk,bk->bh", v, q)

    def _logits_backward(self, gs):
        _, v, Q, _, _ = self._cache
        gq = np.einsum("bh,bhk->bk", gs, v)
        # logit bias cancels in the softmax: gradient is identically zero
        self.grads["b"] = np.zeros(1)
        gQ = np.broadcast_to(gq[:, None, :], Q.shape).copy()
        return None, gs[:, :, None] * self._q[:, None, :], gQ


class AutoAttention(AttentionUnit):
    """Logit ``b + sum_{p,j} <v_{i,p}, e_j> * R[p, j] * mask[p, j]``."""

    kind = "auto_attention"

    def __init__(self, M, P, K, init=1.0, bias=0.0, pair_mask=None, rng=None):
        super().__init__(M, P, K)
        self.pair_mask = np.ones((P, M)) if pair_mask is None else np.asarray(pair_mask, dtype=np.float64).copy()
        if self.pair_mask.shape != (P, M):
            raise ValueError(f"pair mask shape {self.pair_mask.shape} != ({P}, {M})")
        if init == "uniform":
            rng = np.random.default_rng(0) if rng is None else rng
            R = rng.uniform(-1.0, 1.0, size=(P, M))
        else:
            R = np.full((P, M), float(init))
        self.params = {"R": R * self.pair_mask, "b": np.array([float(bias)])}

    @property
    def pair_weights(self) -> PairWeights:
        return PairWeights(self.params["R"], float(self.params["b"][0]), self.pair_mask)

    def state(self):
        return {"pair_mask": self.pair_mask}

    def load_state(self, state):
        self.pair_mask = np.asarray(state["pair_mask"], dtype=np.float64).copy()

    def apply_mask(self):
        self.params["R"] *= self.pair_mask

    def _logits(self, V, v, Q, mask, training):
        Rm = self.params["R"] * self.pair_mask
        A = np.einsum("pj,bjk->bpk", Rm, Q)
        self._A, self._Rm = A, Rm
        return self.params["b"][0] + np.einsum("bhpk,bpk->bh", V, A)

    def _logits_backward(self, gs):
        V, _, Q, _, _ = self._cache
        gV = gs[:, :, None, None] * self._A[:, None, :, :]
        gA = np.einsum("bh,bhpk->bpk", gs, V)
        gQ = np.einsum("pj,bpk->bjk", self._Rm, gA)
        self.grads["R"] = np.einsum("bpk,bjk->pj", gA, Q) * self.pair_mask
        self.grads["b"] = np.zeros(1)
        return gV, None, gQ


class _LocalActivation(AttentionUnit):
    """Two-layer scoring MLP (``d`` Dice units, then one linear logit)."""

    def __init__(self, M, P, K, d, in_dim, rng):
        super().__init__(M, P, K)
        self.d = int(d)
        self.in_dim = int(in_dim)
        self.dice = Dice(d)
        self.params = {
            "W1": glorot_uniform(rng, in_dim, d),
            "b1": np.zeros(d),
            "W2": glorot_uniform(rng, d, 1),
            "b2": np.zeros(1),
        }
        self.params["dice.alpha"] = self.dice.params["alpha"]

    def state(self):
        return {"dice.running_mean": self.dice.running_mean, "dice.running_var": self.dice.running_var}

    def load_state(self, state):
        self.dice.running_mean = np.asarray(state["dice.running_mean"], dtype=np.float64).copy()
        self.dice.running_var = np.asarray(state["dice.running_var"], dtype=np.float64).copy()

    def _pre(self, V, v, Q):
        raise NotImplementedError

    def _pre_backward(self, gpre):
        raise NotImplementedError

    def _logits(self, V, v, Q, mask, training):
        self.dice.params["alpha"] = self.params["dice.alpha"]
        pre = self._pre(V, v, Q) + self.params["b1"]
        h = self.dice.forward(pre, training=training, row_mask=mask)
        self._h = h
        return (h @ self.params["W2"])[..., 0] + self.params["b2"][0]

    def _logits_backward(self, gs):
        h = self._h
        self.grads["W2"] = np.einsum("bhd,bh->d", h, gs)[:, None]
        # scalar logit bias cancels in the softmax
        self.grads["b2"] = np.zeros(1)
        gh = gs[:, :, None] * self.params["W2"][:, 0]
        gpre = self.dice.backward(gh)
        self.grads["dice.alpha"] = self.dice.grads["alpha"]
        self.grads["b1"] = gpre.sum(axis=(0, 1))
        return self._pre_backward(gpre)


class MafSum(_LocalActivation):
    """Scores ``v_i + sum_j e_j`` (element-wise sum, K inputs)."""

    kind = "maf_s"

    def __init__(self, M, P, K, d=200, rng=None):
        super().__init__(M, P, K, d, K, np.random.default_rng(0) if rng is None else rng)

    def _pre(self, V, v, Q):
        x = v + Q.sum(axis=1)[:, None, :]
        self._x = x
        return x @ self.params["W1"]

    def _pre_backward(self, gpre):
        _, _, Q, _, _ = self._cache
        self.grads["W1"] = np.einsum("bhk,bhd->kd", self._x, gpre)
        gx = gpre @ self.params["W1"].T
        gQ = np.broadcast_to(gx.sum(axis=1)[:, None, :], Q.shape).copy()
        return None, gx, gQ


class MafConcat(_LocalActivation):
    """Scores ``[v_i, e_1, ..., e_M]`` ((M+1)K inputs); the query part is shared across behaviors."""

    kind = "maf_c"

    def __init__(self, M, P, K, d=200, rng=None):
        super().__init__(M, P, K, d, (M + 1) * K, np.random.default_rng(0) if rng is None else rng)

    def _pre(self, V, v, Q):
        K = self.K
        W1 = self.params["W1"]
        qflat = Q.reshape(len(Q), -1)
        return v @ W1[:K] + (qflat @ W1[K:])[:, None, :]

    def _pre_backward(self, gpre):
        _, v, Q, _, _ = self._cache
        K = self.K
        W1 = self.params["W1"]
        gq_pre = gpre.sum(axis=1)
        qflat = Q.reshape(len(Q), -1)
        self.grads["W1"] = np.concatenate(
            [np.einsum("bhk,bhd->kd", v, gpre), qflat.T @ gq_pre], axis=0
        )
        gv = gpre @ W1[:K].T
        gQ = (gq_pre @ W1[K:].T).reshape(Q.shape)
        return None, gv, gQ


class DIN(_LocalActivation):
    """Scores the flattened outer product ``v_i (x) e_t`` (K*K inputs).

    ``e_t`` sums the embeddings of the selected query fields. The first
    layer is applied as ``v_i . (W1 contracted with e_t)`` so the target
    side is computed once per sample.
    """

    kind = "din"

    def __init__(self, M, P, K, d=200, query_fields=(0,), rng=None):
        super().__init__(M, P, K, d, K * K, np.random.default_rng(0) if rng is None else rng)
        self.query_fields = tuple(int(j) for j in query_fields)
        if not self.query_fields or any(not 0 <= j < M for j in self.query_fields):
            raise ValueError(f"DIN query fields {self.query_fields} must be non-empty and within [0, {M})")

    def _pre(self, V, v, Q):
        K = self.K
        Wr = self.params["W1"].reshape(K, K, self.d)
        e_t = Q[:, list(self.query_fields)].sum(axis=1)
        T = np.einsum("bc,acd->bad", e_t, Wr)
        self._e_t, self._T = e_t, T
        return np.einsum("bha,bad->bhd", v, T)

    def _pre_backward(self, gpre):
        _, v, Q, _, _ = self._cache
        K = self.K
        Wr = self.params["W1"].reshape(K, K, self.d)
        gT = np.einsum("bha,bhd->bad", v, gpre)
        gv = np.einsum("bhd,bad->bha", gpre, self._T)
        self.grads["W1"] = np.einsum("bc,bad->acd", self._e_t, gT).reshape(K * K, self.d)
        ge = np.einsum("acd,bad->bc", Wr, gT)
        gQ = np.zeros_like(Q)
        for j in self.query_fields:
            gQ[:, j] += ge
        return None, gv, gQ


def make_unit(kind, M, P, K, d=200, din_query_fields=(0,), pair_mask=None, pair_init=1.0, rng=None):
    if kind == "sum_pooling":
        return SumPooling(M, P, K)
    if kind == "dot_product":
        return DotProduct(M, P, K)
    if kind == "auto_attention":
        return AutoAttention(M, P, K, init=pair_init, pair_mask=pair_mask, rng=rng)
    if kind == "maf_s":
        return MafSum(M, P, K, d, rng=rng)
    if kind == "maf_c":
        return MafConcat(M, P, K, d, rng=rng)
    if kind == "din":
        return DIN(M, P, K, d, query_fields=din_query_fields, rng=rng)
    raise ValueError(f"unknown attention unit {kind!r}; expected one of {UNIT_KINDS}")


def attend(unit: AttentionUnit, block: BehaviorBlock, training=False):
    """Behavior weights and pooled interest vector; accepts a single block or a batch."""
    V, mask, Q = np.asarray(block.V), np.asarray(block.mask), np.asarray(block.Q)
    single = V.ndim == 3
    if single:
        V, mask, Q = V[None], mask[None], Q[None]
    w, interest = unit.forward(V, Q, mask, training=training)
    return (w[0], interest[0]) if single else (w, interest)


def attend_backward(unit: AttentionUnit, g_interest):
    """Gradients of the block embeddings; parameter gradients land in ``unit.grads``."""
    g = np.asarray(g_interest, dtype=np.float64)
    single = g.ndim == 1
    gV, gQ = unit.backward(g[None] if single else g)
    return (gV[0], gQ[0]) if single else (gV, gQ)


def cfi_mask(schema) -> np.ndarray:
    """Keep only each behavior field's corresponding query field."""
    cmap = schema.correspondence_map
    if not cmap:
        raise ValueError("schema has no correspondence_map; CFI needs at least one mapped behavior field")
    mask = np.zeros((schema.P, schema.M))
    for p, j in cmap.items():
        mask[p, j] = 1.0
    return mask


def magnitude_order(R) -> np.ndarray:
    """Flat indices of ``R`` by descending ``|R|``, ties by row-major position."""
    flat = np.abs(np.asarray(R, dtype=np.float64)).ravel()
    return np.lexsort((np.arange(flat.size), -flat))


def topk_mask(R, k: int) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if not 1 <= k <= R.size:
        raise ValueError(f"k must lie in [1, {R.size}], got {k}")
    mask = np.zeros(R.size)
    mask[magnitude_order(R)[:k]] = 1.0
    return mask.reshape(R.shape)
