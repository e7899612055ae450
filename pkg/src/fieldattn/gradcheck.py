"""Central finite-difference checks of every hand-written backward pass."""

from __future__ import annotations

import numpy as np

from .attention import UNIT_KINDS, make_unit
from .model import CtrModel, ModelConfig
from .numerics import DenseLayer
from .schema import Dataset, FieldSchema, make_batch

FD_EPS = 1e-5
REL_FLOOR = 1e-4  # below this magnitude an entry is judged on absolute error (FD roundoff ~1e-10)


def rel_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_FLOOR)
    return float(np.max(np.abs(a - n) / denom))


def numeric_grad(f, x, eps=FD_EPS) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def check_dense(activation, seed=0, batch=4, in_dim=5, out_dim=3) -> float:
    rng = np.random.default_rng(seed)
    layer = DenseLayer(in_dim, out_dim, activation, rng)
    layer.params["W"][...] = rng.normal(size=(in_dim, out_dim))
    layer.params["b"][...] = rng.normal(size=out_dim)
    for v in layer.activation.params.values():
        v[...] = rng.normal(size=v.shape)
    x = rng.normal(size=(batch, in_dim))
    up = rng.normal(size=(batch, out_dim))

    def f():
        return float(np.sum(layer.forward(x, training=True) * up))

    f()
    gx = layer.backward(up)
    analytic = {"x": gx, **layer.all_grads()}
    worst = rel_error(gx, numeric_grad(f, x))
    for name, p in layer.all_params().items():
        worst = max(worst, rel_error(analytic[name], numeric_grad(f, p)))
    return worst


def _random_block(rng, B, H, P, M, K):
    V = rng.normal(size=(B, H, P, K))
    Q = rng.normal(size=(B, M, K))
    lengths = rng.integers(0, H + 1, size=B)
    lengths[0] = H
    mask = np.arange(H)[None, :] < lengths[:, None]
    return V, Q, mask


def check_unit(kind, seed=0, B=3, H=4, P=2, M=3, K=5, d=6) -> float:
    rng = np.random.default_rng(seed)
    unit = make_unit(kind, M, P, K, d=d, din_query_fields=(0, M - 1), rng=rng)
    for v in unit.params.values():
        v[...] = rng.normal(size=v.shape)
    V, Q, mask = _random_block(rng, B, H, P, M, K)
    up = rng.normal(size=(B, K))

    def f():
        return float(np.sum(unit.forward(V, Q, mask, training=True)[1] * up))

    f()
    gV, gQ = unit.backward(up)
    grads = dict(unit.grads)
    worst = max(rel_error(gV, numeric_grad(f, V)), rel_error(gQ, numeric_grad(f, Q)))
    for name, p in unit.params.items():
        worst = max(worst, rel_error(grads[name], numeric_grad(f, p)))
    return worst


def tiny_problem(kind, seed=0, n=6):
    schema = FieldSchema([("q0", 5), ("q1", 4), ("q2", 6)], [("b0", 5), ("b1", 7)], max_behaviors=3)
    cfg = ModelConfig(
        embedding_dim=4,
        hidden_dims=(5, 3),
        unit=kind,
        attention_dim=6,
        din_query_fields=(0, 2),
        l2=1e-3,
        seed=seed,
    )
    rng = np.random.default_rng(seed + 1)
    lengths = rng.integers(0, 4, size=n)
    lengths[0] = 3
    beh = rng.integers(0, schema.behavior_vocab, size=(n, 3, 2))
    beh[np.arange(3)[None, :] >= lengths[:, None]] = 0
    data = Dataset(
        schema,
        [f"u{i % 2}" for i in range(n)],
        rng.integers(0, 2, size=n),
        rng.integers(0, schema.query_vocab, size=(n, 3)),
        beh,
        lengths,
    )
    model = CtrModel(schema, cfg)
    if kind == "auto_attention":
        model.unit.params["R"][...] = rng.normal(size=model.unit.params["R"].shape)
    return model, make_batch(data, np.arange(n))


def check_model(kind, seed=0) -> float:
    """End-to-end loss gradient (BCE + L2 norm) against finite differences."""
    model, batch = tiny_problem(kind, seed)

    def f():
        return model.loss_and_grads(batch)[0]

    _, grads, emb = model.loss_and_grads(batch)
    worst = 0.0
    for name, p in model.dense_params().items():
        worst = max(worst, rel_error(grads[name], numeric_grad(f, p)))
    for name, table in model.embedding_tables().items():
        dense = np.zeros_like(table.weight)
        rows, rg = emb[name]
        dense[rows] = rg
        worst = max(worst, rel_error(dense, numeric_grad(f, table.weight)))
    return worst


def run_all(seed=1) -> dict:
    results = {}
    for act in ("identity", "sigmoid", "prelu", "dice"):
        results[f"dense/{act}"] = check_dense(act, seed)
    for kind in UNIT_KINDS:
        results[f"unit/{kind}"] = check_unit(kind, seed)
    for kind in UNIT_KINDS:
        results[f"model/{kind}"] = check_model(kind, seed)
    return results
