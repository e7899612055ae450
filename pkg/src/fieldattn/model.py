"""pCTR network, loss, training loop and checkpoint container."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from .attention import AutoAttention, cfi_mask, make_unit
from .metrics import logloss, user_weighted_auc
from .numerics import Adagrad, DenseLayer, EmbeddingTable, sigmoid
from .pruning import PruneConfig, PruneState, finalize, prune_step, sparsity_at
from .schema import Batch, Dataset, FieldSchema, batch_iter, make_batch

logger = logging.getLogger(__name__)

PRED_CLAMP = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    embedding_dim: int = 64
    hidden_dims: tuple = (200, 80)
    unit: str = "auto_attention"
    attention_dim: int = 200
    din_query_fields: tuple = (0,)
    pair_init: float = 1.0
    pair_mask: Optional[object] = None  # None, "cfi", or a P x M nested list
    learning_rate: float = 0.01
    l2: float = 1e-6
    batch_size: int = 4096
    eval_batch_size: int = 16384
    epochs: int = 5
    shuffle: bool = True
    seed: int = 0
    adagrad_init: float = 0.1
    adagrad_eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        object.__setattr__(self, "din_query_fields", tuple(int(j) for j in self.din_query_fields))
        if isinstance(self.pair_mask, np.ndarray):
            object.__setattr__(self, "pair_mask", self.pair_mask.tolist())
        if self.embedding_dim < 1 or self.attention_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError("embedding, attention and hidden dims must be positive")
        if self.l2 < 0:
            raise ValueError("l2 must be >= 0")
        if self.batch_size < 1 or self.eval_batch_size < 1 or self.epochs < 0:
            raise ValueError("batch sizes must be >= 1 and epochs >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        d["din_query_fields"] = list(self.din_query_fields)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def clamp(pred):
    return np.clip(pred, PRED_CLAMP, 1.0 - PRED_CLAMP)


def data_loss(pred, labels) -> float:
    p = clamp(np.asarray(pred, dtype=np.float64))
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


class CtrModel:
    """Embeddings -> attention interest vector -> ``[v_u, e_1..e_M]`` -> MLP -> sigmoid."""

    def __init__(self, schema: FieldSchema, config: ModelConfig):
        self.schema = schema
        self.config = config
        rng = np.random.default_rng(config.seed)
        K = config.embedding_dim
        self.query_tables = [EmbeddingTable(v, K, rng) for v in schema.query_vocab]
        self.behavior_tables = [EmbeddingTable(v, K, rng) for v in schema.behavior_vocab]
        pair_mask = config.pair_mask
        if isinstance(pair_mask, str):
            if pair_mask != "cfi":
                raise ValueError(f"pair_mask must be None, 'cfi' or a matrix, got {pair_mask!r}")
            pair_mask = cfi_mask(schema)
        if pair_mask is not None and config.unit != "auto_attention":
            raise ValueError("pair_mask applies only to the auto_attention unit")
        self.unit = make_unit(
            config.unit,
            schema.M,
            schema.P,
            K,
            d=config.attention_dim,
            din_query_fields=config.din_query_fields,
            pair_mask=pair_mask,
            pair_init=config.pair_init,
            rng=rng,
        )
        dims = [(schema.M + 1) * K, *config.hidden_dims, 1]
        acts = ["prelu"] * len(config.hidden_dims) + ["identity"]
        self.head = [DenseLayer(a, b, act, rng) for a, b, act in zip(dims[:-1], dims[1:], acts)]
        self.optimizer = Adagrad(config.learning_rate, config.adagrad_eps, config.adagrad_init)

    # -- parameter views -------------------------------------------------

    def dense_params(self) -> dict:
        out = {f"unit.{k}": v for k, v in self.unit.params.items()}
        for i, layer in enumerate(self.head):
            out.update({f"head.{i}.{k}": v for k, v in layer.all_params().items()})
        return out

    def embedding_tables(self) -> dict:
        out = {f"emb.query.{n}": t for n, t in zip(self.schema.query_names, self.query_tables)}
        out.update({f"emb.behavior.{n}": t for n, t in zip(self.schema.behavior_names, self.behavior_tables)})
        return out

    @property
    def pair_weights(self):
        if not isinstance(self.unit, AutoAttention):
            raise ValueError(f"unit {self.unit.kind!r} has no field-pair weights")
        return self.unit.pair_weights

    # -- forward / backward ---------------------------------------------

    def _check_batch(self, batch: Batch):
        s = self.schema
        if batch.query.shape[1:] != (s.M,) or batch.behaviors.shape[1:] != (s.H, s.P):
            raise ValueError(
                f"batch shapes {batch.query.shape}, {batch.behaviors.shape} do not fit schema M={s.M}, H={s.H}, P={s.P}"
            )

    def forward(self, batch: Batch, training: bool = False) -> np.ndarray:
        self._check_batch(batch)
        Q = np.stack([t.lookup(batch.query[:, j]) for j, t in enumerate(self.query_tables)], axis=1)
        V = np.stack([t.lookup(batch.behaviors[:, :, p]) for p, t in enumerate(self.behavior_tables)], axis=2)
        _, interest = self.unit.forward(V, Q, batch.mask, training=training)
        x = np.concatenate([interest, Q.reshape(len(Q), -1)], axis=1)
        for layer in self.head:
            x = layer.forward(x, training=training)
        logit = x[:, 0]
        self._cache = (batch, Q)
        return sigmoid(logit)

    def backward(self, g_logit) -> tuple:
        """Gradients for a forward pass given ``d loss / d logit`` per sample.

        Returns ``(dense_grads, embedding_grads)``; embedding grads map table
        names to ``(rows, row_grads)`` over the rows the batch touched.
        """
        batch, Q = self._cache
        K = self.config.embedding_dim
        g = np.asarray(g_logit, dtype=np.float64)[:, None]
        grads = {}
        for i in reversed(range(len(self.head))):
            layer = self.head[i]
            g = layer.backward(g)
            grads.update({f"head.{i}.{k}": v for k, v in layer.all_grads().items()})
        g_interest = g[:, :K]
        gQ = g[:, K:].reshape(Q.shape)
        gV, gQ_att = self.unit.backward(g_interest)
        grads.update({f"unit.{k}": v for k, v in self.unit.grads.items()})
        gQ = gQ + gQ_att
        emb = {}
        for j, (name, table) in enumerate(zip(self.schema.query_names, self.query_tables)):
            emb[f"emb.query.{name}"] = table.backward(batch.query[:, j], gQ[:, j])
        mask = batch.mask
        for p, (name, table) in enumerate(zip(self.schema.behavior_names, self.behavior_tables)):
            emb[f"emb.behavior.{name}"] = table.backward(batch.behaviors[:, :, p][mask], gV[:, :, p][mask])
        return grads, emb

    def loss_and_grads(self, batch: Batch, l2: Optional[float] = None):
        """Training-mode loss ``BCE + l2 * ||theta||_2`` and its gradients.

        ``theta`` covers every dense parameter plus the embedding rows this
        batch touches (query ids and unmasked behavior ids).
        """
        lam = self.config.l2 if l2 is None else l2
        pred = self.forward(batch, training=True)
        y = batch.labels.astype(np.float64)
        n = len(y)
        loss = data_loss(pred, y)
        inside = (pred > PRED_CLAMP) & (pred < 1.0 - PRED_CLAMP)
        grads, emb = self.backward((pred - y) / n * inside)
        if lam > 0:
            dense = self.dense_params()
            tables = self.embedding_tables()
            sq = sum(float(np.sum(v * v)) for v in dense.values())
            sq += sum(float(np.sum(tables[k].weight[rows] ** 2)) for k, (rows, _) in emb.items())
            norm = np.sqrt(sq)
            loss += lam * norm
            if norm > 0:
                for k, v in dense.items():
                    grads[k] = grads[k] + lam * v / norm
                for k, (rows, rg) in emb.items():
                    emb[k] = (rows, rg + lam * tables[k].weight[rows] / norm)
        if isinstance(self.unit, AutoAttention):
            grads["unit.R"] = grads["unit.R"] * self.unit.pair_mask
        return loss, grads, emb

    def apply_gradients(self, grads, emb) -> None:
        opt = self.optimizer
        dense = self.dense_params()
        for name in sorted(dense):
            opt.update(name, dense[name], grads[name])
        tables = self.embedding_tables()
        for name in sorted(emb):
            rows, rg = emb[name]
            opt.update_rows(name, tables[name].weight, rows, rg)
        if isinstance(self.unit, AutoAttention):
            self.unit.apply_mask()

    def train_step(self, batch: Batch) -> float:
        loss, grads, emb = self.loss_and_grads(batch)
        self.apply_gradients(grads, emb)
        return loss

    def predict_dataset(self, dataset: Dataset, batch_size: Optional[int] = None) -> np.ndarray:
        bs = batch_size or self.config.eval_batch_size
        if len(dataset) == 0:
            return np.zeros(0)
        return np.concatenate([self.forward(b, training=False) for b in batch_iter(dataset, bs)])


def forward(model: CtrModel, batch: Batch) -> np.ndarray:
    return model.forward(batch, training=False)


def loss(predictions, labels, model: Optional[CtrModel] = None, lam: float = 0.0, batch: Optional[Batch] = None) -> float:
    """Cross-entropy plus ``lam`` times the L2 norm of the model parameters.

    When ``batch`` is given, only the embedding rows it touches count.
    """
    value = data_loss(predictions, labels)
    if lam > 0 and model is not None:
        sq = sum(float(np.sum(v * v)) for v in model.dense_params().values())
        if batch is not None:
            for j, t in enumerate(model.query_tables):
                sq += float(np.sum(t.weight[np.unique(batch.query[:, j])] ** 2))
            for p, t in enumerate(model.behavior_tables):
                sq += float(np.sum(t.weight[np.unique(batch.behaviors[:, :, p][batch.mask])] ** 2))
        else:
            sq += sum(float(np.sum(t.weight**2)) for t in model.embedding_tables().values())
        value += lam * float(np.sqrt(sq))
    return value


@dataclass
class TrainResult:
    model: CtrModel
    history: list = field(default_factory=list)
    prune_state: Optional[PruneState] = None


def _epoch_row(model, epoch, train_loss, eval_set, state):
    row = {"epoch": epoch, "train_loss": train_loss}
    if eval_set is not None and len(eval_set):
        pred = model.predict_dataset(eval_set)
        row["eval_logloss"] = logloss(pred, eval_set.labels)
        try:
            row["eval_auc"] = user_weighted_auc(pred, eval_set.labels, eval_set.user_ids).user_weighted_auc
        except ValueError:
            row["eval_auc"] = None
    if state is not None:
        row["sparsity"] = state.sparsity
        row["n_pruned"] = state.n_pruned
        row["n_pairs"] = state.n_pairs
    return row


def train(
    model: CtrModel,
    train_set: Dataset,
    eval_set: Optional[Dataset] = None,
    cfg: Optional[ModelConfig] = None,
    prune: Optional[PruneConfig] = None,
) -> TrainResult:
    """Mini-batch Adagrad; with ``prune``, warm-up epochs then scheduled pruning, then a hard prune."""
    cfg = model.config if cfg is None else cfg
    if train_set.schema != model.schema or (eval_set is not None and eval_set.schema != model.schema):
        raise ValueError("datasets must share the model's schema")
    state = None
    if prune is not None:
        if not isinstance(model.unit, AutoAttention):
            raise ValueError(f"pruning requires the auto_attention unit, got {model.unit.kind!r}")
        state = PruneState(mask=model.unit.pair_mask)
    result = TrainResult(model, [], state)
    R = model.unit.params["R"] if state is not None else None
    j = 0
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        pruning = state is not None and prune.enabled and epoch >= prune.warmup_epochs
        for batch in batch_iter(train_set, cfg.batch_size, shuffle=cfg.shuffle, seed=cfg.seed * 7919 + epoch):
            total += model.train_step(batch) * len(batch)
            count += len(batch)
            if pruning:
                j += 1
                if j % prune.prune_interval == 0:
                    prune_step(R, state, sparsity_at(j, prune))
        if state is not None and epoch == cfg.epochs - 1:
            finalize(R, state, prune)
        state_step = j
        if state is not None:
            state.step = state_step
        row = _epoch_row(model, epoch + 1, total / max(count, 1), eval_set, state)
        result.history.append(row)
        logger.info("epoch %d %s", epoch + 1, json.dumps(row, sort_keys=True))
    if state is not None and cfg.epochs == 0:
        finalize(R, state, prune)
    return result


def predict(model: CtrModel, dataset: Dataset, batch_size: Optional[int] = None):
    """Inference-mode predictions aligned with user ids and labels."""
    return model.predict_dataset(dataset, batch_size), dataset.user_ids.copy(), dataset.labels.copy()


# ---------------------------------------------------------------------------
# checkpoint container
#
# layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON
# header, then raw little-endian float64 arrays back to back. The header
# records schema, config, prune state and, per array, its name, shape and
# byte offset into the data section.

CHECKPOINT_MAGIC = b"FATTNCK1"


def _collect_arrays(model: CtrModel) -> dict:
    arrays = {}
    for k, v in model.dense_params().items():
        arrays[f"param/{k}"] = v
    for k, t in model.embedding_tables().items():
        arrays[f"param/{k}"] = t.weight
    for k, v in model.unit.state().items():
        arrays[f"state/unit.{k}"] = v
    for k, v in model.optimizer.accumulators.items():
        arrays[f"adagrad/{k}"] = v
    return arrays


def save_checkpoint(model: CtrModel, path, prune_state: Optional[PruneState] = None, prune: Optional[PruneConfig] = None) -> None:
    arrays = _collect_arrays(model)
    index, offset, blobs = [], 0, []
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        index.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": a.nbytes})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = {
        "format_version": 1,
        "dtype": "<f8",
        "schema": model.schema.to_dict(),
        "config": model.config.to_dict(),
        "prune_config": None if prune is None else asdict(prune),
        "prune_state": None
        if prune_state is None
        else {"step": prune_state.step, "sparsity": prune_state.sparsity, "n_pruned": prune_state.n_pruned},
        "arrays": index,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)


def read_checkpoint(path) -> tuple:
    """Returns ``(header, arrays)`` without building a model."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    base = 16 + hlen
    arrays = {}
    for entry in header["arrays"]:
        start = base + entry["offset"]
        buf = data[start : start + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(entry["shape"]).astype(np.float64)
    return header, arrays


def load_checkpoint(path) -> CtrModel:
    header, arrays = read_checkpoint(path)
    schema = FieldSchema.from_dict(header["schema"])
    config = ModelConfig.from_dict(header["config"])
    model = CtrModel(schema, config)
    dense = model.dense_params()
    for k, v in dense.items():
        v[...] = arrays[f"param/{k}"]
    for k, t in model.embedding_tables().items():
        t.weight[...] = arrays[f"param/{k}"]
    model.unit.load_state(
        {k[len("state/unit.") :]: v for k, v in arrays.items() if k.startswith("state/unit.")}
    )
    model.optimizer.accumulators = {
        k[len("adagrad/") :]: v.copy() for k, v in arrays.items() if k.startswith("adagrad/")
    }
    return model


def checkpoint_prune_info(path) -> dict:
    header, _ = read_checkpoint(path)
    return {"prune_config": header.get("prune_config"), "prune_state": header.get("prune_state")}


__all__ = [
    "ModelConfig",
    "CtrModel",
    "TrainResult",
    "forward",
    "loss",
    "train",
    "predict",
    "save_checkpoint",
    "load_checkpoint",
    "read_checkpoint",
    "make_batch",
]
