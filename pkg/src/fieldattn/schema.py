"""Dataset model: field schema, samples, CSV ingestion and synthetic generation."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np


class DataFormatError(ValueError):
    """Raised when a dataset or schema file violates its documented format."""


@dataclass(frozen=True)
class FieldSchema:
    query_fields: tuple  # ((name, vocab_size), ...), length M
    behavior_fields: tuple  # ((name, vocab_size), ...), length P
    max_behaviors: int = 50
    correspondence_map: Optional[dict] = None  # behavior index -> query index

    def __post_init__(self):
        object.__setattr__(self, "query_fields", tuple((str(n), int(v)) for n, v in self.query_fields))
        object.__setattr__(self, "behavior_fields", tuple((str(n), int(v)) for n, v in self.behavior_fields))
        if not self.query_fields or not self.behavior_fields:
            raise DataFormatError("schema needs at least one query field and one behavior field")
        if self.max_behaviors < 1:
            raise DataFormatError(f"max_behaviors must be >= 1, got {self.max_behaviors}")
        for name, vocab in self.query_fields + self.behavior_fields:
            if vocab < 2:
                raise DataFormatError(f"field {name!r}: vocab size must be >= 2 (index 0 is padding)")
        names = self.query_names + self.behavior_names
        if len(set(names)) != len(names):
            raise DataFormatError("field names must be unique")
        if self.correspondence_map is not None:
            bn, qn = self.behavior_names, self.query_names
            try:
                cmap = {
                    (bn.index(p) if p in bn else int(p)): (qn.index(j) if j in qn else int(j))
                    for p, j in self.correspondence_map.items()
                }
            except ValueError:
                raise DataFormatError("correspondence_map names an unknown field") from None
            for p, j in cmap.items():
                if not (0 <= p < self.P and 0 <= j < self.M):
                    raise DataFormatError(f"correspondence_map entry {p}->{j} out of range")
            object.__setattr__(self, "correspondence_map", cmap)

    @property
    def M(self) -> int:
        return len(self.query_fields)

    @property
    def P(self) -> int:
        return len(self.behavior_fields)

    @property
    def H(self) -> int:
        return self.max_behaviors

    @property
    def query_names(self) -> list:
        return [n for n, _ in self.query_fields]

    @property
    def behavior_names(self) -> list:
        return [n for n, _ in self.behavior_fields]

    @property
    def query_vocab(self) -> np.ndarray:
        return np.array([v for _, v in self.query_fields], dtype=np.int64)

    @property
    def behavior_vocab(self) -> np.ndarray:
        return np.array([v for _, v in self.behavior_fields], dtype=np.int64)

    def to_dict(self) -> dict:
        out = {
            "query_fields": [{"name": n, "vocab_size": v} for n, v in self.query_fields],
            "behavior_fields": [{"name": n, "vocab_size": v} for n, v in self.behavior_fields],
            "max_behaviors": self.max_behaviors,
        }
        if self.correspondence_map is not None:
            out["correspondence_map"] = {
                self.behavior_names[p]: self.query_names[j]
                for p, j in sorted(self.correspondence_map.items())
            }
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "FieldSchema":
        def fields(items):
            out = []
            for item in items:
                if isinstance(item, dict):
                    out.append((item["name"], item["vocab_size"]))
                else:
                    name, vocab = item
                    out.append((name, vocab))
            return out

        try:
            query = fields(d["query_fields"])
            behavior = fields(d["behavior_fields"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataFormatError(f"malformed schema: {exc}") from None
        cmap = d.get("correspondence_map")
        if cmap is not None:
            qnames = [n for n, _ in query]
            bnames = [n for n, _ in behavior]
            resolved = {}
            for p, j in cmap.items():
                try:
                    pi = bnames.index(p) if p in bnames else int(p)
                    ji = qnames.index(j) if j in qnames else int(j)
                except ValueError:
                    raise DataFormatError(f"correspondence_map entry {p}->{j} names an unknown field") from None
                resolved[pi] = ji
            cmap = resolved
        return cls(query, behavior, int(d.get("max_behaviors", 50)), cmap)


def synthetic_schema(n_query: int = 15, n_behavior: int = 2, vocab: int = 20, max_behaviors: int = 20) -> FieldSchema:
    """Schema with fields ``q0..`` and ``b0..`` sharing one vocab size."""
    return FieldSchema(
        [(f"q{j}", vocab) for j in range(n_query)],
        [(f"b{p}", vocab) for p in range(n_behavior)],
        max_behaviors,
    )


def load_schema(path) -> FieldSchema:
    """Read a schema from a JSON or YAML document."""
    text = Path(path).read_text(encoding="utf-8")
    if str(path).endswith((".yaml", ".yml")):
        import yaml

        data = yaml.safe_load(text)
    else:
        data = json.loads(text)
    return FieldSchema.from_dict(data)


def save_schema(schema: FieldSchema, path) -> None:
    Path(path).write_text(json.dumps(schema.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class Sample:
    user_id: str
    label: int
    query_ids: tuple
    behaviors: tuple  # L tuples of P ids, most recent first

    def __post_init__(self):
        object.__setattr__(self, "query_ids", tuple(int(i) for i in self.query_ids))
        object.__setattr__(self, "behaviors", tuple(tuple(int(i) for i in b) for b in self.behaviors))
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        if len({len(b) for b in self.behaviors}) > 1:
            raise ValueError("every behavior must carry the same number of fields")


class Dataset:
    """Immutable columnar store of samples that all conform to one schema.

    Behaviors are kept zero-padded as an ``(N, H, P)`` array together with
    per-sample lengths, which is the layout every batch consumer needs.
    """

    def __init__(self, schema: FieldSchema, user_ids, labels, query, behaviors, lengths):
        n = len(labels)
        self.schema = schema
        self.user_ids = np.asarray(user_ids, dtype=object).reshape(n)
        self.labels = np.asarray(labels, dtype=np.int64).reshape(n)
        self.query = np.asarray(query, dtype=np.int64).reshape(n, schema.M)
        self.behaviors = np.asarray(behaviors, dtype=np.int64).reshape(n, schema.H, schema.P)
        self.lengths = np.asarray(lengths, dtype=np.int64).reshape(n)
        _validate_arrays(self)
        for arr in (self.user_ids, self.labels, self.query, self.behaviors, self.lengths):
            arr.flags.writeable = False

    @classmethod
    def from_samples(cls, schema: FieldSchema, samples: Sequence[Sample]) -> "Dataset":
        n = len(samples)
        query = np.zeros((n, schema.M), dtype=np.int64)
        behaviors = np.zeros((n, schema.H, schema.P), dtype=np.int64)
        lengths = np.zeros(n, dtype=np.int64)
        for i, s in enumerate(samples):
            if len(s.query_ids) != schema.M:
                raise DataFormatError(f"sample {i}: expected {schema.M} query ids, got {len(s.query_ids)}")
            if len(s.behaviors) > schema.H:
                raise DataFormatError(f"sample {i}: {len(s.behaviors)} behaviors exceed H={schema.H}")
            query[i] = s.query_ids
            if s.behaviors:
                b = np.asarray(s.behaviors, dtype=np.int64)
                if b.shape[1] != schema.P:
                    raise DataFormatError(f"sample {i}: behaviors need {schema.P} ids each")
                behaviors[i, : len(b)] = b
            lengths[i] = len(s.behaviors)
        return cls(schema, [s.user_id for s in samples], [s.label for s in samples], query, behaviors, lengths)

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Sample:
        L = int(self.lengths[i])
        return Sample(
            self.user_ids[i],
            int(self.labels[i]),
            tuple(self.query[i]),
            tuple(tuple(b) for b in self.behaviors[i, :L]),
        )

    @property
    def samples(self) -> list:
        return [self[i] for i in range(len(self))]

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        if index.dtype != bool:
            index = index.astype(np.int64)
        return Dataset(
            self.schema,
            self.user_ids[index],
            self.labels[index],
            self.query[index],
            self.behaviors[index],
            self.lengths[index],
        )

    def with_labels(self, labels) -> "Dataset":
        return Dataset(self.schema, self.user_ids, labels, self.query, self.behaviors, self.lengths)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.schema == other.schema
            and np.array_equal(self.user_ids, other.user_ids)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.query, other.query)
            and np.array_equal(self.behaviors, other.behaviors)
            and np.array_equal(self.lengths, other.lengths)
        )

    def __repr__(self) -> str:
        return f"Dataset(n={len(self)}, M={self.schema.M}, P={self.schema.P}, H={self.schema.H})"


def _validate_arrays(ds: Dataset) -> None:
    s = ds.schema
    if not np.isin(ds.labels, (0, 1)).all():
        raise DataFormatError("labels must be 0 or 1")
    if (ds.lengths < 0).any() or (ds.lengths > s.H).any():
        raise DataFormatError(f"behavior lengths must lie in [0, {s.H}]")
    if (ds.query < 0).any() or (ds.query >= s.query_vocab).any():
        bad = np.argwhere((ds.query < 0) | (ds.query >= s.query_vocab))[0]
        raise DataFormatError(f"sample {bad[0]}: query field {s.query_names[bad[1]]!r} id out of vocab")
    valid = np.arange(s.H)[None, :] < ds.lengths[:, None]
    b = ds.behaviors
    out = ((b < 0) | (b >= s.behavior_vocab)) & valid[:, :, None]
    if out.any():
        bad = np.argwhere(out)[0]
        raise DataFormatError(f"sample {bad[0]}: behavior field {s.behavior_names[bad[2]]!r} id out of vocab")
    if (b[~valid] != 0).any():
        raise DataFormatError("padding behavior slots must hold id 0")


def _parse_id(text: str, line: int, name: str, vocab: int) -> int:
    try:
        value = int(text)
    except ValueError:
        raise DataFormatError(f"line {line}, field {name!r}: non-integer id {text!r}") from None
    if value < 0 or value >= vocab:
        raise DataFormatError(f"line {line}, field {name!r}: id {value} outside vocab [0, {vocab})")
    return value


def load_dataset(path, schema: FieldSchema) -> Dataset:
    """Parse a dataset CSV.

    Columns are ``user_id,label,<query fields...>,<behavior fields...>``;
    each behavior cell is a ``;``-separated list of ids with one entry per
    behavior, and all behavior cells of a row share one length.
    """
    expected = ["user_id", "label"] + schema.query_names + schema.behavior_names
    samples = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != expected:
            raise DataFormatError(f"line 1: header {header} does not match schema columns {expected}")
        for row in reader:
            line = reader.line_num
            if len(row) != len(expected):
                raise DataFormatError(f"line {line}: expected {len(expected)} columns, got {len(row)}")
            label = row[1].strip()
            if label not in ("0", "1"):
                raise DataFormatError(f"line {line}, field 'label': expected 0 or 1, got {label!r}")
            query = [
                _parse_id(row[2 + j], line, name, vocab)
                for j, (name, vocab) in enumerate(schema.query_fields)
            ]
            columns = []
            for p, (name, vocab) in enumerate(schema.behavior_fields):
                cell = row[2 + schema.M + p].strip()
                ids = [_parse_id(t, line, name, vocab) for t in cell.split(";")] if cell else []
                if len(ids) > schema.H:
                    raise DataFormatError(f"line {line}, field {name!r}: {len(ids)} behaviors exceed H={schema.H}")
                if columns and len(ids) != len(columns[0]):
                    raise DataFormatError(
                        f"line {line}, field {name!r}: list length {len(ids)} differs from "
                        f"{schema.behavior_names[0]!r} length {len(columns[0])}"
                    )
                columns.append(ids)
            samples.append(Sample(row[0], int(label), query, list(zip(*columns))))
    return Dataset.from_samples(schema, samples)


def save_dataset(dataset: Dataset, path) -> None:
    schema = dataset.schema
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["user_id", "label"] + schema.query_names + schema.behavior_names)
        for i in range(len(dataset)):
            L = dataset.lengths[i]
            cells = [";".join(str(x) for x in dataset.behaviors[i, :L, p]) for p in range(schema.P)]
            writer.writerow(
                [dataset.user_ids[i], int(dataset.labels[i])] + [int(x) for x in dataset.query[i]] + cells
            )


@dataclass(frozen=True)
class Batch:
    user_ids: np.ndarray
    labels: np.ndarray  # (B,)
    query: np.ndarray  # (B, M)
    behaviors: np.ndarray  # (B, H, P)
    mask: np.ndarray  # (B, H) bool, True for real behaviors

    def __len__(self) -> int:
        return len(self.labels)


def make_batch(dataset: Dataset, index) -> Batch:
    index = np.asarray(index, dtype=np.int64)
    lengths = dataset.lengths[index]
    mask = np.arange(dataset.schema.H)[None, :] < lengths[:, None]
    return Batch(
        dataset.user_ids[index],
        dataset.labels[index],
        dataset.query[index],
        dataset.behaviors[index],
        mask,
    )


def batch_iter(dataset: Dataset, batch_size: int, shuffle: bool = False, seed: int = 0) -> Iterator[Batch]:
    """Yield contiguous batches, optionally after a seeded permutation."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        yield make_batch(dataset, order[start : start + batch_size])


# ---------------------------------------------------------------------------
# synthetic teacher-student data


@dataclass(frozen=True)
class TeacherSpec:
    active_pairs: tuple  # ((p, j), ...)
    teacher_R: np.ndarray = field(compare=False)  # (P, M)
    embedding_seed: int = 0
    logit_scale: float = 4.0
    embedding_dim: int = 4

    def __post_init__(self):
        R = np.asarray(self.teacher_R, dtype=np.float64)
        pairs = tuple(sorted((int(p), int(j)) for p, j in self.active_pairs))
        object.__setattr__(self, "teacher_R", R)
        object.__setattr__(self, "active_pairs", pairs)
        if self.logit_scale <= 0:
            raise ValueError("logit_scale must be positive")
        support = {tuple(int(x) for x in ij) for ij in np.argwhere(R != 0)}
        if support - set(pairs):
            raise ValueError("teacher_R is nonzero outside active_pairs")

    def __eq__(self, other):
        if not isinstance(other, TeacherSpec):
            return NotImplemented
        return (
            self.active_pairs == other.active_pairs
            and np.array_equal(self.teacher_R, other.teacher_R)
            and self.embedding_seed == other.embedding_seed
            and self.logit_scale == other.logit_scale
            and self.embedding_dim == other.embedding_dim
        )

    def to_dict(self) -> dict:
        return {
            "active_pairs": [list(p) for p in self.active_pairs],
            "teacher_R": self.teacher_R.tolist(),
            "embedding_seed": self.embedding_seed,
            "logit_scale": self.logit_scale,
            "embedding_dim": self.embedding_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TeacherSpec":
        return cls(
            tuple(tuple(p) for p in d["active_pairs"]),
            np.asarray(d["teacher_R"], dtype=np.float64),
            int(d.get("embedding_seed", 0)),
            float(d.get("logit_scale", 4.0)),
            int(d.get("embedding_dim", 4)),
        )


def make_teacher(
    schema: FieldSchema,
    active_pairs,
    seed: int = 0,
    logit_scale: float = 4.0,
    embedding_dim: int = 4,
    low: float = 1.0,
    high: float = 2.0,
) -> TeacherSpec:
    """Teacher whose pair strengths have magnitude in ``[low, high]`` and random sign."""
    rng = np.random.default_rng(seed)
    R = np.zeros((schema.P, schema.M))
    for p, j in sorted(active_pairs):
        R[p, j] = rng.uniform(low, high) * rng.choice((-1.0, 1.0))
    return TeacherSpec(tuple(active_pairs), R, seed, logit_scale, embedding_dim)


def teacher_scores(schema: FieldSchema, teacher: TeacherSpec, dataset: Dataset) -> np.ndarray:
    """Attention-driven score of each sample under the teacher.

    The teacher embeds every feature with fixed random vectors and reads out
    the attention-pooled behavior embedding along a direction assembled from
    per-pair random vectors weighted by ``teacher_R`` (normalised by its
    Frobenius norm). An all-zero ``teacher_R`` therefore scores every sample 0.
    """
    R = np.asarray(teacher.teacher_R, dtype=np.float64)
    if R.shape != (schema.P, schema.M):
        raise ValueError(f"teacher_R shape {R.shape} != ({schema.P}, {schema.M})")
    rng = np.random.default_rng(teacher.embedding_seed)
    k = teacher.embedding_dim
    std = k ** -0.25  # unit variance for an inner product of two embeddings
    q_tab = [rng.normal(0.0, std, (v, k)) for v in schema.query_vocab]
    b_tab = [rng.normal(0.0, std, (v, k)) for v in schema.behavior_vocab]
    pair_dirs = rng.normal(0.0, std, (schema.P, schema.M, k))
    norm = np.linalg.norm(R)
    if norm == 0.0:
        return np.zeros(len(dataset))
    direction = np.einsum("pj,pjk->k", R, pair_dirs) / norm
    Q = np.stack([q_tab[j][dataset.query[:, j]] for j in range(schema.M)], axis=1)
    V = np.stack([b_tab[p][dataset.behaviors[:, :, p]] for p in range(schema.P)], axis=2)
    value = V.sum(axis=2) @ direction / np.sqrt(schema.P)
    s = np.einsum("nhpk,pj,njk->nh", V, R, Q)
    mask = np.arange(schema.H)[None, :] < dataset.lengths[:, None]
    w = _masked_softmax(s, mask)
    return np.sum(w * np.where(mask, value, 0.0), axis=1)


def _masked_softmax(s, mask):
    s = np.where(mask, s, -np.inf)
    smax = np.max(s, axis=1, keepdims=True)
    smax = np.where(np.isfinite(smax), smax, 0.0)
    w = np.where(mask, np.exp(np.where(mask, s - smax, 0.0)), 0.0)
    z = w.sum(axis=1, keepdims=True)
    return np.divide(w, z, out=np.zeros_like(w), where=z > 0)


def generate_synthetic(
    schema: FieldSchema,
    teacher: TeacherSpec,
    n_train: int,
    n_test: int,
    seed: int = 0,
    n_users: Optional[int] = None,
):
    """Draw train/test sets whose labels come from a planted teacher.

    Each impression gets its own behavior list (length uniform in ``[1, H]``)
    and query ids; impressions are spread over ``n_users`` user ids so the
    user-weighted AUC has groups to work with. Labels are
    Bernoulli(sigmoid(scale * (score - mean score))) where ``score`` is
    :func:`teacher_scores`; centering keeps the positive rate near one half
    and vanishes with the teacher's pair weights.
    """
    if n_train < 1 or n_test < 1:
        raise ValueError("n_train and n_test must both be >= 1")
    n = n_train + n_test
    if n_users is None:
        n_users = max(1, n // 50)
    rng = np.random.default_rng(seed)
    H, P, M = schema.H, schema.P, schema.M

    lengths = rng.integers(1, H + 1, size=n)
    behaviors = rng.integers(1, schema.behavior_vocab, size=(n, H, P))
    behaviors[np.arange(H)[None, :] >= lengths[:, None]] = 0

    owner = rng.integers(0, n_users, size=n)
    query = rng.integers(1, schema.query_vocab, size=(n, M))
    width = len(str(n_users - 1))
    user_ids = np.array([f"u{u:0{width}d}" for u in owner], dtype=object)
    unlabeled = Dataset(schema, user_ids, np.zeros(n, dtype=np.int64), query, behaviors, lengths)

    score = teacher_scores(schema, teacher, unlabeled)
    logit = teacher.logit_scale * (score - score.mean())
    labels = (rng.random(n) < 1.0 / (1.0 + np.exp(-logit))).astype(np.int64)
    full = unlabeled.with_labels(labels)
    return full.subset(np.arange(n_train)), full.subset(np.arange(n_train, n)), teacher
