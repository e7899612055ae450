"""Ranking metrics, the analytic attention cost model and field-pair weight export."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

PRED_CLAMP = 1e-12


@dataclass(frozen=True)
class MetricReport:
    user_weighted_auc: float
    logloss: float
    n_users_counted: int
    n_users_skipped: int

    def to_dict(self) -> dict:
        return {
            "auc": self.user_weighted_auc,
            "logloss": self.logloss,
            "users_counted": self.n_users_counted,
            "users_skipped": self.n_users_skipped,
        }


def logloss(predictions, labels) -> float:
    """Mean binary cross-entropy with predictions clamped to ``[1e-12, 1 - 1e-12]``."""
    p = np.clip(np.asarray(predictions, dtype=np.float64), PRED_CLAMP, 1.0 - PRED_CLAMP)
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def binary_auc(predictions, labels) -> float:
    """Mann-Whitney AUC; tied scores count one half."""
    s = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: need both classes")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def user_weighted_auc(predictions, labels, user_ids) -> MetricReport:
    """Per-user AUC averaged with each user's impression count as weight.

    Users whose impressions are all of one class are skipped and counted.
    """
    pred = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    users = np.asarray(user_ids, dtype=object)
    if not (len(pred) == len(y) == len(users)):
        raise ValueError("predictions, labels and user_ids must be aligned")
    _, inverse = np.unique(users.astype(str), return_inverse=True)
    order = np.argsort(inverse, kind="stable")
    bounds = np.flatnonzero(np.diff(inverse[order])) + 1
    total, weight, counted, skipped = 0.0, 0, 0, 0
    for group in np.split(order, bounds):
        if len(group) == 0:
            continue
        yg = y[group]
        pos = int(yg.sum())
        if pos == 0 or pos == len(yg):
            skipped += 1
            continue
        total += len(group) * binary_auc(pred[group], yg)
        weight += len(group)
        counted += 1
    if counted == 0:
        raise ValueError("AUC undefined: no user has both positive and negative samples")
    return MetricReport(total / weight, logloss(pred, y), counted, skipped)


# ---------------------------------------------------------------------------
# cost model

FLOPS_CONVENTION = (
    "per behavior, attention-weight computation only: hidden dense layer = 2*in*out, "
    "scalar logit layer and activation/bias/softmax excluded, outer product = K^2, "
    "dot product = 2K, element-wise vector sum = K per added vector, per-pair scale-and-add = 2"
)


@dataclass(frozen=True)
class CostReport:
    kind: str
    M: int
    P: int
    K: int
    d: int
    H: int
    flops_per_behavior: int
    param_count: int
    convention: str
    note: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def cost_model(kind, M, P, K, d=200, H=50) -> CostReport:
    """Analytic FLOPs per behavior and parameter count of one attention unit."""
    M, P, K, d, H = (int(x) for x in (M, P, K, d, H))
    if min(M, P, K, d, H) < 1:
        raise ValueError("all dimensions must be positive")
    note = ""
    if kind == "sum_pooling":
        flops, params = 0, 0
    elif kind == "din":
        flops = K * K + 2 * K * K * d
        params = d * K * K + 2 * d + 1
    elif kind == "maf_s":
        flops = M * K + 2 * K * d
        params = d * K + 2 * d + 1
        note = "local-activation parameter formula derived from the MLP shape"
    elif kind == "maf_c":
        flops = 2 * (M + 1) * K * d
        params = d * (M + 1) * K + 2 * d + 1
        note = "local-activation parameter formula derived from the MLP shape"
    elif kind == "dot_product":
        flops = 2 * K
        params = 1
        note = "FLOPs follow this convention only; other counting rules give larger per-behavior totals"
    elif kind == "auto_attention":
        flops = P * M * 2 * K + 2 * P * M
        params = P * M + 1
        note = "FLOPs follow this convention only; other counting rules give larger per-behavior totals"
    else:
        raise ValueError(f"unknown attention unit {kind!r}")
    return CostReport(kind, M, P, K, d, H, flops, params, FLOPS_CONVENTION, note)


# ---------------------------------------------------------------------------
# field-pair weights


def pair_table(R, mask, behavior_names, query_names) -> list:
    """All pairs as dicts sorted by surviving ``|R * mask|`` descending (ties row-major)."""
    W = np.asarray(R, dtype=np.float64) * np.asarray(mask, dtype=np.float64)
    mask = np.asarray(mask)
    P, M = W.shape
    cells = [(p, j) for p in range(P) for j in range(M)]
    cells.sort(key=lambda pj: (0 if mask[pj] else 1, -abs(W[pj]), pj))
    rows = []
    rank = 0
    for p, j in cells:
        pruned = not bool(mask[p, j])
        if not pruned:
            rank += 1
        rows.append(
            {
                "pair": [behavior_names[p], query_names[j]],
                "p": p,
                "j": j,
                "weight": float(W[p, j]),
                "rank": None if pruned else rank,
                "pruned": pruned,
            }
        )
    return rows


def export_pair_weights(model, path) -> tuple:
    """Write ``<path>.csv`` (behavior fields x query fields) and ``<path>.json`` (ranked pairs).

    Cells hold ``R * mask`` so pruned pairs export as 0. Returns both paths.
    """
    from .attention import AutoAttention

    if not isinstance(model.unit, AutoAttention):
        raise ValueError(f"weight export needs an auto_attention model, got {model.unit.kind!r}")
    schema = model.schema
    R = model.unit.params["R"]
    mask = model.unit.pair_mask
    W = R * mask
    base = Path(path)
    if base.suffix in (".csv", ".json"):
        base = base.with_suffix("")
    csv_path, json_path = base.with_suffix(".csv"), base.with_suffix(".json")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["behavior_field"] + schema.query_names)
        for p, name in enumerate(schema.behavior_names):
            writer.writerow([name] + [repr(float(x)) for x in W[p]])
    rows = pair_table(R, mask, schema.behavior_names, schema.query_names)
    doc = {
        "behavior_fields": schema.behavior_names,
        "query_fields": schema.query_names,
        "bias": float(model.unit.params["b"][0]),
        "selected": [r for r in rows if not r["pruned"]],
        "pairs": rows,
    }
    json_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return csv_path, json_path


def load_pair_weights(path) -> tuple:
    """Read an exported weight CSV; returns ``(matrix, behavior_names, query_names)``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    return (
        np.array([[float(x) for x in r[1:]] for r in rows], dtype=np.float64),
        [r[0] for r in rows],
        header[1:],
    )


def support_recovery(surviving_pairs, teacher_pairs, k=None) -> float:
    """Share of teacher pairs among the top-``k`` surviving pairs.

    ``surviving_pairs`` is ordered strongest first (or a mapping pair -> weight,
    ranked by ``|weight|``); ``k`` defaults to the number of teacher pairs.
    """
    if isinstance(surviving_pairs, dict):
        ranked = sorted(surviving_pairs, key=lambda pr: (-abs(surviving_pairs[pr]), tuple(pr)))
    else:
        ranked = list(surviving_pairs)
    teacher = {tuple(p) for p in teacher_pairs}
    if not teacher:
        raise ValueError("teacher_pairs must not be empty")
    k = len(teacher) if k is None else int(k)
    top = {tuple(p) for p in ranked[:k]}
    return len(top & teacher) / len(teacher)


def surviving_pairs(R, mask) -> list:
    """Unpruned ``(p, j)`` pairs ordered by ``|R|`` descending, ties row-major."""
    W = np.abs(np.asarray(R, dtype=np.float64))
    alive = [tuple(int(x) for x in pj) for pj in np.argwhere(np.asarray(mask) != 0)]
    return sorted(alive, key=lambda pj: (-W[pj], pj))
