"""Command-line entry point: ``fieldattn <command> [options]``.

Every command reads one YAML/JSON run config (see ``configs/synthetic.yaml``)
and accepts ``--set section.key=value`` overrides whose values are parsed as
YAML scalars. Log verbosity comes from ``FIELDATTN_LOG_LEVEL``.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from .gradcheck import run_all
from .metrics import cost_model, export_pair_weights, user_weighted_auc
from .model import CtrModel, ModelConfig, load_checkpoint, save_checkpoint, train
from .pruning import PruneConfig
from .schema import (
    FieldSchema,
    generate_synthetic,
    load_dataset,
    load_schema,
    make_teacher,
    save_dataset,
    save_schema,
    synthetic_schema,
)

LOG_ENV = "FIELDATTN_LOG_LEVEL"


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "seed": 0,
    "schema": None,
    "data": {
        "train": None,
        "test": None,
        "n_train": 20000,
        "n_test": 5000,
        "n_users": None,
        "teacher": {"active_pairs": [], "seed": None, "logit_scale": 4.0, "embedding_dim": 4},
    },
    "model": {},
    "prune": None,
    "output": {"checkpoint": None, "history": None},
}


@dataclass
class RunConfig:
    """Validated view of one run: schema, model, pruning, data and output paths."""

    seed: int
    schema: FieldSchema
    model: ModelConfig
    prune: Optional[PruneConfig]
    data: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "schema": self.schema.to_dict(),
            "model": self.model.to_dict(),
            "prune": None if self.prune is None else asdict(self.prune),
            "data": self.data,
            "output": self.output,
        }


def _merge(base, extra):
    out = copy.deepcopy(base)
    for k, v in (extra or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def apply_overrides(doc: dict, overrides) -> dict:
    doc = copy.deepcopy(doc)
    for item in overrides or ():
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not key=value")
        parts = key.split(".")
        node = doc
        for part in parts[:-1]:
            if node.get(part) is None:
                node[part] = {}
            node = node[part]
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r}: {part!r} is not a section")
        node[parts[-1]] = yaml.safe_load(raw)
    return doc


def _schema_from(source, base_dir: Path) -> FieldSchema:
    if source is None:
        raise ConfigError("config has no schema")
    if isinstance(source, str):
        path = Path(source)
        if not path.is_absolute():
            path = base_dir / path
        if not path.exists():
            raise ConfigError(f"schema file not found: {path}")
        return load_schema(path)
    if isinstance(source, dict) and "synthetic" in source:
        return synthetic_schema(**source["synthetic"])
    return FieldSchema.from_dict(source)


def _known(section: str, values: dict, cls) -> dict:
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown {section} keys: {sorted(unknown)}")
    return values


def load_run_config(path=None, overrides=()) -> RunConfig:
    """Merge defaults, the config file and ``--set`` overrides, then validate."""
    doc = {}
    base_dir = Path.cwd()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            doc = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {p}: {str(exc).splitlines()[0]}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
    doc = apply_overrides(_merge(DEFAULTS, doc), overrides)
    unknown = set(doc) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    seed = int(doc["seed"])
    try:
        schema = _schema_from(doc["schema"], base_dir)
        model_doc = {"seed": seed, **_known("model", doc["model"] or {}, ModelConfig)}
        model = ModelConfig.from_dict(model_doc)
        prune = None
        if doc["prune"] is not None:
            prune = PruneConfig(**_known("prune", doc["prune"], PruneConfig))
            if model.unit != "auto_attention":
                raise ConfigError("prune section requires model.unit = auto_attention")
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    return RunConfig(seed, schema, model, prune, doc["data"], doc["output"])


def _require(mapping: dict, key: str, what: str):
    value = mapping.get(key)
    if value in (None, ""):
        raise ConfigError(f"missing {what} ({key})")
    return value


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _write_json(path, doc) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# commands


def _teacher_pairs(schema: FieldSchema, pairs) -> list:
    out = []
    for p, j in pairs:
        pi = schema.behavior_names.index(p) if isinstance(p, str) else int(p)
        ji = schema.query_names.index(j) if isinstance(j, str) else int(j)
        out.append((pi, ji))
    return out


def cmd_gen_data(cfg: RunConfig, out_dir) -> dict:
    """Write ``train.csv``, ``test.csv``, ``teacher.json`` and ``schema.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t = cfg.data.get("teacher") or {}
    try:
        pairs = _teacher_pairs(cfg.schema, t.get("active_pairs") or [])
    except ValueError as exc:
        raise ConfigError(f"teacher active_pairs: {exc}") from None
    teacher = make_teacher(
        cfg.schema,
        pairs,
        seed=cfg.seed if t.get("seed") is None else int(t["seed"]),
        logit_scale=float(t.get("logit_scale", 4.0)),
        embedding_dim=int(t.get("embedding_dim", 4)),
    )
    train_set, test_set, _ = generate_synthetic(
        cfg.schema,
        teacher,
        int(cfg.data["n_train"]),
        int(cfg.data["n_test"]),
        seed=cfg.seed,
        n_users=cfg.data.get("n_users"),
    )
    paths = {
        "train": out / "train.csv",
        "test": out / "test.csv",
        "teacher": out / "teacher.json",
        "schema": out / "schema.json",
    }
    save_dataset(train_set, paths["train"])
    save_dataset(test_set, paths["test"])
    _write_json(paths["teacher"], teacher.to_dict())
    save_schema(cfg.schema, paths["schema"])
    return {k: str(v) for k, v in paths.items()}


def cmd_train(cfg: RunConfig) -> dict:
    """Train per config; writes the checkpoint and a JSON history."""
    train_path = _existing(_require(cfg.data, "train", "training data path"), "training data")
    test_path = cfg.data.get("test")
    ckpt = _require(cfg.output, "checkpoint", "checkpoint output path")
    hist = _require(cfg.output, "history", "history output path")
    train_set = load_dataset(train_path, cfg.schema)
    eval_set = load_dataset(_existing(test_path, "test data"), cfg.schema) if test_path else None
    model = CtrModel(cfg.schema, cfg.model)
    result = train(model, train_set, eval_set, cfg.model, cfg.prune)
    Path(ckpt).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, ckpt, result.prune_state, cfg.prune)
    _write_json(hist, {"config": cfg.to_dict(), "history": result.history})
    return {"checkpoint": str(ckpt), "history": str(hist), "last": result.history[-1] if result.history else None}


def cmd_eval(cfg: Optional[RunConfig], checkpoint, dataset, out=None) -> dict:
    """MetricReport of ``checkpoint`` on ``dataset``; optionally written to ``out``."""
    model = load_checkpoint(_existing(checkpoint, "checkpoint"))
    if cfg is not None and cfg.schema != model.schema:
        raise ConfigError("config schema differs from the checkpoint's schema")
    data = load_dataset(_existing(dataset, "dataset"), model.schema)
    pred = model.predict_dataset(data)
    report = user_weighted_auc(pred, data.labels, data.user_ids).to_dict()
    if out is not None:
        _write_json(out, report)
    return report


def cmd_export_weights(checkpoint, out) -> dict:
    model = load_checkpoint(_existing(checkpoint, "checkpoint"))
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = export_pair_weights(model, out)
    return {"csv": str(csv_path), "json": str(json_path)}


def cmd_cost(unit, M, P, K, d=200, H=50, out=None) -> dict:
    report = cost_model(unit, M, P, K, d, H).to_dict()
    if out is not None:
        _write_json(out, report)
    return report


def cmd_gradcheck(seed=1, tol=1e-4) -> tuple:
    """Returns ``(passed, worst_error, per_check_errors)``."""
    results = run_all(seed)
    worst = max(results.values())
    return worst < tol, worst, results


# ---------------------------------------------------------------------------
# argument parsing


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fieldattn", description="Target-attention CTR models with prunable field pairs.")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p, required=True):
        p.add_argument("--config", "-c", required=required, help="YAML or JSON run config")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. model.learning_rate=0.1 (repeatable)")

    p = sub.add_parser("gen-data", help="draw a synthetic teacher-labelled train/test split")
    with_config(p)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoint + history")
    with_config(p)

    p = sub.add_parser("eval", help="user-weighted AUC and logloss of a checkpoint")
    with_config(p, required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", help="write the report JSON here as well")

    p = sub.add_parser("export-weights", help="field-pair strength heat-map files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output base path; .csv and .json are appended")

    p = sub.add_parser("cost", help="analytic FLOPs/params of an attention unit")
    p.add_argument("--unit", required=True)
    for name, default in (("M", None), ("P", None), ("K", None), ("d", 200), ("H", 50)):
        p.add_argument(f"--{name}", type=int, default=default, required=default is None)
    p.add_argument("--out")

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    p.add_argument("--seed", type=int, default=1)
    return ap


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        level = "WARNING"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    _setup_logging()
    args = _parser().parse_args(argv)
    try:
        if args.command == "gen-data":
            doc = cmd_gen_data(load_run_config(args.config, args.overrides), args.out_dir)
        elif args.command == "train":
            doc = cmd_train(load_run_config(args.config, args.overrides))
        elif args.command == "eval":
            cfg = load_run_config(args.config, args.overrides) if args.config else None
            doc = cmd_eval(cfg, args.checkpoint, args.dataset, args.out)
        elif args.command == "export-weights":
            doc = cmd_export_weights(args.checkpoint, args.out)
        elif args.command == "cost":
            doc = cmd_cost(args.unit, args.M, args.P, args.K, args.d, args.H, args.out)
        else:
            ok, worst, _ = cmd_gradcheck(args.seed)
            print(f"{'pass' if ok else 'FAIL'}, max_rel_err={worst:.3e}")
            return 0 if ok else 1
    except (OSError, ValueError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"fieldattn {args.command}: error: {msg}", file=sys.stderr)
        return 2
    print(json.dumps(doc, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
