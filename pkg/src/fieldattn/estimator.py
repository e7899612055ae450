"""scikit-learn style wrapper around :class:`CtrModel` and the training loop.

Inputs are :class:`Dataset` objects rather than 2-D arrays: one impression
carries a query row plus a variable-length behavior list, which does not fit
a flat feature matrix. Everything else follows the estimator conventions
(constructor only stores hyper-parameters, learned state ends in ``_``).
"""

from __future__ import annotations

from dataclasses import fields
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .metrics import user_weighted_auc
from .model import CtrModel, ModelConfig, train
from .pruning import PruneConfig
from .schema import Dataset

_MODEL_KEYS = tuple(f.name for f in fields(ModelConfig))
_PRUNE_KEYS = tuple(f.name for f in fields(PruneConfig))


def check_dataset(X, schema=None, require_labels=False) -> Dataset:
    """Validate that ``X`` is a non-empty Dataset (matching ``schema`` if given)."""
    if not isinstance(X, Dataset):
        raise TypeError(f"expected a fieldattn Dataset, got {type(X).__name__}")
    if len(X) == 0:
        raise ValueError("dataset is empty")
    if schema is not None and X.schema != schema:
        raise ValueError("dataset schema differs from the one the estimator was fitted on")
    if require_labels and not np.isin(X.labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return X


class AttentionCTRClassifier(ClassifierMixin, BaseEstimator):
    """Binary CTR classifier with a pluggable target-attention unit.

    Pruning runs when ``unit='auto_attention'`` and ``target_sparsity > 0``.
    ``score`` reports the user-weighted AUC rather than accuracy.
    """

    def __init__(
        self,
        embedding_dim=64,
        hidden_dims=(200, 80),
        unit="auto_attention",
        attention_dim=200,
        din_query_fields=(0,),
        pair_init=1.0,
        pair_mask=None,
        learning_rate=0.01,
        l2=1e-6,
        batch_size=4096,
        eval_batch_size=16384,
        epochs=5,
        shuffle=True,
        seed=0,
        adagrad_init=0.1,
        adagrad_eps=1e-8,
        target_sparsity=0.0,
        damping_d=0.8,
        damping_u=100.0,
        warmup_epochs=1,
        prune_interval=1,
    ):
        self.embedding_dim = embedding_dim
        self.hidden_dims = hidden_dims
        self.unit = unit
        self.attention_dim = attention_dim
        self.din_query_fields = din_query_fields
        self.pair_init = pair_init
        self.pair_mask = pair_mask
        self.learning_rate = learning_rate
        self.l2 = l2
        self.batch_size = batch_size
        self.eval_batch_size = eval_batch_size
        self.epochs = epochs
        self.shuffle = shuffle
        self.seed = seed
        self.adagrad_init = adagrad_init
        self.adagrad_eps = adagrad_eps
        self.target_sparsity = target_sparsity
        self.damping_d = damping_d
        self.damping_u = damping_u
        self.warmup_epochs = warmup_epochs
        self.prune_interval = prune_interval

    def _configs(self):
        params = self.get_params()
        model_cfg = ModelConfig(**{k: params[k] for k in _MODEL_KEYS})
        prune_cfg = None
        if self.unit == "auto_attention" and self.target_sparsity > 0:
            prune_cfg = PruneConfig(**{k: params[k] for k in _PRUNE_KEYS})
        return model_cfg, prune_cfg

    def fit(self, X, y=None, eval_set: Optional[Dataset] = None):
        """Train on ``X``; ``y`` overrides the dataset's own labels when given."""
        X = check_dataset(X)
        if y is not None:
            X = X.with_labels(np.asarray(y))
        check_dataset(X, require_labels=True)
        if eval_set is not None:
            check_dataset(eval_set, X.schema)
        model_cfg, prune_cfg = self._configs()
        model = CtrModel(X.schema, model_cfg)
        result = train(model, X, eval_set, model_cfg, prune_cfg)
        self.model_ = model
        self.schema_ = X.schema
        self.history_ = result.history
        self.prune_state_ = result.prune_state
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_dataset(X, self.schema_)
        p = self.model_.predict_dataset(X, self.eval_batch_size)
        return np.column_stack([1.0 - p, p])

    def decision_function(self, X) -> np.ndarray:
        p = np.clip(self.predict_proba(X)[:, 1], 1e-12, 1.0 - 1e-12)
        return np.log(p) - np.log1p(-p)

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(np.int64)

    def score(self, X, y=None, sample_weight=None) -> float:
        if sample_weight is not None:
            raise ValueError("sample_weight is not supported; AUC is weighted by user impressions")
        X = check_dataset(X, getattr(self, "schema_", None))
        labels = X.labels if y is None else np.asarray(y)
        return user_weighted_auc(self.predict_proba(X)[:, 1], labels, X.user_ids).user_weighted_auc

    @property
    def pair_weights_(self):
        """Learned field-pair strengths, bias and mask (auto_attention only)."""
        if not hasattr(self, "model_"):
            raise NotFittedError("estimator is not fitted")
        return self.model_.pair_weights


__all__ = ["AttentionCTRClassifier", "check_dataset"]
