"""Target-attention CTR models with learnable, prunable field-pair strengths."""

from .attention import BehaviorBlock, attend, attend_backward, cfi_mask, make_unit, topk_mask
from .estimator import AttentionCTRClassifier, check_dataset
from .metrics import cost_model, export_pair_weights, logloss, support_recovery, user_weighted_auc
from .model import CtrModel, ModelConfig, load_checkpoint, predict, save_checkpoint, train
from .pruning import PruneConfig, PruneState, finalize, prune_step, sparsity_at
from .schema import (
    Dataset,
    FieldSchema,
    Sample,
    TeacherSpec,
    batch_iter,
    generate_synthetic,
    load_dataset,
    make_teacher,
    save_dataset,
    synthetic_schema,
)

__version__ = "0.1.0"
