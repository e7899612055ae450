"""Iterative magnitude pruning of field-pair strengths.

The sparsity target ramps as ``S * (1 - D ** (j / U))`` over optimizer
steps ``j`` after warm-up; at each prune action the weakest surviving pairs
are masked until the pruned count reaches ``floor(s * P * M)``. Pruned
pairs never come back.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# guards floor() against products like 0.58 * 50 == 28.999999999999996
_FLOOR_SLACK = 1e-9


@dataclass(frozen=True)
class PruneConfig:
    target_sparsity: float = 0.6
    damping_d: float = 0.8
    damping_u: float = 100.0
    warmup_epochs: int = 1
    prune_interval: int = 1

    def __post_init__(self):
        if not 0.0 <= self.target_sparsity < 1.0:
            raise ValueError(f"target_sparsity must lie in [0, 1), got {self.target_sparsity}")
        if not 0.0 < self.damping_d < 1.0:
            raise ValueError(f"damping_d must lie in (0, 1), got {self.damping_d}")
        if self.damping_u <= 0:
            raise ValueError(f"damping_u must be positive, got {self.damping_u}")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        if self.prune_interval < 1:
            raise ValueError("prune_interval must be >= 1")

    @property
    def enabled(self) -> bool:
        return self.target_sparsity > 0.0


@dataclass
class PruneState:
    mask: np.ndarray  # shared with the attention unit's pair mask
    step: int = 0
    sparsity: float = 0.0
    history: list = field(default_factory=list)

    @property
    def n_pairs(self) -> int:
        return int(self.mask.size)

    @property
    def n_pruned(self) -> int:
        return int(self.mask.size - np.count_nonzero(self.mask))


def pruned_count(sparsity: float, n_pairs: int) -> int:
    return int(math.floor(sparsity * n_pairs + _FLOOR_SLACK))


def sparsity_at(j, cfg: PruneConfig) -> float:
    if j < 1:
        raise ValueError(f"step index must be >= 1, got {j}")
    return cfg.target_sparsity * (1.0 - cfg.damping_d ** (j / cfg.damping_u))


def prune_step(R: np.ndarray, state: PruneState, s_now: float) -> np.ndarray:
    """Grow the pruned set to ``floor(s_now * P * M)`` pairs, weakest survivors first.

    Updates ``state.mask`` and zeroes the newly pruned entries of ``R``, both
    in place. A target below the current pruned count changes nothing.
    """
    if not 0.0 <= s_now < 1.0:
        raise ValueError(f"sparsity must lie in [0, 1), got {s_now}")
    mask = state.mask
    target = pruned_count(s_now, mask.size)
    extra = target - state.n_pruned
    if extra > 0:
        flat_mask = mask.reshape(-1)
        alive = np.flatnonzero(flat_mask)
        mags = np.abs(R.reshape(-1)[alive])
        order = np.lexsort((-alive, mags))  # ascending |R|; among ties the later position goes first
        victims = alive[order[:extra]]
        flat_mask[victims] = 0.0
        R.reshape(-1)[victims] = 0.0
    state.sparsity = max(state.sparsity, s_now)
    return mask


def finalize(R: np.ndarray, state: PruneState, cfg: PruneConfig) -> np.ndarray:
    """Hard prune to exactly ``floor(S * P * M)`` pruned pairs."""
    mask = prune_step(R, state, cfg.target_sparsity)
    state.sparsity = cfg.target_sparsity
    return mask
