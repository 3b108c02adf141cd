"""Mismatch-detection, contrastive and union losses, plus the ablation variants.

All binary losses are standard (negative log-likelihood) cross-entropies
averaged over tokens, so every term is minimised.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .model import Params, aux_logits, dilemma_logits
from .tensor import Tensor, as_tensor

LAMBDA_DILEMMA = 0.4


class DegenerateInputError(ValueError):
    """A loss was asked to average over nothing (no tokens, single-sample batch)."""


@dataclass
class LossBundle:
    dilemma: Tensor
    contrastive: Tensor
    union: Tensor
    md_accuracy: float
    dilemma_active: bool

    def as_floats(self) -> dict[str, float]:
        return {
            "dilemma": self.dilemma.item(),
            "contrastive": self.contrastive.item(),
            "union": self.union.item(),
            "md_accuracy": self.md_accuracy,
        }


def dilemma_bce(logits: Tensor, labels, mask=None) -> tuple[Tensor, np.ndarray]:
    """Mean BCE of mismatch logits against 0/1 labels, with per-token correctness.

    A token is predicted "mismatched" when its logit is positive.
    """
    labels = np.asarray(labels)
    if logits.size == 0 or (mask is not None and np.asarray(mask).sum() == 0):
        raise DegenerateInputError("mismatch loss over an empty token set")
    if np.any((labels != 0) & (labels != 1)):
        raise ValueError("labels must be 0 or 1")
    loss = ops.bce_with_logits(logits, labels, mask)
    correct = (logits.data > 0) == (labels == 1)
    return loss, correct


def contrastive_ce(a: Tensor, v, tau: float) -> Tensor:
    """Temperature-scaled InfoNCE between matched rows, scaled by 2 * tau.

    ``a`` (m, G) holds the student embeddings and ``v`` (m, G) the targets,
    both row-normalised; sample n's positive is row n of ``v`` and the other
    rows are its negatives. Equivalent to the column-major G x m formulation.
    """
    v = as_tensor(v)
    if tau <= 0:
        raise ValueError("tau must be > 0")
    m = a.shape[0]
    if m < 2:
        raise DegenerateInputError("contrastive loss needs at least 2 samples")
    if v.shape != a.shape:
        raise ValueError(f"embedding shapes differ: {a.shape} vs {v.shape}")
    logits = ops.matmul(a, v.T) * (1.0 / tau)
    return ops.cross_entropy(logits, np.arange(m)) * (2.0 * tau)


def union_loss(dilemma: Tensor, contrastive: Tensor, lam: float = LAMBDA_DILEMMA, is_dense: bool = False) -> Tensor:
    """contrastive + lam * dilemma, with the mismatch term dropped on dense input."""
    if lam <= 0:
        raise ValueError("lambda must be > 0")
    if is_dense:
        return contrastive
    return contrastive + dilemma * lam


def position_correction_ce(token_outs: Tensor, true_positions, params: Params, mask=None) -> Tensor:
    """N-way cross-entropy predicting each kept token's true grid index."""
    logits = aux_logits(params, token_outs)
    return ops.cross_entropy(logits, true_positions, mask)


def partial_jigsaw_ce(token_outs: Tensor, true_positions, unpositioned_mask, params: Params) -> Tensor:
    """N-way cross-entropy over the tokens that were fed without a position."""
    if np.asarray(unpositioned_mask).sum() == 0:
        raise DegenerateInputError("partial jigsaw needs at least one unpositioned token")
    logits = aux_logits(params, token_outs)
    return ops.cross_entropy(logits, true_positions, unpositioned_mask)


def flip_detection_bce(token_outs: Tensor, flip_labels, params: Params) -> tuple[Tensor, np.ndarray]:
    return dilemma_bce(dilemma_logits(params, token_outs), flip_labels)


def aux_loss(variant: str, params: Params, token_outs: Tensor, labels, mask) -> tuple[Tensor, Optional[np.ndarray]]:
    """Auxiliary token loss for one student pass and, for binary variants, per-token correctness."""
    if variant == "dilemma":
        return dilemma_bce(dilemma_logits(params, token_outs), labels, mask)
    if variant == "flip":
        return flip_detection_bce(token_outs, labels, params)
    if variant == "pos_correction":
        return position_correction_ce(token_outs, labels, params, mask), None
    if variant == "partial_jigsaw":
        return partial_jigsaw_ce(token_outs, labels, mask, params), None
    raise ValueError(f"unknown loss variant '{variant}'")
