#!/usr/bin/env python3
"""
Multi-similarity loss with pair mining and analytic gradients

The loss is evaluated on the cosine similarity matrix of one sub-batch.
Mining is treated as non-differentiable: the gradient is exact for the
pair sets frozen at the current similarities.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .core import NORM_TOLERANCE
from .errors import InvalidInputError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MsParams:
    """Loss hyperparameters; conventional values, not measured ones"""
    alpha: float = 1.0
    beta: float = 50.0
    lambda_: float = 0.5
    epsilon: float = 0.1

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise InvalidInputError(f"alpha and beta must be positive, got {self.alpha}, {self.beta}")
        if not -1.0 < self.lambda_ < 1.0:
            raise InvalidInputError(f"lambda must lie in (-1, 1), got {self.lambda_}")
        if self.epsilon < 0:
            raise InvalidInputError(f"epsilon must be non-negative, got {self.epsilon}")

    @classmethod
    def from_dict(cls, values: dict) -> 'MsParams':
        values = dict(values)
        if 'lambda' in values:
            values['lambda_'] = values.pop('lambda')
        return cls(**values)

    def to_dict(self) -> dict:
        return {'alpha': self.alpha, 'beta': self.beta, 'lambda': self.lambda_, 'epsilon': self.epsilon}


@dataclass(frozen=True)
class PairSets:
    """Mined pairs as boolean masks; row i holds anchor i's partners"""
    positive: np.ndarray
    negative: np.ndarray

    def __post_init__(self):
        positive = np.asarray(self.positive, dtype=bool)
        negative = np.asarray(self.negative, dtype=bool)
        if positive.shape != negative.shape or positive.ndim != 2 or positive.shape[0] != positive.shape[1]:
            raise InvalidInputError("Pair masks must be square and of equal shape")
        if np.any(positive & negative):
            raise InvalidInputError("An index is both positive and negative for the same anchor")
        if np.any(np.diagonal(positive)) or np.any(np.diagonal(negative)):
            raise InvalidInputError("Self-pairs are not allowed")
        object.__setattr__(self, 'positive', positive)
        object.__setattr__(self, 'negative', negative)

    @classmethod
    def empty(cls, size: int) -> 'PairSets':
        return cls(np.zeros((size, size), dtype=bool), np.zeros((size, size), dtype=bool))

    def positives(self, anchor: int) -> List[int]:
        return np.flatnonzero(self.positive[anchor]).tolist()

    def negatives(self, anchor: int) -> List[int]:
        return np.flatnonzero(self.negative[anchor]).tolist()

    @property
    def is_empty(self) -> bool:
        return not (self.positive.any() or self.negative.any())

    def __len__(self) -> int:
        return self.positive.shape[0]


def _check_unit_rows(embeddings: np.ndarray) -> np.ndarray:
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2:
        raise InvalidInputError(f"Embeddings must be a matrix, got shape {embeddings.shape}")
    if not np.all(np.isfinite(embeddings)):
        raise InvalidInputError("Embeddings contain non-finite values")
    norms = np.linalg.norm(embeddings, axis=1)
    if np.any(np.abs(norms - 1.0) > NORM_TOLERANCE):
        worst = float(norms[np.argmax(np.abs(norms - 1.0))])
        raise InvalidInputError(f"Embeddings are not unit-norm (found norm {worst:.8f})")
    return embeddings


def _check_similarity(similarity: np.ndarray) -> np.ndarray:
    similarity = np.asarray(similarity, dtype=np.float64)
    if similarity.ndim != 2 or similarity.shape[0] != similarity.shape[1]:
        raise InvalidInputError(f"Similarity matrix must be square, got shape {similarity.shape}")
    if np.isnan(similarity).any():
        raise InvalidInputError("Similarity matrix contains NaN")
    return similarity


def pairwise_similarity(embeddings: np.ndarray) -> np.ndarray:
    """Cosine similarities of unit-norm rows"""
    embeddings = _check_unit_rows(embeddings)
    return embeddings @ embeddings.T


def mine_pairs(similarity: np.ndarray, labels: Sequence[int], params: MsParams) -> PairSets:
    """Keep the pairs that violate the epsilon margin.

    A negative survives if it is more similar than the hardest positive
    minus epsilon; a positive survives if it is less similar than the
    hardest negative plus epsilon.
    """
    similarity = _check_similarity(similarity)
    labels = np.asarray(labels)
    if labels.shape != (similarity.shape[0],):
        raise InvalidInputError(f"Expected {similarity.shape[0]} labels, got shape {labels.shape}")

    same = labels[:, None] == labels[None, :]
    candidates_pos = same & ~np.eye(len(labels), dtype=bool)
    candidates_neg = ~same
    usable = candidates_pos.any(axis=1) & candidates_neg.any(axis=1)

    hardest_pos = np.where(candidates_pos, similarity, np.inf).min(axis=1)
    hardest_neg = np.where(candidates_neg, similarity, -np.inf).max(axis=1)
    negative = candidates_neg & (similarity > (hardest_pos - params.epsilon)[:, None])
    positive = candidates_pos & (similarity < (hardest_neg + params.epsilon)[:, None])
    negative &= usable[:, None]
    positive &= usable[:, None]
    return PairSets(positive, negative)


def _soft_terms(exponents: np.ndarray, mask: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Row-wise log(1 + sum exp(x)) over masked entries and its softmax weights"""
    x = np.where(mask, exponents, -np.inf)
    shift = np.maximum(0.0, x.max(axis=1, initial=-np.inf))
    scaled = np.exp(x - shift[:, None])
    denominator = np.exp(-shift) + scaled.sum(axis=1)
    return shift + np.log(denominator), scaled / denominator[:, None]


def anchor_losses(similarity: np.ndarray, pairs: PairSets, params: MsParams) -> np.ndarray:
    """Per-anchor loss terms (zero for anchors with no mined pairs)"""
    similarity = _check_similarity(similarity)
    pos_term, _ = _soft_terms(-params.alpha * (similarity - params.lambda_), pairs.positive)
    neg_term, _ = _soft_terms(params.beta * (similarity - params.lambda_), pairs.negative)
    return pos_term / params.alpha + neg_term / params.beta


def ms_loss(similarity: np.ndarray, pairs: PairSets, params: MsParams) -> float:
    """Mean over all anchors of the multi-similarity terms"""
    terms = anchor_losses(similarity, pairs, params)
    if len(terms) == 0:
        return 0.0
    return float(terms.mean())


def similarity_gradient(similarity: np.ndarray, pairs: PairSets, params: MsParams) -> np.ndarray:
    """dLoss/dS with pair sets held fixed"""
    similarity = _check_similarity(similarity)
    n = similarity.shape[0]
    _, pos_weights = _soft_terms(-params.alpha * (similarity - params.lambda_), pairs.positive)
    _, neg_weights = _soft_terms(params.beta * (similarity - params.lambda_), pairs.negative)
    return (neg_weights - pos_weights) / max(n, 1)


def ms_loss_and_grad(embeddings: np.ndarray, labels: Sequence[int], params: MsParams,
                     pairs: Optional[PairSets] = None) -> Tuple[float, np.ndarray, PairSets]:
    """Loss, gradient with respect to the embeddings, and the mined pairs"""
    embeddings = _check_unit_rows(embeddings)
    similarity = embeddings @ embeddings.T
    if pairs is None:
        pairs = mine_pairs(similarity, labels, params)
    loss = ms_loss(similarity, pairs, params)
    grad_s = similarity_gradient(similarity, pairs, params)
    return loss, (grad_s + grad_s.T) @ embeddings, pairs


def ms_loss_grad(embeddings: np.ndarray, labels: Sequence[int], params: MsParams,
                 pairs: Optional[PairSets] = None) -> np.ndarray:
    return ms_loss_and_grad(embeddings, labels, params, pairs)[1]


def iteration_loss(iteration, table, params: MsParams) -> Tuple[float, List[float]]:
    """Sum of the per-sub-batch losses, always in sub-batch order"""
    per_sub_batch = []
    for sub_batch in iteration:
        embeddings = table.gather(sub_batch.image_ids)
        similarity = pairwise_similarity(embeddings)
        pairs = mine_pairs(similarity, sub_batch.labels, params)
        per_sub_batch.append(ms_loss(similarity, pairs, params))
    total = 0.0
    for value in per_sub_batch:
        total += value
    return total, per_sub_batch
