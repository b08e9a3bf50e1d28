"""InfoNCE and its lesion-aware variant, with gradients wrt the query.

Keys (positive and negatives) are treated as constants: they come from the
momentum branch and the queue, so no gradient is produced for them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, NoNegativesError
from .mathutils import logsumexp
from .queue import UNIT_TOL, LesionQueue


@dataclass
class ContrastInstance:
    q: np.ndarray
    k_plus: np.ndarray
    negatives: np.ndarray | None = None
    temperature: float = 0.2
    pseudo_label: int | None = None

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        self.k_plus = np.asarray(self.k_plus, dtype=np.float64)
        if self.negatives is not None:
            self.negatives = np.asarray(self.negatives, dtype=np.float64).reshape(-1, self.q.size)
        if self.temperature <= 0:
            raise InvalidInputError("temperature must be positive")
        for name, v in (("q", self.q), ("k_plus", self.k_plus)):
            if abs(np.linalg.norm(v) - 1.0) > UNIT_TOL:
                raise InvalidInputError(f"{name} must be unit norm")


def contrastive_terms(
    q: np.ndarray,
    k_plus: np.ndarray,
    keys: np.ndarray,
    mask: np.ndarray | None,
    temperature: float,
    include_positive: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-row losses and per-row gradients dL_b/dq_b.

    ``q``, ``k_plus``: (B, d); ``keys``: (N, d); ``mask``: (B, N) booleans
    marking which keys act as negatives for each row (None means all).
    """
    pos = np.sum(q * k_plus, axis=1) / temperature
    logits = q @ keys.T / temperature
    if mask is not None:
        logits = np.where(mask, logits, -np.inf)
    if include_positive:
        logits = np.concatenate([pos[:, None], logits], axis=1)
    lse = logsumexp(logits, axis=1)
    losses = lse - pos
    probs = np.exp(logits - lse[:, None])
    if include_positive:
        expected = probs[:, :1] * k_plus + probs[:, 1:] @ keys
    else:
        expected = probs @ keys
    grads = (expected - k_plus) / temperature
    return losses, grads


def info_nce(inst: ContrastInstance) -> tuple[float, np.ndarray]:
    """Standard InfoNCE: one positive plus every supplied negative in the denominator."""
    if inst.negatives is None or len(inst.negatives) == 0:
        raise InvalidInputError("info_nce needs at least one negative")
    losses, grads = contrastive_terms(
        inst.q[None], inst.k_plus[None], inst.negatives, None, inst.temperature, True
    )
    return float(losses[0]), grads[0]


def _lesion_mask(labels: np.ndarray, tags: np.ndarray) -> np.ndarray:
    return labels[:, None] != tags[None, :]


def lesion_info_nce(
    inst: ContrastInstance, queue: LesionQueue, include_positive_in_denominator: bool = True
) -> tuple[float, np.ndarray]:
    """InfoNCE whose negatives are all queued keys of classes other than the
    instance's pseudo-label."""
    if inst.pseudo_label is None:
        raise InvalidInputError("lesion_info_nce needs a pseudo_label")
    tags, keys = queue.negatives_for(inst.pseudo_label)
    if len(keys) == 0:
        raise NoNegativesError(
            f"no negatives available for class {inst.pseudo_label}: other-class queues are empty"
        )
    losses, grads = contrastive_terms(
        inst.q[None], inst.k_plus[None], keys, None, inst.temperature, include_positive_in_denominator
    )
    return float(losses[0]), grads[0]


def batch_loss(
    q,
    k_plus,
    pseudo_labels,
    queue: LesionQueue,
    temperature: float,
    include_positive: bool = True,
    class_aware: bool = True,
) -> tuple[float, np.ndarray]:
    """Mean loss over a batch and the per-row gradients of that mean.

    With ``class_aware`` the negatives for row b are the queued keys of every
    class except ``pseudo_labels[b]``; otherwise every queued key is a
    negative (plain memory-bank InfoNCE).
    """
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    k_plus = np.atleast_2d(np.asarray(k_plus, dtype=np.float64))
    if len(q) == 0:
        raise InvalidInputError("empty batch")
    tags, keys = queue.flat()
    if class_aware:
        labels = np.asarray(pseudo_labels, dtype=np.int64)
        mask = _lesion_mask(labels, tags)
        empty = ~mask.any(axis=1)
        if np.any(empty):
            raise NoNegativesError(
                f"no negatives available for pseudo-label(s) {sorted(set(labels[empty].tolist()))}"
            )
    else:
        if len(keys) == 0:
            raise NoNegativesError("memory bank is empty")
        mask = None
    losses, grads = contrastive_terms(q, k_plus, keys, mask, temperature, include_positive)
    n = len(q)
    return float(np.mean(losses)), grads / n


def batch_instances_loss(
    instances: list[ContrastInstance], queue: LesionQueue, include_positive: bool = True
) -> tuple[float, list[np.ndarray]]:
    """Mean of :func:`lesion_info_nce` over instances, grads scaled by 1/|batch|."""
    if not instances:
        raise InvalidInputError("empty batch")
    results = [lesion_info_nce(i, queue, include_positive) for i in instances]
    n = len(results)
    return float(np.mean([r[0] for r in results])), [r[1] / n for r in results]
