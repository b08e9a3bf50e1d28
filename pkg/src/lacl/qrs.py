"""Queue refinement: admit a key into the queue only if its similarity
profile over the queue is at least as class-consistent as the batch average.

For a key k with pseudo-label y~, P is the softmax of k . k_yi over every
stored slot (all classes), Q puts weight e on slots of class y~ and 1
elsewhere (normalized over stored slots), and the score is KL(P || Q). Keys
with score <= the batch mean are selected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import InvalidClassError, InvalidInputError, InvalidStateError
from .mathutils import logsumexp, softmax


@dataclass
class QrsVerdict:
    kl: np.ndarray
    selected: np.ndarray
    batch_mean_kl: float

    @property
    def selected_fraction(self) -> float:
        return float(self.selected.mean())


def _flatten(queue_snapshot) -> tuple[np.ndarray, np.ndarray]:
    counts = np.array([len(k) for k in queue_snapshot], dtype=np.int64)
    if counts.sum() == 0:
        raise InvalidStateError("queue is empty; nothing to compare against")
    keys = np.concatenate([np.asarray(k, dtype=np.float64).reshape(len(k), -1) for k in queue_snapshot if len(k)])
    tags = np.repeat(np.arange(len(counts)), counts)
    return tags, keys


def similarity_distribution(k_plus, queue_snapshot, temperature: float | None = None) -> np.ndarray:
    """P over every stored slot, ordered by class then insertion."""
    _, keys = _flatten(queue_snapshot)
    sims = keys @ np.asarray(k_plus, dtype=np.float64)
    if temperature is not None:
        sims = sims / temperature
    return softmax(sims)


def expected_distribution(pseudo_label: int, num_classes: int, counts) -> np.ndarray:
    """Q over stored slots: weight e for the pseudo-label's class, 1 otherwise."""
    if not 0 <= pseudo_label < num_classes:
        raise InvalidClassError(f"class {pseudo_label} outside [0, {num_classes})")
    counts = np.asarray(counts, dtype=np.int64)
    if len(counts) != num_classes:
        raise InvalidInputError("need one count per class")
    if counts.sum() < 1:
        raise InvalidStateError("queue is empty")
    tags = np.repeat(np.arange(num_classes), counts)
    w = np.where(tags == pseudo_label, math.e, 1.0)
    return w / w.sum()


def kl_scores(batch_keys, pseudo_labels, queue_snapshot, temperature: float | None = None) -> np.ndarray:
    """KL(P || Q) for each batch row, vectorized.

    KL = sum P log P - sum P log Q, with log Q = [y == y~] - log Z and
    Z = e * n_y~ + (N - n_y~).
    """
    tags, keys = _flatten(queue_snapshot)
    K = len(queue_snapshot)
    counts = np.bincount(tags, minlength=K)
    k = np.atleast_2d(np.asarray(batch_keys, dtype=np.float64))
    labels = np.asarray(pseudo_labels, dtype=np.int64).reshape(-1)
    if len(k) == 0:
        raise InvalidInputError("empty batch")
    if len(labels) != len(k):
        raise InvalidInputError("one pseudo-label per key required")
    if np.any((labels < 0) | (labels >= K)):
        raise InvalidClassError(f"pseudo-labels must lie in [0, {K})")
    sims = k @ keys.T
    if temperature is not None:
        sims = sims / temperature
    log_p = sims - logsumexp(sims, axis=1)[:, None]
    p = np.exp(log_p)
    neg_entropy = np.sum(p * log_p, axis=1)
    own_mass = np.sum(np.where(tags[None, :] == labels[:, None], p, 0.0), axis=1)
    n_own = counts[labels]
    log_z = np.log(math.e * n_own + (len(tags) - n_own))
    return np.maximum(neg_entropy - own_mass + log_z, 0.0)


def select_updates(batch_keys, pseudo_labels, queue_snapshot, temperature: float | None = None) -> QrsVerdict:
    kl = kl_scores(batch_keys, pseudo_labels, queue_snapshot, temperature)
    # Exact rational threshold so ties with the mean are never lost to rounding.
    exact = [Fraction(float(v)) for v in kl]
    total = sum(exact, Fraction(0))
    n = len(exact)
    selected = np.array([v * n <= total for v in exact], dtype=bool)
    return QrsVerdict(kl=kl, selected=selected, batch_mean_kl=math.fsum(kl.tolist()) / n)
