"""Knowledge Vote: turn teacher predictions on target samples into weighted pseudo-labels.

Per sample: drop teachers below the confidence gate, sum the survivors to pick
a consensus class, keep only survivors whose own argmax agrees, and average
them. Samples where nobody survives fall back to the plain mean of all
teachers with a near-zero support weight.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .nn import SIMPLEX_TOL, Classifier, forward

FALLBACK_SUPPORT = 0.001


@dataclass(frozen=True)
class ConsensusItem:
    p: np.ndarray
    n_p: float

    @property
    def consensus_class(self) -> int:
        return int(np.argmax(self.p))


def _as_predictions(preds) -> np.ndarray:
    preds = np.asarray(preds, dtype=np.float64)
    if preds.ndim < 2 or preds.shape[0] == 0:
        raise ValueError("need at least one teacher row")
    if np.any(np.abs(preds.sum(axis=-1) - 1.0) > SIMPLEX_TOL) or np.any(preds < -SIMPLEX_TOL):
        raise ValueError("teacher predictions must be probability vectors")
    return preds


def confidence_gate(preds, g: float) -> np.ndarray:
    """Indices of teachers whose top confidence reaches ``g`` (inclusive)."""
    preds = _as_predictions(preds)
    return np.flatnonzero(preds.max(axis=1) >= g)


def consensus_class_vote(survivors) -> tuple[int, np.ndarray]:
    """Class with the largest summed score and the rows that agree with it.

    Ties go to the lowest class index, both for the vote and each row's argmax.
    """
    survivors = np.asarray(survivors, dtype=np.float64)
    if survivors.ndim != 2 or survivors.shape[0] == 0:
        raise ValueError("consensus vote needs at least one surviving teacher")
    total = np.zeros(survivors.shape[1])
    for row in survivors:
        total += row
    cls = int(np.argmax(total))
    return cls, np.flatnonzero(survivors.argmax(axis=1) == cls)


def knowledge_vote(preds, g: float) -> ConsensusItem:
    """Consensus for one sample from a (K, C) array of teacher predictions."""
    preds = _as_predictions(preds)
    alive = confidence_gate(preds, g)
    if alive.size:
        _, agree = consensus_class_vote(preds[alive])
        supporters = alive[agree]
        if supporters.size:
            acc = np.zeros(preds.shape[1])
            for k in supporters:
                acc += preds[k]
            return ConsensusItem(acc / supporters.size, float(supporters.size))
    acc = np.zeros(preds.shape[1])
    for row in preds:
        acc += row
    return ConsensusItem(acc / preds.shape[0], FALLBACK_SUPPORT)


def knowledge_vote_batch(preds: np.ndarray, g: float) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised vote over a (K, N, C) prediction tensor -> (p (N, C), n_p (N,))."""
    preds = np.asarray(preds, dtype=np.float64)
    k_teachers, n, c = preds.shape
    alive = preds.max(axis=2) >= g
    total = np.zeros((n, c))
    for k in range(k_teachers):
        total += np.where(alive[k][:, None], preds[k], 0.0)
    cls = total.argmax(axis=1)
    support = alive & (preds.argmax(axis=2) == cls[None, :])
    count = support.sum(axis=0)
    acc = np.zeros((n, c))
    everyone = np.zeros((n, c))
    for k in range(k_teachers):
        acc += np.where(support[k][:, None], preds[k], 0.0)
        everyone += preds[k]
    has = count > 0
    p = np.where(has[:, None], acc / np.maximum(count, 1)[:, None], everyone / k_teachers)
    n_p = np.where(has, count.astype(np.float64), FALLBACK_SUPPORT)
    return p, n_p


def mean_ensemble(preds: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Plain averaging with unit support, the vote-free fallback."""
    preds = np.asarray(preds, dtype=np.float64)
    return preds.mean(axis=0), np.ones(preds.shape[1])


def teacher_predictions(teachers: Sequence[Classifier], inputs: np.ndarray) -> np.ndarray:
    """Eval-mode softmax outputs stacked to (K, N, C)."""
    return np.stack([forward(t, inputs, "eval").probs for t in teachers])


@dataclass(frozen=True)
class ExtendedDomain:
    """Target inputs paired with consensus knowledge; ``inputs`` is the target's own array."""

    inputs: np.ndarray
    p: np.ndarray
    n_p: np.ndarray

    def __len__(self) -> int:
        return len(self.n_p)

    def __getitem__(self, i: int) -> ConsensusItem:
        return ConsensusItem(self.p[i], float(self.n_p[i]))


def build_extended_domain(target, teachers: Sequence[Classifier], g: float, vote: bool = True,
                          preds: np.ndarray | None = None) -> ExtendedDomain:
    if not teachers and preds is None:
        raise ValueError("need at least one teacher")
    if preds is None:
        preds = teacher_predictions(teachers, target.inputs)
    p, n_p = knowledge_vote_batch(preds, g) if vote else mean_ensemble(preds)
    return ExtendedDomain(target.inputs, p, n_p)
