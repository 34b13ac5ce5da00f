"""Consensus Focus domain weights, plus the baseline weightings they are compared with."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .vote import knowledge_vote_batch, teacher_predictions

STRATEGIES = ("uniform", "datasize", "hdiv_proxy")


@dataclass(frozen=True)
class DomainWeights:
    alpha: np.ndarray
    # False when computing the weights needed raw source data
    decentralized: bool = True

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=np.float64)
        if a.ndim != 1 or np.any(a < 0) or abs(a.sum() - 1.0) > 1e-9:
            raise ValueError(f"domain weights must lie on the simplex, got {a}")
        a.setflags(write=False)
        object.__setattr__(self, "alpha", a)

    def __len__(self) -> int:
        return len(self.alpha)

    def __getitem__(self, k):
        return self.alpha[k]


@dataclass(frozen=True)
class CfReport:
    q_full: float
    q_leave_one_out: np.ndarray
    cf_values: np.ndarray
    cf_values_clamped: np.ndarray = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "cf_values_clamped", np.maximum(self.cf_values, 0.0))


def consensus_quality(preds: np.ndarray, g: float) -> float:
    """Sum over samples of n_p * max(p) for the coalition whose outputs are ``preds`` (K', N, C)."""
    preds = np.asarray(preds, dtype=np.float64)
    if preds.shape[0] == 0:
        return 0.0
    p, n_p = knowledge_vote_batch(preds, g)
    return float(np.sum(n_p * p.max(axis=1)))


def cf_report(preds: np.ndarray, g: float) -> CfReport:
    """Leave-one-out contributions to consensus quality: K + 1 quality evaluations."""
    preds = np.asarray(preds, dtype=np.float64)
    k = preds.shape[0]
    if k < 2:
        raise ValueError("consensus focus needs at least two source domains")
    q_full = consensus_quality(preds, g)
    loo = np.array([consensus_quality(np.delete(preds, j, axis=0), g) for j in range(k)])
    return CfReport(q_full, loo, q_full - loo)


def cf_values(teachers, target, g: float) -> CfReport:
    return cf_report(teacher_predictions(teachers, target.inputs), g)


def _target_share(sizes: Sequence[int], target_size: int) -> float:
    total = float(np.sum(sizes)) + target_size
    return target_size / total if total > 0 else 0.0


def domain_weights_cf(report: CfReport, sizes: Sequence[int], target_size: int) -> DomainWeights:
    """Source weights proportional to N_k * max(CF_k, 0); the extended domain gets its data share.

    If every clamped CF is zero the source slots fall back to data-size proportions.
    """
    sizes = np.asarray(sizes, dtype=np.float64)
    a_ext = _target_share(sizes, target_size)
    score = sizes * report.cf_values_clamped
    if score.sum() <= 0:
        score = sizes
    alpha = np.append((1.0 - a_ext) * score / score.sum(), a_ext)
    return DomainWeights(alpha)


@dataclass
class WeightingContext:
    sizes: Sequence[int]
    target_size: int
    # hdiv_proxy only: raw inputs, which a decentralized deployment cannot see
    source_inputs: Sequence[np.ndarray] | None = None
    target_inputs: np.ndarray | None = None
    seed: int = 0


def domain_discriminator_accuracy(source: np.ndarray, target: np.ndarray, seed: int = 0) -> float:
    """Held-out accuracy of a logistic source-vs-target classifier (80/20 split)."""
    from sklearn.linear_model import LogisticRegression

    x = np.concatenate([source, target]).astype(np.float64)
    y = np.concatenate([np.zeros(len(source)), np.ones(len(target))])
    idx = np.random.default_rng(seed).permutation(len(x))
    cut = int(0.8 * len(x))
    tr, va = idx[:cut], idx[cut:]
    clf = LogisticRegression(max_iter=1000)
    clf.fit(x[tr], y[tr])
    return float(np.mean(clf.predict(x[va]) == y[va]))


def a_distance(acc: float) -> float:
    """Proxy divergence 2(2·acc − 1), floored at zero."""
    return max(2.0 * (2.0 * acc - 1.0), 0.0)


def baseline_weights(strategy: str, context: WeightingContext) -> DomainWeights:
    sizes = np.asarray(context.sizes, dtype=np.float64)
    k = len(sizes)
    if strategy == "uniform":
        return DomainWeights(np.full(k + 1, 1.0 / (k + 1)))
    a_ext = _target_share(sizes, context.target_size)
    if strategy == "datasize":
        return DomainWeights(np.append((1.0 - a_ext) * sizes / sizes.sum(), a_ext))
    if strategy == "hdiv_proxy":
        if context.source_inputs is None or context.target_inputs is None:
            raise ValueError("hdiv_proxy needs source and target inputs")
        d = np.array([
            a_distance(domain_discriminator_accuracy(xs, context.target_inputs, context.seed + j))
            for j, xs in enumerate(context.source_inputs)
        ])
        score = sizes * np.exp(-d)
        return DomainWeights(np.append((1.0 - a_ext) * score / score.sum(), a_ext), decentralized=False)
    raise ValueError(f"unknown weighting strategy {strategy!r}")
