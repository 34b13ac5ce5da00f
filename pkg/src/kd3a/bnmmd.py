"""BatchNorm-MMD: match first and second feature moments, read off BN running statistics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .nn import Classifier, ModelParams, check_same_manifest


@dataclass(frozen=True)
class BnLayerStats:
    first: np.ndarray  # E[π] per channel
    second: np.ndarray  # E[π²] per channel


BnStats = list[BnLayerStats]


def _bn_prefixes(params: ModelParams) -> list[str]:
    return [n[: -len(".running_mean")] for n in params.names if n.endswith(".bn.running_mean")]


def extract_bn_stats(model: Classifier | ModelParams) -> BnStats:
    """Per-layer (E[π], E[π²]) with E[π²] = Var(π) + E[π]²."""
    params = model.params if isinstance(model, Classifier) else model
    prefixes = _bn_prefixes(params)
    if not prefixes:
        raise ValueError("model has no BatchNorm layers")
    out = []
    for pre in prefixes:
        mean = params[f"{pre}.running_mean"].astype(np.float64)
        var = params[f"{pre}.running_var"].astype(np.float64)
        out.append(BnLayerStats(mean, var + mean**2))
    return out


def quadratic_mmd_distance(a: BnLayerStats, b: BnLayerStats) -> float:
    if a.first.shape != b.first.shape or a.second.shape != b.second.shape:
        raise ValueError("channel counts differ")
    return float(np.sum((a.first - b.first) ** 2) + np.sum((a.second - b.second) ** 2))


def _weights(weights, n: int) -> np.ndarray:
    w = np.asarray(getattr(weights, "alpha", weights), dtype=np.float64)
    if w.shape != (n,):
        raise ValueError(f"need {n} weights, got {w.shape}")
    return w


def moment_loss(moments: BnStats, source_stats: Sequence[BnStats], weights) -> float:
    """Weighted BN-MMD objective as a function of the target's per-layer moments."""
    w = _weights(weights, len(source_stats))
    return float(sum(
        wk * quadratic_mmd_distance(m, s[l])
        for l, m in enumerate(moments)
        for wk, s in zip(w, source_stats)
    ))


def moment_loss_grad(moments: BnStats, source_stats: Sequence[BnStats], weights) -> BnStats:
    """Gradient of :func:`moment_loss` with respect to each (first, second) pair."""
    w = _weights(weights, len(source_stats))
    grads = []
    for l, m in enumerate(moments):
        g1 = sum(2.0 * wk * (m.first - s[l].first) for wk, s in zip(w, source_stats))
        g2 = sum(2.0 * wk * (m.second - s[l].second) for wk, s in zip(w, source_stats))
        grads.append(BnLayerStats(np.asarray(g1), np.asarray(g2)))
    return grads


def batch_moments(features: Sequence[np.ndarray]) -> BnStats:
    return [BnLayerStats(f.mean(axis=0), (f**2).mean(axis=0)) for f in features]


def bn_mmd_loss(features: Sequence[np.ndarray], source_stats: Sequence[BnStats], weights
                ) -> tuple[float, list[np.ndarray]]:
    """Mini-batch BN-MMD loss and its gradient with respect to each feature matrix.

    Batch means stand in for the target expectations.
    """
    features = [np.asarray(f, dtype=np.float64) for f in features]
    if any(f.shape[0] < 2 for f in features):
        raise ValueError("BN-MMD needs a batch of at least 2 samples")
    moments = batch_moments(features)
    loss = moment_loss(moments, source_stats, weights)
    dm = moment_loss_grad(moments, source_stats, weights)
    grads = [
        (g.first[None, :] + 2.0 * f * g.second[None, :]) / f.shape[0]
        for f, g in zip(features, dm)
    ]
    return loss, grads


def closed_form_moments(source_stats: Sequence[BnStats], weights) -> BnStats:
    """Minimiser of the BN-MMD objective: the weighted average of the source moments."""
    w = _weights(weights, len(source_stats))
    n_layers = len(source_stats[0])
    out = []
    for l in range(n_layers):
        first = np.zeros_like(source_stats[0][l].first)
        second = np.zeros_like(source_stats[0][l].second)
        for wk, s in zip(w, source_stats):
            first += wk * s[l].first
            second += wk * s[l].second
        out.append(BnLayerStats(first, second))
    return out


def apply_bn_stats(params: ModelParams, stats: BnStats) -> ModelParams:
    """Write moments into running_mean / running_var (variance floored at 0)."""
    prefixes = _bn_prefixes(params)
    if len(prefixes) != len(stats):
        raise ValueError("layer count mismatch")
    updates = {}
    for pre, s in zip(prefixes, stats):
        updates[f"{pre}.running_mean"] = s.first
        updates[f"{pre}.running_var"] = np.maximum(s.second - s.first**2, 0.0)
    return params.replace(updates)


def closed_form_bn_update(source_models: Sequence[Classifier | ModelParams], weights,
                          target: ModelParams | None = None) -> BnStats | ModelParams:
    """Weighted moments of the K+1 models; substituted into ``target`` when given."""
    params = [m.params if isinstance(m, Classifier) else m for m in source_models]
    check_same_manifest(params)
    stats = closed_form_moments([extract_bn_stats(p) for p in params], weights)
    if target is None:
        return stats
    return apply_bn_stats(target, stats)
