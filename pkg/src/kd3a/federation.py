"""Simulated decentralized training loop.

Each synchronization: sources train locally from the current global model and
upload serialized parameters; the target side builds the consensus domain,
trains the extra model on it, weights the K+1 models, aggregates them and
refreshes BatchNorm statistics.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import bnmmd
from .domains import LabeledDataset, UnlabeledDataset
from .focus import CfReport, DomainWeights, WeightingContext, baseline_weights, cf_report, domain_weights_cf
from .nn import (
    Classifier,
    ModelParams,
    aggregate_params,
    backward,
    clip_grad_norm,
    cosine_lr,
    cross_entropy_grad,
    cross_entropy_loss,
    deserialize,
    forward,
    init_classifier,
    kv_loss,
    predict,
    save_params,
    serialize,
    sgd_step,
)
from .vote import ExtendedDomain, build_extended_domain, teacher_predictions

log = logging.getLogger(__name__)

WEIGHTINGS = ("cf", "uniform", "datasize", "hdiv_proxy")


@dataclass(frozen=True)
class RoundConfig:
    epochs: int = 30
    rounds: float = 1.0  # syncs per epoch; below 1 means one sync every 1/r epochs
    gate_lo: float = 0.8
    gate_hi: float = 0.95
    lr_hi: float = 0.05
    lr_lo: float = 0.001
    batch_size: int = 50
    momentum: float = 0.9
    weighting: str = "cf"
    knowledge_vote: bool = True
    bn_mmd: bool = True
    bn_mode: str = "closed_form"
    source_only: bool = False
    hidden: tuple[int, ...] = (32, 32, 32)
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.gate_lo <= self.gate_hi < 1:
            raise ValueError("need 0 < gate_lo <= gate_hi < 1")
        if not self.rounds > 0:
            raise ValueError("communication rounds must be positive")
        if self.rounds >= 1 and not float(self.rounds).is_integer():
            raise ValueError("rounds >= 1 must be a whole number")
        if self.rounds < 1 and not _close_to_int(1.0 / self.rounds):
            raise ValueError("rounds < 1 must be the reciprocal of a whole number")
        if self.epochs < 1 or self.batch_size < 2:
            raise ValueError("need epochs >= 1 and batch_size >= 2")
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"unknown weighting {self.weighting!r}")
        if self.bn_mode not in ("closed_form", "gradient"):
            raise ValueError(f"unknown bn_mode {self.bn_mode!r}")

    @property
    def stages_per_epoch(self) -> int:
        return int(self.rounds) if self.rounds >= 1 else 1

    @property
    def sync_period(self) -> int:
        """Epochs between syncs."""
        return 1 if self.rounds >= 1 else int(round(1.0 / self.rounds))


def _close_to_int(x: float) -> bool:
    return abs(x - round(x)) < 1e-9


@dataclass(frozen=True)
class SyncRecord:
    epoch: int
    stage: int
    upload_bytes: tuple[int, ...]

    @property
    def total_bytes(self) -> int:
        return sum(self.upload_bytes)


@dataclass
class CommunicationLog:
    records: list[SyncRecord] = field(default_factory=list)

    def record(self, epoch: int, stage: int, blobs: Sequence[bytes]) -> None:
        self.records.append(SyncRecord(epoch, stage, tuple(len(b) for b in blobs)))

    @property
    def uploads(self) -> int:
        return sum(len(r.upload_bytes) for r in self.records)

    @property
    def total_bytes(self) -> int:
        return sum(r.total_bytes for r in self.records)


@dataclass
class RoundState:
    global_params: ModelParams
    source_params: list[ModelParams] = field(default_factory=list)
    gate: float = 0.0
    weights: DomainWeights | None = None
    cf: CfReport | None = None
    source_loss: float = float("nan")
    kv_loss: float = float("nan")
    extended: ExtendedDomain | None = None
    extended_probs: np.ndarray | None = None


def confidence_gate_schedule(epoch: float, total: float, gate_lo: float = 0.8, gate_hi: float = 0.95) -> float:
    """Linear ramp from ``gate_lo`` at epoch 0 to ``gate_hi`` at ``total``."""
    frac = min(max(epoch / total, 0.0), 1.0) if total > 0 else 1.0
    return gate_lo + (gate_hi - gate_lo) * frac


def _batches(n: int, steps: int, batch_size: int, rng: np.random.Generator):
    if steps <= 0:
        return
    bs = min(batch_size, n)
    need = steps * bs
    order = np.concatenate([rng.permutation(n) for _ in range(math.ceil(need / n))])
    for s in range(steps):
        yield order[s * bs : (s + 1) * bs]


@dataclass
class StageResult:
    params: ModelParams
    losses: list[float]


def local_train_stage(domain: LabeledDataset, init: ModelParams, lr: float, steps: int,
                      rng: np.random.Generator, batch_size: int = 50, momentum: float = 0.9) -> StageResult:
    """Supervised SGD on a single source domain, starting from ``init`` with fresh momentum."""
    model = Classifier(init)
    velocity = None
    losses = []
    for idx in _batches(len(domain), steps, batch_size, rng):
        fwd = forward(model, domain.inputs[idx], "train")
        y = domain.labels[idx]
        losses.append(cross_entropy_loss(fwd.probs, y))
        grads = backward(model, fwd, cross_entropy_grad(fwd.probs, y))
        model.params, velocity = sgd_step(model.params, grads, lr, velocity, momentum)
    return StageResult(model.params, losses)


def train_extended_stage(ext: ExtendedDomain, init: ModelParams, lr: float, steps: int,
                         rng: np.random.Generator, batch_size: int = 50, momentum: float = 0.9) -> StageResult:
    """Support-weighted distillation on the consensus domain."""
    model = Classifier(init)
    velocity = None
    losses = []
    for idx in _batches(len(ext), steps, batch_size, rng):
        fwd = forward(model, ext.inputs[idx], "train")
        loss, grad = kv_loss(fwd.probs, ext.p[idx], ext.n_p[idx])
        losses.append(loss)
        grads = backward(model, fwd, grad)
        model.params, velocity = sgd_step(model.params, grads, lr, velocity, momentum)
    return StageResult(model.params, losses)


def bn_mmd_gradient_stage(params: ModelParams, source_stats, weights, target: UnlabeledDataset, lr: float,
                          steps: int, rng: np.random.Generator, batch_size: int = 50,
                          momentum: float = 0.9, max_grad_norm: float = 1.0) -> ModelParams:
    """Minimise the mini-batch BN-MMD loss by backprop through the network.

    The loss is quartic in the features, so gradients are norm-clipped.
    """
    model = Classifier(params)
    velocity = None
    zero_logits = np.zeros((min(batch_size, len(target)), model.num_classes))
    for idx in _batches(len(target), steps, batch_size, rng):
        fwd = forward(model, target.inputs[idx], "train")
        _, feat_grads = bnmmd.bn_mmd_loss(fwd.bn_features, source_stats, weights)
        grads = clip_grad_norm(backward(model, fwd, zero_logits, feat_grads), max_grad_norm)
        model.params, velocity = sgd_step(model.params, grads, lr, velocity, momentum)
    return model.params


def _steps(n: int, config: RoundConfig, epochs_covered: int) -> int:
    per_epoch = math.ceil(n / min(config.batch_size, n))
    if config.rounds >= 1:
        return max(1, round(per_epoch / config.stages_per_epoch))
    return per_epoch * epochs_covered


def source_weights(config: RoundConfig, sizes: Sequence[int], target_size: int,
                   report: CfReport | None, static: DomainWeights | None = None) -> DomainWeights:
    if config.weighting == "cf":
        return domain_weights_cf(report, sizes, target_size)
    if static is not None:
        return static
    return baseline_weights(config.weighting, WeightingContext(sizes, target_size))


def kd3a_round(state: RoundState, sources: Sequence[LabeledDataset], target: UnlabeledDataset,
               config: RoundConfig, *, progress: float, epochs_covered: int = 1,
               rng: np.random.Generator, comm: CommunicationLog, epoch: int = 0, stage: int = 0,
               static_weights: DomainWeights | None = None) -> RoundState:
    """One synchronization. ``progress`` is the schedule position in [0, 1]."""
    k = len(sources)
    if k < 2:
        raise ValueError("need at least two source domains")
    lr = cosine_lr(progress, 1.0, config.lr_hi, config.lr_lo)
    gate = confidence_gate_schedule(progress, 1.0, config.gate_lo, config.gate_hi)
    sizes = [len(s) for s in sources]

    # local training; each call sees exactly one domain
    uploads, losses = [], []
    for j, src in enumerate(sources):
        try:
            res = local_train_stage(src, state.global_params, lr, _steps(len(src), config, epochs_covered),
                                    rng, config.batch_size, config.momentum)
        except Exception as exc:
            raise RuntimeError(f"local training failed on source {j} (epoch {epoch}, stage {stage})") from exc
        uploads.append(serialize(res.params))
        losses.append(float(np.mean(res.losses)))
    comm.record(epoch, stage, uploads)
    received = [deserialize(b) for b in uploads]
    new = RoundState(state.global_params, received, gate, source_loss=float(np.mean(losses)))

    if config.source_only:
        a = np.asarray(sizes, dtype=np.float64)
        new.weights = DomainWeights(a / a.sum())
        new.global_params = aggregate_params(received, new.weights)
        return new

    teachers = [Classifier(p) for p in received]
    preds = teacher_predictions(teachers, target.inputs)
    ext = build_extended_domain(target, teachers, gate, vote=config.knowledge_vote, preds=preds)
    kv = train_extended_stage(ext, state.global_params, lr, _steps(len(target), config, epochs_covered),
                              rng, config.batch_size, config.momentum)
    new.extended = ext
    new.kv_loss = float(np.mean(kv.losses))
    new.extended_probs = forward(Classifier(kv.params), target.inputs, "eval").probs

    if config.weighting == "cf":
        new.cf = cf_report(preds, gate)
    new.weights = source_weights(config, sizes, len(target), new.cf, static_weights)

    models = received + [kv.params]
    agg = aggregate_params(models, new.weights)
    if config.bn_mmd:
        stats = [bnmmd.extract_bn_stats(m) for m in models]
        if config.bn_mode == "closed_form":
            agg = bnmmd.apply_bn_stats(agg, bnmmd.closed_form_moments(stats, new.weights))
        else:
            agg = bn_mmd_gradient_stage(agg, stats, new.weights, target, lr,
                                        _steps(len(target), config, epochs_covered), rng,
                                        config.batch_size, config.momentum)
    new.global_params = agg
    return new


@dataclass
class Metrics:
    columns: list[str]
    rows: list[dict]

    def to_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=self.columns, lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({c: _fmt(r.get(c, "")) for c in self.columns})

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]

    @property
    def final_accuracy(self) -> float:
        return self.rows[-1]["target_accuracy"]


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def metric_columns(k: int) -> list[str]:
    return (
        ["epoch", "target_accuracy", "synced", "gate", "lr", "source_loss", "kv_loss"]
        + [f"alpha_{j}" for j in range(k + 1)]
        + [f"cf_raw_{j}" for j in range(k)]
        + ["uploads", "bytes"]
    )


@dataclass
class TrainingResult:
    model: Classifier
    metrics: Metrics
    comm: CommunicationLog
    state: RoundState
    # (p, q) pairs from the last sync, kept for diagnostics
    consensus: np.ndarray | None = None
    student: np.ndarray | None = None
    extended_shares_target_inputs: bool | None = None


def run_training(config: RoundConfig, sources: Sequence[LabeledDataset], target: UnlabeledDataset,
                 checkpoint_dir=None, static_weights: DomainWeights | None = None) -> TrainingResult:
    """Iterate synchronizations over ``config.epochs`` epochs; deterministic in ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    k = len(sources)
    d = sources[0].inputs.shape[1]
    c = sources[0].num_classes
    if any(s.inputs.shape[1] != d or s.num_classes != c for s in sources) or target.inputs.shape[1] != d:
        raise ValueError("all domains must share input dimension and class count")
    if config.weighting == "hdiv_proxy" and static_weights is None:
        ctx = WeightingContext([len(s) for s in sources], len(target), [s.inputs for s in sources],
                               target.inputs, config.seed)
        static_weights = baseline_weights("hdiv_proxy", ctx)

    model = init_classifier(d, c, config.hidden, rng)
    state = RoundState(model.params)
    comm = CommunicationLog()
    cols = metric_columns(k)
    rows = []
    total = config.epochs
    denom = max(total - 1, 1)
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)

    last_sync = 0
    for e in range(total):
        synced = False
        if config.rounds >= 1:
            n = config.stages_per_epoch
            for s in range(n):
                state = kd3a_round(state, sources, target, config, progress=min((e + s / n) / denom, 1.0),
                                   rng=rng, comm=comm, epoch=e, stage=s, static_weights=static_weights)
            synced = True
        elif (e + 1) % config.sync_period == 0 or e == total - 1:
            covered = e + 1 - last_sync
            state = kd3a_round(state, sources, target, config, progress=last_sync / denom,
                               epochs_covered=covered, rng=rng, comm=comm, epoch=e,
                               static_weights=static_weights)
            last_sync = e + 1
            synced = True

        model = Classifier(state.global_params)
        row = {
            "epoch": e + 1,
            "target_accuracy": target.accuracy(predict(model, target.inputs)),
            "synced": int(synced),
            "gate": state.gate,
            "lr": cosine_lr(e / denom, 1.0, config.lr_hi, config.lr_lo),
            "source_loss": state.source_loss,
            "kv_loss": state.kv_loss,
            "uploads": comm.uploads,
            "bytes": comm.total_bytes,
        }
        if state.weights is not None:
            alpha = list(state.weights.alpha) + [0.0] * (k + 1 - len(state.weights))
            row.update({f"alpha_{j}": float(a) for j, a in enumerate(alpha)})
        if state.cf is not None:
            row.update({f"cf_raw_{j}": float(v) for j, v in enumerate(state.cf.cf_values)})
        rows.append(row)
        log.debug("epoch %d acc %.4f", e + 1, row["target_accuracy"])
        if checkpoint_dir is not None:
            save_params(state.global_params, Path(checkpoint_dir) / f"epoch_{e + 1}.kd3a")

    result = TrainingResult(Classifier(state.global_params), Metrics(cols, rows), comm, state)
    if state.extended is not None:
        result.consensus = state.extended.p
        result.student = state.extended_probs
        result.extended_shares_target_inputs = state.extended.inputs is target.inputs
    return result


def with_overrides(config: RoundConfig, **kw) -> RoundConfig:
    return replace(config, **kw)
