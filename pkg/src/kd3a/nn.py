"""Small MLP classifier with BatchNorm, written against numpy with manual backprop.

The network is ``n_blocks`` of (linear -> BatchNorm -> ReLU) followed by a linear
softmax head. Parameters live in :class:`ModelParams`, an ordered, read-only
collection of named arrays that doubles as the unit exchanged between silos.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
KL_EPS = 1e-8
SIMPLEX_TOL = 1e-4

WIRE_MAGIC = b"KD3A"
WIRE_VERSION = 1

Mode = Literal["train", "eval"]

# buffers are carried, aggregated and serialized, but never touched by SGD
_BUFFER_SUFFIXES = (".running_mean", ".running_var")


def is_buffer(name: str) -> bool:
    return name.endswith(_BUFFER_SUFFIXES)


@dataclass(frozen=True)
class ModelParams:
    """Ordered named parameter blocks. Arrays are copied and frozen on construction."""

    names: tuple[str, ...]
    arrays: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.names) != len(self.arrays):
            raise ValueError("names and arrays differ in length")
        if len(set(self.names)) != len(self.names):
            raise ValueError("duplicate parameter names")
        frozen = []
        for a in self.arrays:
            a = np.array(a, copy=True)
            if not np.all(np.isfinite(a)):
                raise ValueError("non-finite parameter values")
            a.setflags(write=False)
            frozen.append(a)
        object.__setattr__(self, "arrays", tuple(frozen))
        object.__setattr__(self, "_index", {n: i for i, n in enumerate(self.names)})

    @classmethod
    def _wrap(cls, names: tuple[str, ...], arrays: Sequence[np.ndarray]) -> "ModelParams":
        """Adopt freshly computed arrays without copying or re-validating them."""
        obj = object.__new__(cls)
        for a in arrays:
            a.setflags(write=False)
        object.__setattr__(obj, "names", names)
        object.__setattr__(obj, "arrays", tuple(arrays))
        object.__setattr__(obj, "_index", {n: i for i, n in enumerate(names)})
        return obj

    @classmethod
    def from_items(cls, items: Iterable[tuple[str, np.ndarray]]) -> "ModelParams":
        items = list(items)
        return cls(tuple(n for n, _ in items), tuple(a for _, a in items))

    @property
    def manifest(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        return tuple((n, a.shape) for n, a in zip(self.names, self.arrays))

    @property
    def dtype(self) -> np.dtype:
        return self.arrays[0].dtype

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[self._index[name]]

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def items(self):
        return zip(self.names, self.arrays)

    def replace(self, updates: dict[str, np.ndarray]) -> "ModelParams":
        unknown = set(updates) - set(self.names)
        if unknown:
            raise KeyError(f"unknown parameters: {sorted(unknown)}")
        fresh = {n: np.array(v, dtype=self[n].dtype).reshape(self[n].shape) for n, v in updates.items()}
        if not all(np.isfinite(v).all() for v in fresh.values()):
            raise ValueError("non-finite parameter values")
        return ModelParams._wrap(self.names, [fresh.get(n, a) for n, a in self.items()])

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.names, tuple(a.astype(dtype) for a in self.arrays))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays])

    def num_values(self) -> int:
        return sum(a.size for a in self.arrays)


def check_same_manifest(models: Sequence[ModelParams]) -> None:
    first = models[0].manifest
    for m in models[1:]:
        if m.manifest != first:
            raise ValueError("parameter manifests do not match")


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    hidden: tuple[int, ...]
    num_classes: int

    @property
    def n_blocks(self) -> int:
        return len(self.hidden)

    @classmethod
    def from_params(cls, params: ModelParams) -> "Architecture":
        hidden = []
        i = 0
        while f"block{i}.linear.weight" in params:
            hidden.append(params[f"block{i}.linear.weight"].shape[1])
            i += 1
        if "head.weight" not in params:
            raise ValueError("parameters have no classifier head")
        head = params["head.weight"]
        input_dim = params["block0.linear.weight"].shape[0] if hidden else head.shape[0]
        return cls(input_dim, tuple(hidden), head.shape[1])


@dataclass
class Classifier:
    """A parameter set plus the architecture it encodes.

    ``params`` is replaced (never mutated) when a train-mode forward refreshes
    BatchNorm running statistics.
    """

    params: ModelParams
    arch: Architecture = field(default=None)  # type: ignore[assignment]
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    def __post_init__(self):
        if self.arch is None:
            self.arch = Architecture.from_params(self.params)

    @property
    def num_classes(self) -> int:
        return self.arch.num_classes

    def copy(self) -> "Classifier":
        return Classifier(self.params, self.arch, self.momentum, self.eps)


def init_classifier(
    input_dim: int,
    num_classes: int,
    hidden: Sequence[int] = (32, 32, 32),
    rng: np.random.Generator | None = None,
    dtype=np.float32,
    zero: bool = False,
) -> Classifier:
    """He-initialised weights, zero biases, identity BatchNorm."""
    rng = rng if rng is not None else np.random.default_rng(0)
    items = []
    fan_in = input_dim
    for i, width in enumerate(hidden):
        w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, width))
        items += [
            (f"block{i}.linear.weight", w),
            (f"block{i}.linear.bias", np.zeros(width)),
            (f"block{i}.bn.gamma", np.ones(width)),
            (f"block{i}.bn.beta", np.zeros(width)),
            (f"block{i}.bn.running_mean", np.zeros(width)),
            (f"block{i}.bn.running_var", np.ones(width)),
        ]
        fan_in = width
    w = rng.normal(0.0, math.sqrt(1.0 / fan_in), size=(fan_in, num_classes))
    items += [("head.weight", w), ("head.bias", np.zeros(num_classes))]
    if zero:
        items = [(n, a if ".bn." in n else np.zeros_like(a)) for n, a in items]
    params = ModelParams.from_items((n, np.asarray(a, dtype=dtype)) for n, a in items)
    return Classifier(params, Architecture(input_dim, tuple(hidden), num_classes))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class ForwardPass:
    probs: np.ndarray
    bn_features: list[np.ndarray]
    logits: np.ndarray
    mode: str
    _cache: list = field(repr=False, default_factory=list)
    _last_hidden: np.ndarray | None = field(repr=False, default=None)

    def __iter__(self):
        # allows ``probs, feats = forward(...)``
        return iter((self.probs, self.bn_features))


def forward(model: Classifier, batch: np.ndarray, mode: Mode = "eval") -> ForwardPass:
    """Run the network. ``bn_features`` are the pre-normalisation activations."""
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.arch.input_dim:
        raise ValueError(f"expected batch of shape (n, {model.arch.input_dim}), got {x.shape}")
    if mode == "train" and x.shape[0] < 2:
        raise ValueError("train-mode forward needs at least 2 samples for batch statistics")

    p = model.params
    h = x
    feats, cache, stat_updates = [], [], {}
    for i in range(model.arch.n_blocks):
        pre = f"block{i}"
        w = p[f"{pre}.linear.weight"].astype(np.float64)
        z = h @ w + p[f"{pre}.linear.bias"]
        feats.append(z)
        if mode == "train":
            mu = z.mean(axis=0)
            var = z.var(axis=0)
            m = model.momentum
            stat_updates[f"{pre}.bn.running_mean"] = (1 - m) * p[f"{pre}.bn.running_mean"] + m * mu
            stat_updates[f"{pre}.bn.running_var"] = (1 - m) * p[f"{pre}.bn.running_var"] + m * var
        else:
            mu = p[f"{pre}.bn.running_mean"].astype(np.float64)
            var = p[f"{pre}.bn.running_var"].astype(np.float64)
        inv = 1.0 / np.sqrt(var + model.eps)
        xhat = (z - mu) * inv
        y = p[f"{pre}.bn.gamma"] * xhat + p[f"{pre}.bn.beta"]
        cache.append((h, xhat, inv, y))
        h = np.maximum(y, 0.0)
    logits = h @ p["head.weight"].astype(np.float64) + p["head.bias"]
    if stat_updates:
        model.params = p.replace(stat_updates)
    return ForwardPass(softmax(logits), feats, logits, mode, cache, h)


def backward(
    model: Classifier,
    fwd: ForwardPass,
    grad_logits: np.ndarray,
    feature_grads: Sequence[np.ndarray | None] | None = None,
) -> ModelParams:
    """Gradient of a scalar loss given dL/dlogits (and optionally dL/dπ per BN layer).

    Running statistics get zero gradient.
    """
    p = model.params
    g = {n: np.zeros(a.shape) for n, a in p.items()}
    dl = np.asarray(grad_logits, dtype=np.float64)
    g["head.weight"] = fwd._last_hidden.T @ dl
    g["head.bias"] = dl.sum(axis=0)
    dh = dl @ p["head.weight"].astype(np.float64).T
    for i in reversed(range(model.arch.n_blocks)):
        pre = f"block{i}"
        h_in, xhat, inv, y = fwd._cache[i]
        dy = dh * (y > 0)
        g[f"{pre}.bn.gamma"] = (dy * xhat).sum(axis=0)
        g[f"{pre}.bn.beta"] = dy.sum(axis=0)
        dxhat = dy * p[f"{pre}.bn.gamma"]
        if fwd.mode == "train":
            n = dxhat.shape[0]
            dz = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dz = dxhat * inv
        if feature_grads is not None and feature_grads[i] is not None:
            dz = dz + feature_grads[i]
        g[f"{pre}.linear.weight"] = h_in.T @ dz
        g[f"{pre}.linear.bias"] = dz.sum(axis=0)
        dh = dz @ p[f"{pre}.linear.weight"].astype(np.float64).T
    return ModelParams._wrap(p.names, [g[n].astype(p.dtype) for n in p.names])


# ---------------------------------------------------------------- losses


def _check_simplex(v: np.ndarray, what: str) -> None:
    s = v.sum(axis=-1)
    if np.any(v < -SIMPLEX_TOL) or np.any(np.abs(s - 1.0) > SIMPLEX_TOL):
        raise ValueError(f"{what} is not a probability vector")


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats, q clamped below at ``KL_EPS``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError("p and q must be vectors of equal length")
    _check_simplex(p, "p")
    _check_simplex(q, "q")
    return float(max(kl_rows(p[None], q[None])[0], 0.0))


def kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise KL without validation. 0·log 0 is taken as 0."""
    q = np.maximum(q, KL_EPS)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(np.where(p > 0, p, 1.0)) - np.log(q)), 0.0)
    return terms.sum(axis=1)


def weighted_kd_loss(item, q) -> float:
    """Support-weighted distillation loss for one consensus item."""
    return float(item.n_p) * kl_divergence(item.p, q)


def kv_loss(probs: np.ndarray, targets: np.ndarray, support: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean of ``n_p * KL(p || q)`` over a batch, and its gradient w.r.t. logits."""
    n = probs.shape[0]
    loss = float(np.mean(support * kl_rows(targets, probs)))
    # d/dlogits of -sum_c p_c log q_c is q - p for p on the simplex
    grad = support[:, None] * (probs * targets.sum(axis=1, keepdims=True) - targets) / n
    return loss, grad


def cross_entropy_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    labels = _check_labels(labels, probs.shape[1])
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(picked, KL_EPS))))


def cross_entropy_grad(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """dL/dlogits for mean cross-entropy over softmax outputs."""
    labels = _check_labels(labels, probs.shape[1])
    grad = np.array(probs, dtype=np.float64)
    grad[np.arange(len(labels)), labels] -= 1.0
    return grad / len(labels)


def _check_labels(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return labels.astype(np.int64)


# ---------------------------------------------------------------- optimisation


def sgd_step(
    params: ModelParams,
    grads: ModelParams,
    lr: float,
    velocity: ModelParams | None = None,
    momentum: float = 0.9,
) -> tuple[ModelParams, ModelParams]:
    """Heavy-ball SGD (``v = momentum*v + g; w -= lr*v``). Buffers pass through untouched.

    Returns the new parameters and the new velocity.
    """
    check_same_manifest([params, grads])
    if velocity is None:
        velocity = ModelParams._wrap(params.names, [np.zeros_like(a) for a in params.arrays])
    else:
        check_same_manifest([params, velocity])
    new_p, new_v = [], []
    for name, w, gr, v in zip(params.names, params.arrays, grads.arrays, velocity.arrays):
        if is_buffer(name):
            new_p.append(w)
            new_v.append(v)
            continue
        v = momentum * v + gr
        new_p.append(w - lr * v)
        new_v.append(v)
    return ModelParams._wrap(params.names, new_p), ModelParams._wrap(params.names, new_v)


def clip_grad_norm(grads: ModelParams, max_norm: float) -> ModelParams:
    """Rescale so the global L2 norm over trainable arrays is at most ``max_norm``."""
    sq = sum(float(np.sum(np.square(a, dtype=np.float64))) for n, a in grads.items() if not is_buffer(n))
    norm = math.sqrt(sq)
    if norm <= max_norm or norm == 0.0:
        return grads
    scale = max_norm / norm
    return ModelParams._wrap(grads.names, [a if is_buffer(n) else a * scale for n, a in grads.items()])


def cosine_lr(epoch: float, total_epochs: float, lr_hi: float = 0.05, lr_lo: float = 0.001) -> float:
    frac = min(max(epoch / total_epochs, 0.0), 1.0) if total_epochs > 0 else 1.0
    return lr_lo + 0.5 * (lr_hi - lr_lo) * (1.0 + math.cos(math.pi * frac))


def aggregate_params(models: Sequence[ModelParams], weights) -> ModelParams:
    """Convex combination of every parameter block, running statistics included."""
    if not models:
        raise ValueError("nothing to aggregate")
    check_same_manifest(models)
    w = np.asarray(getattr(weights, "alpha", weights), dtype=np.float64)
    if w.shape != (len(models),):
        raise ValueError(f"need {len(models)} weights, got shape {w.shape}")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-6:
        raise ValueError("aggregation weights must lie on the simplex")
    dtype = models[0].dtype
    out = []
    for j in range(len(models[0].arrays)):
        acc = np.zeros(models[0].arrays[j].shape, dtype=np.float64)
        for wk, m in zip(w, models):
            if wk != 0.0:
                acc += wk * m.arrays[j].astype(np.float64)
        out.append(acc.astype(dtype))
    return ModelParams._wrap(models[0].names, out)


def predict(model: Classifier, inputs: np.ndarray) -> np.ndarray:
    return forward(model, inputs, "eval").probs.argmax(axis=1)


def empirical_task_risk(model: Classifier, dataset) -> float:
    """Misclassification rate of the argmax decision."""
    if len(dataset.labels) == 0:
        raise ValueError("empty dataset")
    return float(np.mean(predict(model, dataset.inputs) != np.asarray(dataset.labels)))


# ---------------------------------------------------------------- wire format
#
# header: b"KD3A" | u16 version | u32 layer count
#         per layer: u16 name length | utf-8 name | u8 ndim | u32 dims...
# body:   little-endian float32 values, layers in manifest order


def serialize(params: ModelParams) -> bytes:
    head = [WIRE_MAGIC, struct.pack("<HI", WIRE_VERSION, len(params.names))]
    for name, a in params.items():
        raw = name.encode("utf-8")
        head.append(struct.pack("<H", len(raw)) + raw)
        head.append(struct.pack(f"<B{a.ndim}I", a.ndim, *a.shape))
    body = [np.ascontiguousarray(a, dtype="<f4").tobytes() for a in params.arrays]
    return b"".join(head + body)


def deserialize(blob: bytes) -> ModelParams:
    if blob[:4] != WIRE_MAGIC:
        raise ValueError("not a KD3A model blob")
    version, count = struct.unpack_from("<HI", blob, 4)
    if version != WIRE_VERSION:
        raise ValueError(f"unsupported wire version {version}")
    off = 10
    names, shapes = [], []
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", blob, off)
        off += 2
        names.append(blob[off : off + ln].decode("utf-8"))
        off += ln
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shapes.append(struct.unpack_from(f"<{ndim}I", blob, off))
        off += 4 * ndim
    arrays = []
    for shape in shapes:
        n = int(np.prod(shape, dtype=np.int64))
        arrays.append(np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32))
        off += 4 * n
    if off != len(blob):
        raise ValueError("trailing bytes after model body")
    return ModelParams(tuple(names), tuple(arrays))


def save_params(params: ModelParams, path) -> int:
    blob = serialize(params)
    Path(path).write_bytes(blob)
    return len(blob)


def load_params(path) -> ModelParams:
    return deserialize(Path(path).read_bytes())
