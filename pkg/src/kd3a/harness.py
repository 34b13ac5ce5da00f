"""Experiment runner: scenarios, strategy comparisons, ablations and diagnostics."""

from __future__ import annotations

import configparser
import csv
import itertools
import logging
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .domains import (
    DomainSpec,
    LabeledDataset,
    UnlabeledDataset,
    as_target,
    corrupt_labels,
    default_class_means,
    generate_domain,
    make_irrelevant_domain,
)
from .federation import RoundConfig, TrainingResult, run_training
from .nn import kl_rows

log = logging.getLogger(__name__)

STRATEGIES = {
    "kd3a": {},
    "source-only": {"source_only": True},
    "uniform": {"weighting": "uniform"},
    "datasize": {"weighting": "datasize"},
    "hdiv": {"weighting": "hdiv_proxy"},
}
COMPONENTS = ("knowledge_vote", "consensus_focus", "bn_mmd")
_SHORT = {"knowledge_vote": "kv", "consensus_focus": "cf", "bn_mmd": "bn"}
NAMED_ATTACKS = {"ma-15": 0.15, "ma-30": 0.30, "ma-50": 0.50}

# desk benchmark: two mildly shifted sources and one strongly rotated one
DESK_TRAINING = RoundConfig(batch_size=10)


@dataclass(frozen=True)
class Scenario:
    kind: str  # clean | irrelevant | malicious
    fraction: float = 0.0

    @classmethod
    def parse(cls, text: str) -> "Scenario":
        t = text.strip().lower()
        if t in ("clean", "irrelevant"):
            return cls(t)
        if t in NAMED_ATTACKS:
            return cls("malicious", NAMED_ATTACKS[t])
        m = re.fullmatch(r"malicious[{:(]?\s*([0-9]*\.?[0-9]+)\s*[})]?", t)
        if m:
            frac = float(m.group(1))
            if not 0.0 <= frac <= 1.0:
                raise ValueError("malicious fraction must lie in [0, 1]")
            return cls("malicious", frac)
        raise ValueError(f"unknown scenario {text!r}; use clean, irrelevant, malicious{{m}} or ma-15/30/50")

    def __str__(self) -> str:
        return f"malicious{{{self.fraction:g}}}" if self.kind == "malicious" else self.kind


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: Scenario = Scenario("clean")
    malicious_index: int = 0
    num_classes: int = 4
    input_dim: int = 8
    source_size: int = 400
    target_size: int = 400
    rotations: tuple[float, ...] = (0.2, 0.3, 2.5)
    translations: tuple[float, ...] = (0.5, 0.8, 1.0)
    shift_scale: float = 1.0
    cov_scale: float = 0.8
    class_radius: float = 3.0
    class_offset: float = 0.0
    training: RoundConfig = DESK_TRAINING
    strategies: tuple[str, ...] = ("kd3a", "source-only")
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    base_seed: int = 0
    out: str = "results"

    def __post_init__(self):
        if isinstance(self.scenario, str):
            object.__setattr__(self, "scenario", Scenario.parse(self.scenario))
        if len(self.rotations) != len(self.translations) or len(self.rotations) < 2:
            raise ValueError("need matching rotations/translations for at least two sources")
        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        for s in self.strategies:
            if s not in STRATEGIES:
                raise ValueError(f"unknown strategy {s!r}; choose from {sorted(STRATEGIES)}")
        if not 0 <= self.malicious_index < len(self.rotations):
            raise ValueError("malicious_index out of range")
        if self.source_size < self.num_classes or self.target_size < self.num_classes:
            raise ValueError("domain sizes must be at least the number of classes")

    @property
    def num_sources(self) -> int:
        return len(self.rotations)

    def with_training(self, **kw) -> "ExperimentConfig":
        return replace(self, training=replace(self.training, **kw))


def derive_seed(*parts: int) -> int:
    """Stable 32-bit seed from a tuple of nonnegative integers."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass
class Domains:
    sources: list[LabeledDataset]
    target: UnlabeledDataset
    bad_index: int | None = None


def build_domains(cfg: ExperimentConfig, seed_index: int) -> Domains:
    """Sources and target for one seed. Every strategy sees the same draw."""
    base = cfg.base_seed
    geometry = derive_seed(base, seed_index, 0)
    means = default_class_means(cfg.num_classes, cfg.input_dim, seed=geometry,
                                radius=cfg.class_radius, offset=cfg.class_offset)
    rng = np.random.default_rng(geometry)
    sources = []
    for j, (angle, dist) in enumerate(zip(cfg.rotations, cfg.translations)):
        v = rng.normal(size=cfg.input_dim)
        v /= np.linalg.norm(v)
        spec = DomainSpec(means, cfg.source_size, derive_seed(base, seed_index, 1, j), cfg.cov_scale,
                          angle * cfg.shift_scale, dist * cfg.shift_scale * v)
        sources.append(generate_domain(spec))
    target_spec = DomainSpec(means, cfg.target_size, derive_seed(base, seed_index, 2), cfg.cov_scale)
    target = as_target(generate_domain(target_spec))

    bad = None
    if cfg.scenario.kind == "irrelevant":
        junk = replace(target_spec, sample_count=cfg.source_size)
        sources.append(make_irrelevant_domain(junk, derive_seed(base, seed_index, 3)))
        bad = len(sources) - 1
    elif cfg.scenario.kind == "malicious":
        bad = cfg.malicious_index
        sources[bad] = corrupt_labels(sources[bad], cfg.scenario.fraction, derive_seed(base, seed_index, 4))
    return Domains(sources, target, bad)


def training_seed(cfg: ExperimentConfig, seed_index: int) -> int:
    return derive_seed(cfg.base_seed, seed_index, 5)


def datasize_alpha(sizes: Sequence[int], target_size: int) -> np.ndarray:
    """Datasize weights over the K sources plus the consensus slot."""
    sizes = np.asarray(sizes, dtype=np.float64)
    a_ext = target_size / (sizes.sum() + target_size)
    return np.append((1.0 - a_ext) * sizes / sizes.sum(), a_ext)


# ---------------------------------------------------------------- running


@dataclass
class RunRecord:
    variant: str
    seed_index: int
    final_accuracy: float
    final_alpha: np.ndarray
    result: TrainingResult = field(repr=False)


@dataclass
class ExperimentSummary:
    columns: list[str]
    rows: list[dict]
    records: list[RunRecord]

    def row(self, variant: str) -> dict:
        for r in self.rows:
            if r["strategy"] == variant:
                return r
        raise KeyError(variant)

    def accuracies(self, variant: str) -> np.ndarray:
        return np.array([r.final_accuracy for r in self.records if r.variant == variant])


def run_cell(cfg: ExperimentConfig, overrides: dict, seed_index: int,
             domains: Domains | None = None) -> TrainingResult:
    domains = domains or build_domains(cfg, seed_index)
    rc = replace(cfg.training, seed=training_seed(cfg, seed_index), **overrides)
    return run_training(rc, domains.sources, domains.target)


def _run_variants(cfg: ExperimentConfig, variants: dict[str, dict], prefix: str, write: bool) -> ExperimentSummary:
    out = Path(cfg.out)
    if write:
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create output directory {out}: {exc}") from exc
    records = []
    bad, sizes, target_size = None, None, None
    for i in cfg.seeds:
        domains = build_domains(cfg, i)
        bad = domains.bad_index
        sizes, target_size = [len(s) for s in domains.sources], len(domains.target)
        for name, overrides in variants.items():
            res = run_cell(cfg, overrides, i, domains)
            k = len(domains.sources)
            alpha = np.array([res.metrics.rows[-1].get(f"alpha_{j}", 0.0) for j in range(k + 1)])
            records.append(RunRecord(name, i, res.metrics.final_accuracy, alpha, res))
            log.info("%s seed %d: target accuracy %.4f", name, i, res.metrics.final_accuracy)
            if write:
                res.metrics.to_csv(out / f"{prefix}{name}_seed{i}.csv")

    k = len(sizes)
    columns = (["strategy", "runs", "acc_mean", "acc_std"]
               + [f"alpha_{j}_mean" for j in range(k + 1)]
               + ["bad_domain", "bad_alpha_mean", "bad_datasize_alpha"])
    ds = datasize_alpha(sizes, target_size)
    rows = []
    for name in variants:
        recs = [r for r in records if r.variant == name]
        acc = np.array([r.final_accuracy for r in recs])
        alpha = np.mean([r.final_alpha for r in recs], axis=0)
        row = {
            "strategy": name,
            "runs": len(recs),
            "acc_mean": float(acc.mean()),
            "acc_std": float(acc.std(ddof=1)) if len(acc) > 1 else 0.0,
            **{f"alpha_{j}_mean": float(a) for j, a in enumerate(alpha)},
            "bad_domain": "" if bad is None else bad,
            "bad_alpha_mean": "" if bad is None else float(alpha[bad]),
            "bad_datasize_alpha": "" if bad is None else float(ds[bad]),
        }
        rows.append(row)
    summary = ExperimentSummary(columns, rows, records)
    if write:
        stem = "summary" if not prefix else prefix.rstrip("_")
        write_summary_csv(summary, out / f"{stem}.csv")
        (out / f"{stem}.md").write_text(summary_markdown(summary, cfg), encoding="utf-8")
    return summary


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> ExperimentSummary:
    """One metrics CSV per (strategy, seed), plus summary.csv and summary.md."""
    return _run_variants(cfg, {s: STRATEGIES[s] for s in cfg.strategies}, "", write)


def ablation_name(enabled: Iterable[str]) -> str:
    enabled = set(enabled)
    parts = [_SHORT[c] for c in COMPONENTS if c in enabled]
    return "+".join(parts) if parts else "none"


def ablation_overrides(enabled: Iterable[str]) -> dict:
    enabled = set(enabled)
    unknown = enabled - set(COMPONENTS)
    if unknown:
        raise ValueError(f"unknown components {sorted(unknown)}")
    return {
        "knowledge_vote": "knowledge_vote" in enabled,
        "weighting": "cf" if "consensus_focus" in enabled else "datasize",
        "bn_mmd": "bn_mmd" in enabled,
    }


def all_subsets() -> list[tuple[str, ...]]:
    return [s for n in range(len(COMPONENTS), -1, -1) for s in itertools.combinations(COMPONENTS, n)]


def ablation(cfg: ExperimentConfig, subsets: Sequence[Iterable[str]] | None = None,
             write: bool = True) -> ExperimentSummary:
    """One summary row per enabled-component subset; disabled parts use neutral fallbacks."""
    subsets = all_subsets() if subsets is None else subsets
    variants = {ablation_name(s): ablation_overrides(s) for s in subsets}
    return _run_variants(cfg, variants, "ablation_", write)


def write_summary_csv(summary: ExperimentSummary, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=summary.columns, lineterminator="\n")
        w.writeheader()
        for r in summary.rows:
            w.writerow({c: repr(v) if isinstance(v, float) else v for c, v in r.items()})


def summary_markdown(summary: ExperimentSummary, cfg: ExperimentConfig) -> str:
    has_bad = summary.rows and summary.rows[0]["bad_domain"] != ""
    head = "| strategy | runs | target accuracy |" + (" bad-domain α | datasize α |" if has_bad else "")
    sep = "|---|---|---|" + ("---|---|" if has_bad else "")
    lines = [f"Scenario `{cfg.scenario}`, seeds {list(cfg.seeds)}", "", head, sep]
    for r in summary.rows:
        line = f"| {r['strategy']} | {r['runs']} | {r['acc_mean']:.4f} ± {r['acc_std']:.4f} |"
        if has_bad:
            line += f" {r['bad_alpha_mean']:.4f} | {r['bad_datasize_alpha']:.4f} |"
        lines.append(line)
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- diagnostics


@dataclass
class DiagnosticReport:
    pairs: int
    violations: int
    max_margin: float
    extended_inputs_identical: bool | None

    @property
    def ok(self) -> bool:
        return self.violations == 0 and self.extended_inputs_identical is not False

    def to_markdown(self) -> str:
        ident = "n/a" if self.extended_inputs_identical is None else str(self.extended_inputs_identical)
        return "\n".join([
            "| check | value |",
            "|---|---|",
            f"| (p, q) pairs | {self.pairs} |",
            f"| Pinsker violations | {self.violations} |",
            f"| max of max_c abs(q_c - p_c) - sqrt(KL/2) | {self.max_margin:.6g} |",
            f"| extended inputs are the target inputs | {ident} |",
        ]) + "\n"


def pinsker_margins(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """max_c |q_c - p_c| - sqrt(KL(p||q)/2) per row; never positive for true distributions."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 2:
        raise ValueError("p and q must be matching (N, C) arrays")
    return np.abs(q - p).max(axis=1) - np.sqrt(np.maximum(kl_rows(p, q), 0.0) / 2)


def diagnostics(p: np.ndarray, q: np.ndarray, extended_inputs_identical: bool | None = None,
                tol: float = 1e-12) -> DiagnosticReport:
    m = pinsker_margins(p, q)
    return DiagnosticReport(len(m), int(np.sum(m > tol)), float(m.max()), extended_inputs_identical)


def diagnose_result(result: TrainingResult) -> DiagnosticReport:
    if result.consensus is None:
        raise ValueError("run has no consensus domain (source-only?)")
    return diagnostics(result.consensus, result.student, result.extended_shares_target_inputs)


def dump_pairs(p: np.ndarray, n_p: np.ndarray, q: np.ndarray, path) -> None:
    """Consensus items and student outputs: p_0..p_{C-1}, n_p, q_0..q_{C-1}."""
    c = p.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"p_{j}" for j in range(c)] + ["n_p"] + [f"q_{j}" for j in range(c)])
        for pi, ni, qi in zip(p, n_p, q):
            w.writerow([repr(float(v)) for v in pi] + [repr(float(ni))] + [repr(float(v)) for v in qi])


def load_pairs(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    c = rows[0].index("n_p")
    data = np.array(rows[1:], dtype=np.float64).reshape(-1, 2 * c + 1)
    return data[:, :c], data[:, c], data[:, c + 1:]


# ---------------------------------------------------------------- config files


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def parse_seeds(text: str) -> tuple[int, ...]:
    """Seed indices as a comma list with optional ranges: '0,1,2', '0-4', '3'."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = (int(v) for v in part.split("-", 1))
            out.extend(range(lo, hi + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise ValueError("empty seed list")
    return tuple(out)


_EXPERIMENT_KEYS = {
    "scenario": Scenario.parse,
    "malicious_index": int,
    "num_classes": int,
    "input_dim": int,
    "source_size": int,
    "target_size": int,
    "rotations": _floats,
    "translations": _floats,
    "shift_scale": float,
    "cov_scale": float,
    "class_radius": float,
    "class_offset": float,
    "strategies": lambda s: tuple(v.strip() for v in s.split(",") if v.strip()),
    "seeds": parse_seeds,
    "base_seed": int,
    "out": str,
}


def _training_parser(name: str):
    kind = {f.name: f.type for f in fields(RoundConfig)}[name]
    if name == "hidden":
        return lambda s: tuple(int(v) for v in s.replace(",", " ").split())
    if "bool" in str(kind):
        return lambda s: s.strip().lower() in ("1", "true", "yes", "on")
    if "int" in str(kind):
        return int
    if "float" in str(kind):
        return float
    return str


def load_config(path=None, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Read an INI file with [experiment] and [training] sections over ``base``."""
    cfg = base or ExperimentConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser()
    if not parser.read(path, encoding="utf-8"):
        raise FileNotFoundError(path)
    exp, train = {}, {}
    for key, value in (parser["experiment"].items() if parser.has_section("experiment") else []):
        if key not in _EXPERIMENT_KEYS:
            raise ValueError(f"unknown [experiment] key {key!r}")
        exp[key] = _EXPERIMENT_KEYS[key](value)
    names = {f.name for f in fields(RoundConfig)}
    for key, value in (parser["training"].items() if parser.has_section("training") else []):
        if key not in names:
            raise ValueError(f"unknown [training] key {key!r}")
        train[key] = _training_parser(key)(value)
    return replace(cfg, training=replace(cfg.training, **train), **exp)

