"""Command-line entry point: ``kd3a run | ablate | diagnose``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import harness

_LONG = {"kv": "knowledge_vote", "cf": "consensus_focus", "bn": "bn_mmd"}


def _subset(text: str) -> tuple[str, ...]:
    text = text.strip()
    if text == "none":
        return ()
    parts = [p.strip() for p in text.split("+")]
    return tuple(_LONG.get(p, p) for p in parts)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [experiment] and [training] sections")
    common.add_argument("--scenario", help="clean, irrelevant, malicious{m} or ma-15/ma-30/ma-50")
    common.add_argument("--strategy", help="comma list from: " + ", ".join(harness.STRATEGIES))
    common.add_argument("--seeds", help="seed indices, e.g. '0-4' or '0,2,7'")
    common.add_argument("--base-seed", type=int, help="root seed all run seeds derive from")
    common.add_argument("--out", help="output directory")
    common.add_argument("--r", type=float, help="synchronizations per epoch (0.5 = every 2 epochs)")
    common.add_argument("--epochs", type=int, help="training epochs T")
    common.add_argument("--batch-size", type=int)
    common.add_argument("--bn-mode", choices=("closed_form", "gradient"))
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="kd3a", description="Decentralized multi-source adaptation experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="compare weighting strategies; writes per-run and summary CSVs")
    ab = sub.add_parser("ablate", parents=[common], help="toggle vote / consensus focus / BN-MMD")
    ab.add_argument("--components", default=None,
                    help="comma list of subsets like 'kv+cf+bn,cf+bn,none' (default: all eight)")
    dg = sub.add_parser("diagnose", parents=[common], help="Pinsker and input-identity checks on consensus pairs")
    dg.add_argument("--pairs", help="check an existing pairs CSV instead of training")
    return p


def config_from_args(args) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config)
    exp = {}
    if args.scenario:
        exp["scenario"] = harness.Scenario.parse(args.scenario)
    if args.strategy:
        exp["strategies"] = tuple(s.strip() for s in args.strategy.split(",") if s.strip())
    if args.seeds:
        exp["seeds"] = harness.parse_seeds(args.seeds)
    if args.base_seed is not None:
        exp["base_seed"] = args.base_seed
    if args.out:
        exp["out"] = args.out
    train = {}
    if args.r is not None:
        train["rounds"] = args.r
    if args.epochs is not None:
        train["epochs"] = args.epochs
    if args.batch_size is not None:
        train["batch_size"] = args.batch_size
    if args.bn_mode:
        train["bn_mode"] = args.bn_mode
    return replace(cfg, training=replace(cfg.training, **train), **exp)


def _diagnose(args, cfg: harness.ExperimentConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.pairs:
        p, _, q = harness.load_pairs(args.pairs)
        reports = [("file", harness.diagnostics(p, q))]
    else:
        reports = []
        for i in cfg.seeds:
            res = harness.run_cell(cfg, harness.STRATEGIES["kd3a"], i)
            st = res.state.extended
            harness.dump_pairs(st.p, st.n_p, res.student, out / f"consensus_seed{i}.csv")
            reports.append((f"seed {i}", harness.diagnose_result(res)))
    text = "".join(f"## {name}\n\n{r.to_markdown()}\n" for name, r in reports)
    (out / "diagnostics.md").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0 if all(r.ok for _, r in reports) else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = config_from_args(args)
        if args.command == "run":
            summary = harness.run_experiment(cfg)
        elif args.command == "ablate":
            subsets = None if not args.components else [_subset(s) for s in args.components.split(",")]
            summary = harness.ablation(cfg, subsets)
        else:
            return _diagnose(args, cfg)
    except (ValueError, OSError) as exc:
        print(f"kd3a: error: {exc}", file=sys.stderr)
        return 2
    print(harness.summary_markdown(summary, cfg), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
