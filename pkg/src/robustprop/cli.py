"""Command-line entry point: ``robustprop <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import nullcontext
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .exceptions import ContractViolation, GraphFormatError

EXIT_OK, EXIT_USAGE, EXIT_CONTRACT = 0, 1, 2

logger = logging.getLogger("robustprop")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--config", help="JSON experiment configuration")
    p.add_argument("--seed", type=int, action="append", help="seed (repeatable; overrides config seeds)")
    p.add_argument("--out", help="output directory (default: $ROBUSTPROP_OUT or ./runs)")
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1, deterministic)")
    p.add_argument("--mc-perturbations", type=int, default=None,
                   help="average this many perturbed inferences")
    p.add_argument("--epochs", type=int, help="override the number of epochs")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="robustprop", description="Robust propagation toolkit for sparse graphs.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_ in (("train", "train one model per seed and write run artifacts"),
                        ("robustness", "edge deletion/addition stress test"),
                        ("causal", "counterfactual removal of generator edges, PN/PS bounds"),
                        ("sensitivity", "one-factor sweep over delta, T and gamma"),
                        ("spectral-report", "operator norm, clip scale and contraction factor")):
        _common(sub.add_parser(name, help=help_))
    g = sub.add_parser("gen-sbm", help="write a stochastic block model graph")
    g.add_argument("--n", type=int, default=200)
    g.add_argument("--blocks", type=int, default=2)
    g.add_argument("--p-intra", type=float, default=0.1)
    g.add_argument("--p-inter", type=float, default=0.01)
    g.add_argument("--feature-dim", type=int, default=16)
    g.add_argument("--feature-noise", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="destination graph file")
    gc = sub.add_parser("gradcheck", help="finite-difference audit of all backward passes")
    gc.add_argument("--threshold", type=float, default=1e-4)
    return ap


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    kw = {}
    if args.seed:
        kw["seeds"] = list(args.seed)
    if args.out:
        kw["output_dir"] = args.out
    if args.mc_perturbations is not None:
        kw["mc_perturbations"] = args.mc_perturbations
    if args.epochs is not None:
        kw["epochs"] = args.epochs
    return replace(cfg, **kw) if kw else cfg


def _limits(threads):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(limits=threads)


def _cmd_train(cfg):
    from .pipeline import run_training
    for s in cfg.seeds:
        r = run_training(cfg, s, write=True)
        print(f"seed {s}: accuracy {r.report.accuracy:.4f} roc_auc {r.report.roc_auc:.4f}")


def _cmd_robustness(cfg):
    from .pipeline import PERTURBATIONS, mean_delta, run_robustness_suite, write_rows
    rows = run_robustness_suite(cfg)
    out = cfg.resolve_output()
    out.mkdir(parents=True, exist_ok=True)
    write_rows(rows, out / "robustness.csv")
    for name, _, _ in PERTURBATIONS:
        print(f"{name:12s} mean dAUC% {mean_delta(rows, name):+.4f}")


def _cmd_causal(cfg):
    from .pipeline import run_causal_suite, run_training, write_artifacts
    out = cfg.resolve_output()
    for s in cfg.seeds:
        r = run_training(cfg, s)
        c = run_causal_suite(cfg, r)
        write_artifacts(r)
        print(f"seed {s}: counterfactual dAUC {c.counterfactual_delta:+.4f} pp "
              f"PN>={c.pn:.3f} PS>={c.ps:.3f}")


def _cmd_sensitivity(cfg):
    from .pipeline import run_sensitivity_grid, write_rows
    rows = run_sensitivity_grid(cfg)
    out = cfg.resolve_output()
    out.mkdir(parents=True, exist_ok=True)
    write_rows(rows, out / "sensitivity.csv")
    for r in rows:
        print(f"{r['config']:12s} acc {r['acc_mean']:.4f}+-{r['acc_std']:.4f} "
              f"auc {r['auc_mean']:.4f}+-{r['auc_std']:.4f} [{r['config_hash']}]")


def _cmd_spectral(cfg):
    from .graph import normalize_adjacency
    from .pipeline import load_graph
    from .spectral import spectral_clip
    s = cfg.seeds[0]
    g = load_graph(cfg, int(np.random.SeedSequence(s).spawn(5)[0].generate_state(1)[0]))
    op = normalize_adjacency(g, cfg.with_self_loops, cfg.norm_iters)
    c = np.full(g.n_nodes, 0.5)
    _, rep = spectral_clip(op, cfg.epsilon, c=c, ceiling=cfg.ceiling, norm_iters=cfg.norm_iters)
    out = cfg.resolve_output()
    out.mkdir(parents=True, exist_ok=True)
    (out / "clip_report.json").write_text(rep.to_json() + "\n", encoding="utf-8")
    print(rep.to_json())


def _cmd_gen_sbm(args):
    from .graph import generate_sbm, write_graph
    g = generate_sbm(args.n, args.blocks, args.p_intra, args.p_inter, args.feature_dim,
                     args.feature_noise, args.seed)
    write_graph(g, args.out)
    print(f"wrote {args.out}: {g.n_nodes} nodes, {g.n_edges} edges")


def _cmd_gradcheck(args) -> int:
    from .audit import AUDITS
    worst = 0.0
    for name, fn in AUDITS.items():
        err = fn()
        worst = max(worst, err)
        print(f"{name:20s} max rel err {err:.3e} {'ok' if err < args.threshold else 'FAIL'}")
    return EXIT_OK if worst < args.threshold else EXIT_CONTRACT


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gen-sbm":
            _cmd_gen_sbm(args)
            return EXIT_OK
        if args.command == "gradcheck":
            return _cmd_gradcheck(args)
        cfg = _load_config(args)
        handler = {"train": _cmd_train, "robustness": _cmd_robustness, "causal": _cmd_causal,
                   "sensitivity": _cmd_sensitivity, "spectral-report": _cmd_spectral}[args.command]
        with _limits(args.threads):
            handler(cfg)
        return EXIT_OK
    except ContractViolation as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except (ValueError, GraphFormatError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
