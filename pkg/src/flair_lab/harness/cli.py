"""Command line entry point: ``flair-lab gen|train|eval|sweep|baseline``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .. import datagen, metrics, trainer
from ..disentangle import load_tensors
from ..errors import ConfigError, FlairError
from .config import ExperimentConfig, load_config
from .reports import dump_json, emit_reports
from .runner import SWEEP_GRIDS, benchmark, run_baseline_erm, run_experiment, sweep

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2


def build_parser():
    p = argparse.ArgumentParser(prog="flair-lab", description=__doc__)
    p.add_argument("command", choices=("gen", "train", "eval", "sweep", "baseline"))
    p.add_argument("--config", help="flat key = value config file (defaults if omitted)")
    p.add_argument("--out", help="output directory (overrides the config's outdir)")
    p.add_argument("--seed", type=int, help="run this single seed instead of the config's list")
    p.add_argument("--heldout", help="held-out domain id or 'all'")
    p.add_argument("--variant", default="full", choices=trainer.VARIANTS)
    p.add_argument("--param", default="lambda2", choices=sorted(SWEEP_GRIDS),
                   help="swept parameter for the sweep command")
    p.add_argument("--values", help="comma-separated values for the sweep (default: built-in grid)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args):
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    changes = {}
    if args.out:
        changes["outdir"] = args.out
    if args.seed is not None:
        changes["seeds"] = (args.seed,)
    if args.heldout is not None:
        try:
            changes["heldout"] = args.heldout if args.heldout == "all" else int(args.heldout)
        except ValueError:
            raise ConfigError(f"--heldout must be an integer or 'all', got {args.heldout!r}") from None
    return cfg.replace(**changes) if changes else cfg


def _sweep_values(param, text):
    if text is None:
        return None
    items = [s.strip() for s in text.split(",") if s.strip()]
    try:
        if param == "lambda2":
            return [float(s) for s in items]
        if param == "K":
            return [int(s) for s in items]
    except ValueError:
        raise ConfigError(f"bad --values for {param}: {text!r}") from None
    return items


def cmd_gen(cfg):
    os.makedirs(cfg.outdir, exist_ok=True)
    for seed in cfg.seeds:
        ds = datagen.make_benchmark(seed=seed, n=cfg.n, d=cfg.d, noise_sigma=cfg.noise_sigma)
        path = os.path.join(cfg.outdir, f"benchmark_s{seed}.csv")
        datagen.write_csv(ds, path)
        print(path)


def cmd_eval(cfg, variant):
    """Re-evaluate checkpoints written by ``train`` in the same output directory."""
    tcfg = cfg.trainer.with_variant(variant)
    reports = []
    for heldout in cfg.heldout_ids():
        for seed in cfg.seeds:
            cdir = os.path.join(cfg.outdir, variant, f"h{heldout}_s{seed}")
            ckpt = os.path.join(cdir, "checkpoint.txt")
            if not os.path.exists(ckpt):
                raise ConfigError(f"no checkpoint at {ckpt}; run 'train' first")
            ds = benchmark(cfg, seed, heldout)
            model = trainer.FlairModel.init(ds.dim, tcfg.replace(seed=seed),
                                            np.random.default_rng(0))
            model.load_tensors(load_tensors(ckpt))
            echo = {"label": variant, "heldout": heldout, "seed": seed}
            report, _ = metrics.evaluate(lambda x, a: trainer.predict(model, x, a),
                                         ds.part("test"), cfg.k, cfg.auc_tie_credit, echo)
            dump_json(report.to_json_dict(), os.path.join(cdir, "eval_report.json"))
            reports.append(report)
    print(json.dumps({m: float(np.mean([r.avg[m] for r in reports])) for m in metrics.METRIC_KEYS},
                     sort_keys=True))


def _print_summary(results):
    for r in results:
        print(f"{r.label}: " + " ".join(f"{m}={r.mean[m]:.4f}(+-{r.std[m]:.4f})"
                                        for m in metrics.METRIC_KEYS)
              + (f" failed={len(r.failures)}" if r.failures else ""))


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "gen":
            cmd_gen(cfg)
            return EXIT_OK
        if args.command == "eval":
            cmd_eval(cfg, args.variant)
            return EXIT_OK
        if args.command == "train":
            results = [run_experiment(cfg, args.variant)]
        elif args.command == "baseline":
            results = [run_baseline_erm(cfg)]
        else:
            results = sweep(cfg, args.param, _sweep_values(args.param, args.values))
        emit_reports(results, cfg.outdir, cfg.echo())
        _print_summary(results)
        if all(len(r.failures) == len(r.cells) for r in results):
            print("every cell failed", file=sys.stderr)
            return EXIT_ABORT
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FlairError, RuntimeError, OSError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
