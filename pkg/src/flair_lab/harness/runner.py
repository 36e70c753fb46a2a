"""Leave-one-domain-out runs, the ERM baseline and parameter sweeps."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .. import datagen, metrics, trainer
from ..errors import ConfigError, FlairError

log = logging.getLogger(__name__)

SWEEP_GRIDS = {
    "lambda2": (0.05, 0.1, 0.5, 1.0, 2.0, 5.0),
    "K": (2, 3, 4, 5, 6),
    "variant": trainer.VARIANTS,
}


@dataclass
class Cell:
    """Outcome of one (held-out domain, seed) pair; ``error`` is set when it failed."""

    heldout: int
    seed: int
    report: metrics.MetricsReport | None = None
    error: str | None = None
    records: metrics.EvalRecords | None = None
    model: object = None
    history: list = field(default_factory=list)

    @property
    def ok(self):
        return self.error is None


@dataclass
class RunResult:
    label: str
    cells: list
    mean: dict
    std: dict

    @property
    def reports(self):
        return [c.report for c in self.cells if c.ok]

    @property
    def failures(self):
        return [c for c in self.cells if not c.ok]

    def summary(self):
        return {"label": self.label, "mean": self.mean, "std": self.std,
                "cells": [{"heldout": c.heldout, "seed": c.seed, "error": c.error}
                          for c in self.cells]}


def aggregate(reports):
    """Mean and population standard deviation of each averaged metric."""
    if not reports:
        nan = float("nan")
        return {m: nan for m in metrics.METRIC_KEYS}, {m: nan for m in metrics.METRIC_KEYS}
    mean, std = {}, {}
    for m in metrics.METRIC_KEYS:
        vals = np.array([r.avg[m] for r in reports])
        mean[m] = float(vals.mean())
        std[m] = float(vals.std())
    return mean, std


def benchmark(cfg, seed, heldout):
    ds = datagen.make_benchmark(seed=seed, n=cfg.n, d=cfg.d, noise_sigma=cfg.noise_sigma)
    return ds.with_heldout(heldout)


def _run(cfg, label, fit):
    cells = []
    for heldout in cfg.heldout_ids():
        for seed in cfg.seeds:
            cell = Cell(heldout, seed)
            try:
                ds = benchmark(cfg, seed, heldout)
                model, history, predict_fn = fit(ds, seed)
                echo = {"label": label, "heldout": heldout, "seed": seed}
                cell.report, cell.records = metrics.evaluate(
                    predict_fn, ds.part("test"), cfg.k, cfg.auc_tie_credit, echo)
                cell.model, cell.history = model, history
            except (FlairError, ValueError, ArithmeticError) as exc:
                cell.error = f"{type(exc).__name__}: {exc}"
                log.warning("%s heldout=%d seed=%d failed: %s", label, heldout, seed, cell.error)
            cells.append(cell)
    mean, std = aggregate([c.report for c in cells if c.ok])
    return RunResult(label, cells, mean, std)


def run_experiment(cfg, variant="full"):
    """Train ``variant`` on every leave-one-out split and seed, evaluating on the held-out domain."""
    tcfg = cfg.trainer.with_variant(variant)

    def fit(ds, seed):
        result = trainer.train(ds, tcfg.replace(seed=seed))
        return result.model, result.history, lambda x, a: trainer.predict(result.model, x, a)

    return _run(cfg, variant, fit)


def run_baseline_erm(cfg):
    def fit(ds, seed):
        model, history = trainer.train_erm(ds, cfg.trainer.replace(seed=seed))
        return model, history, lambda x, a: trainer.predict_erm(model, x, a)

    return _run(cfg, "erm", fit)


def sweep(cfg, param, values=None):
    """One :class:`RunResult` per value of ``param`` (``lambda2``, ``K`` or ``variant``)."""
    if param not in SWEEP_GRIDS:
        raise ConfigError(f"cannot sweep {param!r}; choose from {sorted(SWEEP_GRIDS)}")
    values = SWEEP_GRIDS[param] if values is None else values
    out = []
    for v in values:
        if param == "variant":
            res = run_experiment(cfg, v)
        elif param == "lambda2":
            res = run_experiment(cfg.replace(lambda2_init=float(v)))
        else:
            res = run_experiment(cfg.replace(n_prototypes=int(v)))
        res.label = f"{param}={v}"
        out.append(res)
    return out
