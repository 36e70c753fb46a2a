"""Accuracy, demographic parity gap, pairwise AUC fairness and kNN consistency."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import UndefinedMetricError

METRIC_KEYS = ("accuracy", "delta_dp", "auc_fair", "consistency")


@dataclass
class EvalRecords:
    """Evaluated instances: features, attribute, label, domain, prediction and score."""

    x: np.ndarray
    a: np.ndarray
    y: np.ndarray
    domain: np.ndarray
    yhat: np.ndarray
    score: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.score)):
            raise ValueError("scores must be finite")

    def __len__(self):
        return len(self.y)

    def select(self, mask):
        return EvalRecords(self.x[mask], self.a[mask], self.y[mask], self.domain[mask],
                           self.yhat[mask], self.score[mask])


def _groups(a):
    a = np.asarray(a)
    pos, neg = a == 1, a == -1
    if not pos.any() or not neg.any():
        raise UndefinedMetricError("both sensitive groups (a=1 and a=-1) must be present")
    return pos, neg


def accuracy(yhat, y):
    """Percentage of correct predictions."""
    return 100.0 * float(np.mean(np.asarray(yhat) == np.asarray(y)))


def delta_dp(yhat, a):
    """|P(yhat=1 | a=-1) - P(yhat=1 | a=1)|."""
    yhat = np.asarray(yhat, dtype=float)
    pos, neg = _groups(a)
    return float(abs(yhat[neg].mean() - yhat[pos].mean()))


def auc_fair(score, a, tie_credit=False):
    """Fraction of (a=1, a=-1) pairs whose a=1 member scores strictly higher.

    Ties count 0 unless ``tie_credit`` is set, which gives them 1/2.
    """
    score = np.asarray(score, dtype=float)
    pos, neg = _groups(a)
    hi, lo = score[pos], np.sort(score[neg])
    below = np.searchsorted(lo, hi, side="left")
    wins = float(below.sum())
    if tie_credit:
        ties = np.searchsorted(lo, hi, side="right") - below
        wins += 0.5 * float(ties.sum())
    return wins / (len(hi) * len(lo))


def consistency(x, yhat, domain, k=5):
    """1 - mean |yhat_i - mean of yhat over the k nearest same-domain neighbours|.

    Neighbours are found by Euclidean distance in feature space and never
    include the point itself.
    """
    x = np.asarray(x, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    domain = np.asarray(domain)
    total = 0.0
    for d in np.unique(domain):
        idx = np.flatnonzero(domain == d)
        if len(idx) <= k:
            raise UndefinedMetricError(f"domain {d} has {len(idx)} instances, need more than k={k}")
        _, nn = cKDTree(x[idx]).query(x[idx], k=k + 1)
        nbrs = _drop_self(nn, k)
        total += np.abs(yhat[idx] - yhat[idx][nbrs].mean(1)).sum()
    return float(1.0 - total / len(yhat))


def _drop_self(nn, k):
    """Remove each row's own index from a (n, k+1) neighbour table."""
    nn = np.atleast_2d(nn)
    own = np.arange(nn.shape[0])[:, None]
    is_self = nn == own
    # duplicates can push the point itself out of the first k+1; then drop the farthest
    missing = ~is_self.any(1)
    is_self[missing, -1] = True
    return nn[~is_self].reshape(nn.shape[0], k)


def cell_counts(a, y):
    return {f"a={aa},y={yy}": int(np.sum((np.asarray(a) == aa) & (np.asarray(y) == yy)))
            for aa in (-1, 1) for yy in (0, 1)}


def domain_metrics(rec, k=5, tie_credit=False):
    return {
        "accuracy": accuracy(rec.yhat, rec.y),
        "delta_dp": delta_dp(rec.yhat, rec.a),
        "auc_fair": auc_fair(rec.score, rec.a, tie_credit),
        "consistency": consistency(rec.x, rec.yhat, rec.domain, k),
        "n": len(rec),
        "cells": cell_counts(rec.a, rec.y),
    }


@dataclass
class MetricsReport:
    per_domain: dict
    avg: dict
    config_echo: dict

    def to_json_dict(self):
        out = {str(d): m for d, m in sorted(self.per_domain.items())}
        out["avg"] = self.avg
        out["config_echo"] = self.config_echo
        return out

    def dumps(self):
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json_dict(cls, d):
        d = dict(d)
        avg = d.pop("avg")
        echo = d.pop("config_echo")
        return cls({int(k): v for k, v in d.items()}, avg, echo)


def report_from_records(rec, k=5, tie_credit=False, config_echo=None):
    """Per-domain metrics plus their unweighted average across domains."""
    per = {}
    for d in np.unique(rec.domain):
        per[int(d)] = domain_metrics(rec.select(rec.domain == d), k, tie_credit)
    avg = {m: float(np.mean([v[m] for v in per.values()])) for m in METRIC_KEYS}
    echo = {"k": k, "auc_tie_credit": tie_credit}
    echo.update(config_echo or {})
    return MetricsReport(per, avg, echo)


def evaluate(predict_fn, dataset, k=5, tie_credit=False, config_echo=None):
    """Run ``predict_fn(x, a) -> (yhat, score)`` on ``dataset`` and report per domain."""
    if len(dataset) == 0:
        raise UndefinedMetricError("nothing to evaluate")
    yhat, score = predict_fn(dataset.x, dataset.a)
    rec = EvalRecords(dataset.x, dataset.a, dataset.y, dataset.domain,
                      np.asarray(yhat, dtype=np.int64), np.asarray(score, dtype=float))
    return report_from_records(rec, k, tie_credit, config_echo), rec


REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["avg", "config_echo"],
    "properties": {
        "avg": {
            "type": "object",
            "required": list(METRIC_KEYS),
            "properties": {m: {"type": "number"} for m in METRIC_KEYS},
        },
        "config_echo": {"type": "object"},
    },
    "patternProperties": {
        "^-?[0-9]+$": {
            "type": "object",
            "required": list(METRIC_KEYS) + ["n", "cells"],
            "properties": {
                "accuracy": {"type": "number", "minimum": 0, "maximum": 100},
                "delta_dp": {"type": "number", "minimum": 0, "maximum": 1},
                "auc_fair": {"type": "number", "minimum": 0, "maximum": 1},
                "consistency": {"type": "number", "minimum": 0, "maximum": 1},
                "n": {"type": "integer", "minimum": 1},
                "cells": {"type": "object", "additionalProperties": {"type": "integer"}},
            },
        },
    },
    "additionalProperties": False,
}
