"""Write run artifacts and a manifest of their SHA-256 hashes.

Layout under ``outdir``::

    <label>/h<heldout>_s<seed>/report.json
    <label>/h<heldout>_s<seed>/history.csv
    <label>/h<heldout>_s<seed>/prototypes.csv     (runs with mixtures)
    <label>/h<heldout>_s<seed>/embeddings.csv     (FLAIR variants)
    <label>/h<heldout>_s<seed>/checkpoint.txt     (FLAIR variants)
    <label>/summary.json
    tradeoff.csv
    manifest.json

The manifest hashes every file under ``outdir``, including those left by
earlier commands. Only ``manifest.json`` carries a timestamp; every other
byte is a function of the configuration and seeds.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import re
from datetime import datetime, timezone

import numpy as np

from .. import fairgmm, trainer
from ..disentangle import save_tensors

TRADEOFF_COLUMNS = ("label", "accuracy_mean", "accuracy_std", "delta_dp_mean", "delta_dp_std",
                    "auc_fair_mean", "consistency_mean", "cells", "failed")


def _slug(label):
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", label)


def dump_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def write_history(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if history and isinstance(history[0], trainer.Diagnostics):
            w.writerow(trainer.HISTORY_COLUMNS)
            for d in history:
                w.writerow([repr(v) if isinstance(v, float) else v for v in d.row().values()])
        else:
            w.writerow(["step", "loss"])
            for i, v in enumerate(history, start=1):
                w.writerow([i, repr(float(v))])


def write_embeddings(model, records, path, split="test"):
    """``split,domain,a,y,c0..,ctilde0..`` for every evaluated instance."""
    codes, rep = trainer.representations(model, records.x, records.a)
    c = codes.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split", "domain", "a", "y"] + [f"c{j}" for j in range(c)]
                   + [f"ctilde{j}" for j in range(c)])
        for i in range(len(records)):
            w.writerow([split, int(records.domain[i]), int(records.a[i]), int(records.y[i])]
                       + [repr(float(v)) for v in codes[i]] + [repr(float(v)) for v in rep[i]])


def write_tradeoff(results, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRADEOFF_COLUMNS)
        for r in results:
            w.writerow([r.label, repr(r.mean["accuracy"]), repr(r.std["accuracy"]),
                        repr(r.mean["delta_dp"]), repr(r.std["delta_dp"]),
                        repr(r.mean["auc_fair"]), repr(r.mean["consistency"]),
                        len(r.cells), len(r.failures)])


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(outdir, files=None):
    """Hash ``files`` (default: everything under ``outdir``) into ``manifest.json``."""
    if files is None:
        files = [os.path.join(root, f) for root, _, names in os.walk(outdir) for f in names]
    path = os.path.join(outdir, "manifest.json")
    files = [p for p in files if os.path.abspath(p) != os.path.abspath(path)]
    entries = {os.path.relpath(p, outdir).replace(os.sep, "/"): sha256(p) for p in sorted(files)}
    manifest = {"created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
                "files": entries}
    dump_json(manifest, path)
    return path


def emit_reports(results, outdir, config_echo=None):
    """Write every artifact for ``results`` (a list of RunResult) and return the manifest path."""
    os.makedirs(outdir, exist_ok=True)
    for res in results:
        base = os.path.join(outdir, _slug(res.label))
        os.makedirs(base, exist_ok=True)
        for cell in res.cells:
            if not cell.ok:
                continue
            cdir = os.path.join(base, f"h{cell.heldout}_s{cell.seed}")
            os.makedirs(cdir, exist_ok=True)
            dump_json(cell.report.to_json_dict(), os.path.join(cdir, "report.json"))
            write_history(cell.history, os.path.join(cdir, "history.csv"))
            model = cell.model
            if isinstance(model, trainer.FlairModel):
                if model.gmm is not None:
                    fairgmm.write_prototypes_csv(model.gmm, os.path.join(cdir, "prototypes.csv"))
                write_embeddings(model, cell.records, os.path.join(cdir, "embeddings.csv"))
                save_tensors(model.named_tensors(), os.path.join(cdir, "checkpoint.txt"))
        summary = res.summary()
        if config_echo is not None:
            summary["config_echo"] = config_echo
        dump_json(summary, os.path.join(base, "summary.json"))
    write_tradeoff(results, os.path.join(outdir, "tradeoff.csv"))
    return write_manifest(outdir)


def load_report(path):
    with open(path) as fh:
        return json.load(fh)


def cell_means(results, metric):
    """Per-held-out-domain mean of ``metric`` over seeds, keyed by domain id."""
    out = {}
    for cell in results.cells:
        if cell.ok:
            out.setdefault(cell.heldout, []).append(cell.report.avg[metric])
    return {h: float(np.mean(v)) for h, v in sorted(out.items())}
