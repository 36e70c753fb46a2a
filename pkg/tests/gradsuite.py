"""Finite-difference check of every training loss term on randomly drawn configurations."""

import numpy as np

from flair_lab import datagen, trainer
from flair_lab import numkernel as nk
from flair_lab.trainer import DualState, TrainerConfig

from conftest import numeric_grad, rel_error

TERMS = ("R_inv", "cls_dist", "cls_gmm", "cls_rec", "cls_ce", "Rfair", "total")


def random_case(seed):
    """Small model, quartet batch and fitted mixtures drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    ds = datagen.make_benchmark(seed=seed, n=40, d=6).with_heldout(int(rng.integers(6)))
    cfg = TrainerConfig(
        content_dim=int(rng.integers(2, 4)), style_dim=2, hidden=4, classifier_hidden=3,
        quartets=int(rng.integers(3, 6)), n_prototypes=int(rng.integers(2, 4)),
        cls_target=str(rng.choice(["source", "reference"])), seed=seed, monitor_quartets=0,
        em_max_iter=int(rng.integers(1, 10)), gmm_loss_grad=bool(rng.integers(2)))
    t = trainer.Trainer(ds.part("train"), cfg)
    batch = t.sampler.sample(cfg.quartets, t.rng_batch)
    gmm = t._em(trainer.group_contents(batch, t.model), None)
    # keep prototypes off the codes and variances away from the floor: the distance
    # |c - c_tilde| has a kink at zero and a floored variance makes h=1e-5 too coarse
    for a in (-1, 1):
        mix = gmm[a]
        mix.means = mix.means + rng.normal(scale=0.2, size=mix.means.shape)
        mix.variances = np.maximum(mix.variances, 0.05)
    t.model.gmm = gmm
    duals = DualState(float(rng.uniform(0, 2)), float(rng.uniform(0, 2)))
    return t.model, batch, duals


def check_case(seed, h=1e-5):
    """Worst relative error per loss term over every parameter block."""
    model, batch, duals = random_case(seed)
    params = model.params()
    analytic = {}
    for term in TERMS:
        for p in params:
            p.grad = None
        nk.backward(trainer.loss_components(batch, model, duals)[term])
        analytic[term] = [np.zeros_like(p.value) if p.grad is None else p.grad.copy() for p in params]
    numeric = {term: [np.zeros_like(p.value) for p in params] for term in TERMS}
    for bi, p in enumerate(params):
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = trainer.loss_components(batch, model, duals)
            flat[i] = old - h
            down = trainer.loss_components(batch, model, duals)
            flat[i] = old
            for term in TERMS:
                numeric[term][bi].reshape(-1)[i] = (float(up[term].value) - float(down[term].value)) / (2 * h)
    if not model.cfg.gmm_loss_grad:
        # the mixture likelihood enters the optimised total as a constant
        numeric["total"] = [t - g for t, g in zip(numeric["total"], numeric["cls_gmm"])]
    worst = {}
    for term in TERMS:
        errs = [rel_error(a, n) for a, n in zip(analytic[term], numeric[term])
                if np.abs(a).max() > 0 or np.abs(n).max() > 0]
        worst[term] = max(errs) if errs else 0.0
    return worst
