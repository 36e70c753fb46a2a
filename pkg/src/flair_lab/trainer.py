"""Primal-dual training of the full predictor (content encoder, fair mixtures, classifier).

Each step: draw a quartet batch, refit the per-group mixtures on the batch's
content codes, take one Adam step on ``R_cls + lam1 * R_inv + lam2 * R_fair``
and then a projected ascent step on both multipliers.

Mixture parameters are constants inside the primal step. Gradients reach
the content encoder through the posteriors ``gamma(c)`` and the prototype
reconstruction ``c_tilde(c)``. The fairness term used in the primal step
is the prior update re-evaluated at the current codes,
``pi_k^a(c) = sum_i gamma_ik(c) / (N^a +- lam2)``, with the denominator
branch taken from the last EM iteration; its value tracks the EM priors
and it is differentiable in the codes.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import fairgmm
from . import numkernel as nk
from .datagen import QuartetSampler
from .disentangle import MLP, EncoderParams, transform_from_codes
from .errors import ConfigError, ContractError, TrainingAborted

log = logging.getLogger(__name__)

VARIANTS = ("full", "no_g", "no_T", "no_Rfair", "fixed_duals")

# quartet columns per sensitive group and the same-label, cross-domain pairs inside it
GROUP_COLUMNS = {-1: (0, 2), 1: (1, 3)}
CLS_PAIRS = {-1: ((0, 2), (2, 0)), 1: ((1, 3), (3, 1))}

HISTORY_COLUMNS = ("step", "R_cls", "R_inv", "Rfair_hat", "Rfair_exact",
                   "lambda1", "lambda2", "sum_pi_a1", "sum_pi_am1")


@dataclass
class TrainerConfig:
    lr: float = 1e-3
    dual_lr_inv: float = 0.01
    dual_lr_fair: float = 0.01
    margin_inv: float = 0.05
    margin_fair: float = 0.05
    lambda1_init: float = 1.0
    lambda2_init: float = 0.5
    n_prototypes: int = 3
    quartets: int = 64
    max_steps: int = 2000
    seed: int = 0
    no_g: bool = False
    no_T: bool = False
    no_Rfair: bool = False
    fixed_duals: bool = False
    content_dim: int = 8
    style_dim: int = 4
    hidden: int = 32
    classifier_hidden: int = 16
    em_max_iter: int = 30
    em_tol: float = 1e-5
    warm_start: bool = True
    plateau_window: int = 20
    plateau_tol: float = 1e-4
    monitor_quartets: int = 64
    gmm_loss_grad: bool = False
    # "source": d[R_i, T(R_i, R_j)]; "reference": d[R_j, T(R_i, R_j)]
    cls_target: str = "source"

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("lr", "dual_lr_inv", "dual_lr_fair"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        for name in ("margin_inv", "margin_fair", "lambda1_init", "lambda2_init"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.n_prototypes < 2:
            raise ConfigError("n_prototypes (K) must be >= 2")
        if self.cls_target not in ("source", "reference"):
            raise ConfigError(f"cls_target must be 'source' or 'reference', got {self.cls_target!r}")
        if self.quartets < 1 or self.max_steps < 0:
            raise ConfigError("quartets must be >= 1 and max_steps >= 0")

    @property
    def variant(self):
        on = [f for f in ("no_g", "no_T", "no_Rfair", "fixed_duals") if getattr(self, f)]
        return "+".join(on) if on else "full"

    def with_variant(self, variant):
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; choose from {VARIANTS}")
        flags = {f: False for f in ("no_g", "no_T", "no_Rfair", "fixed_duals")}
        if variant != "full":
            flags[variant] = True
        return self.replace(**flags)

    def replace(self, **changes):
        d = asdict(self)
        d.update(changes)
        return type(self)(**d)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class DualState:
    lambda1: float
    lambda2: float

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ContractError("Lagrange multipliers must be non-negative")


def dual_update(lam, lr, value, margin):
    """Projected ascent: max(lam + lr * (value - margin), 0)."""
    return max(lam + lr * (value - margin), 0.0)


@dataclass
class FlairModel:
    enc: EncoderParams
    classifier: MLP
    gmm: fairgmm.FairGmmParams | None
    cfg: TrainerConfig

    @classmethod
    def init(cls, d, cfg, rng):
        enc = EncoderParams.init(d, cfg.content_dim, cfg.style_dim, cfg.hidden, rng,
                                 with_transform=not cfg.no_T)
        classifier = MLP((cfg.content_dim, cfg.classifier_hidden, 2), rng, "classifier")
        return cls(enc, classifier, None, cfg)

    @property
    def uses_g(self):
        return not self.cfg.no_g

    def params(self):
        return self.enc.params() + self.classifier.params()

    def named_tensors(self):
        out = [(p.name, p.value) for p in self.params()]
        if self.gmm is not None:
            for a in fairgmm.GROUPS:
                mix = self.gmm[a]
                tag = "pos" if a == 1 else "neg"
                out += [(f"gmm.{tag}.means", mix.means), (f"gmm.{tag}.variances", mix.variances),
                        (f"gmm.{tag}.weights", mix.weights)]
        return out

    def load_tensors(self, tensors):
        for p in self.params():
            if p.name not in tensors or tensors[p.name].shape != p.value.shape:
                raise ContractError(f"checkpoint lacks a matching tensor for {p.name}")
            p.value = tensors[p.name].copy()
        if "gmm.pos.means" in tensors:
            groups = {}
            for a, tag in ((1, "pos"), (-1, "neg")):
                groups[a] = fairgmm.GroupMixture(tensors[f"gmm.{tag}.means"].copy(),
                                                 tensors[f"gmm.{tag}.variances"].copy(),
                                                 tensors[f"gmm.{tag}.weights"].copy())
            self.gmm = fairgmm.FairGmmParams(groups)

    def snapshot(self):
        return [(n, v.copy()) for n, v in self.named_tensors()]


# --- losses --------------------------------------------------------------------------

def _gmm_terms(c, mix):
    """Graph pieces for one group's codes ``c`` with detached mixture ``mix``.

    Returns (per-point negative log-likelihood, responsibilities, reconstruction).
    """
    prec = 1.0 / mix.variances
    const_k = ((mix.means ** 2) * prec).sum(1) + np.log(mix.variances).sum(1) \
        + mix.means.shape[1] * fairgmm.LOG_2PI
    with np.errstate(divide="ignore"):
        logw = np.log(mix.weights)
    quad = nk.sub(nk.matmul(nk.square(c), prec.T), nk.scale(nk.matmul(c, (mix.means * prec).T), 2.0))
    logp = nk.add(nk.scale(nk.add(quad, const_k), -0.5), logw)
    nll = nk.neg(nk.logsumexp(logp, axis=1))
    gamma = nk.softmax(logp, axis=1)
    fair = nk.matmul(gamma, mix.means)
    return nll, gamma, fair


def loss_components(batch, model, duals):
    """Build every loss term of one training step as graph nodes.

    Keys: ``R_inv``, ``R_cls`` and its parts ``cls_dist``, ``cls_gmm``,
    ``cls_rec``, ``cls_ce`` (each summed over the two groups), ``Rfair``
    (the differentiable prior surrogate) and ``total``. Terms a variant
    switches off are absent.
    """
    cfg = model.cfg
    enc = model.enc
    x = batch.x
    codes = [enc.content(x[:, j]) for j in range(4)]
    out = {}
    has_t = enc.has_transform
    if has_t:
        terms = []
        for src, ref in ((0, 1), (2, 3)):
            rec = transform_from_codes(codes[src], x[:, ref], enc)
            terms.append(nk.l1_distance(nk.const(x[:, src]), rec))
        out["R_inv"] = nk.mean(nk.add(terms[0], terms[1]))

    parts = {"cls_dist": [], "cls_gmm": [], "cls_rec": [], "cls_ce": []}
    surrogate = {}
    for a in fairgmm.GROUPS:
        cols = GROUP_COLUMNS[a]
        c = nk.concat([codes[j] for j in cols], axis=0)
        labels = np.concatenate([batch.y[:, j] for j in cols])
        n_a = c.shape[0]
        if has_t:
            dists = []
            for i, j in CLS_PAIRS[a]:
                out_ij = transform_from_codes(codes[i], x[:, j], enc)
                target = x[:, i] if cfg.cls_target == "source" else x[:, j]
                dists.append(nk.l1_distance(nk.const(target), out_ij))
            parts["cls_dist"].append(nk.mean(nk.concat(dists, axis=0)))
        if model.uses_g:
            mix = model.gmm[a]
            nll, gamma, fair = _gmm_terms(c, mix)
            parts["cls_gmm"].append(nk.add(nk.mean(nll), float(mix.weights.sum())))
            parts["cls_rec"].append(nk.mean(nk.euclidean(c, fair)))
            rep = fair
            branch = model.gmm.branch.get(a, np.ones(mix.k))
            lam2 = 0.0 if cfg.no_Rfair else duals.lambda2
            surrogate[a] = nk.mul(nk.sum_(gamma, axis=0), 1.0 / (n_a + branch * lam2))
        else:
            rep = c
        parts["cls_ce"].append(nk.cross_entropy(model.classifier(rep), labels))

    total_cls = None
    for name, nodes in parts.items():
        if not nodes:
            continue
        out[name] = nk.add(nodes[0], nodes[1])
        term = out[name]
        if name == "cls_gmm" and not cfg.gmm_loss_grad:
            # value only: the code likelihood is unbounded as codes collapse onto prototypes
            term = nk.const(term.value)
        total_cls = term if total_cls is None else nk.add(total_cls, term)
    out["R_cls"] = total_cls
    total = total_cls
    if has_t:
        total = nk.add(total, nk.scale(out["R_inv"], duals.lambda1))
    if model.uses_g and not cfg.no_Rfair:
        out["Rfair"] = nk.sum_(nk.abs_(nk.sub(surrogate[-1], surrogate[1])))
        total = nk.add(total, nk.scale(out["Rfair"], duals.lambda2))
    out["total"] = total
    return out


# --- training ----------------------------------------------------------------------

def group_contents(batch, model):
    return {a: model.enc.content.numpy(np.concatenate([batch.x[:, j] for j in GROUP_COLUMNS[a]]))
            for a in fairgmm.GROUPS}


@dataclass
class Diagnostics:
    step: int
    R_cls: float
    R_inv: float
    Rfair_hat: float
    Rfair_exact: float
    lambda1: float
    lambda2: float
    sum_pi_a1: float
    sum_pi_am1: float
    batch_Rfair_hat: float = float("nan")
    batch_Rfair_exact: float = float("nan")
    em_iters: int = 0
    components: dict = field(default_factory=dict)

    def row(self):
        return {k: getattr(self, k) for k in HISTORY_COLUMNS}


class Trainer:
    """Holds the model, optimiser, multipliers and RNG streams of one run."""

    def __init__(self, train_ds, cfg):
        cfg.validate()
        self.cfg = cfg
        self.sampler = QuartetSampler(train_ds)
        streams = np.random.SeedSequence([cfg.seed, 7]).spawn(4)
        self.rng_init, self.rng_batch, self.rng_em, self.rng_probe = (
            np.random.default_rng(s) for s in streams)
        self.model = FlairModel.init(train_ds.dim, cfg, self.rng_init)
        self.opt = nk.Adam(self.model.params(), lr=cfg.lr)
        lam2 = 0.0 if (cfg.no_Rfair or cfg.no_g) else cfg.lambda2_init
        lam1 = 0.0 if cfg.no_T else cfg.lambda1_init
        self.duals = DualState(lam1, lam2)
        self.step_no = 0
        self.probe = None
        self.probe_gmm = None
        if cfg.monitor_quartets and self.model.uses_g:
            self.probe = self.sampler.sample(cfg.monitor_quartets, self.rng_probe)
        self._last_good = self.model.snapshot()

    def _em(self, contents, init, rng=None):
        cfg = self.cfg
        lam2 = 0.0 if cfg.no_Rfair else self.duals.lambda2
        seed = int((rng or self.rng_em).integers(2 ** 31))
        return fairgmm.fair_em(contents, cfg.n_prototypes, lam2, cfg.em_tol, cfg.em_max_iter,
                               seed=seed, init=init if cfg.warm_start else None)

    def step(self, batch=None):
        cfg, model, duals = self.cfg, self.model, self.duals
        if batch is None:
            batch = self.sampler.sample(cfg.quartets, self.rng_batch)
        rfair_hat = rfair_exact = float("nan")
        em_iters = 0
        if model.uses_g:
            contents = group_contents(batch, model)
            model.gmm = self._em(contents, model.gmm)
            em_iters = model.gmm.n_iter
            rfair_hat = fairgmm.fair_loss_approx(model.gmm)
            rfair_exact = fairgmm.fair_loss_exact(contents, model.gmm)

        comps = loss_components(batch, model, duals)
        values = {k: float(v.value) for k, v in comps.items()}
        if not np.isfinite(values["total"]):
            raise TrainingAborted(f"non-finite loss at step {self.step_no + 1}",
                                  last_good_step=self.step_no, checkpoint=self._last_good)
        self.opt.zero_grad()
        nk.backward(comps["total"])
        try:
            self.opt.step()
        except TrainingAborted as exc:
            raise TrainingAborted(str(exc), last_good_step=self.step_no,
                                  checkpoint=self._last_good) from None
        self.step_no += 1
        self._last_good = model.snapshot()

        r_inv = values.get("R_inv", 0.0)
        if not cfg.fixed_duals:
            if model.enc.has_transform:
                duals.lambda1 = dual_update(duals.lambda1, cfg.dual_lr_inv, r_inv, cfg.margin_inv)
            if model.uses_g and not cfg.no_Rfair:
                duals.lambda2 = dual_update(duals.lambda2, cfg.dual_lr_fair, rfair_hat,
                                            cfg.margin_fair)

        mon_hat, mon_exact = rfair_hat, rfair_exact
        sums = model.gmm.weight_sums() if model.gmm is not None else {1: float("nan"), -1: float("nan")}
        if self.probe is not None:
            mon_hat, mon_exact = self.monitor()
        return Diagnostics(self.step_no, values["R_cls"], r_inv, mon_hat, mon_exact,
                           duals.lambda1, duals.lambda2, sums[1], sums[-1],
                           rfair_hat, rfair_exact, em_iters, values)

    def monitor(self):
        """Fairness losses on the fixed probe batch, refitting its own mixtures."""
        contents = group_contents(self.probe, self.model)
        init = self.probe_gmm if self.probe_gmm is not None else self.model.gmm
        # own seed stream, so monitoring never changes the training trajectory
        self.probe_gmm = self._em(contents, init, self.rng_probe)
        return (fairgmm.fair_loss_approx(self.probe_gmm),
                fairgmm.fair_loss_exact(contents, self.probe_gmm))

    def finalize(self, train_ds):
        """Refit the mixtures on the full training set's codes for prediction."""
        if not self.model.uses_g:
            return
        codes = self.model.enc.content.numpy(train_ds.x)
        contents = {a: codes[train_ds.a == a] for a in fairgmm.GROUPS}
        self.model.gmm = self._em(contents, self.model.gmm)


def plateaued(history, window, tol):
    if len(history) <= window:
        return False
    old, new = history[-window - 1], history[-1]
    for key in ("R_cls", "R_inv", "Rfair_hat"):
        a, b = getattr(old, key), getattr(new, key)
        if np.isnan(a) and np.isnan(b):
            continue
        if abs(b - a) > tol * max(abs(a), 1e-12):
            return False
    return True


@dataclass
class TrainResult:
    model: FlairModel
    duals: DualState
    history: list
    steps: int
    converged: bool
    relaxed_quartets: int
    # (R_fair_hat, R_fair_exact) on the probe batch before the first update
    initial_fairness: tuple | None = None


def train(dataset, cfg):
    """Train on the ``train`` part of ``dataset`` (the whole set if unsplit)."""
    train_ds = dataset.part("train") if dataset.split else dataset
    if len(set(np.unique(train_ds.domain).tolist())) < 2:
        raise ConfigError("training needs at least two domains")
    trainer = Trainer(train_ds, cfg)
    initial = trainer.monitor() if trainer.probe is not None else None
    history = []
    converged = False
    for _ in range(cfg.max_steps):
        history.append(trainer.step())
        if plateaued(history, cfg.plateau_window, cfg.plateau_tol):
            converged = True
            break
    trainer.finalize(train_ds)
    log.debug("trained %s for %d steps", cfg.variant, trainer.step_no)
    return TrainResult(trainer.model, trainer.duals, history, trainer.step_no, converged,
                       trainer.sampler.relaxed_total, initial)


# --- prediction ----------------------------------------------------------------------

def _sigmoid_margin(logits):
    z = logits[:, 1] - logits[:, 0]
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def representations(model, x, a):
    """Content codes and the representation fed to the classifier."""
    codes = model.enc.content.numpy(x)
    if not model.uses_g:
        return codes, codes
    a = np.asarray(a)
    rep = np.empty_like(codes)
    for g in fairgmm.GROUPS:
        m = a == g
        if np.any(m):
            rep[m] = fairgmm.posterior(codes[m], model.gmm[g]) @ model.gmm[g].means
    return codes, rep


def predict(model, x, a):
    """Return ``(yhat, score)`` with ``score = sigmoid(logit_1 - logit_0)``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    a = np.broadcast_to(np.asarray(a), (x.shape[0],))
    _, rep = representations(model, x, a)
    score = _sigmoid_margin(model.classifier.numpy(rep))
    return (score > 0.5).astype(np.int64), score


# --- ERM baseline -----------------------------------------------------------------------

@dataclass
class ErmModel:
    net: MLP

    def named_tensors(self):
        return [(p.name, p.value) for p in self.net.params()]


def train_erm(dataset, cfg):
    """Plain cross-entropy MLP on raw features; ignores every ablation flag."""
    train_ds = dataset.part("train") if dataset.split else dataset
    streams = np.random.SeedSequence([cfg.seed, 11]).spawn(2)
    rng_init, rng_batch = (np.random.default_rng(s) for s in streams)
    net = MLP((train_ds.dim, cfg.hidden, 2), rng_init, "erm")
    opt = nk.Adam(net.params(), lr=cfg.lr)
    n = len(train_ds)
    batch = min(4 * cfg.quartets, n)
    history = []
    for step in range(cfg.max_steps):
        idx = rng_batch.integers(n, size=batch)
        loss = nk.cross_entropy(net(train_ds.x[idx]), train_ds.y[idx])
        opt.zero_grad()
        nk.backward(loss)
        opt.step()
        history.append(float(loss.value))
    return ErmModel(net), history


def predict_erm(model, x, a=None):
    score = _sigmoid_margin(model.net.numpy(np.atleast_2d(x)))
    return (score > 0.5).astype(np.int64), score
