"""Per-group Gaussian mixtures over content factors with a fairness-modified EM.

Each sensitive group ``a in {-1, 1}`` gets its own K-component diagonal
mixture. Prototype indices are aligned across groups (shared initial
centres) so that component k of one group is compared with component k of
the other. The prior update divides by ``N + lam2`` for the group whose
prior is currently the larger one and by ``N - lam2`` otherwise, which pulls
the two groups' priors together; priors are not renormalised afterwards.

Responsibility matrices are laid out as ``(n_points, K)``: row i holds the
posterior over prototypes for content vector i.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DegenerateMixtureError

GROUPS = (-1, 1)
VAR_FLOOR = 1e-4
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class GroupMixture:
    means: np.ndarray      # (K, c)
    variances: np.ndarray  # (K, c), diagonal covariances
    weights: np.ndarray    # (K,)

    @property
    def k(self):
        return self.weights.shape[0]

    def copy(self):
        return GroupMixture(self.means.copy(), self.variances.copy(), self.weights.copy())


@dataclass
class FairGmmParams:
    groups: dict
    n_iter: int = 0
    converged: bool = False
    # which denominator each (group, k) used in the final prior update: +1 -> N+lam2
    branch: dict = field(default_factory=dict)

    def __getitem__(self, a):
        return self.groups[a]

    @property
    def k(self):
        return self.groups[1].k

    def copy(self):
        return FairGmmParams({a: m.copy() for a, m in self.groups.items()}, self.n_iter,
                             self.converged, {a: b.copy() for a, b in self.branch.items()})

    def weight_sums(self):
        return {a: float(self.groups[a].weights.sum()) for a in GROUPS}


def log_gaussian(contents, means, variances):
    """log N(c_i | mu_k, diag(var_k)) for every point/component, shape (n, K)."""
    c = np.atleast_2d(contents)
    prec = 1.0 / variances
    const = (means * means * prec).sum(1) + np.log(variances).sum(1) + c.shape[1] * LOG_2PI
    quad = (c * c) @ prec.T - 2.0 * (c @ (means * prec).T)
    return -0.5 * (quad + const)


def _weighted_log_density(contents, mix):
    if not np.any(mix.weights > 0):
        raise DegenerateMixtureError("all mixture weights are zero")
    with np.errstate(divide="ignore"):
        logw = np.log(mix.weights)
    return log_gaussian(contents, mix.means, mix.variances) + logw


def _logsumexp_rows(m):
    top = m.max(axis=1, keepdims=True)
    return top[:, 0] + np.log(np.exp(m - top).sum(axis=1))


def gmm_loglik_loss(contents, mix):
    """Negative log-likelihood of the mixture plus the sum of its priors."""
    contents = np.atleast_2d(contents)
    if contents.shape[0] < 1:
        raise ContractError("need at least one content vector")
    return float(-_logsumexp_rows(_weighted_log_density(contents, mix)).sum() + mix.weights.sum())


def posterior(contents, mix):
    """Responsibilities, shape (n, K); each row sums to one."""
    logp = _weighted_log_density(np.atleast_2d(contents), mix)
    logp -= _logsumexp_rows(logp)[:, None]
    return np.exp(logp)


def reconstruct(contents, mix):
    """Posterior-weighted prototype mean for every point and the summed Euclidean error."""
    contents = np.atleast_2d(contents)
    fair = posterior(contents, mix) @ mix.means
    rec = float(np.sqrt(((contents - fair) ** 2).sum(1)).sum())
    return fair, rec


def fair_loss_exact(contents_by_group, params):
    """sum_k |mean_i gamma_k(c_i^{a=1}) - mean_i gamma_k(c_i^{a=-1})|."""
    means = {}
    for a in GROUPS:
        c = np.atleast_2d(contents_by_group[a])
        if c.shape[0] == 0:
            raise ContractError(f"group a={a} is empty")
        means[a] = posterior(c, params[a]).mean(0)
    return float(np.abs(means[1] - means[-1]).sum())


def fair_loss_approx(params):
    """sum_k |pi_k^{a=-1} - pi_k^{a=1}|, the prior-based surrogate of the exact loss."""
    return float(np.abs(params[-1].weights - params[1].weights).sum())


# --- initialisation ------------------------------------------------------------

def kmeans_pp_centres(points, k, rng):
    """k-means++ seeding (D^2 sampling)."""
    n = points.shape[0]
    centres = [points[rng.integers(n)]]
    d2 = ((points - centres[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centres.append(points[idx])
        d2 = np.minimum(d2, ((points - points[idx]) ** 2).sum(1))
    return np.array(centres)


def init_params(contents_by_group, k, seed):
    """Shared k-means++ centres from the pooled contents, pooled variance, uniform priors."""
    pooled = np.concatenate([np.atleast_2d(contents_by_group[a]) for a in GROUPS])
    rng = np.random.default_rng(seed)
    centres = kmeans_pp_centres(pooled, k, rng)
    var = np.maximum(pooled.var(0), VAR_FLOOR)
    groups = {a: GroupMixture(centres.copy(), np.tile(var, (k, 1)), np.full(k, 1.0 / k))
              for a in GROUPS}
    return FairGmmParams(groups)


# --- EM ----------------------------------------------------------------------------

def _e_step(c, c2, mix):
    """Responsibilities without the input checks of :func:`posterior`."""
    prec = 1.0 / mix.variances
    mp = mix.means * prec
    const = (mix.means * mp).sum(1) + np.log(mix.variances).sum(1) + c.shape[1] * LOG_2PI
    with np.errstate(divide="ignore"):
        logp = (c @ mp.T) - 0.5 * (c2 @ prec.T) + (np.log(mix.weights) - 0.5 * const)
    logp -= logp.max(axis=1, keepdims=True)
    e = np.exp(logp)
    return e / e.sum(axis=1, keepdims=True)


def _m_step(c, c2, gamma, mix):
    """Mean and diagonal-variance updates; ``c2`` is ``c * c``."""
    nk = gamma.sum(0)
    live = nk > 1e-12
    if live.all():
        inv = 1.0 / nk[:, None]
        means = (gamma.T @ c) * inv
        variances = np.maximum((gamma.T @ c2) * inv - means * means, VAR_FLOOR)
        return means, variances, nk
    means = mix.means.copy()
    variances = mix.variances.copy()
    if live.any():
        g = gamma[:, live]
        inv = 1.0 / nk[live, None]
        means[live] = (g.T @ c) * inv
        variances[live] = np.maximum((g.T @ c2) * inv - means[live] ** 2, VAR_FLOOR)
    return means, variances, nk


def prior_update(resp_sums, n, lam2, weights, other_weights):
    """Prior update for one group given the other group's current priors.

    Returns ``(new_weights, branch)`` where ``branch[k]`` is +1 when the
    ``N + lam2`` denominator applied and -1 for ``N - lam2``.
    """
    branch = np.where(weights >= other_weights, 1, -1)
    return resp_sums / (n + branch * lam2), branch


def fair_em(contents_by_group, k, lam2=0.0, tol=1e-5, max_iter=30, seed=0, init=None):
    """Run the two groups' EM in lockstep until the priors stop moving.

    ``init`` warm-starts from existing parameters (prototype alignment is
    preserved); otherwise :func:`init_params` seeds both groups.
    """
    data = {}
    for a in GROUPS:
        c = np.asarray(contents_by_group.get(a, np.empty((0, 0))), dtype=np.float64)
        if c.ndim != 2 or c.shape[0] == 0:
            raise ContractError(f"group a={a} is empty")
        if c.shape[0] <= k:
            raise ContractError(f"group a={a} has {c.shape[0]} points, need more than K={k}")
        if lam2 >= c.shape[0]:
            raise ContractError(f"lam2={lam2} must be below N^a={c.shape[0]} (negative denominator)")
        data[a] = c
    if lam2 < 0:
        raise ContractError(f"lam2 must be non-negative, got {lam2}")
    if init is not None:
        for a in GROUPS:
            if not np.any(init[a].weights > 0):
                raise DegenerateMixtureError(f"group a={a}: all mixture weights are zero")

    squares = {a: data[a] * data[a] for a in GROUPS}
    params = init.copy() if init is not None else init_params(data, k, seed)
    params.converged = False
    branch = {}
    it = 0
    for it in range(1, max_iter + 1):
        updates = {}
        for a in GROUPS:
            mix = params[a]
            gamma = _e_step(data[a], squares[a], mix)
            updates[a] = _m_step(data[a], squares[a], gamma, mix)
        change = 0.0
        new_weights = {}
        for a in GROUPS:
            nk = updates[a][2]
            new_weights[a], branch[a] = prior_update(
                nk, data[a].shape[0], lam2, params[a].weights, params[-a].weights)
            change = max(change, float(np.abs(new_weights[a] - params[a].weights).max()))
        for a in GROUPS:
            means, variances, _ = updates[a]
            params.groups[a] = GroupMixture(means, variances, new_weights[a])
        if change < tol:
            params.converged = True
            break
    params.n_iter = it
    params.branch = branch
    return params


# --- dumps -------------------------------------------------------------------------

def write_prototypes_csv(params, path):
    """``group,k,pi,mu0..mu{c-1},sigma0..sigma{c-1}``; sigma holds the diagonal variances."""
    c = params[1].means.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "k", "pi"] + [f"mu{j}" for j in range(c)]
                   + [f"sigma{j}" for j in range(c)])
        for a in GROUPS:
            mix = params[a]
            for j in range(mix.k):
                w.writerow([a, j, repr(float(mix.weights[j]))]
                           + [repr(float(v)) for v in mix.means[j]]
                           + [repr(float(v)) for v in mix.variances[j]])
