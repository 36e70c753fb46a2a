"""Synthetic multi-domain data with separate covariate and correlation shift.

Each domain rotates two class prototypes inside a fixed 2-D feature plane
(covariate shift) and couples the sensitive attribute to the label with a
target phi-coefficient (correlation shift). A quartet sampler draws the
(domain, label, attribute) patterns used by the invariance losses.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, CsvParseError, InfeasibleJointError

# Feature layout: the rotation plane and the coordinates carrying the attribute offset.
ROTATION_COORDS = (0, 1)
SENSITIVE_COORDS = (2, 3)

BENCHMARK_ANGLES = (0.0, 15.0, 30.0, 45.0, 60.0, 75.0)
BENCHMARK_CORRS = (0.0, 0.8, 0.5, 0.1, 0.3, 0.6)


@dataclass(frozen=True)
class DomainSpec:
    id: int
    angle: float
    corr: float

    def __post_init__(self):
        if not 0.0 <= self.angle < 360.0:
            raise ContractError(f"domain {self.id}: angle must lie in [0, 360), got {self.angle}")
        if not -1.0 <= self.corr <= 1.0:
            raise ContractError(f"domain {self.id}: |corr| must be <= 1, got {self.corr}")


@dataclass(frozen=True)
class Instance:
    x: np.ndarray
    a: int
    y: int
    domain: int


@dataclass
class Dataset:
    """Column-oriented instances plus the domains they were drawn from.

    ``split`` maps a domain id to ``"train"`` or ``"test"``; an empty mapping
    means no split has been assigned yet.
    """

    domains: list
    x: np.ndarray
    a: np.ndarray
    y: np.ndarray
    domain: np.ndarray
    split: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [d.id for d in self.domains]
        if len(set(ids)) != len(ids):
            raise ContractError(f"duplicate domain ids: {ids}")
        unknown = set(np.unique(self.domain).tolist()) - set(ids)
        if unknown:
            raise ContractError(f"instances reference unknown domains {sorted(unknown)}")

    def __len__(self):
        return len(self.y)

    @property
    def dim(self):
        return self.x.shape[1]

    def instance(self, i):
        return Instance(self.x[i], int(self.a[i]), int(self.y[i]), int(self.domain[i]))

    def domain_spec(self, domain_id):
        for d in self.domains:
            if d.id == domain_id:
                return d
        raise KeyError(domain_id)

    def subset(self, mask, domains=None):
        mask = np.asarray(mask)
        keep = set(np.unique(self.domain[mask]).tolist())
        doms = domains if domains is not None else [d for d in self.domains if d.id in keep]
        return Dataset(doms, self.x[mask], self.a[mask], self.y[mask], self.domain[mask],
                       {k: v for k, v in self.split.items() if k in {d.id for d in doms}})

    def with_heldout(self, heldout):
        """Leave-one-domain-out split: ``heldout`` is test, every other domain train."""
        ids = [d.id for d in self.domains]
        if heldout not in ids:
            raise ConfigError(f"held-out domain {heldout} not in {ids}")
        split = {i: ("test" if i == heldout else "train") for i in ids}
        return Dataset(self.domains, self.x, self.a, self.y, self.domain, split)

    def part(self, tag):
        ids = [i for i, t in self.split.items() if t == tag]
        mask = np.isin(self.domain, ids)
        return self.subset(mask, [d for d in self.domains if d.id in ids])


def rotation_matrix(angle_deg):
    t = math.radians(angle_deg)
    return np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])


def default_prototypes(d=16):
    """Two fixed class prototypes.

    Both share a common offset vector; the class difference lives mostly in
    the rotation plane with a weaker invariant part on the trailing coordinates.
    """
    if d < 6:
        raise ConfigError(f"feature dimension must be >= 6, got {d}")
    rng = np.random.default_rng(20240101)
    common = rng.uniform(-1.5, 1.5, size=d)
    common[list(SENSITIVE_COORDS)] = 0.0
    common[list(ROTATION_COORDS)] = 0.0
    delta = np.zeros(d)
    delta[4:] = 0.12 * rng.choice([-1.0, 1.0], size=d - 4)
    p0 = common.copy()
    p1 = common.copy()
    p0[list(ROTATION_COORDS)] = (1.0, 0.25)
    p1[list(ROTATION_COORDS)] = (0.25, 1.0)
    p0 -= delta
    p1 += delta
    return np.stack([p0, p1])


def attribute_counts(m, corr):
    """Number of ``a=1`` members among the ``m`` instances of each label.

    Returns ``(n_a1_given_y0, n_a1_given_y1)``. With balanced labels and a
    balanced attribute, P(a=1, y=1) = (1 + corr) / 4, so each label class gets
    m (1 +- corr) / 2 positives; the two counts sum to m so P(a=1) is exactly 1/2.
    """
    k1 = int(round(m * (1.0 + corr) / 2.0))
    return m - k1, k1


def make_domain(prototypes, spec, n, noise_sigma=0.3, seed=0, sensitive_offset=0.5):
    """Draw ``n`` instances of one domain.

    Returns ``(x, a, y)`` arrays. Labels are exactly balanced; the attribute
    is assigned by shuffling the exact per-label counts from
    :func:`attribute_counts`, so the empirical phi-coefficient matches
    ``spec.corr`` up to rounding.
    """
    prototypes = np.asarray(prototypes, dtype=np.float64)
    if prototypes.shape[0] != 2 or np.linalg.matrix_rank(prototypes) < 2:
        raise ContractError("need two linearly independent class prototypes")
    if n % 2:
        raise InfeasibleJointError(f"domain {spec.id}: n={n} is odd, labels cannot be balanced")
    m = n // 2
    rng = np.random.default_rng(seed)
    y = np.repeat([0, 1], m)
    a = np.empty(n, dtype=np.int64)
    for label, k in zip((0, 1), attribute_counts(m, spec.corr)):
        block = np.array([1] * k + [-1] * (m - k))
        a[label * m:(label + 1) * m] = rng.permutation(block)
    order = rng.permutation(n)
    y, a = y[order], a[order]

    d = prototypes.shape[1]
    rot = rotation_matrix(spec.angle)
    protos = prototypes.copy()
    plane = list(ROTATION_COORDS)
    protos[:, plane] = protos[:, plane] @ rot.T
    x = protos[y].copy()
    x[:, list(SENSITIVE_COORDS)] += sensitive_offset * a[:, None]
    x += noise_sigma * rng.standard_normal((n, d))
    return x, a, y.astype(np.int64)


def make_dataset(specs, n=2000, d=16, noise_sigma=0.3, seed=0, prototypes=None):
    if prototypes is None:
        prototypes = default_prototypes(d)
    children = np.random.SeedSequence(seed).spawn(len(specs))
    xs, as_, ys, ds = [], [], [], []
    for spec, child in zip(specs, children):
        x, a, y = make_domain(prototypes, spec, n, noise_sigma, seed=child)
        xs.append(x)
        as_.append(a)
        ys.append(y)
        ds.append(np.full(n, spec.id, dtype=np.int64))
    return Dataset(list(specs), np.concatenate(xs), np.concatenate(as_),
                   np.concatenate(ys), np.concatenate(ds))


def benchmark_specs():
    return [DomainSpec(i, angle, corr)
            for i, (angle, corr) in enumerate(zip(BENCHMARK_ANGLES, BENCHMARK_CORRS))]


def make_benchmark(seed=0, n=2000, d=16, noise_sigma=0.3):
    """Six rotated domains, 0..75 degrees, with correlations 0, .8, .5, .1, .3, .6."""
    return make_dataset(benchmark_specs(), n=n, d=d, noise_sigma=noise_sigma, seed=seed)


def phi_coefficient(a, y):
    """Pearson correlation of a binary attribute in {-1, 1} and label in {0, 1}."""
    a = (np.asarray(a) > 0).astype(float)
    y = np.asarray(y, dtype=float)
    if a.std() == 0 or y.std() == 0:
        return 0.0
    return float(np.corrcoef(a, y)[0, 1])


# --- quartets ----------------------------------------------------------------

@dataclass
class QuartetBatch:
    """``Q`` quartets as index/label arrays of shape (Q, 4) plus features (Q, 4, d).

    Column order is r1..r4: r1=(e, y, a=-1), r2=(e, y', a=1),
    r3=(e', y, a=-1), r4=(e', y', a=1).
    """

    index: np.ndarray
    x: np.ndarray
    a: np.ndarray
    y: np.ndarray
    domain: np.ndarray
    relaxed: int = 0

    def __len__(self):
        return self.index.shape[0]


class QuartetSampler:
    """Draws quartet batches from the training part of a dataset."""

    def __init__(self, ds):
        self.ds = ds
        self.domain_ids = sorted(set(np.unique(ds.domain).tolist()))
        if len(self.domain_ids) < 2:
            raise ConfigError("quartets need at least two training domains (e != e')")
        self.cells = {}
        self.label_cells = {}
        for e in self.domain_ids:
            for y in (0, 1):
                base = (ds.domain == e) & (ds.y == y)
                self.label_cells[e, y] = np.flatnonzero(base)
                for a in (-1, 1):
                    self.cells[e, y, a] = np.flatnonzero(base & (ds.a == a))
        self.relaxed_total = 0

    def _draw(self, rng, e, y, a, count):
        idx = self.cells[e, y, a]
        if len(idx):
            return idx[rng.integers(len(idx), size=count)], 0
        pool = self.label_cells[e, y]
        if not len(pool):
            raise ContractError(f"no instances with domain={e}, y={y}")
        return pool[rng.integers(len(pool), size=count)], count

    def sample(self, q, rng):
        ids = np.asarray(self.domain_ids)
        n_dom = len(ids)
        first = rng.integers(n_dom, size=q)
        second = (first + 1 + rng.integers(n_dom - 1, size=q)) % n_dom
        labels = rng.integers(2, size=q)
        slots = ((first, labels, -1), (first, 1 - labels, 1),
                 (second, labels, -1), (second, 1 - labels, 1))
        index = np.empty((q, 4), dtype=np.int64)
        relaxed = 0
        for j, (dom, lab, att) in enumerate(slots):
            key = dom * 2 + lab
            for cell in np.unique(key):
                rows = np.flatnonzero(key == cell)
                e, y = int(ids[cell // 2]), int(cell % 2)
                index[rows, j], fell_back = self._draw(rng, e, y, att, len(rows))
                relaxed += fell_back
        if relaxed:
            self.relaxed_total += relaxed
            warnings.warn(f"{relaxed} quartet slots drawn with relaxed sensitive attribute",
                          RuntimeWarning, stacklevel=2)
        ds = self.ds
        return QuartetBatch(index, ds.x[index], ds.a[index], ds.y[index], ds.domain[index], relaxed)


def sample_quartets(train, q, seed):
    """One batch of ``q`` quartets; see :class:`QuartetSampler` for repeated draws."""
    return QuartetSampler(train).sample(q, np.random.default_rng(seed))


def check_quartets(batch, strict_attribute=True):
    """Return the indices of quartets violating the structural constraints."""
    d, y, a = batch.domain, batch.y, batch.a
    ok = (d[:, 0] == d[:, 1]) & (d[:, 2] == d[:, 3]) & (d[:, 0] != d[:, 2])
    ok &= (y[:, 0] == y[:, 2]) & (y[:, 1] == y[:, 3]) & (y[:, 0] != y[:, 1])
    if strict_attribute:
        ok &= (a[:, 0] == -1) & (a[:, 2] == -1) & (a[:, 1] == 1) & (a[:, 3] == 1)
    return np.flatnonzero(~ok)


# --- CSV ---------------------------------------------------------------------

def write_csv(ds, path):
    """Write ``domain,angle,corr,a,y,x0..x{d-1}``, floats with 17 significant digits."""
    d = ds.dim
    specs = {s.id: s for s in ds.domains}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["domain", "angle", "corr", "a", "y"] + [f"x{j}" for j in range(d)])
        for i in range(len(ds)):
            s = specs[int(ds.domain[i])]
            w.writerow([s.id, f"{s.angle:.17g}", f"{s.corr:.17g}", int(ds.a[i]), int(ds.y[i])]
                       + [f"{v:.17g}" for v in ds.x[i]])


def read_csv(path):
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        try:
            header = next(rows)
        except StopIteration:
            raise CsvParseError(1, "missing header") from None
        if header[:5] != ["domain", "angle", "corr", "a", "y"]:
            raise CsvParseError(1, f"unexpected header {header[:5]}")
        d = len(header) - 5
        if header[5:] != [f"x{j}" for j in range(d)]:
            raise CsvParseError(1, "feature columns must be x0..x{d-1}")
        specs, xs, as_, ys, ds = {}, [], [], [], []
        for line_no, row in enumerate(rows, start=2):
            if len(row) != d + 5:
                raise CsvParseError(line_no, f"expected {d + 5} fields, got {len(row)}")
            try:
                dom, angle, corr = int(row[0]), float(row[1]), float(row[2])
                a, y = int(row[3]), int(row[4])
                x = [float(v) for v in row[5:]]
            except ValueError as exc:
                raise CsvParseError(line_no, str(exc)) from None
            if a not in (-1, 1):
                raise CsvParseError(line_no, f"sensitive attribute must be -1 or 1, got {a}")
            if y not in (0, 1):
                raise CsvParseError(line_no, f"label must be 0 or 1, got {y}")
            if not all(math.isfinite(v) for v in x):
                raise CsvParseError(line_no, "non-finite feature value")
            spec = specs.setdefault(dom, (angle, corr))
            if spec != (angle, corr):
                raise CsvParseError(line_no, f"domain {dom} has inconsistent angle/corr")
            xs.append(x)
            as_.append(a)
            ys.append(y)
            ds.append(dom)
    domains = [DomainSpec(k, *v) for k, v in specs.items()]
    x = np.array(xs, dtype=np.float64).reshape(len(xs), d)
    return Dataset(domains, x, np.array(as_, dtype=np.int64), np.array(ys, dtype=np.int64),
                   np.array(ds, dtype=np.int64))
