"""Flat ``key = value`` experiment configuration.

Recognised keys:

    n, d, noise_sigma      data generator (instances per domain, features, noise)
    heldout                a domain id or ``all`` to rotate through every domain
    seeds                  comma-separated integers
    k                      neighbours for the consistency metric
    auc_tie_credit         give tied pairs half credit in the AUC metric
    outdir                 default output directory

Any field of :class:`~flair_lab.trainer.TrainerConfig` is accepted as well.
Blank lines and ``#`` comments are ignored.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from ..datagen import BENCHMARK_ANGLES
from ..errors import ConfigError
from ..trainer import TrainerConfig

_TRAINER_TYPES = {f.name: f.type for f in dataclasses.fields(TrainerConfig)}


@dataclass
class ExperimentConfig:
    n: int = 2000
    d: int = 16
    noise_sigma: float = 0.3
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    heldout: object = "all"
    k: int = 5
    auc_tie_credit: bool = False
    outdir: str = "runs"
    seeds: tuple = (0,)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if self.heldout != "all" and self.heldout not in self.domain_ids:
            raise ConfigError(f"held-out domain {self.heldout!r} does not exist; "
                              f"choose from {self.domain_ids} or 'all'")
        if self.n < 2 or self.n % 2:
            raise ConfigError(f"n must be a positive even count, got {self.n}")
        if self.d < 4:
            raise ConfigError(f"d must be at least 4, got {self.d}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        self.trainer.validate()

    @property
    def domain_ids(self):
        return list(range(len(BENCHMARK_ANGLES)))

    def heldout_ids(self):
        return self.domain_ids if self.heldout == "all" else [self.heldout]

    def replace(self, **changes):
        trainer_changes = {k: changes.pop(k) for k in list(changes) if k in _TRAINER_TYPES}
        cfg = dataclasses.replace(self, **changes)
        if trainer_changes:
            d = self.trainer.to_dict()
            d.update(trainer_changes)
            cfg = dataclasses.replace(cfg, trainer=TrainerConfig(**d))
        return cfg

    def echo(self):
        """Flat dict of every setting, for embedding in reports."""
        out = {"n": self.n, "d": self.d, "noise_sigma": self.noise_sigma,
               "heldout": self.heldout, "k": self.k, "auc_tie_credit": self.auc_tie_credit,
               "seeds": list(self.seeds)}
        out.update(self.trainer.to_dict())
        return out


def _parse_bool(text):
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(key, text, kind):
    try:
        if kind in (bool, "bool"):
            return _parse_bool(text)
        if kind in (int, "int"):
            return int(text)
        if kind in (float, "float"):
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


_EXPERIMENT_TYPES = {"n": int, "d": int, "noise_sigma": float, "k": int,
                     "auc_tie_credit": bool, "outdir": str}


def parse_config(text, source="<config>"):
    top, trainer = {}, {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{line_no}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in top or key in trainer:
            raise ConfigError(f"{source}:{line_no}: duplicate key {key!r}")
        if key == "heldout":
            top[key] = value if value == "all" else _coerce(key, value, int)
        elif key == "seeds":
            try:
                top[key] = tuple(int(s) for s in value.split(",") if s.strip())
            except ValueError:
                raise ConfigError(f"{source}:{line_no}: seeds must be integers") from None
        elif key in _EXPERIMENT_TYPES:
            top[key] = _coerce(key, value, _EXPERIMENT_TYPES[key])
        elif key in _TRAINER_TYPES:
            trainer[key] = _coerce(key, value, _TRAINER_TYPES[key])
        else:
            raise ConfigError(f"{source}:{line_no}: unknown key {key!r}")
    return ExperimentConfig(trainer=TrainerConfig(**trainer), **top)


def load_config(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, source=str(path))
