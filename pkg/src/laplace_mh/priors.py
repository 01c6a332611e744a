"""Hyperparameter priors and the transforms used to explore them.

Each prior knows its density on the natural scale, its median (the
deterministic starting point for mode searches), and an unbounded
reparameterization: log for positive quantities, a scaled logit for
interval-supported ones, identity for the real line.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.special import expit, gammaln

from .errors import OutOfRange, OutOfSupport

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class HyperPrior:
    """Prior for one scalar hyperparameter."""

    name: str
    kind: str          # gamma | lognormal | uniform | normal
    params: tuple

    def __post_init__(self):
        if self.kind not in ("gamma", "lognormal", "uniform", "normal"):
            raise OutOfRange(f"unknown prior kind {self.kind!r}")
        p = tuple(float(v) for v in self.params)
        if self.kind == "gamma":
            if len(p) != 2 or p[0] <= 0 or p[1] <= 0:
                raise OutOfRange("gamma prior needs positive shape and rate")
        elif self.kind == "lognormal":
            if len(p) != 2 or p[1] <= 0:
                raise OutOfRange(
                    "lognormal prior needs a mean and a positive precision")
        elif self.kind == "uniform":
            if len(p) != 2 or p[0] >= p[1]:
                raise OutOfRange("uniform prior needs bounds a < b")
        elif self.kind == "normal":
            if len(p) != 2 or p[1] <= 0:
                raise OutOfRange(
                    "normal prior needs a mean and a positive precision")
        object.__setattr__(self, "params", p)

    # -- support ------------------------------------------------------------

    @property
    def support(self) -> tuple[float, float]:
        if self.kind in ("gamma", "lognormal"):
            return (0.0, math.inf)
        if self.kind == "uniform":
            return self.params
        return (-math.inf, math.inf)

    def in_support(self, x: float) -> bool:
        lo, hi = self.support
        return lo < x < hi

    # -- density ------------------------------------------------------------

    def log_pdf(self, x: float) -> float:
        if not self.in_support(x):
            return -math.inf
        if self.kind == "gamma":
            shape, rate = self.params
            return (shape * math.log(rate) - gammaln(shape)
                    + (shape - 1.0) * math.log(x) - rate * x)
        if self.kind == "lognormal":
            mean, prec = self.params
            r = math.log(x) - mean
            return 0.5 * (math.log(prec) - _LOG_2PI) \
                - 0.5 * prec * r * r - math.log(x)
        if self.kind == "uniform":
            a, b = self.params
            return -math.log(b - a)
        mean, prec = self.params
        r = x - mean
        return 0.5 * (math.log(prec) - _LOG_2PI) - 0.5 * prec * r * r

    def median(self) -> float:
        if self.kind == "gamma":
            shape, rate = self.params
            return float(stats.gamma.ppf(0.5, shape, scale=1.0 / rate))
        if self.kind == "lognormal":
            return math.exp(self.params[0])
        if self.kind == "uniform":
            a, b = self.params
            return 0.5 * (a + b)
        return self.params[0]

    # -- unbounded reparameterization ---------------------------------------

    def to_z(self, x: float) -> float:
        lo, hi = self.support
        if not self.in_support(x):
            raise OutOfSupport(
                f"{self.name}: value {x} outside support ({lo}, {hi})")
        if self.kind in ("gamma", "lognormal"):
            return math.log(x)
        if self.kind == "uniform":
            u = (x - lo) / (hi - lo)
            return math.log(u) - math.log1p(-u)
        return x

    def from_z(self, z: float) -> float:
        lo, hi = self.support
        if self.kind in ("gamma", "lognormal"):
            return math.exp(z)
        if self.kind == "uniform":
            return lo + (hi - lo) * float(expit(z))
        return z

    def log_jacobian(self, z: float) -> float:
        """log |dx/dz| at z."""
        if self.kind in ("gamma", "lognormal"):
            return z
        if self.kind == "uniform":
            lo, hi = self.support
            s = float(expit(z))
            s = min(max(s, 1e-300), 1.0 - 1e-16)
            return math.log(hi - lo) + math.log(s) + math.log1p(-s)
        return 0.0


def default_precision_prior(name: str = "precision") -> HyperPrior:
    """Weak gamma prior on a precision: shape 1, rate 5e-5."""
    return HyperPrior(name=name, kind="gamma", params=(1.0, 5e-5))
