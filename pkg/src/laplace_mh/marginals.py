"""Posterior marginals on grids, and the operations that combine them.

A MarginalGrid is the currency every stage trades in: ordered support
points with density values, normalized so the trapezoid integral is one.
Model averaging is a weighted pointwise mixture on a common refinement;
summaries come from trapezoid moments and an interpolated CDF.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyList,
    OutOfRange,
    Unnormalized,
    ZeroScale,
)

MIN_POINTS = 33
MIX_POINTS = 150
_NORM_TOL = 1e-6


_trapezoid = getattr(np, "trapezoid", None) or np.trapz


def _trapz(y: np.ndarray, x: np.ndarray) -> float:
    return float(_trapezoid(y, x))


@dataclass(frozen=True)
class MarginalGrid:
    """Ordered (value, density) support of a scalar posterior marginal."""

    name: str
    values: np.ndarray
    densities: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        d = np.asarray(self.densities, dtype=np.float64)
        if v.shape != d.shape or v.ndim != 1:
            raise DimensionMismatch("values and densities must match in shape")
        if v.size < MIN_POINTS:
            raise DimensionMismatch(
                f"need at least {MIN_POINTS} grid points, got {v.size}")
        if not np.all(np.isfinite(v)) or not np.all(np.isfinite(d)):
            raise DimensionMismatch("grid contains non-finite entries")
        if np.any(np.diff(v) <= 0):
            raise DimensionMismatch("values must be strictly increasing")
        if np.any(d < 0):
            raise DimensionMismatch("densities must be nonnegative")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "densities", d)

    @classmethod
    def create(cls, name: str, values, densities) -> "MarginalGrid":
        """Build and normalize in one step."""
        grid = cls(name, values, densities)
        return grid.normalized()

    @property
    def integral(self) -> float:
        return _trapz(self.densities, self.values)

    def normalized(self) -> "MarginalGrid":
        z = self.integral
        if z <= 0.0 or not np.isfinite(z):
            raise Unnormalized(f"grid mass {z} cannot be normalized")
        return MarginalGrid(self.name, self.values, self.densities / z)

    def density_at(self, x: np.ndarray) -> np.ndarray:
        """Linear interpolation, zero outside the support."""
        return np.interp(np.asarray(x, dtype=np.float64),
                         self.values, self.densities, left=0.0, right=0.0)

    # -- serialization -------------------------------------------------------

    def to_json_dict(self) -> dict:
        return {"name": self.name,
                "values": self.values.tolist(),
                "densities": self.densities.tolist()}

    def dump(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh)
            fh.write("\n")

    @classmethod
    def from_json_dict(cls, data: dict) -> "MarginalGrid":
        return cls(data["name"], np.asarray(data["values"]),
                   np.asarray(data["densities"]))

    @classmethod
    def load(cls, path) -> "MarginalGrid":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


def _check_normalized(grid: MarginalGrid) -> None:
    if abs(grid.integral - 1.0) > _NORM_TOL:
        raise Unnormalized(
            f"grid {grid.name!r} integrates to {grid.integral:.8f}")


def mix_marginals(grids: list[MarginalGrid], weights=None,
                  name: str | None = None) -> MarginalGrid:
    """Weighted pointwise mixture of marginals on a common grid.

    The common support spans the union of inputs.  Input knots are kept
    when there are few enough (so mixing identical grids is exact); beyond
    that the mixture lives on a uniform 150-point grid.  Inputs are linearly
    interpolated, zero outside their own support, then renormalized.
    """
    if not grids:
        raise EmptyList("no marginals to mix")
    if weights is None:
        w = np.full(len(grids), 1.0 / len(grids))
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (len(grids),):
            raise DimensionMismatch("one weight per grid required")
        if np.any(w < 0) or w.sum() <= 0:
            raise OutOfRange("weights must be nonnegative with positive sum")
        w = w / w.sum()
    knots = np.unique(np.concatenate([g.values for g in grids]))
    if knots.size > MIX_POINTS:
        knots = np.linspace(knots[0], knots[-1], MIX_POINTS)
    dens = np.zeros_like(knots)
    for wk, g in zip(w, grids):
        dens += wk * g.density_at(knots)
    return MarginalGrid.create(name or grids[0].name, knots, dens)


def summarize(grid: MarginalGrid) -> dict:
    """Mean, sd, and the 2.5/50/97.5 percent quantiles."""
    _check_normalized(grid)
    v, d = grid.values, grid.densities
    mean = _trapz(v * d, v)
    var = max(_trapz((v - mean) ** 2 * d, v), 0.0)
    steps = np.diff(v)
    seg = 0.5 * (d[1:] + d[:-1]) * steps
    cdf = np.concatenate([[0.0], np.cumsum(seg)])
    cdf /= cdf[-1]

    def quantile(q: float) -> float:
        i = int(np.searchsorted(cdf, q, side="left"))
        if i <= 0:
            return float(v[0])
        if i >= v.size:
            return float(v[-1])
        c0, c1 = cdf[i - 1], cdf[i]
        if c1 == c0:
            return float(v[i])
        t = (q - c0) / (c1 - c0)
        return float(v[i - 1] + t * (v[i] - v[i - 1]))

    return {"mean": mean, "sd": float(np.sqrt(var)),
            "q025": quantile(0.025), "q50": quantile(0.5),
            "q975": quantile(0.975)}


def transform_grid(grid: MarginalGrid, a: float, b: float,
                   name: str | None = None) -> MarginalGrid:
    """Marginal of a*X + b given the marginal of X."""
    if a == 0.0:
        raise ZeroScale("affine transform needs a nonzero scale")
    values = a * grid.values + b
    densities = grid.densities / abs(a)
    if a < 0:
        values = values[::-1]
        densities = densities[::-1]
    return MarginalGrid.create(name or grid.name, values, densities)


def reciprocal_grid(grid: MarginalGrid,
                    name: str | None = None) -> MarginalGrid:
    """Marginal of 1/X given the marginal of a strictly positive X."""
    if grid.values[0] <= 0.0:
        raise OutOfRange("reciprocal transform needs positive support")
    values = (1.0 / grid.values)[::-1]
    densities = (grid.densities * grid.values ** 2)[::-1]
    return MarginalGrid.create(name or grid.name, values, densities)
