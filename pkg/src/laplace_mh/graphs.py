"""Adjacency ingestion and spatial weights construction.

The on-disk format is GAL: the first non-comment line gives the region
count, then each region contributes a header line ``id k`` followed by a
line with its k neighbor ids (omitted when k is zero).  Lines starting
with ``%`` are comments.  Ids are treated as opaque strings.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from . import spmat
from .errors import AsymmetryError, GalParseError


@dataclass
class Adjacency:
    """Symmetric neighbor structure over labeled regions."""

    ids: list[str]
    neighbors: list[list[int]]  # index-based, sorted

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def n_links(self) -> int:
        """Number of directed links (twice the edge count)."""
        return sum(len(nb) for nb in self.neighbors)

    def cards(self) -> np.ndarray:
        return np.array([len(nb) for nb in self.neighbors])

    def components(self) -> list[list[int]]:
        """Connected components, each a sorted list of region indices."""
        seen = [False] * self.n
        out = []
        for start in range(self.n):
            if seen[start]:
                continue
            comp, stack = [], [start]
            seen[start] = True
            while stack:
                i = stack.pop()
                comp.append(i)
                for j in self.neighbors[i]:
                    if not seen[j]:
                        seen[j] = True
                        stack.append(j)
            out.append(sorted(comp))
        return out

    def binary_matrix(self) -> np.ndarray:
        a = np.zeros((self.n, self.n))
        for i, nb in enumerate(self.neighbors):
            a[i, nb] = 1.0
        return a


@dataclass
class WeightsMatrix:
    """Row-standardized spatial weights with a cached spectrum."""

    ids: list[str]
    w: np.ndarray
    eigs: spmat.EigenSet

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def support(self) -> tuple[float, float]:
        """Open interval of spatial coefficients keeping I - rho*W invertible."""
        lo = 1.0 / self.eigs.min if self.eigs.min < -1e-14 else -np.inf
        return (lo, 1.0)


def _content_lines(text: str):
    """Yield (line_number, stripped_line) skipping comments and blanks."""
    for k, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("%"):
            continue
        yield k, line


def read_gal(source) -> Adjacency:
    """Parse a GAL file from a path or file-like object."""
    if hasattr(source, "read"):
        text = source.read()
    else:
        with open(source, "r", encoding="utf-8") as fh:
            text = fh.read()
    lines = list(_content_lines(text))
    if not lines:
        raise GalParseError("empty file")
    k0, header = lines[0]
    tokens = header.split()
    if len(tokens) != 1:
        raise GalParseError("header must be the region count alone", line=k0)
    try:
        n = int(tokens[0])
    except ValueError:
        raise GalParseError(f"region count is not an integer: {tokens[0]!r}",
                            line=k0) from None
    if n <= 0:
        raise GalParseError(f"region count must be positive, got {n}", line=k0)

    ids: list[str] = []
    raw_neighbors: list[list[str]] = []
    pos = 1
    while len(ids) < n:
        if pos >= len(lines):
            raise GalParseError(
                f"expected {n} regions, found {len(ids)}",
                line=lines[-1][0])
        lineno, line = lines[pos]
        parts = line.split()
        if len(parts) != 2:
            raise GalParseError(
                f"region header must be 'id count', got {line!r}", line=lineno)
        rid, count_s = parts
        try:
            count = int(count_s)
        except ValueError:
            raise GalParseError(
                f"neighbor count is not an integer: {count_s!r}",
                line=lineno) from None
        if count < 0:
            raise GalParseError("negative neighbor count", line=lineno)
        if rid in ids:
            raise GalParseError(f"duplicate region id {rid!r}", line=lineno)
        pos += 1
        names: list[str] = []
        if count > 0:
            if pos >= len(lines):
                raise GalParseError(
                    f"missing neighbor line for region {rid!r}", line=lineno)
            nb_lineno, nb_line = lines[pos]
            names = nb_line.split()
            if len(names) != count:
                raise GalParseError(
                    f"region {rid!r} announces {count} neighbors "
                    f"but lists {len(names)}", line=nb_lineno)
            if rid in names:
                raise GalParseError(
                    f"region {rid!r} lists itself as a neighbor",
                    line=nb_lineno)
            if len(set(names)) != len(names):
                raise GalParseError(
                    f"region {rid!r} lists a neighbor twice", line=nb_lineno)
            pos += 1
        ids.append(rid)
        raw_neighbors.append(names)
    if pos < len(lines):
        raise GalParseError("trailing content after last region",
                            line=lines[pos][0])

    index = {rid: i for i, rid in enumerate(ids)}
    neighbors = []
    for rid, names in zip(ids, raw_neighbors):
        try:
            neighbors.append(sorted(index[name] for name in names))
        except KeyError as exc:
            raise GalParseError(
                f"region {rid!r} references unknown id {exc.args[0]!r}") \
                from None

    for i, nb in enumerate(neighbors):
        for j in nb:
            if i not in neighbors[j]:
                raise AsymmetryError(
                    f"{ids[i]!r} lists {ids[j]!r} but not conversely")
    return Adjacency(ids=ids, neighbors=neighbors)


def write_gal(adj: Adjacency, target) -> None:
    """Write an adjacency in the same GAL dialect read_gal accepts."""
    buf = io.StringIO()
    buf.write(f"{adj.n}\n")
    for rid, nb in zip(adj.ids, adj.neighbors):
        buf.write(f"{rid} {len(nb)}\n")
        if nb:
            buf.write(" ".join(adj.ids[j] for j in nb) + "\n")
    text = buf.getvalue()
    if hasattr(target, "write"):
        target.write(text)
    else:
        with open(target, "w", encoding="utf-8") as fh:
            fh.write(text)


def row_standardize(adj: Adjacency) -> WeightsMatrix:
    """Binary contiguity scaled so each non-island row sums to one.

    Island rows stay identically zero.  The spectrum is computed once and
    cached on the result; row-standardized weights are similar to a
    symmetric matrix, so it is exactly real.
    """
    a = adj.binary_matrix()
    deg = a.sum(axis=1)
    w = np.divide(a, deg[:, None], out=np.zeros_like(a), where=deg[:, None] > 0)
    eigs = spmat.eigenvalues_dense(w)
    return WeightsMatrix(ids=list(adj.ids), w=w, eigs=eigs)


def lattice(nrows: int, ncols: int) -> Adjacency:
    """Rook-neighbor grid graph; ids are "1".."nrows*ncols" row-major."""
    n = nrows * ncols
    ids = [str(k + 1) for k in range(n)]
    neighbors: list[list[int]] = [[] for _ in range(n)]
    for r in range(nrows):
        for c in range(ncols):
            i = r * ncols + c
            if c + 1 < ncols:
                neighbors[i].append(i + 1)
                neighbors[i + 1].append(i)
            if r + 1 < nrows:
                neighbors[i].append(i + ncols)
                neighbors[i + ncols].append(i)
    return Adjacency(ids=ids, neighbors=[sorted(nb) for nb in neighbors])
