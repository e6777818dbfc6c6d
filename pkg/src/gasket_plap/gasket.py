"""Level-m graph approximations of the Sierpinski gasket.

Vertices carry exact integer lattice coordinates: at level ``m`` a vertex is
``q1 + (i / 2**m) (q2 - q1) + (j / 2**m) (q3 - q1)`` and ``(i, j)`` is stored.
The three contractions ``F_i(x) = (x + q_i) / 2`` are dyadic, so every vertex
of every level lands on this lattice and identity tests are exact.

Vertex ids are nested: the first three ids are the corners ``q1, q2, q3`` and
each refinement appends the new edge midpoints, cell by cell in address order.
Level-m ids are therefore a prefix of level-(m+1) ids, and restricting a
level-(m+1) function to level m is a slice.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from itertools import product
from typing import Callable, Sequence

import numpy as np

from .errors import CapacityError, DimensionError

# cell indices are int32; 3**20 overflows it
MAX_LEVEL = 19

EQUILATERAL = ((0.0, 0.0), (1.0, 0.0), (0.5, np.sqrt(3.0) / 2.0))


@dataclass(frozen=True, eq=False)
class GasketLevel:
    """Immutable level-m gasket graph.

    Attributes
    ----------
    level : int
        Refinement level m.
    vertices : ndarray, shape (n, 2)
        Plane coordinates.
    lattice : ndarray of int64, shape (n, 2)
        Exact lattice coordinates at denominator ``2**level``.
    cells : ndarray of int32, shape (3**m, 3)
        Vertex ids ``(F_w q1, F_w q2, F_w q3)`` for each address ``w`` of
        length m, in lexicographic address order.
    boundary : ndarray, shape (3,)
        Ids of ``q1, q2, q3``; always ``(0, 1, 2)``.
    weights : ndarray, shape (n,)
        Normalized self-similar measure lumped onto vertices.
    corners : tuple
        The three corner points used to build the graph.
    """

    level: int
    vertices: np.ndarray
    lattice: np.ndarray
    cells: np.ndarray
    boundary: np.ndarray
    weights: np.ndarray
    corners: tuple = field(default=EQUILATERAL)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    @cached_property
    def edges(self) -> np.ndarray:
        # every edge belongs to exactly one cell, so no deduplication needed
        c = self.cells
        e = np.concatenate([c[:, [0, 1]], c[:, [1, 2]], c[:, [2, 0]]])
        e.setflags(write=False)
        return e

    @cached_property
    def interior(self) -> np.ndarray:
        ids = np.arange(3, self.n_vertices)
        ids.setflags(write=False)
        return ids

    @cached_property
    def is_boundary(self) -> np.ndarray:
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[self.boundary] = True
        mask.setflags(write=False)
        return mask


def _validate_corners(corners) -> tuple:
    pts = np.asarray(corners, dtype=float)
    if pts.shape != (3, 2):
        raise ValueError(f"corners must be three plane points, got shape {pts.shape}")
    for i, j in ((0, 1), (1, 2), (0, 2)):
        if np.allclose(pts[i], pts[j], rtol=0.0, atol=0.0):
            raise ValueError(f"corners {i} and {j} coincide")
    return tuple(tuple(float(c) for c in row) for row in pts)


def build_level(m: int, corners: Sequence = EQUILATERAL) -> GasketLevel:
    """Build the level-m gasket graph over the triangle ``corners``.

    Raises
    ------
    CapacityError
        If ``3**m`` cells do not fit the int32 cell index.
    """
    if m < 0:
        raise ValueError(f"level must be nonnegative, got {m}")
    if m > MAX_LEVEL:
        raise CapacityError(
            f"level {m} needs 3**{m} = {3 ** m} cells, more than the int32 cell "
            f"index allows (max level {MAX_LEVEL})"
        )
    return _build_cached(int(m), _validate_corners(corners))


@lru_cache(maxsize=32)
def _build_cached(m: int, corners: tuple) -> GasketLevel:
    lattice = np.array([[0, 0], [1, 0], [0, 1]], dtype=np.int64)
    cells = np.array([[0, 1, 2]], dtype=np.int64)
    for _ in range(m):
        lattice = 2 * lattice
        a, b, c = cells[:, 0], cells[:, 1], cells[:, 2]
        m12 = (lattice[a] + lattice[b]) // 2
        m13 = (lattice[a] + lattice[c]) // 2
        m23 = (lattice[b] + lattice[c]) // 2
        n_old = lattice.shape[0]
        n_cells = cells.shape[0]
        # new ids in (cell, F_1 q2, F_1 q3, F_2 q3) order = first appearance
        # when walking subcells 1, 2, 3 of each cell in address order
        new = np.stack([m12, m13, m23], axis=1).reshape(-1, 2)
        lattice = np.concatenate([lattice, new])
        base = n_old + 3 * np.arange(n_cells)
        i12, i13, i23 = base, base + 1, base + 2
        sub1 = np.stack([a, i12, i13], axis=1)
        sub2 = np.stack([i12, b, i23], axis=1)
        sub3 = np.stack([i13, i23, c], axis=1)
        cells = np.stack([sub1, sub2, sub3], axis=1).reshape(-1, 3)

    # exact identity check on the lattice: every vertex is distinct
    if np.unique(lattice, axis=0).shape[0] != lattice.shape[0]:
        raise AssertionError("duplicate lattice points in gasket construction")

    q = np.asarray(corners, dtype=float)
    scale = float(2 ** m)
    vertices = (
        q[0]
        + np.outer(lattice[:, 0] / scale, q[1] - q[0])
        + np.outer(lattice[:, 1] / scale, q[2] - q[0])
    )
    cells = cells.astype(np.int32)
    weights = _weights(cells, lattice.shape[0], m)
    boundary = np.array([0, 1, 2], dtype=np.int64)
    for arr in (vertices, lattice, cells, weights, boundary):
        arr.setflags(write=False)
    return GasketLevel(m, vertices, lattice, cells, boundary, weights, corners)


def _weights(cells: np.ndarray, n: int, m: int) -> np.ndarray:
    incidence = np.bincount(cells.ravel(), minlength=n)
    return incidence * (3.0 ** (-m) / 3.0)


def vertex_weights(g: GasketLevel) -> np.ndarray:
    """Per-vertex mass: each cell's ``3**-m`` split equally among its vertices."""
    return np.array(g.weights)


def integrate(g: GasketLevel, values) -> float:
    """Quadrature of vertex values against the normalized measure."""
    values = np.asarray(values, dtype=float)
    if values.shape != (g.n_vertices,):
        raise DimensionError(
            f"expected {g.n_vertices} vertex values at level {g.level}, got shape {values.shape}"
        )
    return float(g.weights @ values)


def cell_address(g: GasketLevel, index: int) -> tuple[int, ...]:
    """Address word (symbols 1..3) of the cell at position ``index``."""
    if not 0 <= index < g.n_cells:
        raise IndexError(index)
    word = []
    for _ in range(g.level):
        index, r = divmod(index, 3)
        word.append(r + 1)
    return tuple(reversed(word))


def address_index(word: Sequence[int]) -> int:
    """Inverse of :func:`cell_address`."""
    idx = 0
    for s in word:
        if s not in (1, 2, 3):
            raise ValueError(f"address symbols must be 1, 2 or 3, got {s}")
        idx = 3 * idx + (s - 1)
    return idx


def all_addresses(m: int):
    return list(product((1, 2, 3), repeat=m))


@dataclass(frozen=True, eq=False)
class FractalFunction:
    """Vertex-indexed real function on a gasket level.

    With ``dirichlet=True`` the values at the three corners must be exactly 0.
    """

    level: int
    values: np.ndarray
    dirichlet: bool = False

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        expected = (3 ** (self.level + 1) + 3) // 2
        if vals.shape != (expected,):
            raise DimensionError(
                f"level {self.level} has {expected} vertices, got values of shape {vals.shape}"
            )
        if self.dirichlet and np.any(vals[:3] != 0.0):
            raise ValueError("dirichlet function must vanish at the three corners")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def zeros(cls, g: GasketLevel, dirichlet: bool = True) -> "FractalFunction":
        return cls(g.level, np.zeros(g.n_vertices), dirichlet)

    @classmethod
    def from_callable(
        cls, g: GasketLevel, fn: Callable[[np.ndarray, np.ndarray], np.ndarray], dirichlet=False
    ) -> "FractalFunction":
        vals = np.asarray(fn(g.vertices[:, 0], g.vertices[:, 1]), dtype=float)
        vals = np.broadcast_to(vals, (g.n_vertices,)).copy()
        if dirichlet:
            vals[:3] = 0.0
        return cls(g.level, vals, dirichlet)

    def scaled(self, c: float) -> "FractalFunction":
        return FractalFunction(self.level, c * self.values, self.dirichlet)

    def with_values(self, values) -> "FractalFunction":
        return FractalFunction(self.level, values, self.dirichlet)

    def restrict(self, level: int) -> "FractalFunction":
        """Restriction to a coarser level (a prefix slice by id nesting)."""
        if level > self.level:
            raise DimensionError(f"cannot restrict level {self.level} to finer level {level}")
        n = (3 ** (level + 1) + 3) // 2
        return FractalFunction(level, self.values[:n], self.dirichlet)


def check_level(u: FractalFunction, g: GasketLevel) -> None:
    if u.level != g.level:
        raise DimensionError(f"function is at level {u.level}, graph is at level {g.level}")


def write_vertices_csv(g: GasketLevel, path) -> None:
    """Write ``id,x,y,weight,is_boundary`` rows with 17 significant digits."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "x", "y", "weight", "is_boundary"])
        bnd = g.is_boundary
        for i, ((x, y), wt) in enumerate(zip(g.vertices, g.weights)):
            w.writerow([i, f"{x:.17g}", f"{y:.17g}", f"{wt:.17g}", int(bnd[i])])
