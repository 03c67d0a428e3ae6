"""Uniform rectangular grids, nodal scalar fields and discrete operators.

Nodes are indexed ``(i, j)`` with ``i`` along ``x`` and ``j`` along ``y``, so
``field.values[i, j]`` is the value at ``(i * dx, j * dy)``.
"""
from __future__ import annotations

import csv
import functools
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Union

import numpy as np

__all__ = [
    "GridSpec",
    "ScalarField",
    "GridMismatchError",
    "make_field",
    "gradient_sq",
    "integrate",
    "torque",
    "h1_norm",
    "linf_diff",
    "write_field_csv",
    "read_field_csv",
]


class GridMismatchError(ValueError):
    """Raised when two fields that must share a grid do not."""


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid on ``[0, a] x [0, b]`` with ``Nx x Ny`` cells.

    Parameters
    ----------
    a, b : float
        Domain width and height.
    Nx, Ny : int
        Number of intervals along ``x`` and ``y`` (at least 2 each, so the
        grid has at least one interior node).
    """

    a: float = 1.0
    b: float = 1.0
    Nx: int = 50
    Ny: int = 50

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ValueError(f"domain sides must be positive, got a={self.a}, b={self.b}")
        if int(self.Nx) != self.Nx or int(self.Ny) != self.Ny:
            raise ValueError("Nx and Ny must be integers")
        if self.Nx < 2 or self.Ny < 2:
            raise ValueError(f"need Nx, Ny >= 2, got Nx={self.Nx}, Ny={self.Ny}")
        object.__setattr__(self, "Nx", int(self.Nx))
        object.__setattr__(self, "Ny", int(self.Ny))

    @classmethod
    def from_spacing(cls, a: float = 1.0, b: float = 1.0, dx: float = 0.02, dy: float | None = None):
        """Build a grid from target mesh sizes; ``a / dx`` must be (close to) an integer."""
        dy = dx if dy is None else dy
        nx, ny = round(a / dx), round(b / dy)
        if not (math.isclose(nx * dx, a, rel_tol=1e-9) and math.isclose(ny * dy, b, rel_tol=1e-9)):
            raise ValueError(f"spacing ({dx}, {dy}) does not divide the domain ({a}, {b})")
        return cls(a, b, nx, ny)

    @property
    def dx(self) -> float:
        return self.a / self.Nx

    @property
    def dy(self) -> float:
        return self.b / self.Ny

    @property
    def shape(self) -> tuple[int, int]:
        return (self.Nx + 1, self.Ny + 1)

    @property
    def x(self) -> np.ndarray:
        return np.arange(self.Nx + 1) * self.dx

    @property
    def y(self) -> np.ndarray:
        return np.arange(self.Ny + 1) * self.dy

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(X, Y)`` node coordinates with ``ij`` indexing."""
        return np.meshgrid(self.x, self.y, indexing="ij")


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Node values of a scalar on a :class:`GridSpec`."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != self.grid.shape:
            raise ValueError(f"values have shape {values.shape}, grid expects {self.grid.shape}")
        if not np.all(np.isfinite(values)):
            i, j = np.argwhere(~np.isfinite(values))[0]
            raise ValueError(f"non-finite value at node ({i}, {j})")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __add__(self, other):
        return ScalarField(self.grid, self.values + _values(other, self.grid))

    def __sub__(self, other):
        return ScalarField(self.grid, self.values - _values(other, self.grid))

    def __mul__(self, scalar):
        return ScalarField(self.grid, self.values * float(scalar))

    __rmul__ = __mul__

    @classmethod
    def zeros(cls, grid: GridSpec) -> "ScalarField":
        return cls(grid, np.zeros(grid.shape))


def _values(other, grid):
    if isinstance(other, ScalarField):
        _check_same_grid(grid, other.grid)
        return other.values
    return float(other)


def _check_same_grid(g1: GridSpec, g2: GridSpec):
    if g1 != g2:
        raise GridMismatchError(f"grid mismatch: {g1} vs {g2}")


def make_field(grid: GridSpec, f: Callable) -> ScalarField:
    """Sample ``f(x, y)`` at every node.

    ``f`` is first tried on the full coordinate arrays; scalar-only
    functions fall back to a node-by-node loop.
    """
    X, Y = grid.mesh()
    # non-finite output is reported below, naming the node
    with np.errstate(all="ignore"):
        try:
            values = np.broadcast_to(np.asarray(f(X, Y), dtype=float), grid.shape).copy()
        except (TypeError, ValueError):
            values = np.array([[float(f(x, y)) for y in grid.y] for x in grid.x])
    bad = ~np.isfinite(values)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise ValueError(
            f"f returned {values[i, j]} at node ({i}, {j}) = ({X[i, j]:g}, {Y[i, j]:g})"
        )
    return ScalarField(grid, values)


def _gradient(values: np.ndarray, dx: float, dy: float) -> tuple[np.ndarray, np.ndarray]:
    # central differences inside, first-order one-sided on the boundary;
    # accepts stacked (..., Nx+1, Ny+1) arrays
    gx = np.empty_like(values)
    gx[..., 1:-1, :] = (values[..., 2:, :] - values[..., :-2, :]) / (2.0 * dx)
    gx[..., 0, :] = (values[..., 1, :] - values[..., 0, :]) / dx
    gx[..., -1, :] = (values[..., -1, :] - values[..., -2, :]) / dx
    gy = np.empty_like(values)
    gy[..., 1:-1] = (values[..., 2:] - values[..., :-2]) / (2.0 * dy)
    gy[..., 0] = (values[..., 1] - values[..., 0]) / dy
    gy[..., -1] = (values[..., -1] - values[..., -2]) / dy
    return gx, gy


def _grad_sq(values: np.ndarray, dx: float, dy: float) -> np.ndarray:
    gx, gy = _gradient(values, dx, dy)
    return gx * gx + gy * gy


@functools.lru_cache(maxsize=32)
def _trapezoid_weights(shape: tuple[int, int], dx: float, dy: float) -> np.ndarray:
    wx, wy = np.full(shape[0], dx), np.full(shape[1], dy)
    wx[[0, -1]] *= 0.5
    wy[[0, -1]] *= 0.5
    w = np.outer(wx, wy)
    w.setflags(write=False)
    return w


def _trapezoid(values: np.ndarray, dx: float, dy: float):
    # composite trapezoid rule as one weighted sum; works on stacked
    # (..., Nx+1, Ny+1) arrays and reduces each field independently
    values = np.asarray(values, dtype=float)
    return np.sum(values * _trapezoid_weights(values.shape[-2:], dx, dy), axis=(-2, -1))


def gradient_sq(u: ScalarField) -> ScalarField:
    """Nodewise ``|grad u|^2``."""
    return ScalarField(u.grid, _grad_sq(u.values, u.grid.dx, u.grid.dy))


def integrate(u: ScalarField) -> float:
    """Composite trapezoid rule over the whole domain."""
    return float(_trapezoid(u.values, u.grid.dx, u.grid.dy))


def torque(u: ScalarField) -> float:
    """Torque carried by a Prandtl stress function: twice its integral."""
    return 2.0 * integrate(u)


def _h1_norm(values: np.ndarray, dx: float, dy: float):
    return np.sqrt(_trapezoid(values * values, dx, dy) + _trapezoid(_grad_sq(values, dx, dy), dx, dy))


def h1_norm(u: ScalarField) -> float:
    """Discrete ``H^1`` norm, ``sqrt(||u||^2 + ||grad u||^2)``, trapezoid quadrature."""
    return float(_h1_norm(u.values, u.grid.dx, u.grid.dy))


def linf_diff(u: ScalarField, v: ScalarField) -> float:
    """Maximum nodal absolute difference."""
    _check_same_grid(u.grid, v.grid)
    return float(np.max(np.abs(u.values - v.values)))


def write_field_csv(u: ScalarField, path: Union[str, Path, None] = None) -> str:
    """Write ``x,y,value`` rows (``j`` outer, ``i`` inner) with round-trip precision.

    Returns the CSV text; also writes it to ``path`` when given.
    """
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["x", "y", "value"])
    x, y = u.grid.x, u.grid.y
    for j in range(u.grid.Ny + 1):
        for i in range(u.grid.Nx + 1):
            writer.writerow([f"{x[i]:.17g}", f"{y[j]:.17g}", f"{u.values[i, j]:.17g}"])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def read_field_csv(path: Union[str, Path], grid: GridSpec | None = None) -> ScalarField:
    """Parse a field written by :func:`write_field_csv`.

    The grid is inferred from the coordinates unless given.
    """
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    xs, ys = np.unique(rows[:, 0]), np.unique(rows[:, 1])
    if grid is None:
        grid = GridSpec(float(xs[-1]), float(ys[-1]), len(xs) - 1, len(ys) - 1)
    if rows.shape[0] != (grid.Nx + 1) * (grid.Ny + 1):
        raise ValueError(f"{path}: expected {(grid.Nx + 1) * (grid.Ny + 1)} rows, got {rows.shape[0]}")
    values = rows[:, 2].reshape(grid.Ny + 1, grid.Nx + 1).T
    return ScalarField(grid, values)
