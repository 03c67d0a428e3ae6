"""Direct problem: ``-div(g(|grad u|^2) grad u) = F`` in the domain, ``u = 0`` on its boundary.

The nonlinear problem is solved by the monotone (Picard) linearisation: the
coefficient is frozen at the previous iterate, the resulting linear
five-point problem is solved, and the loop stops once successive iterates
differ by less than a tolerance in the discrete ``H^1`` norm.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import lapack

from .grid import GridSpec, ScalarField, _check_same_grid, _grad_sq, _gradient, _trapezoid, write_field_csv
from .plasticity import PlasticityFn, _ro_eval

__all__ = [
    "FaceCoefficients",
    "LinearSystem",
    "ForwardResult",
    "MeasurementType",
    "LinearSolveError",
    "EllipticityError",
    "half_point_coeffs",
    "assemble",
    "apply_operator",
    "manufactured_rhs",
    "solve_linear",
    "solve_linearized",
    "solve_forward",
    "solve_forward_many",
    "max_grad_sq",
    "classify_measurement",
]

LINEAR_METHODS = ("cholesky", "cg")


class LinearSolveError(RuntimeError):
    """The linear solver failed; ``residual`` holds the final relative residual."""

    def __init__(self, message, residual=float("nan")):
        super().__init__(message)
        self.residual = residual


class EllipticityError(ValueError):
    """A nodal coefficient was not strictly positive and finite."""


class FaceCoefficients(NamedTuple):
    """Half-point coefficients seen from each interior node, shape ``(Nx-1, Ny-1)``."""

    east: np.ndarray  # (i+1/2, j)
    west: np.ndarray  # (i-1/2, j)
    north: np.ndarray  # (i, j+1/2)
    south: np.ndarray  # (i, j-1/2)


def _faces(g: np.ndarray) -> FaceCoefficients:
    # g may be stacked: (..., Nx+1, Ny+1)
    gx = 0.5 * (g[..., 1:, :] + g[..., :-1, :])
    gy = 0.5 * (g[..., :, 1:] + g[..., :, :-1])
    return FaceCoefficients(
        gx[..., 1:, 1:-1], gx[..., :-1, 1:-1], gy[..., 1:-1, 1:], gy[..., 1:-1, :-1]
    )


def _check_coefficient(g: np.ndarray):
    bad = ~(np.isfinite(g) & (g > 0))
    if bad.any():
        where = tuple(int(v) for v in np.argwhere(bad)[0])
        raise EllipticityError(f"coefficient g={g[where]} at index {where} is not positive")


def half_point_coeffs(g_node: ScalarField) -> FaceCoefficients:
    """Arithmetic means of nodal coefficients across each cell face."""
    _check_coefficient(g_node.values)
    return _faces(g_node.values)


@dataclass(frozen=True, eq=False)
class LinearSystem:
    """Five-point system over the interior nodes.

    Unknown ``k`` is node ``(i, j)`` with ``k = (i - 1) * (Ny - 1) + (j - 1)``.
    The symmetric matrix is held in LAPACK lower band storage:
    ``band[d, k] = A[k + d, k]`` for ``d = 0 .. Ny - 1``.
    """

    grid: GridSpec
    band: np.ndarray
    rhs: np.ndarray

    @property
    def n(self) -> int:
        return self.rhs.size

    @property
    def interior_shape(self) -> tuple[int, int]:
        return (self.grid.Nx - 1, self.grid.Ny - 1)

    def node(self, k: int) -> tuple[int, int]:
        i, j = divmod(k, self.grid.Ny - 1)
        return i + 1, j + 1

    def unknown(self, i: int, j: int) -> int:
        if not (0 < i < self.grid.Nx and 0 < j < self.grid.Ny):
            raise IndexError(f"({i}, {j}) is not an interior node")
        return (i - 1) * (self.grid.Ny - 1) + (j - 1)

    def matrix(self) -> sp.csr_matrix:
        n = self.n
        diags, offsets = [self.band[0]], [0]
        for d in _band_offsets(self.band):
            if d < n:
                diags += [self.band[d, : n - d]] * 2
                offsets += [-d, d]
        return sp.diags(diags, offsets, shape=(n, n), format="csr")

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return _band_matvec(self.band, x)


def _band_offsets(band):
    return sorted({1, band.shape[-2] - 1} - {0})


def _band_matvec(band: np.ndarray, x: np.ndarray) -> np.ndarray:
    # band (..., kd+1, n), x (..., n)
    y = band[..., 0, :] * x
    n = x.shape[-1]
    for d in _band_offsets(band):
        if d < n:
            lower = band[..., d, : n - d]
            y[..., d:] += lower * x[..., :-d]
            y[..., :-d] += lower * x[..., d:]
    return y


def _assemble_band(g: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Lower band storage for coefficient fields stacked as ``(B, Nx+1, Ny+1)``."""
    faces = _faces(g)
    idx2, idy2 = 1.0 / grid.dx**2, 1.0 / grid.dy**2
    nb = g.shape[0]
    nyi = grid.Ny - 1
    n = (grid.Nx - 1) * nyi
    band = np.zeros((nb, nyi + 1, n))
    band[:, 0] = ((faces.east + faces.west) * idx2 + (faces.north + faces.south) * idy2).reshape(nb, n)
    ycoup = -faces.north * idy2
    ycoup[..., -1] = 0.0
    band[:, 1] += ycoup.reshape(nb, n)
    xcoup = -faces.east * idx2
    xcoup[..., -1, :] = 0.0
    band[:, nyi] += xcoup.reshape(nb, n)
    return band


def _interior(values: np.ndarray) -> np.ndarray:
    inner = values[..., 1:-1, 1:-1]
    return np.ascontiguousarray(inner).reshape(inner.shape[:-2] + (-1,))


def _assemble(g: np.ndarray, rhs: np.ndarray, grid: GridSpec) -> LinearSystem:
    return LinearSystem(grid, _assemble_band(g[None], grid)[0], _interior(rhs))


def assemble(g_node: ScalarField, rhs: ScalarField, grid: GridSpec | None = None) -> LinearSystem:
    """Assemble the linear problem with the coefficient frozen at ``g_node``.

    Dirichlet boundary values are zero, so boundary couplings drop out.
    """
    grid = g_node.grid if grid is None else grid
    _check_same_grid(grid, g_node.grid)
    _check_same_grid(grid, rhs.grid)
    _check_coefficient(g_node.values)
    return _assemble(g_node.values, rhs.values, grid)


def apply_operator(u: ScalarField, g_node: ScalarField) -> ScalarField:
    """Evaluate the discrete operator ``-div(g grad u)`` at interior nodes (zero on the boundary)."""
    _check_same_grid(u.grid, g_node.grid)
    _check_coefficient(g_node.values)
    v, grid = u.values, u.grid
    f = _faces(g_node.values)
    c = v[1:-1, 1:-1]
    out = np.zeros(grid.shape)
    out[1:-1, 1:-1] = -(
        (f.east * (v[2:, 1:-1] - c) - f.west * (c - v[:-2, 1:-1])) / grid.dx**2
        + (f.north * (v[1:-1, 2:] - c) - f.south * (c - v[1:-1, :-2])) / grid.dy**2
    )
    return ScalarField(grid, out)


def manufactured_rhs(u_exact: ScalarField, g: PlasticityFn) -> ScalarField:
    """Source term making ``u_exact`` an exact fixed point of the discrete iteration."""
    g_node = ScalarField(u_exact.grid, g(_grad_sq(u_exact.values, u_exact.grid.dx, u_exact.grid.dy)))
    return apply_operator(u_exact, g_node)


def _solve_band(band: np.ndarray, b: np.ndarray, tol: float, method: str, max_iter=None) -> np.ndarray:
    # callers handle b = 0, which must return exactly zero
    if method == "cholesky":
        _, x, info = lapack.dpbsv(band, b, lower=1)
        if info != 0:
            raise LinearSolveError(f"banded Cholesky failed (info={info}); matrix not positive definite")
        return x
    if method == "cg":
        n = b.size
        diags, offsets = [band[0]], [0]
        for d in _band_offsets(band):
            if d < n:
                diags += [band[d, : n - d]] * 2
                offsets += [-d, d]
        A = sp.diags(diags, offsets, shape=(n, n), format="csr")
        precond = sp.diags(1.0 / band[0])
        cap = 10 * n if max_iter is None else max_iter
        x, info = spla.cg(A, b, rtol=tol, atol=0.0, maxiter=cap, M=precond)
        if info != 0:
            res = np.linalg.norm(A @ x - b) / np.linalg.norm(b)
            raise LinearSolveError(f"CG did not converge in {cap} iterations (residual {res:.3e})", res)
        return x
    raise ValueError(f"unknown linear method {method!r}; choose from {LINEAR_METHODS}")


def _check_residual(band, x, b, tol):
    bnorm = np.sqrt(np.sum(b * b, axis=-1))
    res = np.sqrt(np.sum((_band_matvec(band, x) - b) ** 2, axis=-1))
    rel = np.divide(res, bnorm, out=np.zeros_like(res), where=bnorm > 0)
    if not np.all(rel <= tol):
        worst = float(np.max(rel))
        raise LinearSolveError(f"relative residual {worst:.3e} exceeds {tol:g}", worst)


def solve_linear(
    system: LinearSystem, tol: float = 1e-10, method: str = "cholesky", max_iter: int | None = None
) -> np.ndarray:
    """Solve ``A x = b`` to relative residual ``||Ax - b|| / ||b|| <= tol``.

    ``method="cholesky"`` uses a banded Cholesky factorisation (LAPACK
    ``pbsv``); ``"cg"`` is Jacobi-preconditioned conjugate gradients capped at
    ``max_iter`` (default ``10 * n``) iterations. A zero right-hand side
    returns exactly zero.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    _check_method(method)
    if not np.any(system.rhs):
        return np.zeros(system.n)
    x = _solve_band(system.band, system.rhs, tol, method, max_iter)
    _check_residual(system.band, x, system.rhs, tol)
    return x


def _embed(x: np.ndarray, grid: GridSpec) -> np.ndarray:
    out = np.zeros(x.shape[:-1] + grid.shape)
    out[..., 1:-1, 1:-1] = x.reshape(x.shape[:-1] + (grid.Nx - 1, grid.Ny - 1))
    return out


def solve_linearized(
    u_prev: ScalarField,
    g: PlasticityFn,
    rhs: ScalarField,
    linear_tol: float = 1e-10,
    method: str = "cholesky",
) -> ScalarField:
    """One linearised step: freeze ``g(|grad u_prev|^2)`` at the nodes and solve."""
    grid = u_prev.grid
    _check_same_grid(grid, rhs.grid)
    g_node = np.asarray(g(_grad_sq(u_prev.values, grid.dx, grid.dy)), dtype=float)
    _check_coefficient(g_node)
    system = _assemble(g_node, rhs.values, grid)
    return ScalarField(grid, _embed(solve_linear(system, linear_tol, method), grid))


@dataclass(eq=False)
class ForwardResult:
    """Outcome of :func:`solve_forward`.

    ``diff_history[n]`` is ``||u^(n+1) - u^(n)||_H1``.
    """

    u_star: ScalarField
    iterations: int
    diff_history: list[float] = field(default_factory=list)
    converged: bool = False

    def summary(self) -> dict:
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "diff_history": [float(d) for d in self.diff_history],
        }

    def write(self, directory: Union[str, Path], stem: str = "solution") -> tuple[Path, Path]:
        """Write ``<stem>.csv`` (the field) and ``<stem>.json`` (convergence sidecar)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = directory / f"{stem}.csv", directory / f"{stem}.json"
        write_field_csv(self.u_star, csv_path)
        json_path.write_text(json.dumps(self.summary(), indent=2) + "\n")
        return csv_path, json_path


def _coefficient_stack(gs: Sequence[PlasticityFn]):
    """Evaluator ``(xi_sq stack, system indices) -> g stack`` for a list of plasticity functions."""
    params = [g.params for g in gs]
    if all(p is not None for p in params):
        table = np.array([p.as_array() for p in params])

        def coef(xi_sq, idx):
            kappa, xi0_sq, G = (table[idx, c][:, None, None] for c in range(3))
            return _ro_eval(xi_sq, kappa, xi0_sq, G)

    else:

        def coef(xi_sq, idx):
            return np.stack([np.asarray(gs[s](xi_sq[k]), dtype=float) for k, s in enumerate(idx)])

    return coef


def _picard(coef, rhs: np.ndarray, grid: GridSpec, tol, max_iter, linear_tol, method):
    """Run the linearisation loop on a stack of independent problems.

    Only unconverged problems are carried from one iteration to the next;
    every array operation acts on each problem independently, so results do
    not depend on what else is in the stack.
    """
    dx, dy = grid.dx, grid.dy
    nb = rhs.shape[0]
    u = np.zeros(rhs.shape)
    histories = [[] for _ in range(nb)]
    converged = np.zeros(nb, dtype=bool)
    # state of the active problems: iterate, its nodal gradient, interior rhs
    active = np.arange(nb)
    u_act = np.zeros(rhs.shape)
    gx, gy = np.zeros(rhs.shape), np.zeros(rhs.shape)
    b = _interior(rhs)
    nonzero = np.any(b, axis=-1)
    for _ in range(max_iter):
        if active.size == 0:
            break
        g_node = np.asarray(coef(gx * gx + gy * gy, active), dtype=float)
        _check_coefficient(g_node)
        band = _assemble_band(g_node, grid)
        x = np.zeros(b.shape)
        for k in np.flatnonzero(nonzero):
            x[k] = _solve_band(band[k], b[k], linear_tol, method)
        _check_residual(band, x, b, linear_tol)
        u_next = _embed(x, grid)
        gx_next, gy_next = _gradient(u_next, dx, dy)
        # the difference quotient is linear, so grad(u_next - u) = grad u_next - grad u
        du, dgx, dgy = u_next - u_act, gx_next - gx, gy_next - gy
        diff = np.sqrt(_trapezoid(du * du, dx, dy) + _trapezoid(dgx * dgx + dgy * dgy, dx, dy))
        for k, s in enumerate(active):
            histories[s].append(float(diff[k]))
        done = diff <= tol
        if done.any():
            u[active[done]] = u_next[done]
            converged[active[done]] = True
            keep = ~done
            active, b, nonzero = active[keep], b[keep], nonzero[keep]
            u_act, gx, gy = u_next[keep], gx_next[keep], gy_next[keep]
        else:
            u_act, gx, gy = u_next, gx_next, gy_next
    u[active] = u_act
    return u, histories, converged


def _check_method(method):
    if method not in LINEAR_METHODS:
        raise ValueError(f"unknown linear method {method!r}; choose from {LINEAR_METHODS}")


def _check_settings(tol, max_iter, method="cholesky"):
    _check_method(method)
    if tol <= 0:
        raise ValueError("tol must be positive")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")


def _rhs_values(rhs, grid):
    if isinstance(rhs, ScalarField):
        if grid is not None:
            _check_same_grid(grid, rhs.grid)
        return rhs.values
    if grid is None:
        raise ValueError("grid is required with a constant right-hand side")
    return np.full(grid.shape, float(rhs))


def solve_forward(
    g: PlasticityFn,
    rhs: Union[ScalarField, float],
    grid: GridSpec | None = None,
    tol: float = 1e-6,
    max_iter: int = 200,
    linear_tol: float = 1e-10,
    method: str = "cholesky",
) -> ForwardResult:
    """Picard iteration from ``u = 0`` until successive ``H^1`` differences drop to ``tol``.

    Parameters
    ----------
    g : PlasticityFn
        Plasticity function evaluated at nodal ``|grad u|^2``.
    rhs : ScalarField or float
        Source term. A float is taken as a constant source; for torsion pass
        ``2 * phi``. ``grid`` is required in that case.
    tol : float
        Stopping tolerance on ``||u^(n+1) - u^(n)||_H1``.
    max_iter : int
        Iteration cap. Hitting it returns ``converged=False`` rather than raising.

    Returns
    -------
    ForwardResult
    """
    grid = rhs.grid if isinstance(rhs, ScalarField) and grid is None else grid
    return solve_forward_many([g], [rhs], grid, tol, max_iter, linear_tol, method)[0]


def solve_forward_many(
    gs: Sequence[PlasticityFn],
    rhs: Sequence[Union[ScalarField, float]],
    grid: GridSpec,
    tol: float = 1e-6,
    max_iter: int = 200,
    linear_tol: float = 1e-10,
    method: str = "cholesky",
) -> list[ForwardResult]:
    """:func:`solve_forward` for several independent problems at once.

    Each result is bit-identical to solving that problem on its own.
    """
    _check_settings(tol, max_iter, method)
    if len(gs) != len(rhs):
        raise ValueError(f"{len(gs)} plasticity functions but {len(rhs)} right-hand sides")
    if not gs:
        return []
    stack = np.stack([_rhs_values(r, grid) for r in rhs])
    u, histories, converged = _picard(_coefficient_stack(gs), stack, grid, tol, max_iter, linear_tol, method)
    return [
        ForwardResult(ScalarField(grid, u[k]), len(histories[k]), histories[k], bool(converged[k]))
        for k in range(len(gs))
    ]


def max_grad_sq(u: ScalarField) -> float:
    """Peak stress intensity ``max |grad u|^2`` over all nodes."""
    return float(np.max(_grad_sq(u.values, u.grid.dx, u.grid.dy)))


class MeasurementType(enum.Enum):
    PLASTIC = "P"
    ELASTIC = "E"


def classify_measurement(max_stress: float, xi0_sq: float) -> MeasurementType:
    """Plastic iff the peak stress intensity strictly exceeds the yield stress."""
    if max_stress < 0 or xi0_sq < 0:
        raise ValueError("stress values must be non-negative")
    return MeasurementType.PLASTIC if max_stress > xi0_sq else MeasurementType.ELASTIC
