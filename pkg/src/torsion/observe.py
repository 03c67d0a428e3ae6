"""Observation operator: material parameters to torques at prescribed twist angles."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from . import rng
from .forward import LINEAR_METHODS, solve_forward_many
from .grid import GridSpec, _trapezoid
from .plasticity import MaterialParams, _require_admissible, ramberg_osgood

__all__ = [
    "AngleSet",
    "ObservationSet",
    "SolverSettings",
    "ForwardNonConvergenceError",
    "observe",
    "observe_many",
    "generate_data",
    "perturb_for_ensemble",
]

# forward problems solved together; bounds memory at fine grids without
# affecting results (each problem is solved independently)
BATCH_SIZE = 64


class ForwardNonConvergenceError(RuntimeError):
    """A forward solve hit its iteration cap.

    ``failures`` lists ``(member, angle)`` pairs; member is ``None`` for a
    single-parameter query.
    """

    def __init__(self, failures):
        self.failures = list(failures)
        shown = ", ".join(
            f"phi={phi:g}" if m is None else f"member {m} at phi={phi:g}" for m, phi in self.failures[:10]
        )
        more = "" if len(self.failures) <= 10 else f" (+{len(self.failures) - 10} more)"
        super().__init__(f"forward solve did not converge: {shown}{more}")


class AngleSet(tuple):
    """Distinct positive twist angles per unit length."""

    def __new__(cls, angles: Iterable[float] = ()):
        values = tuple(float(a) for a in np.atleast_1d(np.asarray(list(angles), dtype=float)))
        for a in values:
            if not (math.isfinite(a) and a > 0):
                raise ValueError(f"angles must be finite and positive, got {a!r}")
        if len(set(values)) != len(values):
            raise ValueError(f"angles must be distinct, got {list(values)}")
        return super().__new__(cls, values)

    def __repr__(self):
        return f"AngleSet({list(self)})"


@dataclass(frozen=True)
class SolverSettings:
    """Forward-solver knobs shared by every torque evaluation."""

    grid: GridSpec = field(default_factory=lambda: GridSpec(1.0, 1.0, 50, 50))
    tol: float = 1e-6
    max_iter: int = 200
    linear_tol: float = 1e-10
    method: str = "cholesky"

    def __post_init__(self):
        if not self.tol > 0 or not self.linear_tol > 0:
            raise ValueError("solver tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.method not in LINEAR_METHODS:
            raise ValueError(f"unknown linear method {self.method!r}; choose from {LINEAR_METHODS}")


def _torques(thetas: np.ndarray, angles: AngleSet, settings: SolverSettings):
    """Torque matrix ``(len(thetas), M)`` and a matching non-convergence mask."""
    grid = settings.grid
    jobs = [(t, phi) for t in range(len(thetas)) for phi in angles]
    gs_by_member = [ramberg_osgood(MaterialParams.from_array(t)) for t in thetas]
    torque = np.empty(len(jobs))
    failed = np.zeros(len(jobs), dtype=bool)
    for start in range(0, len(jobs), BATCH_SIZE):
        chunk = jobs[start : start + BATCH_SIZE]
        results = solve_forward_many(
            [gs_by_member[t] for t, _ in chunk],
            [2.0 * phi for _, phi in chunk],
            grid,
            settings.tol,
            settings.max_iter,
            settings.linear_tol,
            settings.method,
        )
        u = np.stack([r.u_star.values for r in results])
        torque[start : start + len(chunk)] = 2.0 * _trapezoid(u, grid.dx, grid.dy)
        failed[start : start + len(chunk)] = [not r.converged for r in results]
    shape = (len(thetas), len(angles))
    return torque.reshape(shape), failed.reshape(shape)


def observe(theta: MaterialParams, angles: Sequence[float], settings: SolverSettings | None = None) -> np.ndarray:
    """Torques ``2 * integral(u)`` of the converged forward solutions at each angle.

    Raises
    ------
    ForwardNonConvergenceError
        If any forward solve hits its iteration cap; the message names the angle.
    """
    _require_admissible(theta)
    angles = AngleSet(angles)
    settings = SolverSettings() if settings is None else settings
    torque, failed = _torques(theta.as_array()[None], angles, settings)
    if failed.any():
        raise ForwardNonConvergenceError([(None, angles[i]) for i in np.flatnonzero(failed[0])])
    return torque[0]


def observe_many(thetas: np.ndarray, angles: Sequence[float], settings: SolverSettings | None = None):
    """Evaluate the observation operator for an ``(N, 3)`` array of parameter triples.

    Returns
    -------
    torques : ndarray, shape (N, M)
    failed : ndarray of bool, shape (N, M)
        True where the forward solve did not converge.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    for t in thetas:
        _require_admissible(MaterialParams.from_array(t))
    settings = SolverSettings() if settings is None else settings
    return _torques(thetas, AngleSet(angles), settings)


@dataclass(frozen=True)
class ObservationSet:
    """Measured torques ``d`` at ``angles`` with noise level ``sigma``.

    ``truth`` holds the generating parameters for synthetic data and is
    ``None`` for measured data.
    """

    angles: AngleSet
    d: np.ndarray
    sigma: float
    seed: int | None = None
    truth: MaterialParams | None = None

    def __post_init__(self):
        angles = AngleSet(self.angles)
        d = np.array(self.d, dtype=float)
        if d.shape != (len(angles),):
            raise ValueError(f"{len(angles)} angles but {d.size} torques")
        if not np.all(np.isfinite(d)):
            raise ValueError("torques must be finite")
        if not (math.isfinite(self.sigma) and self.sigma >= 0):
            raise ValueError(f"sigma must be finite and >= 0, got {self.sigma}")
        d.setflags(write=False)
        object.__setattr__(self, "angles", angles)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "sigma", float(self.sigma))

    @property
    def M(self) -> int:
        return len(self.angles)

    def to_dict(self) -> dict:
        return {
            "angles": list(self.angles),
            "d": [float(v) for v in self.d],
            "sigma": self.sigma,
            "seed": self.seed,
            "truth": None if self.truth is None else self.truth.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ObservationSet":
        missing = {"angles", "d", "sigma"} - set(doc)
        if missing:
            raise ValueError(f"observation file is missing {sorted(missing)}")
        truth = doc.get("truth")
        return cls(
            AngleSet(doc["angles"]),
            np.asarray(doc["d"], dtype=float),
            float(doc["sigma"]),
            doc.get("seed"),
            None if truth is None else MaterialParams.from_dict(truth),
        )

    def to_json(self, path: Union[str, Path, None] = None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> "ObservationSet":
        return cls.from_dict(json.loads(Path(path).read_text()))


def generate_data(
    truth: MaterialParams,
    angles: Sequence[float],
    sigma: float,
    seed: int,
    settings: SolverSettings | None = None,
) -> ObservationSet:
    """Synthetic measurements ``d = observe(truth) + sigma * z`` with keyed standard normals ``z``."""
    if not sigma >= 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    angles = AngleSet(angles)
    clean = observe(truth, angles, settings)
    noise = rng.normals(seed, rng.DATA_NOISE, 1, len(angles))[0]
    return ObservationSet(angles, clean + sigma * noise, sigma, int(seed), truth)


def perturb_for_ensemble(d, sigma: float, n_members: int, seed: int) -> np.ndarray:
    """Per-member data copies ``d_j = d + sigma * z_j``, shape ``(n_members, M)``."""
    if n_members < 2:
        raise ValueError(f"need at least 2 ensemble members, got {n_members}")
    if not sigma >= 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    d = np.asarray(d, dtype=float)
    return d[None, :] + sigma * rng.normals(seed, rng.ENSEMBLE_NOISE, n_members, d.size)
