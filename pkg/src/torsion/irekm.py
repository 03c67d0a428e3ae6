"""Iterative regularizing ensemble Kalman method for recovering ``(kappa, xi0_sq, G)``.

Each iteration pushes the ensemble through the observation operator, forms
sample covariances, picks the regularisation weight ``gamma`` by doubling
until a residual-reduction condition holds, and moves every member through
the shared Kalman gain. Iteration stops by the discrepancy principle
``R_n <= tau * delta``.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from . import rng
from .observe import (
    ForwardNonConvergenceError,
    ObservationSet,
    SolverSettings,
    observe,
    observe_many,
    perturb_for_ensemble,
)
from .plasticity import MaterialParams, ParameterBox

__all__ = [
    "PriorSpec",
    "Ensemble",
    "KalmanStats",
    "IterationRecord",
    "InversionTrace",
    "PredictionError",
    "GammaSelectionError",
    "init_ensemble",
    "predict",
    "ensemble_stats",
    "select_gamma",
    "update_ensemble",
    "residual",
    "noise_level",
    "relative_errors",
    "run_irekm",
]

XI0_SQ_FLOOR = 1e-6
PARAM_NAMES = ("kappa", "xi0_sq", "G")


class PredictionError(RuntimeError):
    """Some ensemble members failed to produce a prediction.

    ``failed_members`` are member indices; ``trace`` is the inversion history
    up to the failing iteration (``None`` outside :func:`run_irekm`).
    """

    def __init__(self, failed_members, trace=None):
        self.failed_members = sorted(set(int(m) for m in failed_members))
        self.trace = trace
        shown = ", ".join(str(m) for m in self.failed_members[:20])
        more = "" if len(self.failed_members) <= 20 else ", ..."
        super().__init__(f"forward solve failed for ensemble members [{shown}{more}]")


class GammaSelectionError(RuntimeError):
    """No ``gamma = 2^i * gamma0`` with ``i <= cap`` satisfied the selection condition."""


@dataclass(frozen=True)
class PriorSpec:
    """Independent uniform priors ``U(lower, upper)`` on ``kappa``, ``xi0_sq`` and ``G``."""

    kappa: tuple[float, float] = (0.2, 0.9)
    xi0_sq: tuple[float, float] = (0.0, 0.15)
    G: tuple[float, float] = (42.0, 43.0)

    def __post_init__(self):
        for name in PARAM_NAMES:
            lo, hi = (float(v) for v in getattr(self, name))
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise ValueError(f"prior for {name} needs finite lower < upper, got ({lo}, {hi})")
            object.__setattr__(self, name, (lo, hi))
        if self.kappa[0] < 0 or self.kappa[1] > 1:
            raise ValueError(f"kappa prior must lie in [0, 1], got {self.kappa}")
        if self.xi0_sq[0] < 0:
            raise ValueError(f"xi0_sq prior must be non-negative, got {self.xi0_sq}")
        if self.G[0] <= 0:
            raise ValueError(f"G prior must be positive, got {self.G}")

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.kappa[0], self.xi0_sq[0], self.G[0]])

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.kappa[1], self.xi0_sq[1], self.G[1]])

    def box(self) -> ParameterBox:
        """Clamping box: the prior support, with ``xi0_sq`` kept strictly positive."""
        lower = self.lower
        lower[1] = max(lower[1], XI0_SQ_FLOOR)
        return ParameterBox(tuple(lower), tuple(self.upper))

    def to_dict(self) -> dict:
        return {name: list(getattr(self, name)) for name in PARAM_NAMES}

    @classmethod
    def from_dict(cls, doc: dict) -> "PriorSpec":
        return cls(**{name: tuple(doc[name]) for name in PARAM_NAMES if name in doc})


@dataclass(frozen=True, eq=False)
class Ensemble:
    """``members[j] = (kappa_j, xi0_sq_j, G_j)``; ``n`` counts updates applied so far."""

    members: np.ndarray
    n: int = 0

    def __post_init__(self):
        members = np.array(self.members, dtype=float)
        if members.ndim != 2 or members.shape[1] != 3:
            raise ValueError(f"members must have shape (Ne, 3), got {members.shape}")
        if members.shape[0] < 2:
            raise ValueError("an ensemble needs at least 2 members")
        members.setflags(write=False)
        object.__setattr__(self, "members", members)

    @property
    def size(self) -> int:
        return self.members.shape[0]

    def mean(self) -> np.ndarray:
        return self.members.mean(axis=0)

    def spread(self) -> np.ndarray:
        """Per-coordinate sample standard deviation."""
        return self.members.std(axis=0, ddof=1)


@dataclass(frozen=True, eq=False)
class KalmanStats:
    """Sample means and covariances of one analysis step.

    ``C_theta_w[p]`` is the ``1 x M`` cross-covariance between parameter ``p``
    and the predictions.
    """

    w_mean: np.ndarray
    C_ww: np.ndarray
    C_theta_w: np.ndarray
    theta_mean: np.ndarray


@dataclass
class IterationRecord:
    n: int
    theta_mean: list[float]
    spread: list[float]
    R: float
    errors: dict | None = None
    gamma: float | None = None
    gamma_index: int | None = None

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "theta_mean": dict(zip(PARAM_NAMES, self.theta_mean)),
            "spread": dict(zip(PARAM_NAMES, self.spread)),
            "R": self.R,
            "errors": self.errors,
            "gamma": self.gamma,
            "gamma_index": self.gamma_index,
        }


@dataclass
class InversionTrace:
    """History of a run: one record per iteration, ``n + 1`` records after ``n`` updates.

    ``stop_reason`` is ``"discrepancy"`` or ``"max-iter"`` (``None`` while running).
    """

    records: list[IterationRecord] = field(default_factory=list)
    delta: float = float("nan")
    tau: float = float("nan")
    stop_reason: str | None = None

    @property
    def n(self) -> int:
        return len(self.records) - 1

    @property
    def theta_mean(self) -> MaterialParams:
        return MaterialParams.from_array(self.records[-1].theta_mean)

    def summary(self) -> dict:
        last = self.records[-1]
        out = {
            "theta_mean": dict(zip(PARAM_NAMES, last.theta_mean)),
            "n": self.n,
            "stop_reason": self.stop_reason,
            "R": last.R,
            "delta": self.delta,
            "tau": self.tau,
        }
        if last.errors is not None:
            out["errors"] = last.errors
        return out

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.to_dict()) + "\n" for r in self.records)

    def errors_csv(self) -> str:
        """``n,e_kappa,e_xi,e_G,e_n,R_n,gamma_n`` rows; blank cells where not defined."""

        def cell(v):
            return "" if v is None else f"{v:.17g}"

        lines = ["n,e_kappa,e_xi,e_G,e_n,R_n,gamma_n"]
        for r in self.records:
            e = r.errors or {}
            row = [str(r.n)] + [cell(e.get(k)) for k in ("e_kappa", "e_xi", "e_G", "e_n")]
            lines.append(",".join(row + [cell(r.R), cell(r.gamma)]))
        return "\n".join(lines) + "\n"

    def write(self, directory: Union[str, Path]) -> dict[str, Path]:
        """Write ``trace.jsonl``, ``errors.csv`` and ``summary.json`` into ``directory``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {
            "trace": directory / "trace.jsonl",
            "errors": directory / "errors.csv",
            "summary": directory / "summary.json",
        }
        paths["trace"].write_text(self.to_jsonl())
        paths["errors"].write_text(self.errors_csv())
        paths["summary"].write_text(json.dumps(self.summary(), indent=2) + "\n")
        return paths

    @classmethod
    def from_jsonl(cls, text: str) -> "InversionTrace":
        records = []
        for line in text.splitlines():
            if not line.strip():
                continue
            doc = json.loads(line)
            records.append(
                IterationRecord(
                    doc["n"],
                    [doc["theta_mean"][k] for k in PARAM_NAMES],
                    [doc["spread"][k] for k in PARAM_NAMES],
                    doc["R"],
                    doc["errors"],
                    doc["gamma"],
                    doc["gamma_index"],
                )
            )
        return cls(records)


def init_ensemble(prior: PriorSpec, n_members: int, seed: int) -> Ensemble:
    """Draw ``n_members`` i.i.d. members from the prior, then clamp to its box."""
    if n_members < 2:
        raise ValueError(f"need at least 2 ensemble members, got {n_members}")
    u = rng.uniforms(seed, rng.PRIOR, n_members, 3)
    members = prior.lower + u * (prior.upper - prior.lower)
    return Ensemble(prior.box().clip(members), 0)


def _predict_chunk(args):
    members, angles, settings = args
    return observe_many(members, angles, settings)


def _chunks(n: int, parts: int) -> list[slice]:
    bounds = np.linspace(0, n, parts + 1).round().astype(int)
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def predict(ensemble: Ensemble, angles, settings: SolverSettings | None = None, n_jobs: int = 1) -> np.ndarray:
    """Torques ``w_j = F(theta_j)`` for every member, shape ``(Ne, M)``.

    Members are split across ``n_jobs`` worker processes; every forward
    problem is solved independently, so the result does not depend on
    ``n_jobs``.

    Raises
    ------
    PredictionError
        Listing the members whose forward solve did not converge.
    """
    settings = SolverSettings() if settings is None else settings
    members = ensemble.members
    if n_jobs <= 1 or ensemble.size < 2:
        w, failed = observe_many(members, angles, settings)
    else:
        parts = _chunks(ensemble.size, min(n_jobs, ensemble.size))
        with ProcessPoolExecutor(max_workers=len(parts)) as pool:
            results = list(pool.map(_predict_chunk, [(members[s], tuple(angles), settings) for s in parts]))
        w = np.concatenate([r[0] for r in results])
        failed = np.concatenate([r[1] for r in results])
    bad = np.flatnonzero(failed.any(axis=1))
    if bad.size:
        raise PredictionError(bad)
    return w


def ensemble_stats(ensemble: Ensemble, predictions: np.ndarray) -> KalmanStats:
    """Sample means and covariances with the unbiased ``1 / (Ne - 1)`` normalisation."""
    theta = ensemble.members
    w = np.asarray(predictions, dtype=float)
    if w.ndim != 2 or w.shape[0] != ensemble.size:
        raise ValueError(f"predictions must have shape ({ensemble.size}, M), got {w.shape}")
    ne = ensemble.size
    theta_mean, w_mean = theta.mean(axis=0), w.mean(axis=0)
    dtheta, dw = theta - theta_mean, w - w_mean
    C_ww = dw.T @ dw / (ne - 1)
    C_theta_w = dtheta.T @ dw / (ne - 1)
    return KalmanStats(w_mean, 0.5 * (C_ww + C_ww.T), C_theta_w, theta_mean)


def _noise_cov(sigma: float, m: int) -> np.ndarray:
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    return sigma**2 * np.eye(m)


GAMMA_RULES = ("scaled", "literal")


def select_gamma(
    C_ww, sigma: float, d, w_mean, gamma0: float = 1.0, rho: float = 0.7, cap: int = 64, rule: str = "scaled"
):
    """Smallest ``gamma = 2^i * gamma0`` passing the residual-reduction test.

    With ``C = sigma^2 I`` and ``r = d - w_mean`` the tests are

    ``"scaled"``
        ``gamma * ||C^{1/2} (C_ww + gamma C)^{-1} r|| >= rho * ||C^{-1/2} r||``.
        Both sides are whitened misfits, so the rule is invariant to the
        units of the data.
    ``"literal"``
        ``gamma * ||C^{-1/2} (C_ww + gamma C)^{-1} r|| >= rho * ||C^{-1} r||``.
        For small ``sigma`` this is met almost immediately and gives very
        little regularisation.

    The two coincide when ``sigma = 1``.

    Returns
    -------
    gamma : float
    i : int
        Number of doublings applied.
    """
    if not gamma0 > 0:
        raise ValueError(f"gamma0 must be positive, got {gamma0}")
    if not 0 < rho < 1:
        raise ValueError(f"rho must lie in (0, 1), got {rho}")
    if rule not in GAMMA_RULES:
        raise ValueError(f"unknown gamma rule {rule!r}; choose from {GAMMA_RULES}")
    r = np.asarray(d, dtype=float) - np.asarray(w_mean, dtype=float)
    C_ww = np.atleast_2d(np.asarray(C_ww, dtype=float))
    C = _noise_cov(sigma, r.size)
    if rule == "scaled":
        left_scale, target = sigma, rho * np.linalg.norm(r / sigma)
    else:
        left_scale, target = 1.0 / sigma, rho * np.linalg.norm(r / sigma**2)
    for i in range(cap + 1):
        gamma = gamma0 * 2.0**i
        lhs = gamma * left_scale * np.linalg.norm(np.linalg.solve(C_ww + gamma * C, r))
        if lhs >= target:
            return gamma, i
    raise GammaSelectionError(
        f"no gamma up to 2^{cap} * {gamma0:g} satisfied the selection condition; "
        "check sigma and the ensemble spread"
    )


def update_ensemble(
    ensemble: Ensemble,
    predictions: np.ndarray,
    stats: KalmanStats,
    perturbed_data: np.ndarray,
    gamma: float,
    sigma: float,
    box: ParameterBox,
) -> Ensemble:
    """Move each member by ``C_theta_w (C_ww + gamma C)^{-1} (d_j - w_j)``, then clamp to ``box``."""
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    w = np.asarray(predictions, dtype=float)
    innovations = np.asarray(perturbed_data, dtype=float) - w
    A = stats.C_ww + gamma * _noise_cov(sigma, w.shape[1])
    # A is symmetric, so solving A X = innovations^T gives the rows (A^{-1} innov_j)
    weights = np.linalg.solve(A, innovations.T).T
    members = ensemble.members + weights @ stats.C_theta_w.T
    members = box.clip(members)
    assert box.contains(members)
    return Ensemble(members, ensemble.n + 1)


def residual(d, w_mean, sigma: float) -> float:
    """Whitened misfit ``||(d - w_mean) / sigma||``."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive to whiten the residual, got {sigma}")
    return float(np.linalg.norm((np.asarray(d, float) - np.asarray(w_mean, float)) / sigma))


def noise_level(data: ObservationSet, settings: SolverSettings | None = None, truth: MaterialParams | None = None):
    """Whitened noise norm ``||(d - F(truth)) / sigma||`` or, without a truth, ``sqrt(M)``."""
    truth = data.truth if truth is None else truth
    if truth is None:
        if not data.sigma > 0:
            raise ValueError("sigma must be positive to estimate the noise level")
        return math.sqrt(data.M)
    if not data.sigma > 0:
        raise ValueError(f"sigma must be positive, got {data.sigma}")
    return residual(data.d, observe(truth, data.angles, settings), data.sigma)


def relative_errors(theta_mean, truth: MaterialParams) -> dict:
    """Componentwise ``|mean - truth| / |truth|`` and the global Euclidean relative error."""
    t = truth.as_array()
    if np.any(t == 0):
        raise ValueError(f"relative errors need nonzero truth components, got {truth}")
    m = theta_mean.as_array() if isinstance(theta_mean, MaterialParams) else np.asarray(theta_mean, float)
    comp = np.abs(m - t) / np.abs(t)
    return {
        "e_kappa": float(comp[0]),
        "e_xi": float(comp[1]),
        "e_G": float(comp[2]),
        "e_n": float(np.linalg.norm(m - t) / np.linalg.norm(t)),
    }


def run_irekm(
    prior: PriorSpec,
    data: ObservationSet,
    rho: float = 0.7,
    gamma0: float = 1.0,
    tau: float | None = None,
    max_iter: int = 100,
    n_members: int = 200,
    seed: int = 0,
    settings: SolverSettings | None = None,
    delta: float | None = None,
    n_jobs: int = 1,
    gamma_rule: str = "scaled",
    callback=None,
) -> InversionTrace:
    """Run the full inversion loop.

    Parameters
    ----------
    prior : PriorSpec
        Uniform priors; their support is also the clamping box.
    data : ObservationSet
        Measurements. When ``data.truth`` is set, relative errors are
        recorded and the noise level is computed from it.
    rho : float
        Residual-reduction factor in ``(0, 1)``.
    tau : float, optional
        Discrepancy factor, ``1 / rho`` by default.
    gamma_rule : {"scaled", "literal"}
        Regularisation-weight test, see :func:`select_gamma`.
    delta : float, optional
        Override for the noise level.
    callback : callable, optional
        Called with each :class:`IterationRecord` as it is produced.

    Returns
    -------
    InversionTrace
        Stops on ``R_n <= tau * delta`` or after ``max_iter`` updates.

    Raises
    ------
    PredictionError
        Carries the trace recorded so far.
    """
    if not 0 < rho < 1:
        raise ValueError(f"rho must lie in (0, 1), got {rho}")
    if max_iter < 1:
        raise ValueError(f"max_iter must be >= 1, got {max_iter}")
    if gamma_rule not in GAMMA_RULES:
        raise ValueError(f"unknown gamma rule {gamma_rule!r}; choose from {GAMMA_RULES}")
    if not data.sigma > 0:
        raise ValueError("inversion needs sigma > 0")
    if data.M == 0:
        raise ValueError("inversion needs at least one measurement")
    settings = SolverSettings() if settings is None else settings
    tau = 1.0 / rho if tau is None else float(tau)
    if delta is None:
        delta = noise_level(data, settings)
    trace = InversionTrace(delta=float(delta), tau=tau)
    box = prior.box()
    ensemble = init_ensemble(prior, n_members, seed)
    perturbed = perturb_for_ensemble(data.d, data.sigma, n_members, seed)

    while True:
        try:
            w = predict(ensemble, data.angles, settings, n_jobs)
        except (PredictionError, ForwardNonConvergenceError) as exc:
            failed = getattr(exc, "failed_members", [])
            raise PredictionError(failed, trace) from exc
        stats = ensemble_stats(ensemble, w)
        R = residual(data.d, stats.w_mean, data.sigma)
        record = IterationRecord(
            ensemble.n,
            [float(v) for v in stats.theta_mean],
            [float(v) for v in ensemble.spread()],
            R,
            None if data.truth is None else relative_errors(stats.theta_mean, data.truth),
        )
        trace.records.append(record)
        if R <= tau * delta:
            trace.stop_reason = "discrepancy"
        elif ensemble.n >= max_iter:
            trace.stop_reason = "max-iter"
        else:
            record.gamma, record.gamma_index = select_gamma(
                stats.C_ww, data.sigma, data.d, stats.w_mean, gamma0, rho, rule=gamma_rule
            )
            ensemble = update_ensemble(ensemble, w, stats, perturbed, record.gamma, data.sigma, box)
        if callback is not None:
            callback(record)
        if trace.stop_reason is not None:
            return trace
