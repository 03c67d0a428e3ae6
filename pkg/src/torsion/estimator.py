"""Scikit-learn style wrapper: fit material parameters to (angle, torque) pairs."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted, check_X_y, check_array

from .grid import GridSpec
from .irekm import PriorSpec, run_irekm
from .observe import ObservationSet, SolverSettings, observe
from .plasticity import MaterialParams

__all__ = ["TorsionParameterEstimator"]


def _angles(X) -> np.ndarray:
    X = check_array(X, ensure_2d=False, dtype=float)
    if X.ndim == 2:
        if X.shape[1] != 1:
            raise ValueError(f"expected a single feature (the twist angle), got {X.shape[1]}")
        X = X[:, 0]
    return X


class TorsionParameterEstimator(RegressorMixin, BaseEstimator):
    """Recover ``(kappa, xi0_sq, G)`` from torques measured at several twist angles.

    ``fit`` runs the ensemble Kalman inversion; ``predict`` evaluates the
    torque of the fitted material at new angles.

    Parameters
    ----------
    sigma : float
        Measurement noise standard deviation.
    kappa_range, xi0_sq_range, G_range : tuple of float
        Uniform prior supports.
    n_members : int
        Ensemble size.
    rho : float
        Residual-reduction factor of the regularisation rule.
    gamma0 : float
        Initial regularisation weight.
    tau : float or None
        Discrepancy factor; ``1 / rho`` when None.
    max_iter : int
        Cap on Kalman updates.
    gamma_rule : {"scaled", "literal"}
        Regularisation-weight test, see :func:`torsion.irekm.select_gamma`.
    dx : float
        Mesh size of the forward solver on the unit square.
    random_state : int
        Seed for the prior draw and the data perturbations.
    n_jobs : int
        Worker processes for the ensemble forward solves.

    Attributes
    ----------
    params_ : MaterialParams
        Ensemble mean at the stopping iteration.
    trace_ : InversionTrace
        Per-iteration history.
    """

    def __init__(
        self,
        sigma=1e-4,
        kappa_range=(0.2, 0.9),
        xi0_sq_range=(0.0, 0.15),
        G_range=(42.0, 43.0),
        n_members=200,
        rho=0.7,
        gamma0=1.0,
        tau=None,
        max_iter=100,
        gamma_rule="scaled",
        dx=0.02,
        random_state=0,
        n_jobs=1,
    ):
        self.sigma = sigma
        self.kappa_range = kappa_range
        self.xi0_sq_range = xi0_sq_range
        self.G_range = G_range
        self.n_members = n_members
        self.rho = rho
        self.gamma0 = gamma0
        self.tau = tau
        self.max_iter = max_iter
        self.gamma_rule = gamma_rule
        self.dx = dx
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _settings(self) -> SolverSettings:
        return SolverSettings(GridSpec.from_spacing(dx=self.dx))

    def fit(self, X, y, truth: MaterialParams | None = None):
        """Fit to torques ``y`` measured at angles ``X``.

        ``truth`` (synthetic studies only) switches on relative-error
        tracking and the exact noise level.
        """
        X, y = check_X_y(np.reshape(_angles(X), (-1, 1)), y, y_numeric=True)
        data = ObservationSet(X[:, 0], y, float(self.sigma), self.random_state, truth)
        prior = PriorSpec(tuple(self.kappa_range), tuple(self.xi0_sq_range), tuple(self.G_range))
        self.trace_ = run_irekm(
            prior,
            data,
            rho=self.rho,
            gamma0=self.gamma0,
            tau=self.tau,
            max_iter=self.max_iter,
            n_members=self.n_members,
            seed=self.random_state,
            settings=self._settings(),
            n_jobs=self.n_jobs,
            gamma_rule=self.gamma_rule,
        )
        self.params_ = self.trace_.theta_mean
        self.n_iter_ = self.trace_.n
        self.n_features_in_ = 1
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        return observe(self.params_, _angles(X), self._settings())
