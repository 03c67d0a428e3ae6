import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from torsion.estimator import TorsionParameterEstimator
from torsion.grid import GridSpec
from torsion.observe import SolverSettings, generate_data
from torsion.plasticity import MaterialParams

TRUTH = MaterialParams(0.3, 0.02, 42.3)
ANGLES = np.array([1.0, 0.5, 0.1, 0.005])
DX = 0.125


@pytest.fixture(scope="module")
def data():
    return generate_data(TRUTH, ANGLES, 1e-3, 0, SolverSettings(GridSpec.from_spacing(dx=DX)))


def small(**kw):
    return TorsionParameterEstimator(sigma=1e-3, n_members=16, max_iter=4, dx=DX, **kw)


def test_params_round_trip():
    est = small(rho=0.6)
    assert est.get_params()["rho"] == 0.6
    assert clone(est).get_params() == est.get_params()


def test_unfitted_predict():
    with pytest.raises(NotFittedError):
        small().predict(ANGLES)


def test_fit_and_predict(data):
    est = small().fit(ANGLES.reshape(-1, 1), data.d, truth=TRUTH)
    assert isinstance(est.params_, MaterialParams)
    assert est.n_iter_ == est.trace_.n <= 4
    assert est.trace_.records[-1].errors is not None
    pred = est.predict(ANGLES)
    assert pred.shape == (4,) and np.all(np.diff(pred[::-1]) > 0)
    assert -np.inf < est.score(ANGLES, data.d) <= 1.0


def test_fit_deterministic(data):
    a = small(random_state=3).fit(ANGLES, data.d)
    b = small(random_state=3).fit(ANGLES, data.d)
    assert a.trace_.to_jsonl() == b.trace_.to_jsonl()
    assert a.trace_.records[-1].errors is None


def test_fit_rejects_multiple_features(data):
    with pytest.raises(ValueError):
        small().fit(np.ones((4, 2)), data.d)
