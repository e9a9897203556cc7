import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from deformslam import DeformableSLAM, EDOdometry, RigidSLAM
from deformslam.simulator import SimConfig, simulate


@pytest.fixture(scope="module")
def data():
    return simulate(SimConfig(n_steps=25, seed=4))


def test_params_and_clone():
    est = DeformableSLAM(window=4, w_f=2.0)
    assert est.get_params()["window"] == 4
    twin = clone(est)
    assert twin.get_params() == est.get_params() and twin is not est
    assert RigidSLAM().set_params(w_ini=10.0).w_ini == 10.0


@pytest.mark.parametrize("cls", [DeformableSLAM, RigidSLAM, EDOdometry])
def test_fit_predict_score(cls, data):
    est = cls()
    with pytest.raises(NotFittedError):
        est.predict()
    X = data.observations.z  # NaN marks unobserved entries
    est.fit(X)
    pos = est.predict(X)
    assert pos.shape == (25, 3)
    assert est.score(X, data.truth) <= 0.0
    with pytest.raises(ValueError):
        est.predict(X[:, :10])


def test_deformable_beats_rigid_through_estimators(data):
    X = data.observations
    d = DeformableSLAM().fit(X)
    r = RigidSLAM().fit(X)
    assert d.score(X, data.truth) > r.score(X, data.truth)
    assert d.coeffs_.shape == (5,)


def test_invalid_input():
    with pytest.raises(ValueError):
        DeformableSLAM().fit(np.zeros((3, 4)))
    with pytest.raises(ValueError):
        DeformableSLAM(init="magic").fit(np.zeros((3, 10, 3)))
