import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from partflow.camera import Box
from partflow.estimator import FlowReconstructor
from partflow.synth import AnalyticFlow, generate

BOX = Box.from_extent((40.0, 30.0, 20.0))


@pytest.fixture(scope="module")
def scene():
    return generate(AnalyticFlow.uniform((0.5, 0.0, -0.3)), 0.004, (96, 72), BOX, seed=4)


def test_params_round_trip_and_clone():
    est = FlowReconstructor(lam=0.1, sparsity="l1")
    assert est.get_params()["lam"] == 0.1
    c = clone(est)
    assert c.get_params() == est.get_params()
    est.set_params(levels=3)
    assert est.config().levels == 3


def test_fit_predict(scene):
    est = FlowReconstructor(levels=3, grid_subsample=5.0, max_iters=25)
    assert est.fit(scene.images, scene.cameras, (40.0, 30.0, 20.0)) is est
    pts = scene.particles_t0.positions[:20]
    np.testing.assert_allclose(est.predict(pts), scene.flow(pts), atol=0.2)
    assert est.n_cameras_ == 4 and len(est.particles_) > 0
    assert est.predict(np.zeros((0, 3))).shape == (0, 3)
    with pytest.raises(ValueError):
        est.predict(np.zeros((2, 2)))


def test_sequential_flag(scene):
    est = FlowReconstructor(levels=2, grid_subsample=5.0, max_iters=10, sequential=True)
    est.fit(scene.images, scene.cameras, BOX)
    assert len(est.report_.levels) == 4


def test_not_fitted_and_bad_input(scene):
    with pytest.raises(NotFittedError):
        FlowReconstructor().predict(np.zeros((1, 3)))
    with pytest.raises(ValueError):
        FlowReconstructor().fit(scene.images[0], scene.cameras, BOX)
    bad = scene.images.copy()
    bad[1, 2, 3, 4] = np.inf
    with pytest.raises(ValueError):
        FlowReconstructor().fit(bad, scene.cameras, BOX)
