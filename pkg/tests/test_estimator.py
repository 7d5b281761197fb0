import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from conftest import icosphere
from octsdf import LaplacianRefiner, NeuralSDFMapper
from octsdf.mesh import TriangleMesh
from octsdf.scenes import CorrugatedPlane, SyntheticScene, cone_directions, scan_directions


def plane_scan(n=1500):
    scene = SyntheticScene([CorrugatedPlane(0.0, 0.0, 1.0, (1.0, 1.0))], sensors=[[0.0, 0.0, 1.0]], noise=0.0)
    dirs = cone_directions(np.random.default_rng(0), n, [0, 0, -1], 35)
    return scan_directions(scene, [0.0, 0.0, 1.0], dirs)


def small_mapper(**kw):
    params = dict(levels=2, voxel_size=0.1, feature_dim=4, width=16, steps=5, batch_size=128)
    params.update(kw)
    return NeuralSDFMapper(**params)


def test_params_round_trip():
    m = small_mapper(lambda_hessian=0.0)
    p = m.get_params()
    assert p["lambda_hessian"] == 0.0 and p["hessian_scale"] == 1e-11
    c = clone(m)
    assert c.get_params() == p
    c.set_params(steps=7)
    assert c.steps == 7 and m.steps == 5


def test_train_config_mirrors_params():
    cfg = small_mapper(truncation=0.2, random_state=4).train_config()
    assert cfg.levels == 2 and cfg.seed == 4
    assert cfg.sampling.truncation == 0.2
    assert cfg.loss.sigma_occ == pytest.approx(0.05)


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        small_mapper().predict(np.zeros((2, 3)))


def test_fit_predict_on_array():
    cloud = plane_scan()
    m = small_mapper().fit(cloud.positions, sensor_origins=[0.0, 0.0, 1.0])
    assert m.n_features_in_ == 3 and m.state_.step == 5
    out = m.predict(np.array([[0.0, 0.0, 0.0], [0.1, 0.1, 0.0]]))
    assert out.shape == (2,) and np.all(np.isfinite(out))


def test_fit_matches_pointcloud_input():
    cloud = plane_scan()
    a = small_mapper().fit(cloud)
    b = small_mapper().fit(cloud.positions, sensor_origins=cloud.origins)
    q = cloud.positions[:50]
    np.testing.assert_array_equal(a.predict(q), b.predict(q))


def test_fit_rejects_bad_shape():
    with pytest.raises(ValueError):
        small_mapper().fit(np.zeros((10, 2)))
    with pytest.raises(ValueError):
        small_mapper().fit(np.full((10, 3), np.nan))


def test_refiner_fit_transform():
    v, f = icosphere(2)
    noisy = TriangleMesh(v + np.random.default_rng(0).normal(0, 0.01, v.shape), f)
    r = LaplacianRefiner(eta=0.5, max_iters=4, plateau_tol=-np.inf)
    out = r.fit_transform(noisy)
    assert r.report_.iterations == 4
    assert r.report_.quadratic_form[-1] < r.report_.quadratic_form[0]
    np.testing.assert_array_equal(out.faces, noisy.faces)
    assert clone(r).get_params()["eta"] == 0.5


def test_refiner_checks():
    with pytest.raises(NotFittedError):
        LaplacianRefiner().transform(None)
    with pytest.raises(TypeError):
        LaplacianRefiner().fit().transform(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        LaplacianRefiner(eta=1.5).fit()
