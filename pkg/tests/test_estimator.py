import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from gatedunipose.codec import encode_batch
from gatedunipose.data import SyntheticSpec, generate_synthetic, stack_samples
from gatedunipose.estimator import GatedUniPoseRegressor, HeatmapEncoder
from gatedunipose.exceptions import ShapeError


def synthetic(samples, start=0):
    spec = SyntheticSpec(joints=4, image_size=(64, 64), samples=samples, seed=0)
    return stack_samples(generate_synthetic(spec, start=start))


def test_get_params_and_clone():
    est = GatedUniPoseRegressor(steps=5, learning_rate=2e-3, use_glace=False)
    params = est.get_params()
    assert params["steps"] == 5 and params["use_glace"] is False
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(batch_size=8)
    assert est.batch_size == 8


def test_unfitted_predict_raises():
    with pytest.raises(NotFittedError):
        GatedUniPoseRegressor().predict(np.zeros((1, 3, 64, 64)))


def test_fit_predict_score_on_synthetic_data():
    X, y = synthetic(32)
    est = GatedUniPoseRegressor(steps=12, batch_size=8, learning_rate=3e-3, random_state=1).fit(X, y)
    assert est.n_joints_ == 4 and est.input_size_ == (64, 64)
    assert len(est.loss_curve_) == 12 and est.loss_curve_[-1] < est.loss_curve_[0]
    pred = est.predict(X[:3])
    assert pred.shape == (3, 4, 3)
    assert est.predict_heatmaps(X[:2]).shape == (2, 4, 16, 16)
    assert 0.0 <= est.score(X[:8], y[:8]) <= 1.0


def test_fit_is_deterministic_for_a_random_state():
    X, y = synthetic(8)
    a = GatedUniPoseRegressor(steps=3, batch_size=4, random_state=2).fit(X, y)
    b = GatedUniPoseRegressor(steps=3, batch_size=4, random_state=2).fit(X, y)
    assert a.loss_curve_ == b.loss_curve_


def test_input_validation():
    X, y = synthetic(4)
    est = GatedUniPoseRegressor(steps=1, batch_size=4)
    with pytest.raises(ShapeError):
        est.fit(X[:, :2], y)
    with pytest.raises(ShapeError):
        est.fit(X, y[:3])
    with pytest.raises(ValueError):
        bad = X.copy()
        bad[0, 0, 0, 0] = np.nan
        est.fit(bad, y)
    est.fit(X, y[..., :2])  # [N, J, 2] is accepted as fully visible
    with pytest.raises(ShapeError):
        est.predict(np.zeros((1, 3, 32, 32)))


def test_heatmap_encoder_round_trip():
    _, y = synthetic(24)
    enc = HeatmapEncoder(heatmap_size=(16, 16), stride=4).fit(y)
    H = enc.transform(y)
    assert H.shape == (24, 4, 16, 16)
    assert np.array_equal(H, encode_batch(y, (16, 16), 2.0, 4))
    back = enc.inverse_transform(H)
    cells = (y[..., :2] + 0.5) / 4 - 0.5
    interior = np.all((cells >= 3) & (cells <= 12), axis=-1)  # the bound holds 3 cells from borders
    err = np.hypot(*(back[..., :2] - y[..., :2])[interior].T)
    assert interior.sum() >= 10 and err.max() <= 0.5
    assert np.array_equal(enc.fit_transform(y), H)


def test_heatmap_encoder_checks_joint_count():
    _, y = synthetic(2)
    enc = HeatmapEncoder(heatmap_size=(16, 16)).fit(y)
    with pytest.raises(ShapeError):
        enc.transform(y[:, :3])
    with pytest.raises(ShapeError):
        enc.inverse_transform(np.zeros((1, 3, 16, 16)))
    with pytest.raises(NotFittedError):
        HeatmapEncoder().transform(y)
