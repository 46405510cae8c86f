import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hecad import detectors as det
from hecad import nn
from hecad.datasets import SyntheticConfig, Window, synthetic_bundle


def gaussian_oracle(mu, sigma, e):
    d = len(mu)
    diff = e - mu
    return float(-0.5 * (d * np.log(2 * np.pi) + np.log(np.linalg.det(sigma))
                         + diff @ np.linalg.inv(sigma) @ diff))


def model_from(mu, sigma, threshold=-10.0):
    return det.GaussianErrorModel(np.asarray(mu, float), np.asarray(sigma, float), threshold)


def test_logpd_closed_forms():
    assert det.logpd(model_from([0.0], [[1.0]]), [0.0]) == pytest.approx(-0.918939, abs=1e-6)
    assert det.logpd(model_from([1.0, 2.0], np.eye(2)), [1.0, 2.0]) == pytest.approx(-np.log(2 * np.pi), abs=1e-12)


@pytest.mark.parametrize("d", [1, 2, 3])
def test_logpd_matches_dense_oracle(d):
    rng = np.random.default_rng(d)
    for _ in range(100):
        a = rng.normal(size=(d, d))
        sigma = a @ a.T + 0.1 * np.eye(d)
        mu, e = rng.normal(size=d), rng.normal(scale=2, size=d)
        assert det.logpd(model_from(mu, sigma), e) == pytest.approx(gaussian_oracle(mu, sigma, e), abs=1e-10)


def test_logpd_dimension_mismatch():
    with pytest.raises(nn.ShapeError):
        det.logpd(model_from([0.0, 0.0], np.eye(2)), [1.0])


def test_fit_gaussian_population_closed_form():
    m = det.fit_gaussian(np.array([[-1.0], [1.0]]), ridge=0.0)
    assert m.mu[0] == 0.0 and m.sigma[0, 0] == 1.0
    assert det.logpd(m, [0.0]) == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-12)
    assert m.threshold_logpd == pytest.approx(-0.5 * np.log(2 * np.pi) - 0.5, abs=1e-12)


def test_fit_gaussian_monte_carlo():
    e = np.random.default_rng(0).standard_normal((10_000, 2))
    m = det.fit_gaussian(e)
    assert np.all(np.abs(m.mu) < 0.05)
    assert np.all(np.abs(m.sigma - np.eye(2)) < 0.1)


def test_fit_gaussian_threshold_is_training_minimum():
    e = np.random.default_rng(1).normal(size=(500, 3))
    m = det.fit_gaussian(e)
    lp = m.logpd_points(e)
    assert np.all(lp >= m.threshold_logpd)
    assert m.threshold_logpd == lp.min()


def test_degenerate_errors_trigger_ridge(caplog):
    m = det.fit_gaussian(np.zeros((50, 2)), ridge=0.0)
    assert m.ridge > 0
    assert "ridge raised" in caplog.text


def test_non_finite_errors_rejected():
    with pytest.raises(det.DetectorError, match="non-finite"):
        det.fit_gaussian(np.full((5, 1), np.nan))


@settings(max_examples=60, deadline=None)
@given(direction=arrays(np.float64, 3, elements=st.floats(-1, 1)).filter(lambda v: np.linalg.norm(v) > 1e-3),
       seed=st.integers(0, 1000))
def test_logpd_decreases_along_rays(direction, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(3, 3))
    m = model_from(rng.normal(size=3), a @ a.T + 0.2 * np.eye(3))
    steps = np.array([0.0, 0.5, 1.0, 2.0, 4.0])
    values = m.logpd_points(m.mu + steps[:, None] * direction)
    assert np.all(np.diff(values) < 0)


@settings(max_examples=30, deadline=None)
@given(scale=st.floats(0.1, 10), seed=st.integers(0, 1000))
def test_rescaling_preserves_logpd_order(scale, seed):
    e = np.random.default_rng(seed).normal(size=(200, 2))
    a = det.fit_gaussian(e, ridge=0.0).logpd_points(e)
    b = det.fit_gaussian(scale * e, ridge=0.0).logpd_points(scale * e)
    np.testing.assert_array_equal(np.argsort(a, kind="stable"), np.argsort(b, kind="stable"))


def test_confidence_rule_examples():
    rule = det.ConfidenceRule()
    # one point far below the bound
    lp = np.full(96, -1.0)
    lp[3] = -30.0
    d = det.detection_from_logpd(lp, -10.0, rule)
    assert d.is_anomaly and d.confident and d.confident_anomaly
    # 10% of points below threshold
    lp = np.full(100, -1.0)
    lp[:10] = -11.0
    d = det.detection_from_logpd(lp, -10.0, rule)
    assert d.anomalous_point_fraction == 0.1 and d.confident_anomaly
    # nothing below threshold
    d = det.detection_from_logpd(np.full(10, -1.0), -10.0, rule)
    assert not d.is_anomaly and d.confident and d.confident_normal
    # -17 < 2 * -8
    lp = np.full(100, -1.0)
    lp[0] = -17.0
    assert det.detection_from_logpd(lp, -8.0).confident
    # 3% below, deepest -12 with threshold -8: not confident
    lp = np.full(100, -1.0)
    lp[:3] = -12.0
    d = det.detection_from_logpd(lp, -8.0)
    assert d.is_anomaly and not d.confident
    assert not det.confidence(d, -8.0)


def test_confidence_bound_for_positive_threshold():
    assert det.confidence_bound(-8.0, 2.0) == -16.0
    assert det.confidence_bound(3.0, 2.0) < 3.0


@settings(max_examples=200, deadline=None)
@given(lp=arrays(np.float64, st.integers(1, 50), elements=st.floats(-100, 5)),
       threshold=st.floats(-50, 2))
def test_confidence_flags_are_consistent(lp, threshold):
    d = det.detection_from_logpd(lp, threshold)
    assert d.anomalous_point_fraction == np.mean(lp < threshold)
    assert d.is_anomaly == (d.anomalous_point_fraction > 0)
    if d.confident_anomaly:
        assert d.is_anomaly
    if d.confident_normal:
        assert not d.is_anomaly
    assert d.confident == (d.confident_anomaly or d.confident_normal)


def test_six_models_and_complexity_order():
    for family_specs in (det.default_specs("univariate"), det.default_specs("multivariate")):
        sizes = [nn.init_params(family_specs[layer].net, 0).size for layer in det.LAYERS]
        assert sizes[0] < sizes[1] < sizes[2]
    assert det.default_specs("multivariate")["cloud"].family == "bilstm_seq2seq"
    with pytest.raises(ValueError):
        det.DetectorSpec("bilstm_seq2seq", "iot", det.seq2seq_spec("cloud").net, nn.OptimizerConfig())


def _windows(data):
    return [Window(i, x, 0, i) for i, x in enumerate(data)]


def _small_ae(epochs=200, layer="iot"):
    return det.autoencoder_spec(layer, nn.OptimizerConfig("sgd", 0.1, epochs=epochs, batch_size=8),
                                window_len=12)


def test_training_reduces_error_on_constant_windows():
    windows = _windows(np.full((16, 12, 1), 0.7))
    spec = _small_ae(300)
    params0 = nn.init_params(spec.net, 0)
    before = np.abs(det.reconstruction_errors(params0, spec, windows)).mean()
    params, hist = det.train_detector(spec, windows, seed=0)
    after = np.abs(det.reconstruction_errors(params, spec, windows)).mean()
    assert after < 0.1 * before
    assert hist.epoch_loss[-1] <= hist.epoch_loss[0]


def test_training_is_reproducible():
    windows = _windows(np.random.default_rng(0).normal(size=(10, 12, 1)))
    a, _ = det.train_detector(_small_ae(20), windows, seed=3)
    b, _ = det.train_detector(_small_ae(20), windows, seed=3)
    assert all(np.array_equal(x, y) for x, y in zip(a.arrays, b.arrays))


def test_training_rejects_bad_input():
    with pytest.raises(det.DetectorError, match="empty"):
        det.train_detector(_small_ae(1), [])
    bad = [Window(0, np.zeros((12, 1)), 1, 0)]
    with pytest.raises(det.DetectorError, match="normal"):
        det.train_detector(_small_ae(1), bad)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported():
    windows = _windows(np.random.default_rng(0).normal(size=(8, 12, 1)))
    spec = det.autoencoder_spec("iot", nn.OptimizerConfig("sgd", 1e3, epochs=200, batch_size=8), window_len=12)
    spec = dataclasses.replace(spec, loss="mse")
    with pytest.raises(det.DetectorError, match="diverged"):
        det.train_detector(spec, windows)


def test_bigger_model_fits_at_least_as_well():
    bundle = synthetic_bundle(SyntheticConfig(kind="univariate", weeks=40, seed=0))
    train = nn.OptimizerConfig("sgd", 0.2, epochs=300, batch_size=16)
    _, small = det.train_detector(det.autoencoder_spec("iot", train), bundle.ad_train)
    _, big = det.train_detector(det.autoencoder_spec("cloud", train), bundle.ad_train)
    assert big.epoch_loss[-1] <= small.epoch_loss[-1]


@pytest.fixture(scope="module")
def sine_detector():
    t = np.linspace(0, 2 * np.pi, 12)
    rng = np.random.default_rng(0)
    data = np.sin(t[None, :] + rng.uniform(0, 0.3, size=(40, 1)))[..., None]
    data += 0.01 * rng.standard_normal(data.shape)
    windows = _windows(data)
    d, _ = det.build_detector(_small_ae(400), windows, seed=0)
    return d, windows


def test_detector_verdicts(sine_detector, tmp_path):
    d, windows = sine_detector
    assert not any(x.is_anomaly for x in d.detect_many(windows))
    typical = np.mean([w.data for w in windows], axis=0)
    assert not d.detect(typical).is_anomaly
    spike = windows[0].data.copy()
    spike[5] += 5.0
    out = d.detect(spike)
    assert out.is_anomaly and out.confident_anomaly
    assert out.per_point_logpd.shape == (12,)
    first = d.detect(spike)
    assert first.min_logpd == out.min_logpd
    with pytest.raises(nn.ShapeError):
        d.detect(np.zeros((12, 2)))


def test_detector_bundle_round_trip(sine_detector, tmp_path):
    d, windows = sine_detector
    path = tmp_path / "iot.json"
    d.save(path)
    back = det.TrainedDetector.load(path)
    assert back.spec == d.spec
    np.testing.assert_array_equal(back.point_logpd(windows), d.point_logpd(windows))
    assert back.error_model.threshold_logpd == d.error_model.threshold_logpd


def test_bare_checkpoint_is_not_a_detector(tmp_path):
    spec = _small_ae(1)
    nn.save_checkpoint(tmp_path / "p.json", spec.net, nn.init_params(spec.net, 0))
    with pytest.raises(det.DetectorError, match="bare checkpoint"):
        det.TrainedDetector.load(tmp_path / "p.json")


def test_seq2seq_detector_runs():
    rng = np.random.default_rng(0)
    data = rng.normal(size=(6, 10, 3))
    spec = det.seq2seq_spec("iot", nn.OptimizerConfig("rmsprop", 0.01, epochs=3, batch_size=3), input_dim=3)
    d, hist = det.build_detector(spec, _windows(data))
    assert len(hist.epoch_loss) == 3
    assert d.error_model.dim == 3
    out = d.detect(data[0])
    assert out.per_point_logpd.shape == (10,)


def test_accuracy_is_per_window(sine_detector):
    d, windows = sine_detector
    spike = windows[0].data.copy()
    spike[5] += 5.0
    mixed = windows[:3] + [Window(99, spike, 1, 99)]
    assert det.accuracy(d, mixed) == 100.0
    mislabeled = [Window(0, windows[0].data, 1, 0)]
    assert det.accuracy(d, mislabeled) == 0.0


def test_seq2seq_default_training_budget():
    specs = {layer: det.seq2seq_spec(layer) for layer in det.LAYERS}
    assert [specs[layer].train.epochs for layer in det.LAYERS] == [40, 150, 150]
    assert all(s.train.kind == "rmsprop" and s.train.clip_norm == 1.0 for s in specs.values())
    assert specs["cloud"].family == "bilstm_seq2seq"
