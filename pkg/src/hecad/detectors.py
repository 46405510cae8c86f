"""Tiered reconstruction detectors and Gaussian logPD scoring.

Six models, one per (data kind, HEC layer): dense autoencoders for the
univariate data and LSTM sequence-to-sequence reconstructors for the
multivariate data. Reconstruction errors of normal training windows are
modelled as a multivariate Gaussian; a point is an outlier when its log
density falls below the smallest value seen in training.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular

from . import nn
from .datasets import ANOMALOUS, MV_DIMS, DAY_LEN, UNIVARIATE, Window

log = logging.getLogger(__name__)

LAYERS = ("iot", "edge", "cloud")
FAMILIES = ("autoencoder", "lstm_seq2seq", "bilstm_seq2seq")
ALLOWED = {
    ("autoencoder", "iot"), ("autoencoder", "edge"), ("autoencoder", "cloud"),
    ("lstm_seq2seq", "iot"), ("lstm_seq2seq", "edge"), ("bilstm_seq2seq", "cloud"),
}
LOG_2PI = float(np.log(2.0 * np.pi))
DEFAULT_RIDGE = 1e-6
MAX_RIDGE = 1e-2


class DetectorError(RuntimeError):
    pass


@dataclass(frozen=True)
class DetectorSpec:
    family: str
    layer: str
    net: nn.DenseNetSpec | nn.Seq2SeqSpec
    train: nn.OptimizerConfig
    loss: str = "mse"

    def __post_init__(self):
        if (self.family, self.layer) not in ALLOWED:
            raise ValueError(f"no {self.family} model is defined for the {self.layer} layer")
        if self.family == "autoencoder":
            if not isinstance(self.net, nn.DenseNetSpec):
                raise ValueError("autoencoders need a DenseNetSpec")
            if self.net.input_dim != self.net.output_dim:
                raise ValueError("autoencoder input and output widths must match")
        elif not isinstance(self.net, nn.Seq2SeqSpec):
            raise ValueError("sequence models need a Seq2SeqSpec")
        elif (self.family == "bilstm_seq2seq") != self.net.encoder.bidirectional:
            raise ValueError("only the bilstm family uses a bidirectional encoder")

    @property
    def name(self) -> str:
        return f"{self.family}-{self.layer}"

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "layer": self.layer,
            "net": self.net.to_dict(),
            "train": asdict(self.train),
            "loss": self.loss,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorSpec":
        return cls(d["family"], d["layer"], nn.spec_from_dict(d["net"]),
                   nn.OptimizerConfig(**d["train"]), d.get("loss", "mse"))


AE_HIDDEN = {"iot": (8,), "edge": (48, 16, 48), "cloud": (64, 32, 12, 32, 64)}
LSTM_UNITS = {"iot": 16, "edge": 32, "cloud": 32}


def autoencoder_spec(layer: str, train: nn.OptimizerConfig | None = None,
                     window_len: int = DAY_LEN, dropout_rate: float = 0.0,
                     l2_lambda: float = 0.0) -> DetectorSpec:
    hidden = AE_HIDDEN[layer]
    widths = (window_len, *hidden, window_len)
    acts = ("tanh",) * len(hidden) + ("linear",)
    train = train or nn.OptimizerConfig("sgd", 0.2, epochs=5000, batch_size=16)
    return DetectorSpec("autoencoder", layer, nn.DenseNetSpec(widths, acts, dropout_rate, l2_lambda),
                        train, loss="mae")


SEQ2SEQ_EPOCHS = {"iot": 40, "edge": 150, "cloud": 150}


def seq2seq_spec(layer: str, train: nn.OptimizerConfig | None = None,
                 input_dim: int = MV_DIMS, dropout_rate: float = 0.3,
                 l2_lambda: float = 1e-4) -> DetectorSpec:
    family = "bilstm_seq2seq" if layer == "cloud" else "lstm_seq2seq"
    enc = nn.LstmSpec(input_dim, LSTM_UNITS[layer], layer == "cloud")
    # the device model gets a smaller training budget than the edge and cloud models
    epochs = SEQ2SEQ_EPOCHS[layer]
    train = train or nn.OptimizerConfig("rmsprop", 0.003, epochs=epochs, batch_size=16, clip_norm=1.0)
    return DetectorSpec(family, layer, nn.Seq2SeqSpec(enc, dropout_rate, l2_lambda), train, loss="mse")


def default_specs(kind: str) -> dict[str, DetectorSpec]:
    if kind == UNIVARIATE:
        return {layer: autoencoder_spec(layer) for layer in LAYERS}
    return {layer: seq2seq_spec(layer) for layer in LAYERS}


# --------------------------------------------------------------------------
# Reconstruction and training
# --------------------------------------------------------------------------


def _stack(windows: Sequence[Window] | np.ndarray) -> np.ndarray:
    if isinstance(windows, np.ndarray):
        return windows if windows.ndim == 3 else windows[None]
    return np.stack([w.data for w in windows])


def reconstruct(params: nn.NetParams, spec: DetectorSpec, data: np.ndarray) -> np.ndarray:
    """Eval-mode reconstruction of a (N, T, D) batch."""
    if isinstance(spec.net, nn.DenseNetSpec):
        n, t, d = data.shape
        flat = data.reshape(n, t * d)
        if flat.shape[1] != spec.net.input_dim:
            raise nn.ShapeError(
                f"{spec.name}: window has {flat.shape[1]} values, model expects {spec.net.input_dim}"
            )
        return nn.dense_forward(params, spec.net, flat).reshape(n, t, d)
    return nn.seq2seq_forward(params, spec.net, data)


def _batch_loss_grad(params, spec: DetectorSpec, batch, rng, index):
    if isinstance(spec.net, nn.DenseNetSpec):
        flat = batch.reshape(batch.shape[0], -1)
        return nn.dense_backward(params, spec.net, flat, flat, spec.loss, True, rng, index)
    return nn.seq2seq_backward(params, spec.net, batch, True, rng, index)


@dataclass
class TrainingHistory:
    epoch_loss: list[float] = field(default_factory=list)


def train_detector(
    spec: DetectorSpec, normal_windows: Sequence[Window], seed: int = 0
) -> tuple[nn.NetParams, TrainingHistory]:
    """Fit a detector on normal windows; returns parameters and per-epoch loss."""
    if len(normal_windows) == 0:
        raise DetectorError("cannot train on an empty window set")
    if any(w.label == ANOMALOUS for w in normal_windows):
        raise DetectorError("training windows must all be normal")
    data = _stack(normal_windows)
    rng = np.random.default_rng(seed)
    params = nn.init_params(spec.net, seed)
    cfg = spec.train
    state = None
    history = TrainingHistory()
    n = data.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            try:
                grads, value = _batch_loss_grad(params, spec, data[idx], rng, b)
            except nn.NumericalError as exc:
                raise DetectorError(f"{spec.name} diverged in epoch {epoch}: {exc}") from exc
            arrays, state = nn.optimize_step(params.arrays, grads, cfg, state)
            params = nn.NetParams(arrays, seed)
            total += value * len(idx)
        history.epoch_loss.append(total / n)
        if epoch % 10 == 0:
            log.debug("%s epoch %d loss %.5f", spec.name, epoch, history.epoch_loss[-1])
    return params, history


# --------------------------------------------------------------------------
# Gaussian error model
# --------------------------------------------------------------------------


@dataclass
class GaussianErrorModel:
    mu: np.ndarray
    sigma: np.ndarray
    threshold_logpd: float
    ridge: float = DEFAULT_RIDGE

    def __post_init__(self):
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=np.float64))
        self.sigma = np.atleast_2d(np.asarray(self.sigma, dtype=np.float64))
        self._chol = np.linalg.cholesky(self.sigma)
        self._logdet = 2.0 * float(np.sum(np.log(np.diag(self._chol))))

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    def logpd_points(self, errors: np.ndarray) -> np.ndarray:
        """logPD of each row of an (N, D) error array."""
        e = np.asarray(errors, dtype=np.float64).reshape(-1, self.dim)
        z = solve_triangular(self._chol, (e - self.mu).T, lower=True)
        maha = np.sum(z * z, axis=0)
        return -0.5 * (self.dim * LOG_2PI + self._logdet + maha)

    def to_dict(self) -> dict:
        return {
            "mu": self.mu.tolist(),
            "sigma": self.sigma.tolist(),
            "threshold_logpd": self.threshold_logpd,
            "ridge": self.ridge,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianErrorModel":
        return cls(d["mu"], d["sigma"], float(d["threshold_logpd"]), float(d["ridge"]))


def logpd(model: GaussianErrorModel, error_vector) -> float:
    """-1/2 [d ln 2pi + ln det S + (e - mu)^T S^-1 (e - mu)]"""
    e = np.atleast_1d(np.asarray(error_vector, dtype=np.float64))
    if e.shape != (model.dim,):
        raise nn.ShapeError(f"error vector has shape {e.shape}, model expects ({model.dim},)")
    return float(model.logpd_points(e[None])[0])


def fit_gaussian(errors: np.ndarray, ridge: float = DEFAULT_RIDGE) -> GaussianErrorModel:
    """Fit mu and the population covariance of (N, D) errors.

    ``ridge`` is added to the diagonal and escalated tenfold (up to 1e-2)
    while the covariance is not positive definite. The threshold is the
    minimum training logPD.
    """
    e = np.asarray(errors, dtype=np.float64)
    if e.ndim == 1:
        e = e[:, None]
    if e.shape[0] == 0:
        raise DetectorError("no error vectors to fit")
    if not np.all(np.isfinite(e)):
        raise DetectorError("reconstruction errors contain non-finite values")
    mu = e.mean(axis=0)
    centered = e - mu
    cov = centered.T @ centered / e.shape[0]
    r = ridge
    while True:
        sigma = cov + r * np.eye(e.shape[1])
        try:
            model = GaussianErrorModel(mu, sigma, 0.0, r)
            break
        except np.linalg.LinAlgError:
            if r >= MAX_RIDGE:
                raise DetectorError("error covariance stays singular after ridge escalation")
            r = min(r * 10 if r > 0 else DEFAULT_RIDGE, MAX_RIDGE)
            log.warning("covariance not positive definite, ridge raised to %g", r)
    model.threshold_logpd = float(np.min(model.logpd_points(e)))
    return model


def reconstruction_errors(params, spec: DetectorSpec, windows) -> np.ndarray:
    """Per-point error vectors ``x_hat - x`` of shape (N, T, D)."""
    data = _stack(windows)
    return reconstruct(params, spec, data) - data


def fit_error_model(params, spec: DetectorSpec, normal_windows,
                    ridge: float = DEFAULT_RIDGE) -> GaussianErrorModel:
    errs = reconstruction_errors(params, spec, normal_windows)
    return fit_gaussian(errs.reshape(-1, errs.shape[-1]), ridge)


# --------------------------------------------------------------------------
# Verdicts
# --------------------------------------------------------------------------


@dataclass
class Detection:
    is_anomaly: bool
    confident: bool
    min_logpd: float
    anomalous_point_fraction: float
    per_point_logpd: np.ndarray
    confident_anomaly: bool = False
    confident_normal: bool = False


@dataclass(frozen=True)
class ConfidenceRule:
    threshold_multiplier: float = 2.0
    point_fraction: float = 0.05


def confidence_bound(threshold_logpd: float, multiplier: float) -> float:
    # Equals multiplier * threshold for the usual negative threshold, and
    # stays below the threshold if the fitted density ever peaks above 1.
    return threshold_logpd - (multiplier - 1.0) * abs(threshold_logpd)


def confidence(detection: Detection, threshold_logpd: float,
               rule: ConfidenceRule = ConfidenceRule()) -> bool:
    """Whether a verdict is strong enough to stop escalating."""
    return _confidence_flags(detection.min_logpd, detection.anomalous_point_fraction,
                             threshold_logpd, rule)[0]


def _confidence_flags(min_lp, frac, threshold, rule):
    conf_anom = bool(min_lp < confidence_bound(threshold, rule.threshold_multiplier)
                     or frac > rule.point_fraction)
    conf_norm = bool(frac == 0.0)
    return conf_anom or conf_norm, conf_anom, conf_norm


def detection_from_logpd(point_logpd: np.ndarray, threshold_logpd: float,
                         rule: ConfidenceRule = ConfidenceRule()) -> Detection:
    point_logpd = np.asarray(point_logpd, dtype=np.float64)
    n_bad = int(np.sum(point_logpd < threshold_logpd))
    frac = n_bad / point_logpd.size
    min_lp = float(np.min(point_logpd))
    conf, ca, cn = _confidence_flags(min_lp, frac, threshold_logpd, rule)
    return Detection(n_bad > 0, conf, min_lp, frac, point_logpd, ca, cn)


@dataclass
class TrainedDetector:
    spec: DetectorSpec
    params: nn.NetParams
    error_model: GaussianErrorModel
    rule: ConfidenceRule = field(default_factory=ConfidenceRule)

    @property
    def layer(self) -> str:
        return self.spec.layer

    def point_logpd(self, windows) -> np.ndarray:
        """(N, T) per-point logPD."""
        errs = reconstruction_errors(self.params, self.spec, windows)
        n, t, d = errs.shape
        if d != self.error_model.dim:
            raise nn.ShapeError(f"window has {d} channels, error model expects {self.error_model.dim}")
        return self.error_model.logpd_points(errs.reshape(-1, d)).reshape(n, t)

    def detect(self, window: Window | np.ndarray) -> Detection:
        data = window.data if isinstance(window, Window) else np.asarray(window, dtype=np.float64)
        return self.detect_many(data[None])[0]

    def detect_many(self, windows) -> list[Detection]:
        lp = self.point_logpd(windows)
        return [detection_from_logpd(row, self.error_model.threshold_logpd, self.rule) for row in lp]

    def save(self, path: str | Path) -> None:
        nn.save_checkpoint(path, self.spec.net, self.params, {
            "detector": self.spec.to_dict(),
            "error_model": self.error_model.to_dict(),
            "confidence": asdict(self.rule),
        })

    @classmethod
    def load(cls, path: str | Path) -> "TrainedDetector":
        _, params, doc = nn.load_checkpoint(path)
        if "detector" not in doc or "error_model" not in doc:
            raise DetectorError(f"{path} is a bare checkpoint, not a detector bundle")
        return cls(DetectorSpec.from_dict(doc["detector"]), params,
                   GaussianErrorModel.from_dict(doc["error_model"]),
                   ConfidenceRule(**doc.get("confidence", {})))


def detect(params, spec: DetectorSpec, error_model: GaussianErrorModel, window,
           rule: ConfidenceRule = ConfidenceRule()) -> Detection:
    return TrainedDetector(spec, params, error_model, rule).detect(window)


def build_detector(spec: DetectorSpec, normal_windows, seed: int = 0,
                   ridge: float = DEFAULT_RIDGE,
                   rule: ConfidenceRule = ConfidenceRule()) -> tuple[TrainedDetector, TrainingHistory]:
    params, history = train_detector(spec, normal_windows, seed)
    model = fit_error_model(params, spec, normal_windows, ridge)
    return TrainedDetector(spec, params, model, rule), history


def accuracy(detector: TrainedDetector, windows: Sequence[Window]) -> float:
    """Per-window accuracy in percent."""
    verdicts = np.array([d.is_anomaly for d in detector.detect_many(windows)])
    truth = np.array([w.label == ANOMALOUS for w in windows])
    return 100.0 * float(np.mean(verdicts == truth))


def summary_json(detector: TrainedDetector) -> str:
    return json.dumps({"name": detector.spec.name, "params": detector.params.size,
                       "threshold_logpd": detector.error_model.threshold_logpd})
