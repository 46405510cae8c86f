"""Small numpy neural-network kernel.

Dense feed-forward nets and LSTM encoder/decoder pairs with exact analytic
gradients, inverted dropout, L2 kernel regularization and two optimizers
(SGD, RMSProp). Everything runs in float64.

Parameters are stored as a flat, ordered list of arrays. For a dense net the
order is ``[W0, b0, W1, b1, ...]`` with ``W_i`` of shape ``(fan_in, fan_out)``.
For a sequence-to-sequence net the order is::

    [enc_W, enc_U, enc_b,                  # forward encoder
     (enc_bw_W, enc_bw_U, enc_bw_b,)       # backward encoder, bidirectional only
     dec_W, dec_U, dec_b,                  # decoder
     proj_W, proj_b]                       # linear output projection

LSTM gate blocks are ordered (input, forget, candidate, output).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

ACTIVATIONS = ("tanh", "relu", "linear")
CHECKPOINT_FORMAT = "hecad-checkpoint"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Raised when an array does not match the shape a layer expects."""


class NumericalError(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


# --------------------------------------------------------------------------
# Specs and parameter containers
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DenseNetSpec:
    layer_widths: tuple[int, ...]
    activations: tuple[str, ...]
    dropout_rate: float = 0.0
    l2_lambda: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        object.__setattr__(self, "activations", tuple(self.activations))
        if len(self.layer_widths) < 2:
            raise ValueError("a dense net needs at least an input and an output layer")
        if len(self.activations) != len(self.layer_widths) - 1:
            raise ValueError(
                f"expected {len(self.layer_widths) - 1} activations, got {len(self.activations)}"
            )
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be non-negative")

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def output_dim(self) -> int:
        return self.layer_widths[-1]

    def param_shapes(self) -> list[tuple[int, ...]]:
        shapes: list[tuple[int, ...]] = []
        for fan_in, fan_out in zip(self.layer_widths[:-1], self.layer_widths[1:]):
            shapes += [(fan_in, fan_out), (fan_out,)]
        return shapes

    def to_dict(self) -> dict:
        return {"type": "dense", **asdict(self)}


@dataclass(frozen=True)
class LstmSpec:
    input_dim: int
    hidden_units: int
    bidirectional: bool = False

    def __post_init__(self):
        if self.hidden_units < 1 or self.input_dim < 1:
            raise ValueError("LSTM needs input_dim >= 1 and hidden_units >= 1")

    @property
    def state_dim(self) -> int:
        return self.hidden_units * (2 if self.bidirectional else 1)


@dataclass(frozen=True)
class Seq2SeqSpec:
    """LSTM encoder + LSTM decoder + linear projection back to ``input_dim``.

    The decoder width equals the encoder state width, so a bidirectional
    encoder of ``h`` units feeds a decoder of ``2h`` units.
    """

    encoder: LstmSpec
    dropout_rate: float = 0.0
    l2_lambda: float = 0.0

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            object.__setattr__(self, "encoder", LstmSpec(**self.encoder))
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be non-negative")

    @property
    def input_dim(self) -> int:
        return self.encoder.input_dim

    @property
    def output_dim(self) -> int:
        return self.encoder.input_dim

    @property
    def decoder(self) -> LstmSpec:
        return LstmSpec(self.encoder.input_dim, self.encoder.state_dim, False)

    def param_shapes(self) -> list[tuple[int, ...]]:
        d, h = self.encoder.input_dim, self.encoder.hidden_units
        hd = self.decoder.hidden_units
        shapes = [(d, 4 * h), (h, 4 * h), (4 * h,)]
        if self.encoder.bidirectional:
            shapes += [(d, 4 * h), (h, 4 * h), (4 * h,)]
        shapes += [(d, 4 * hd), (hd, 4 * hd), (4 * hd,), (hd, d), (d,)]
        return shapes

    def to_dict(self) -> dict:
        return {"type": "seq2seq", **asdict(self)}


def spec_from_dict(d: dict) -> DenseNetSpec | Seq2SeqSpec:
    d = dict(d)
    kind = d.pop("type")
    if kind == "dense":
        return DenseNetSpec(**d)
    if kind == "seq2seq":
        return Seq2SeqSpec(**d)
    raise ValueError(f"unknown net type {kind!r}")


@dataclass
class NetParams:
    arrays: list[np.ndarray]
    rng_seed: int = 0

    def copy(self) -> "NetParams":
        return NetParams([a.copy() for a in self.arrays], self.rng_seed)

    @property
    def size(self) -> int:
        return int(sum(a.size for a in self.arrays))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays])


def count_params(spec: DenseNetSpec | Seq2SeqSpec) -> int:
    return int(sum(np.prod(s) for s in spec.param_shapes()))


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _init_lstm(rng: np.random.Generator, d: int, h: int) -> list[np.ndarray]:
    W = _glorot(rng, d, 4 * h, (d, 4 * h))
    # scaled uniform for the recurrent block
    U = rng.uniform(-1.0, 1.0, size=(h, 4 * h)) / np.sqrt(h)
    b = np.zeros(4 * h)
    b[h:2 * h] = 1.0
    return [W, U, b]


def init_params(spec: DenseNetSpec | Seq2SeqSpec, seed: int) -> NetParams:
    """Deterministic initialization from ``seed``."""
    rng = np.random.default_rng(seed)
    arrays: list[np.ndarray] = []
    if isinstance(spec, DenseNetSpec):
        for fan_in, fan_out in zip(spec.layer_widths[:-1], spec.layer_widths[1:]):
            arrays += [_glorot(rng, fan_in, fan_out, (fan_in, fan_out)), np.zeros(fan_out)]
    else:
        d, h = spec.encoder.input_dim, spec.encoder.hidden_units
        arrays += _init_lstm(rng, d, h)
        if spec.encoder.bidirectional:
            arrays += _init_lstm(rng, d, h)
        hd = spec.decoder.hidden_units
        arrays += _init_lstm(rng, d, hd)
        arrays += [_glorot(rng, hd, d, (hd, d)), np.zeros(d)]
    return NetParams(arrays, seed)


def check_params(params: NetParams, spec: DenseNetSpec | Seq2SeqSpec) -> None:
    shapes = spec.param_shapes()
    if len(params.arrays) != len(shapes):
        raise ShapeError(f"expected {len(shapes)} parameter arrays, got {len(params.arrays)}")
    for i, (a, s) in enumerate(zip(params.arrays, shapes)):
        if a.shape != tuple(s):
            raise ShapeError(f"parameter {i}: expected shape {tuple(s)}, got {a.shape}")


def l2_penalty(params: NetParams, spec: DenseNetSpec | Seq2SeqSpec) -> float:
    if spec.l2_lambda == 0:
        return 0.0
    return spec.l2_lambda * sum(float(np.sum(params.arrays[i] ** 2)) for i in kernel_indices(spec))


def kernel_indices(spec: DenseNetSpec | Seq2SeqSpec) -> list[int]:
    """Indices of weight matrices (biases are not regularized)."""
    return [i for i, s in enumerate(spec.param_shapes()) if len(s) == 2]


# --------------------------------------------------------------------------
# Dense nets
# --------------------------------------------------------------------------


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z


def _activate_grad(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return 1.0 - a * a
    if kind == "relu":
        return (z > 0).astype(z.dtype)
    return np.ones_like(z)


def _dropout_mask(rng: np.random.Generator | None, shape, rate: float) -> np.ndarray | None:
    if rate <= 0:
        return None
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = 1.0 - rate
    return (rng.random(shape) < keep) / keep


def _dense_forward_cache(params, spec, x, train_mode, rng):
    if x.ndim != 2:
        raise ShapeError(f"dense input must be 2-D (batch, features), got ndim={x.ndim}")
    acts = [x]
    pre = []
    masks = []
    a = x
    n_layers = len(spec.activations)
    for layer in range(n_layers):
        W, b = params.arrays[2 * layer], params.arrays[2 * layer + 1]
        if a.shape[1] != W.shape[0]:
            raise ShapeError(
                f"layer {layer}: input has {a.shape[1]} columns, weight expects {W.shape[0]}"
            )
        z = a @ W + b
        a = _activate(z, spec.activations[layer])
        mask = None
        if train_mode and layer < n_layers - 1:
            mask = _dropout_mask(rng, a.shape, spec.dropout_rate)
            if mask is not None:
                a = a * mask
        pre.append(z)
        masks.append(mask)
        acts.append(a)
    return acts, pre, masks


def dense_forward(
    params: NetParams,
    spec: DenseNetSpec,
    x: np.ndarray,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Forward pass of a dense net on a batch ``x`` of shape (batch, input_dim)."""
    x = np.asarray(x, dtype=np.float64)
    acts, _, _ = _dense_forward_cache(params, spec, x, train_mode, rng)
    return acts[-1]


def _loss_and_grad(y: np.ndarray, target: np.ndarray, loss: str) -> tuple[float, np.ndarray]:
    diff = y - target
    n = diff.size
    if loss == "mse":
        return float(np.sum(diff * diff) / n), 2.0 * diff / n
    if loss == "mae":
        return float(np.sum(np.abs(diff)) / n), np.sign(diff) / n
    raise ValueError(f"unknown loss {loss!r}")


def dense_backward(
    params: NetParams,
    spec: DenseNetSpec,
    x: np.ndarray,
    target: np.ndarray,
    loss: str = "mse",
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
    batch_index: int | None = None,
) -> tuple[list[np.ndarray], float]:
    """Loss and exact gradients for one batch.

    The returned loss includes ``l2_lambda * sum(W**2)`` over weight matrices.
    """
    x = np.asarray(x, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    acts, pre, masks = _dense_forward_cache(params, spec, x, train_mode, rng)
    y = acts[-1]
    if target.shape != y.shape:
        raise ShapeError(f"target shape {target.shape} != output shape {y.shape}")
    value, delta = _loss_and_grad(y, target, loss)
    value += l2_penalty(params, spec)
    if not np.isfinite(value):
        raise NumericalError(f"non-finite loss in batch {batch_index}")

    grads: list[np.ndarray] = [np.zeros_like(a) for a in params.arrays]
    for layer in reversed(range(len(spec.activations))):
        if masks[layer] is not None:
            delta = delta * masks[layer]
        a_out = _activate(pre[layer], spec.activations[layer])
        delta = delta * _activate_grad(pre[layer], a_out, spec.activations[layer])
        W = params.arrays[2 * layer]
        grads[2 * layer] = acts[layer].T @ delta
        grads[2 * layer + 1] = delta.sum(axis=0)
        if spec.l2_lambda:
            grads[2 * layer] += 2.0 * spec.l2_lambda * W
        delta = delta @ W.T
    return grads, value


# --------------------------------------------------------------------------
# LSTM
# --------------------------------------------------------------------------


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def lstm_cell(x, h, c, W, U, b):
    """One LSTM step on a batch. Returns ``(h_new, c_new, cache)``."""
    H = h.shape[-1]
    z = x @ W + h @ U + b
    i = _sigmoid(z[:, :H])
    f = _sigmoid(z[:, H:2 * H])
    g = np.tanh(z[:, 2 * H:3 * H])
    o = _sigmoid(z[:, 3 * H:])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    return h_new, c_new, (x, h, c, i, f, g, o, tc)


def lstm_cell_backward(dh, dc, cache, W, U):
    """Backward of :func:`lstm_cell`.

    Returns ``(dx, dh_prev, dc_prev, dW, dU, db)``.
    """
    x, h_prev, c_prev, i, f, g, o, tc = cache
    do = dh * tc
    dc = dc + dh * o * (1.0 - tc * tc)
    di = dc * g
    dg = dc * i
    df = dc * c_prev
    dc_prev = dc * f
    dz = np.concatenate(
        [di * i * (1 - i), df * f * (1 - f), dg * (1 - g * g), do * o * (1 - o)], axis=1
    )
    return dz @ W.T, dz @ U.T, dc_prev, x.T @ dz, h_prev.T @ dz, dz.sum(axis=0)


def _run_lstm(xs, W, U, b):
    """Run an LSTM from zero state over ``xs`` of shape (T, B, D)."""
    B = xs.shape[1]
    H = U.shape[0]
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    caches = []
    for t in range(xs.shape[0]):
        h, c, cache = lstm_cell(xs[t], h, c, W, U, b)
        caches.append(cache)
    return h, c, caches


def _backprop_lstm(caches, dh, dc, W, U):
    dW = np.zeros_like(W)
    dU = np.zeros_like(U)
    db = np.zeros(W.shape[1])
    for cache in reversed(caches):
        _, dh, dc, gW, gU, gb = lstm_cell_backward(dh, dc, cache, W, U)
        dW += gW
        dU += gU
        db += gb
    return dW, dU, db


def _as_batch(sequences: np.ndarray, spec: Seq2SeqSpec | LstmSpec) -> np.ndarray:
    seq = np.asarray(sequences, dtype=np.float64)
    if seq.ndim == 2:
        seq = seq[None]
    if seq.ndim != 3:
        raise ShapeError(f"sequence batch must be (batch, steps, dims), got ndim={seq.ndim}")
    if seq.shape[1] == 0:
        raise ValueError("cannot encode an empty sequence")
    if seq.shape[2] != spec.input_dim:
        raise ShapeError(f"sequence has {seq.shape[2]} columns, encoder expects {spec.input_dim}")
    return seq


def _encode_batch(params: NetParams, spec: Seq2SeqSpec, seq: np.ndarray):
    xs = np.transpose(seq, (1, 0, 2))
    a = params.arrays
    h, c, caches_f = _run_lstm(xs, a[0], a[1], a[2])
    if not spec.encoder.bidirectional:
        return h, c, (caches_f, None)
    hb, cb, caches_b = _run_lstm(xs[::-1], a[3], a[4], a[5])
    return np.concatenate([h, hb], 1), np.concatenate([c, cb], 1), (caches_f, caches_b)


def lstm_encode(
    params: NetParams, spec: Seq2SeqSpec, sequence: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Final (hidden, cell) encoder state.

    ``sequence`` is (T, D) or a batch (B, T, D). Bidirectional encoders return
    ``[forward ; backward]`` concatenations.
    """
    seq = _as_batch(sequence, spec)
    h, c, _ = _encode_batch(params, spec, seq)
    if np.asarray(sequence).ndim == 2:
        return h[0], c[0]
    return h, c


def _dec_slice(spec: Seq2SeqSpec) -> int:
    return 6 if spec.encoder.bidirectional else 3


def _decode_batch(params, spec, h, c, steps, train_mode, rng):
    k = _dec_slice(spec)
    W, U, b, Wp, bp = params.arrays[k:k + 5]
    B = h.shape[0]
    y = np.zeros((B, spec.output_dim))
    outs, caches, masks = [], [], []
    for _ in range(steps):
        h, c, cache = lstm_cell(y, h, c, W, U, b)
        mask = _dropout_mask(rng, h.shape, spec.dropout_rate) if train_mode else None
        hd = h * mask if mask is not None else h
        y = hd @ Wp + bp
        outs.append(y)
        caches.append((cache, hd))
        masks.append(mask)
    return np.stack(outs, axis=1), caches, masks


def lstm_decode(
    params: NetParams,
    spec: Seq2SeqSpec,
    encoded_state: tuple[np.ndarray, np.ndarray],
    steps: int,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Free-running decode: each step consumes the previous emitted output,
    starting from a zero vector."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    h, c = (np.asarray(s, dtype=np.float64) for s in encoded_state)
    single = h.ndim == 1
    h, c = np.atleast_2d(h), np.atleast_2d(c)
    k = _dec_slice(spec)
    if params.arrays[k + 3].shape[1] != spec.input_dim:
        raise ShapeError("decoder projection width does not match input_dim")
    if h.shape[1] != params.arrays[k + 1].shape[0]:
        raise ShapeError(
            f"encoded state width {h.shape[1]} != decoder units {params.arrays[k + 1].shape[0]}"
        )
    out, _, _ = _decode_batch(params, spec, h, c, steps, train_mode, rng)
    return out[0] if single else out


def seq2seq_forward(
    params: NetParams,
    spec: Seq2SeqSpec,
    sequences: np.ndarray,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Reconstruct ``sequences`` (T, D) or (B, T, D)."""
    seq = _as_batch(sequences, spec)
    h, c, _ = _encode_batch(params, spec, seq)
    out, _, _ = _decode_batch(params, spec, h, c, seq.shape[1], train_mode, rng)
    return out[0] if np.asarray(sequences).ndim == 2 else out


def seq2seq_backward(
    params: NetParams,
    spec: Seq2SeqSpec,
    sequences: np.ndarray,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
    batch_index: int | None = None,
) -> tuple[list[np.ndarray], float]:
    """MSE reconstruction loss and full BPTT gradients through decoder,
    output feedback and encoder."""
    seq = _as_batch(sequences, spec)
    B, T, D = seq.shape
    h, c, (caches_f, caches_b) = _encode_batch(params, spec, seq)
    out, dec_caches, masks = _decode_batch(params, spec, h, c, T, train_mode, rng)

    value, dout = _loss_and_grad(out, seq, "mse")
    value += l2_penalty(params, spec)
    if not np.isfinite(value):
        raise NumericalError(f"non-finite loss in batch {batch_index}")

    k = _dec_slice(spec)
    W, U, _, Wp, _ = params.arrays[k:k + 5]
    grads = [np.zeros_like(a) for a in params.arrays]
    dW, dU, db = grads[k], grads[k + 1], grads[k + 2]
    dWp, dbp = grads[k + 3], grads[k + 4]

    Hd = U.shape[0]
    dh = np.zeros((B, Hd))
    dc = np.zeros((B, Hd))
    dy_feedback = np.zeros((B, D))
    for t in reversed(range(T)):
        cache, hd = dec_caches[t]
        dy = dout[:, t] + dy_feedback
        dWp += hd.T @ dy
        dbp += dy.sum(axis=0)
        dhd = dy @ Wp.T
        if masks[t] is not None:
            dhd = dhd * masks[t]
        dx, dh, dc, gW, gU, gb = lstm_cell_backward(dh + dhd, dc, cache, W, U)
        dW += gW
        dU += gU
        db += gb
        dy_feedback = dx
        if not np.all(np.isfinite(dh)):
            raise NumericalError(f"non-finite gradient at decoder step {t}")

    a = params.arrays
    if spec.encoder.bidirectional:
        H = spec.encoder.hidden_units
        gf = _backprop_lstm(caches_f, dh[:, :H], dc[:, :H], a[0], a[1])
        gb_ = _backprop_lstm(caches_b, dh[:, H:], dc[:, H:], a[3], a[4])
        grads[0], grads[1], grads[2] = gf
        grads[3], grads[4], grads[5] = gb_
    else:
        grads[0], grads[1], grads[2] = _backprop_lstm(caches_f, dh, dc, a[0], a[1])

    if spec.l2_lambda:
        for i in kernel_indices(spec):
            grads[i] += 2.0 * spec.l2_lambda * params.arrays[i]
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient in encoder")
    return grads, value


# --------------------------------------------------------------------------
# Optimizers
# --------------------------------------------------------------------------


OPTIMIZERS = ("sgd", "rmsprop")


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd"
    learning_rate: float = 0.01
    rmsprop_decay: float = 0.9
    epochs: int = 1
    batch_size: int = 32
    clip_norm: float | None = None

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 < self.rmsprop_decay < 1.0:
            raise ValueError("rmsprop_decay must lie in (0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


RMSPROP_EPS = 1e-8


@dataclass
class OptimizerState:
    accumulators: list[np.ndarray] | None = None
    steps: int = 0


def clip_gradients(grads: list[np.ndarray], max_norm: float | None) -> list[np.ndarray]:
    if max_norm is None:
        return grads
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm <= max_norm or norm == 0:
        return grads
    return [g * (max_norm / norm) for g in grads]


def optimize_step(
    arrays: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    config: OptimizerConfig,
    state: OptimizerState | None = None,
) -> tuple[list[np.ndarray], OptimizerState]:
    """Apply one update and return new arrays plus the updated state.

    sgd:     w <- w - lr * g
    rmsprop: a <- rho * a + (1 - rho) * g**2;  w <- w - lr * g / sqrt(a + 1e-8)
    """
    if len(arrays) != len(grads):
        raise ShapeError("parameter and gradient lists differ in length")
    for i, (w, g) in enumerate(zip(arrays, grads)):
        if w.shape != g.shape:
            raise ShapeError(f"gradient {i}: shape {g.shape} != parameter shape {w.shape}")
    state = state or OptimizerState()
    grads = clip_gradients(list(grads), config.clip_norm)
    lr = config.learning_rate
    if config.kind == "sgd":
        new = [w - lr * g for w, g in zip(arrays, grads)]
        return new, OptimizerState(None, state.steps + 1)
    rho = config.rmsprop_decay
    acc = state.accumulators or [np.zeros_like(w) for w in arrays]
    acc = [rho * a + (1.0 - rho) * g * g for a, g in zip(acc, grads)]
    new = [w - lr * g / np.sqrt(a + RMSPROP_EPS) for w, g, a in zip(arrays, grads, acc)]
    return new, OptimizerState(acc, state.steps + 1)


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


def checkpoint_dict(
    spec: DenseNetSpec | Seq2SeqSpec, params: NetParams, extra: dict[str, Any] | None = None
) -> dict:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": spec.to_dict(),
        "seed": int(params.rng_seed),
        "arrays": [{"shape": list(a.shape), "values": a.ravel().tolist()} for a in params.arrays],
    }
    if extra:
        doc.update(extra)
    return doc


def params_from_dict(doc: dict) -> tuple[DenseNetSpec | Seq2SeqSpec, NetParams]:
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a hecad checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    spec = spec_from_dict(doc["spec"])
    arrays = [
        np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
        for entry in doc["arrays"]
    ]
    params = NetParams(arrays, int(doc["seed"]))
    check_params(params, spec)
    return spec, params


def save_checkpoint(path: str | Path, spec, params: NetParams, extra: dict | None = None) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(spec, params, extra)))


def load_checkpoint(path: str | Path) -> tuple[DenseNetSpec | Seq2SeqSpec, NetParams, dict]:
    doc = json.loads(Path(path).read_text())
    spec, params = params_from_dict(doc)
    return spec, params, doc
