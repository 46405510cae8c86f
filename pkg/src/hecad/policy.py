"""Contextual-bandit layer selection trained with REINFORCE.

A one-hidden-layer network maps a window's context vector to a categorical
distribution over the K HEC layers. Training samples an action, observes
``correct - cost(delay)`` and follows the score-function gradient with a
running-mean reward baseline.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import nn
from .datasets import MULTIVARIATE, UNIVARIATE, Window

log = logging.getLogger(__name__)

DEFAULT_ALPHA = {UNIVARIATE: 0.0005, MULTIVARIATE: 0.00035}
HIDDEN_UNITS = 100
N_ACTIONS = 3


class PolicyError(RuntimeError):
    pass


@dataclass
class PolicyParams:
    W1: np.ndarray  # (hidden, input)
    b1: np.ndarray
    W2: np.ndarray  # (K, hidden)
    b2: np.ndarray

    @property
    def input_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def n_actions(self) -> int:
        return self.W2.shape[0]

    @property
    def arrays(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2]

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> "PolicyParams":
        return cls(*(np.asarray(a, dtype=np.float64) for a in arrays))

    def copy(self) -> "PolicyParams":
        return PolicyParams.from_arrays([a.copy() for a in self.arrays])

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays)


def init_policy(input_dim: int, seed: int, hidden: int = HIDDEN_UNITS,
                n_actions: int = N_ACTIONS) -> PolicyParams:
    """Glorot-uniform hidden layer; zero output layer so training starts from
    the uniform distribution over arms."""
    rng = np.random.default_rng(seed)
    lim1 = np.sqrt(6.0 / (input_dim + hidden))
    return PolicyParams(
        rng.uniform(-lim1, lim1, (hidden, input_dim)),
        np.zeros(hidden),
        np.zeros((n_actions, hidden)),
        np.zeros(n_actions),
    )


@dataclass(frozen=True)
class RewardConfig:
    alpha: float
    baseline_decay: float = 0.9

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if not 0.0 <= self.baseline_decay < 1.0:
            raise ValueError("baseline_decay must lie in [0, 1)")

    @classmethod
    def for_kind(cls, kind: str, baseline_decay: float = 0.9) -> "RewardConfig":
        return cls(DEFAULT_ALPHA[kind], baseline_decay)


@dataclass
class ActionDist:
    s: np.ndarray
    chosen: np.ndarray | None = None

    @property
    def action(self) -> int | None:
        return None if self.chosen is None else int(np.argmax(self.chosen))


@dataclass
class BanditSample:
    context: np.ndarray
    correctness_per_arm: np.ndarray
    delay_per_arm: np.ndarray
    window_id: int = -1


# --------------------------------------------------------------------------
# Context
# --------------------------------------------------------------------------


def extract_context(window: Window | np.ndarray, dataset_kind: str, iot_encoder=None) -> np.ndarray:
    """Univariate: [min, max, mean, std] of the day. Multivariate: final hidden
    state of the IoT LSTM encoder (``iot_encoder`` is a detector or a
    ``(params, Seq2SeqSpec)`` pair)."""
    data = window.data if isinstance(window, Window) else np.asarray(window, dtype=np.float64)
    if dataset_kind == UNIVARIATE:
        x = data.ravel()
        return np.array([x.min(), x.max(), x.mean(), x.std()])
    if iot_encoder is None:
        raise PolicyError("multivariate contexts need the IoT LSTM encoder")
    return encoder_contexts([data], iot_encoder)[0]


def encoder_contexts(windows, iot_encoder) -> np.ndarray:
    if hasattr(iot_encoder, "params"):
        params, spec = iot_encoder.params, iot_encoder.spec.net
    else:
        params, spec = iot_encoder
    data = np.stack([w.data if isinstance(w, Window) else w for w in windows])
    h, _ = nn.lstm_encode(params, spec, data)
    return h


def extract_contexts(windows: Sequence[Window], dataset_kind: str, iot_encoder=None) -> np.ndarray:
    if dataset_kind == UNIVARIATE:
        return np.stack([extract_context(w, dataset_kind) for w in windows])
    if iot_encoder is None:
        raise PolicyError("multivariate contexts need the IoT LSTM encoder")
    return encoder_contexts(windows, iot_encoder)


@dataclass(frozen=True)
class ContextScaler:
    """Per-feature z-scoring fitted on the policy training contexts."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, contexts: np.ndarray) -> "ContextScaler":
        contexts = np.asarray(contexts, dtype=np.float64)
        std = contexts.std(axis=0)
        return cls(contexts.mean(axis=0), np.where(std > 0, std, 1.0))

    def apply(self, contexts: np.ndarray) -> np.ndarray:
        return (np.asarray(contexts, dtype=np.float64) - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ContextScaler":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def context_scaler(contexts: np.ndarray, dataset_kind: str) -> ContextScaler | None:
    # Day statistics are unbounded and saturate the tanh layer; encoder
    # states already lie in (-1, 1) and are used as they are.
    return ContextScaler.fit(contexts) if dataset_kind == UNIVARIATE else None


# --------------------------------------------------------------------------
# Network
# --------------------------------------------------------------------------


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def _check_context(params: PolicyParams, z: np.ndarray) -> None:
    if z.shape[-1] != params.input_dim:
        raise nn.ShapeError(f"context has {z.shape[-1]} features, policy expects {params.input_dim}")


def policy_probs(params: PolicyParams, contexts: np.ndarray) -> np.ndarray:
    """Batched ``softmax(W2 tanh(W1 z + b1) + b2)`` over rows of ``contexts``."""
    z = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
    _check_context(params, z)
    hidden = np.tanh(z @ params.W1.T + params.b1)
    return _softmax(hidden @ params.W2.T + params.b2)


def policy_forward(params: PolicyParams, context: np.ndarray) -> ActionDist:
    return ActionDist(policy_probs(params, context)[0])


def select_action(dist: ActionDist | np.ndarray, mode: str = "greedy",
                  rng: np.random.Generator | None = None) -> int:
    """Greedy argmax (ties go to the lowest layer) or a categorical draw."""
    s = dist.s if isinstance(dist, ActionDist) else np.asarray(dist)
    if mode == "greedy":
        k = int(np.argmax(s))
    elif mode == "sample":
        if rng is None:
            raise ValueError("sampling needs an rng")
        k = int(np.searchsorted(np.cumsum(s), rng.random() * np.sum(s), side="right"))
        k = min(k, len(s) - 1)
    else:
        raise ValueError(f"unknown selection mode {mode!r}")
    if isinstance(dist, ActionDist):
        dist.chosen = np.eye(len(s))[k]
    return k


def log_prob(params: PolicyParams, context: np.ndarray, action: int) -> float:
    return float(np.log(policy_probs(params, context)[0, action]))


def policy_gradient(params: PolicyParams, context: np.ndarray, action: int,
                    advantage: float) -> list[np.ndarray]:
    """Gradient of ``-advantage * ln pi(action | context)`` w.r.t. (W1, b1, W2, b2)."""
    z = np.asarray(context, dtype=np.float64).ravel()
    _check_context(params, z)
    hidden = np.tanh(params.W1 @ z + params.b1)
    s = _softmax(params.W2 @ hidden + params.b2)
    onehot = np.zeros_like(s)
    onehot[action] = 1.0
    d_logits = -advantage * (onehot - s)
    dW2 = np.outer(d_logits, hidden)
    d_hidden = (params.W2.T @ d_logits) * (1.0 - hidden * hidden)
    dW1 = np.outer(d_hidden, z)
    return [dW1, d_hidden, dW2, d_logits]


# --------------------------------------------------------------------------
# Reward
# --------------------------------------------------------------------------


def cost(delay_ms, alpha: float):
    """Map an end-to-end delay to ``alpha t / (1 + alpha t)`` in [0, 1)."""
    d = np.asarray(delay_ms, dtype=np.float64)
    if np.any(d < 0):
        raise ValueError("delay must be non-negative")
    out = alpha * d / (1.0 + alpha * d)
    return float(out) if out.ndim == 0 else out


def reward(sample: BanditSample, action: int, config: RewardConfig) -> float:
    if not 0 <= action < len(sample.correctness_per_arm):
        raise ValueError(f"action {action} out of range")
    return float(sample.correctness_per_arm[action]) - cost(sample.delay_per_arm[action], config.alpha)


def build_bandit_samples(
    windows: Sequence[Window],
    correctness: np.ndarray,
    delays: np.ndarray,
    contexts: np.ndarray,
) -> list[BanditSample]:
    """Pack precomputed per-arm correctness (N, K), delays (N, K) and
    contexts (N, F) into samples."""
    correctness = np.asarray(correctness, dtype=np.float64)
    delays = np.asarray(delays, dtype=np.float64)
    n = len(windows)
    if correctness.shape[0] != n or delays.shape != correctness.shape or len(contexts) != n:
        raise nn.ShapeError("windows, correctness, delays and contexts disagree in length")
    if np.any(delays <= 0):
        raise ValueError("per-arm delays must be positive")
    return [
        BanditSample(np.asarray(contexts[i], dtype=np.float64), correctness[i], delays[i], windows[i].id)
        for i in range(n)
    ]


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


@dataclass
class TrainingCurve:
    epoch: list[int] = field(default_factory=list)
    mean_reward: list[float] = field(default_factory=list)
    baseline: list[float] = field(default_factory=list)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["epoch", "mean_reward", "baseline"])
            for row in zip(self.epoch, self.mean_reward, self.baseline):
                wr.writerow([row[0], repr(row[1]), repr(row[2])])


DEFAULT_POLICY_OPTIMIZER = nn.OptimizerConfig("rmsprop", 1e-3, epochs=1000, batch_size=1)


def train_policy(
    samples: Sequence[BanditSample],
    config: RewardConfig,
    optimizer: nn.OptimizerConfig = DEFAULT_POLICY_OPTIMIZER,
    seed: int = 0,
    hidden: int = HIDDEN_UNITS,
    init: PolicyParams | None = None,
) -> tuple[PolicyParams, TrainingCurve]:
    """REINFORCE with reinforcement comparison, one update per sample.

    Each step samples an arm from the current policy, computes the reward and
    the advantage against the running baseline, takes a gradient step, then
    folds the reward into the baseline.
    """
    if not samples:
        raise PolicyError("no bandit samples to train on")
    rng = np.random.default_rng(seed)
    contexts = np.stack([s.context for s in samples])
    n_actions = len(samples[0].correctness_per_arm)
    params = init.copy() if init is not None else init_policy(contexts.shape[1], seed, hidden, n_actions)
    rewards_table = np.stack([
        s.correctness_per_arm - cost(s.delay_per_arm, config.alpha) for s in samples
    ])
    baseline = 0.0
    state = None
    curve = TrainingCurve()
    for epoch in range(1, optimizer.epochs + 1):
        total = 0.0
        for i in rng.permutation(len(samples)):
            s = policy_probs(params, contexts[i])[0]
            k = select_action(s, "sample", rng)
            r = float(rewards_table[i, k])
            advantage = r - baseline
            grads = policy_gradient(params, contexts[i], k, advantage)
            arrays, state = nn.optimize_step(params.arrays, grads, optimizer, state)
            params = PolicyParams.from_arrays(arrays)
            baseline = config.baseline_decay * baseline + (1.0 - config.baseline_decay) * r
            total += r
        mean_r = total / len(samples)
        if not np.isfinite(mean_r) or not all(np.all(np.isfinite(a)) for a in params.arrays):
            raise PolicyError(f"policy training diverged in epoch {epoch}")
        curve.epoch.append(epoch)
        curve.mean_reward.append(mean_r)
        curve.baseline.append(baseline)
    return params, curve


def greedy_actions(params: PolicyParams, contexts: np.ndarray) -> np.ndarray:
    return np.argmax(policy_probs(params, contexts), axis=1)


class FixedPolicy:
    """Always picks the same arm; stands in for a trained policy in tests."""

    def __init__(self, action: int, n_actions: int = N_ACTIONS):
        self.action = action
        self.n_actions = n_actions

    def actions(self, contexts: np.ndarray) -> np.ndarray:
        return np.full(len(contexts), self.action, dtype=int)


def choose_actions(policy, contexts: np.ndarray) -> np.ndarray:
    if isinstance(policy, PolicyParams):
        return greedy_actions(policy, contexts)
    return policy.actions(contexts)


def save_policy(path: str | Path, params: PolicyParams, seed: int, extra: Mapping | None = None) -> None:
    spec = nn.DenseNetSpec((params.input_dim, params.W1.shape[0], params.n_actions), ("tanh", "linear"))
    # stored in dense-net layout, i.e. transposed weights
    arrays = [params.W1.T.copy(), params.b1, params.W2.T.copy(), params.b2]
    nn.save_checkpoint(path, spec, nn.NetParams(arrays, seed), {"policy": dict(extra or {})})


def load_policy(path: str | Path) -> tuple[PolicyParams, dict]:
    _, net, doc = nn.load_checkpoint(path)
    if "policy" not in doc:
        raise PolicyError(f"{path} is not a policy checkpoint")
    W1t, b1, W2t, b2 = net.arrays
    return PolicyParams(W1t.T.copy(), b1, W2t.T.copy(), b2), doc["policy"]
