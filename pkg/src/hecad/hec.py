"""Three-layer HEC world model: delays, the five detection schemes, episode
execution and metric aggregation."""

from __future__ import annotations

import csv
import json
import math
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .datasets import ANOMALOUS, MULTIVARIATE, UNIVARIATE, Window
from .detectors import LAYERS, Detection, TrainedDetector
from .policy import RewardConfig, choose_actions, cost

SCHEMES = ("iot_only", "edge_only", "cloud_only", "successive", "adaptive")
FIXED_LAYER = {"iot_only": "iot", "edge_only": "edge", "cloud_only": "cloud"}
SCHEME_LABELS = {
    "iot_only": "IoT Device",
    "edge_only": "Edge",
    "cloud_only": "Cloud",
    "successive": "Successive",
    "adaptive": "Adaptive",
}


class ArtifactError(RuntimeError):
    """A detector or policy needed by a scheme is missing."""


@dataclass
class DelayModel:
    """Execution times per (dataset kind, layer) and round-trip times per layer, in ms."""

    exec_ms: dict[str, dict[str, float]]
    rtt_ms: dict[str, float]

    def __post_init__(self):
        if self.rtt_ms.get("iot", 0.0) != 0.0:
            raise ValueError("the IoT layer is device-local: rtt_ms['iot'] must be 0")
        self.rtt_ms = {"iot": 0.0, **self.rtt_ms}
        rtts = [self.rtt_ms[layer] for layer in LAYERS]
        if any(b <= a for a, b in zip(rtts, rtts[1:])):
            raise ValueError("rtt_ms must strictly increase iot -> edge -> cloud")
        for kind, table in self.exec_ms.items():
            for layer, v in table.items():
                if v <= 0:
                    raise ValueError(f"exec_ms[{kind}][{layer}] must be > 0")

    def exec_time(self, layer: str, kind: str) -> float:
        try:
            return float(self.exec_ms[kind][layer])
        except KeyError:
            raise KeyError(f"no execution time for layer {layer!r} on {kind!r} data") from None

    def to_dict(self) -> dict:
        return asdict(self)


def default_delay_model() -> DelayModel:
    # Execution times from the testbed measurements; round trips recovered as
    # (end-to-end delay - execution time) for the fixed-layer schemes.
    return DelayModel(
        exec_ms={
            UNIVARIATE: {"iot": 12.4, "edge": 7.4, "cloud": 4.5},
            MULTIVARIATE: {"iot": 591.0, "edge": 417.3, "cloud": 232.3},
        },
        rtt_ms={"iot": 0.0, "edge": 250.0, "cloud": 500.0},
    )


def e2e_delay(model: DelayModel, layer: str, dataset_kind: str,
              hops: Sequence[str] | None = None) -> float:
    """End-to-end delay in ms.

    Without ``hops`` the window runs only at ``layer``. With ``hops`` (the
    layers visited, bottom-up) every visited layer's execution time is paid
    plus the incremental round trip of each escalation.
    """
    if layer not in LAYERS:
        raise KeyError(f"unknown layer {layer!r}")
    if not hops:
        return model.exec_time(layer, dataset_kind) + model.rtt_ms[layer]
    terms = []
    prev_rtt = 0.0
    for h in hops:
        if h not in LAYERS:
            raise KeyError(f"unknown layer {h!r}")
        terms += [model.exec_time(h, dataset_kind), model.rtt_ms[h] - prev_rtt]
        prev_rtt = model.rtt_ms[h]
    return math.fsum(terms)


@dataclass
class WindowRecord:
    window_id: int
    truth: int
    verdict: int
    layer: str
    hops: list[str]
    delay_ms: float
    reward: float | None

    @property
    def correct(self) -> bool:
        return self.truth == self.verdict


@dataclass
class Aggregates:
    accuracy: float
    f1: float
    precision: float
    recall: float
    mean_delay_ms: float
    mean_reward: float | None
    n: int
    f1_defined: bool = True
    note: str = ""


@dataclass
class EpisodeResult:
    scheme: str
    records: list[WindowRecord]
    aggregates: Aggregates

    def to_dict(self) -> dict:
        return {"scheme": self.scheme, **asdict(self.aggregates)}


def compute_metrics(records: Sequence[WindowRecord]) -> Aggregates:
    """Accuracy (%), anomaly-positive F1, mean delay and mean reward.

    F1 is 0 whenever precision or recall is undefined; ``f1_defined`` and
    ``note`` say so.
    """
    if not records:
        raise ValueError("no records to aggregate")
    truth = np.array([r.truth == ANOMALOUS for r in records])
    pred = np.array([r.verdict == ANOMALOUS for r in records])
    tp = int(np.sum(truth & pred))
    fp = int(np.sum(~truth & pred))
    fn = int(np.sum(truth & ~pred))
    acc = 100.0 * float(np.mean(truth == pred))
    precision = tp / (tp + fp) if tp + fp else math.nan
    recall = tp / (tp + fn) if tp + fn else math.nan
    defined = not (math.isnan(precision) or math.isnan(recall)) and precision + recall > 0
    f1 = 2 * precision * recall / (precision + recall) if defined else 0.0
    note = "" if defined else "F1 undefined (no positive predictions or no positive labels); reported as 0"
    rewards = [r.reward for r in records]
    # fsum keeps the mean of identical delays equal to that delay
    mean_reward = None if any(r is None for r in rewards) else statistics.fmean(rewards)
    return Aggregates(
        accuracy=acc,
        f1=float(f1),
        precision=float(0.0 if math.isnan(precision) else precision),
        recall=float(0.0 if math.isnan(recall) else recall),
        mean_delay_ms=statistics.fmean(r.delay_ms for r in records),
        mean_reward=mean_reward,
        n=len(records),
        f1_defined=defined,
        note=note,
    )


# --------------------------------------------------------------------------
# Schemes
# --------------------------------------------------------------------------


@dataclass
class LayerOutputs:
    """Per-layer detections for a window list, computed once and shared by
    every scheme."""

    windows: list[Window]
    detections: dict[str, list[Detection]] = field(default_factory=dict)

    @classmethod
    def compute(cls, windows: Sequence[Window], detectors: Mapping[str, TrainedDetector]) -> "LayerOutputs":
        missing = [layer for layer in LAYERS if layer not in detectors]
        if missing:
            raise ArtifactError(f"missing detector(s) for layer(s): {', '.join(missing)}")
        windows = list(windows)
        return cls(windows, {layer: detectors[layer].detect_many(windows) for layer in LAYERS})

    def verdicts(self, layer: str) -> np.ndarray:
        return np.array([int(d.is_anomaly) for d in self.detections[layer]])

    def correctness(self) -> np.ndarray:
        """(N, K) matrix: 1 where the layer's verdict matches the label."""
        truth = np.array([w.label for w in self.windows])
        return np.stack([(self.verdicts(layer) == truth).astype(float) for layer in LAYERS], axis=1)


def arm_delays(delay_model: DelayModel, dataset_kind: str, n: int) -> np.ndarray:
    row = [e2e_delay(delay_model, layer, dataset_kind) for layer in LAYERS]
    return np.tile(row, (n, 1))


def successive_path(detections_by_layer: Sequence[Detection]) -> int:
    """Index of the layer that answers: the first confident one, else the cloud."""
    for k, det in enumerate(detections_by_layer[:-1]):
        if det.confident:
            return k
    return len(detections_by_layer) - 1


def run_scheme(
    kind: str,
    outputs: LayerOutputs,
    delay_model: DelayModel,
    reward_config: RewardConfig,
    dataset_kind: str,
    policy=None,
    contexts: np.ndarray | None = None,
) -> EpisodeResult:
    """Run one scheme over precomputed per-layer detections."""
    if kind not in SCHEMES:
        raise ValueError(f"unknown scheme {kind!r}")
    windows = outputs.windows
    n = len(windows)
    if kind in FIXED_LAYER:
        chosen = np.full(n, LAYERS.index(FIXED_LAYER[kind]))
    elif kind == "adaptive":
        if policy is None:
            raise ArtifactError("the adaptive scheme needs a trained policy")
        if contexts is None:
            raise ArtifactError("the adaptive scheme needs per-window contexts")
        chosen = choose_actions(policy, contexts)
    else:
        chosen = None

    records = []
    for i, w in enumerate(windows):
        r_val = None
        if chosen is not None:
            layer = LAYERS[int(chosen[i])]
            hops = [layer]
            delay = e2e_delay(delay_model, layer, dataset_kind)
        else:
            k = successive_path([outputs.detections[layer][i] for layer in LAYERS])
            hops = list(LAYERS[:k + 1])
            layer = hops[-1]
            delay = e2e_delay(delay_model, layer, dataset_kind, hops)
        verdict = int(outputs.detections[layer][i].is_anomaly)
        if chosen is not None:
            r_val = float(verdict == w.label) - cost(delay, reward_config.alpha)
        records.append(WindowRecord(w.id, w.label, verdict, layer, hops, delay, r_val))
    return EpisodeResult(kind, records, compute_metrics(records))


def run_all(
    outputs: LayerOutputs,
    delay_model: DelayModel,
    reward_config: RewardConfig,
    dataset_kind: str,
    policy=None,
    contexts: np.ndarray | None = None,
    schemes: Sequence[str] = SCHEMES,
) -> dict[str, EpisodeResult]:
    return {
        s: run_scheme(s, outputs, delay_model, reward_config, dataset_kind, policy, contexts)
        for s in schemes
    }


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------


def write_records_csv(path: str | Path, results: Mapping[str, EpisodeResult]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["scheme", "id", "truth", "verdict", "layer", "hops", "delay_ms", "reward"])
        for name, res in results.items():
            for r in res.records:
                wr.writerow([name, r.window_id, r.truth, r.verdict, r.layer, "+".join(r.hops),
                             repr(r.delay_ms), "" if r.reward is None else repr(r.reward)])


def read_records_csv(path: str | Path) -> dict[str, list[WindowRecord]]:
    out: dict[str, list[WindowRecord]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["scheme"], []).append(WindowRecord(
                int(row["id"]), int(row["truth"]), int(row["verdict"]), row["layer"],
                row["hops"].split("+"), float(row["delay_ms"]),
                None if row["reward"] == "" else float(row["reward"])))
    return out


def write_plot_csv(path: str | Path, results: Mapping[str, EpisodeResult]) -> None:
    """Per-window series for plotting: delay and chosen layer against window order."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["scheme", "position", "id", "delay_ms", "action", "verdict", "truth"])
        for name, res in results.items():
            for pos, r in enumerate(res.records):
                wr.writerow([name, pos, r.window_id, repr(r.delay_ms), LAYERS.index(r.layer) + 1,
                             r.verdict, r.truth])


def summary_table(results: Mapping[str, EpisodeResult], title: str = "") -> str:
    lines = []
    if title:
        lines.append(title)
    header = f"{'Scheme':<12} {'F1':>6} {'Accuracy(%)':>12} {'Delay(ms)':>10} {'Reward':>8}"
    lines += [header, "-" * len(header)]
    for name, res in results.items():
        a = res.aggregates
        reward_s = "N/A" if a.mean_reward is None else f"{a.mean_reward:.4f}"
        lines.append(f"{SCHEME_LABELS[name]:<12} {a.f1:>6.3f} {a.accuracy:>12.2f} "
                     f"{a.mean_delay_ms:>10.2f} {reward_s:>8}")
    return "\n".join(lines) + "\n"


def write_summary_json(path: str | Path, results: Mapping[str, EpisodeResult], meta: dict | None = None) -> None:
    doc = {"meta": meta or {}, "schemes": {k: v.to_dict() for k, v in results.items()}}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
