"""Windows, standardization, train/test splits and synthetic stand-ins for the
power-consumption (univariate) and body-sensor (multivariate) datasets."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

NORMAL, ANOMALOUS = 0, 1
UNIVARIATE, MULTIVARIATE = "univariate", "multivariate"
KINDS = (UNIVARIATE, MULTIVARIATE)

DAY_LEN = 96
WEEK_LEN = 7 * DAY_LEN
MV_WINDOW_LEN = 128
MV_STEP = 64
MV_DIMS = 18
SAMPLING_HZ = 50.0

# Column order of the 18-channel layout (CSV ingestion uses the same order).
MV_CHANNELS = tuple(
    f"{sensor}_{inst}_{axis}"
    for sensor in ("ankle", "wrist")
    for inst in ("acc", "gyro", "mag")
    for axis in "xyz"
)


class DataError(ValueError):
    pass


@dataclass
class Window:
    id: int
    data: np.ndarray
    label: int
    index: int
    activity: int = 0
    mixed: bool = False  # holds both normal and anomalous points

    @property
    def is_anomalous(self) -> bool:
        return self.label == ANOMALOUS


@dataclass
class LabeledSeries:
    values: np.ndarray  # (L, D)
    labels: np.ndarray  # (L,) 0/1
    activity: np.ndarray  # (L,) 0 = normal regime
    kind: str
    starts: tuple[int, ...] = (0,)  # offsets of independent recordings


@dataclass(frozen=True)
class Standardization:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardization":
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))


# per-kind values for fields left as None
SYNTHETIC_DEFAULTS = {
    UNIVARIATE: {"anomaly_fraction": 0.5, "noise_std": 0.02},
    MULTIVARIATE: {"anomaly_fraction": 0.3, "noise_std": 0.1},
}


@dataclass(frozen=True)
class SyntheticConfig:
    kind: str = UNIVARIATE
    weeks: int = 40
    subjects: int = 3
    anomaly_fraction: float | None = None
    noise_std: float | None = None
    seed: int = 0
    segments_per_subject: int = 16

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        for key, value in SYNTHETIC_DEFAULTS[self.kind].items():
            if getattr(self, key) is None:
                object.__setattr__(self, key, value)
        if not 0.0 <= self.anomaly_fraction <= 0.5:
            raise ValueError("anomaly_fraction must lie in [0, 0.5]")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")


@dataclass(frozen=True)
class SplitRatios:
    """``normal_train`` of normal windows train the detectors; the rest of the
    normals plus ``anomaly_take`` of each anomalous class form the AD test set.
    The policy set takes ``policy_normal`` of normals plus ``anomaly_take`` of
    each anomalous class."""

    normal_train: float = 0.7
    anomaly_take: float = 0.05
    policy_normal: float = 0.3

    def __post_init__(self):
        for name in ("normal_train", "anomaly_take", "policy_normal"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")


@dataclass
class DatasetBundle:
    kind: str
    ad_train: list[Window]
    ad_test: list[Window]
    policy_train: list[Window]
    policy_test: list[Window]
    standardization: Standardization
    meta: dict = field(default_factory=dict)

    def partitions(self) -> dict[str, list[Window]]:
        return {
            "ad_train": self.ad_train,
            "ad_test": self.ad_test,
            "policy_train": self.policy_train,
            "policy_test": self.policy_test,
        }


# --------------------------------------------------------------------------
# Ingestion, standardization, windowing
# --------------------------------------------------------------------------


def ingest_csv(path: str | Path, dims: int, header: bool = False) -> np.ndarray:
    """Read a numeric CSV with exactly ``dims`` columns into an (L, dims) array."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if header and lineno == 1:
                continue
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != dims:
                raise DataError(f"{path}:{lineno}: expected {dims} columns, got {len(row)}")
            values = []
            for col, cell in enumerate(row):
                try:
                    values.append(float(cell))
                except ValueError:
                    raise DataError(
                        f"{path}:{lineno}: column {col} is not numeric: {cell!r}"
                    ) from None
            rows.append(values)
    if not rows:
        raise DataError(f"{path}: no data rows")
    log.info("read %d rows from %s", len(rows), path)
    return np.asarray(rows, dtype=np.float64)


def standardize(
    series: np.ndarray, stats: Standardization | None = None
) -> tuple[np.ndarray, Standardization]:
    """Per-channel zero-mean/unit-variance transform (population std).

    With ``stats`` given they are applied verbatim.
    """
    x = np.asarray(series, dtype=np.float64)
    flat = x.reshape(-1, x.shape[-1]) if x.ndim > 1 else x.reshape(-1, 1)
    if stats is None:
        mean = flat.mean(axis=0)
        std = flat.std(axis=0)
        zero = std == 0
        if np.any(zero):
            warnings.warn(f"zero-variance channel(s) {np.flatnonzero(zero).tolist()}: std treated as 1", stacklevel=2)
            std = np.where(zero, 1.0, std)
        stats = Standardization(mean, std)
    out = (flat - stats.mean) / stats.std
    return out.reshape(x.shape), stats


def make_windows(
    series: np.ndarray,
    window_len: int,
    step: int,
    labels: np.ndarray | None = None,
    activity: np.ndarray | None = None,
    start_id: int = 0,
) -> list[Window]:
    """Slice an (L, D) series into ``floor((L - window_len) / step) + 1`` windows.

    A window is anomalous iff more than half of its points are. Its activity
    is the most common activity among its points.
    """
    x = np.asarray(series, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    L = x.shape[0]
    if L < window_len:
        raise DataError(f"series of length {L} is shorter than window_len={window_len}")
    if step < 1:
        raise DataError("step must be >= 1")
    n = (L - window_len) // step + 1
    windows = []
    for k in range(n):
        s = k * step
        label, act, mixed = NORMAL, 0, False
        if labels is not None:
            n_bad = int(np.sum(labels[s:s + window_len]))
            label = ANOMALOUS if 2 * n_bad > window_len else NORMAL
            mixed = 0 < n_bad < window_len
        if activity is not None:
            counts = np.bincount(activity[s:s + window_len].astype(int))
            act = int(np.argmax(counts))
        windows.append(Window(start_id + k, x[s:s + window_len].copy(), label, k, act, mixed))
    return windows


# --------------------------------------------------------------------------
# Synthetic generators
# --------------------------------------------------------------------------


def _smoothstep(t: np.ndarray, a: float, b: float) -> np.ndarray:
    u = np.clip((t - a) / (b - a), 0.0, 1.0)
    return u * u * (3 - 2 * u)


WEEKEND_LEVEL = 0.35
WEEKDAY_LEVEL = 1.0
RAMP_POINTS = 4.0
EDGE_JITTER = 1.0
SHIFT_JITTER = 12.0
ANOMALY_CUT = (8.0, 16.0)


def _weekend_profile(t: np.ndarray) -> np.ndarray:
    return WEEKEND_LEVEL + 0.06 * np.exp(-0.5 * ((t - 54) / 10.0) ** 2)


def _weekday_profile(t: np.ndarray, level: float, rise_at: float, fall_at: float) -> np.ndarray:
    on = _smoothstep(t, rise_at, rise_at + RAMP_POINTS) * (
        1.0 - _smoothstep(t, fall_at, fall_at + RAMP_POINTS))
    return WEEKEND_LEVEL + on * (level - WEEKEND_LEVEL)


def synth_univariate(config: SyntheticConfig) -> LabeledSeries:
    """Weekly power-consumption-like series at 15-minute resolution.

    Each week has five weekday plateaus and two weekend lows; plateau level
    and the times of the morning rise and evening fall vary per day. In an
    anomalous week one random weekday's plateau is cut short, starting late
    or ending early, so that part of the day sits at the weekend level. The
    cut length varies per anomaly, making some easy to spot and some subtle.
    Labels are per day.
    """
    if config.weeks < 3:
        raise DataError("synth_univariate needs at least 3 weeks")
    rng = np.random.default_rng(config.seed)
    t = np.arange(DAY_LEN, dtype=float)
    n_anom = int(round(config.weeks * config.anomaly_fraction))
    anomalous_weeks = set(rng.choice(config.weeks, size=n_anom, replace=False).tolist())
    values, labels = [], []
    for w in range(config.weeks):
        bad_day = int(rng.integers(0, 5)) if w in anomalous_weeks else -1
        for d in range(7):
            if d >= 5:
                day = _weekend_profile(t) * (1.0 + 0.02 * rng.standard_normal())
            else:
                level = WEEKDAY_LEVEL + 0.03 * rng.standard_normal()
                shift = rng.uniform(-SHIFT_JITTER, SHIFT_JITTER)
                rise_at = 26 + shift + rng.uniform(-EDGE_JITTER, EDGE_JITTER)
                fall_at = 70 + shift + rng.uniform(-EDGE_JITTER, EDGE_JITTER)
                day = _weekday_profile(t, level, rise_at, fall_at)
                if d == bad_day:
                    # Plateau cut short at one end: a late start or an early finish.
                    cut = rng.uniform(*ANOMALY_CUT)
                    if rng.random() < 0.5:
                        rise_at += cut
                    else:
                        fall_at -= cut
                    day = _weekday_profile(t, level, rise_at, fall_at)
            values.append(day)
            labels.append(ANOMALOUS if d == bad_day else NORMAL)
    series = np.concatenate(values)
    if config.noise_std:
        series = series + config.noise_std * rng.standard_normal(series.shape)
    point_labels = np.repeat(labels, DAY_LEN)
    return LabeledSeries(series[:, None], point_labels, point_labels.copy(), UNIVARIATE)


# (frequency Hz, amplitude scale, channel phase jitter rad) per activity;
# 0 is the normal regime.
ACTIVITY_REGIMES = (
    (0.8, 1.0, 0.0),
    (0.8, 1.0, 0.25),
    (0.8, 1.0, 0.5),
    (0.8, 1.0, 0.9),
    (0.8, 1.0, 1.4),
)
# Each subject wears the sensors in one of a few fixed channel-phase layouts.
NORMAL_LAYOUTS = 3
LAYOUT_SEED = 2024
# accelerometer, gyroscope, magnetometer gains, repeated for both sensors
_INSTRUMENT_GAIN = np.repeat([1.0, 0.6, 0.25] * 2, 3)


def synth_multivariate(config: SyntheticConfig) -> LabeledSeries:
    """18-channel activity-like signals sampled at 50 Hz.

    Every channel is a two-harmonic oscillation around a fixed offset. A
    subject's channel phases follow one of ``NORMAL_LAYOUTS`` layouts; the
    other activities perturb those phases per segment, more strongly for
    higher activity numbers. Subjects differ slightly in tempo and each is a
    separate recording of activity segments. Noise is relative to each
    channel's gain.
    """
    if config.subjects < 1:
        raise DataError("synth_multivariate needs at least one subject")
    rng = np.random.default_rng(config.seed)
    seg_len = 8 * MV_STEP
    n_classes = len(ACTIVITY_REGIMES) - 1
    base = np.linspace(0, 2 * np.pi, MV_DIMS, endpoint=False)
    layouts = base + np.random.default_rng(LAYOUT_SEED).uniform(-np.pi, np.pi, (NORMAL_LAYOUTS, MV_DIMS))
    layouts[0] = base
    phase2 = (3 * base) % (2 * np.pi)
    harm = np.tile([0.3, 0.2, 0.1], 6)
    offsets = np.tile([0.5, -0.3, 0.8], 6)
    chunks, acts, starts = [], [], []
    for subject in range(config.subjects):
        starts.append(sum(len(c) for c in chunks))
        layout = layouts[subject % NORMAL_LAYOUTS]
        tempo = 1.0 + 0.02 * rng.standard_normal()
        n_seg = config.segments_per_subject
        n_anom = int(round(n_seg * config.anomaly_fraction))
        seg_acts = np.zeros(n_seg, dtype=int)
        if n_anom:
            idx = rng.choice(n_seg, size=n_anom, replace=False)
            seg_acts[idx] = 1 + (rng.permutation(n_anom) % n_classes)
        t0 = rng.uniform(0, 10)
        for k, a in enumerate(seg_acts):
            freq, amp, jitter = ACTIVITY_REGIMES[a]
            t = t0 + (k * seg_len + np.arange(seg_len)) / SAMPLING_HZ
            w = 2 * np.pi * freq * tempo * t[:, None]
            ph = layout + jitter * rng.standard_normal(MV_DIMS)
            sig = amp * (np.sin(w + ph) + harm * np.sin(2 * w + phase2))
            if config.noise_std:
                sig = sig + config.noise_std * rng.standard_normal(sig.shape)
            chunks.append(offsets + _INSTRUMENT_GAIN * sig)
            acts.append(np.full(seg_len, a))
    activity = np.concatenate(acts)
    return LabeledSeries(np.concatenate(chunks), (activity > 0).astype(int), activity, MULTIVARIATE,
                         tuple(starts))


def generate(config: SyntheticConfig) -> LabeledSeries:
    if config.kind == UNIVARIATE:
        return synth_univariate(config)
    return synth_multivariate(config)


def windows_for(series: LabeledSeries) -> list[Window]:
    """Window every recording separately; ids run on across recordings."""
    win, step = (DAY_LEN, DAY_LEN) if series.kind == UNIVARIATE else (MV_WINDOW_LEN, MV_STEP)
    bounds = list(series.starts) + [len(series.values)]
    out: list[Window] = []
    for a, b in zip(bounds, bounds[1:]):
        out += make_windows(series.values[a:b], win, step, series.labels[a:b], series.activity[a:b],
                            start_id=len(out))
    return out


# --------------------------------------------------------------------------
# Splits and bundles
# --------------------------------------------------------------------------


def _take(rng: np.random.Generator, items: list[Window], frac: float, what: str) -> tuple[list, list]:
    n = int(math.floor(len(items) * frac + 1e-9))
    if items and n == 0:
        raise DataError(
            f"{what}: {len(items)} windows is too few to take {frac:.0%}; generate a larger dataset"
        )
    order = rng.permutation(len(items))
    chosen = sorted(order[:n].tolist())
    rest = sorted(order[n:].tolist())
    return [items[i] for i in chosen], [items[i] for i in rest]


def _by_class(windows: list[Window]) -> tuple[list[Window], dict[int, list[Window]]]:
    normal = [w for w in windows if w.label == NORMAL]
    classes: dict[int, list[Window]] = {}
    for w in windows:
        if w.label == ANOMALOUS:
            classes.setdefault(w.activity, []).append(w)
    return normal, classes


def split(
    windows: list[Window], kind: str, ratios: SplitRatios = SplitRatios(), seed: int = 0
) -> tuple[list[Window], list[Window]]:
    """Return ``(train, test)`` for ``kind`` in {"ad", "policy"}.

    ad:     train = ``normal_train`` of the normals; test = remaining
            normals plus ``anomaly_take`` of every anomalous class. Mixed
            normal windows drawn for training are dropped rather than trained on.
    policy: train = ``policy_normal`` of normals plus ``anomaly_take`` of every
            anomalous class; test = every window.
    """
    rng = np.random.default_rng(seed)
    normal, classes = _by_class(windows)
    picked_anoms: list[Window] = []
    for act in sorted(classes):
        chosen, _ = _take(rng, classes[act], ratios.anomaly_take, f"anomalous class {act}")
        picked_anoms += chosen
    if kind == "ad":
        train, rest = _take(rng, normal, ratios.normal_train, "normal windows")
        train = [w for w in train if not w.mixed]
        test = sorted(rest + picked_anoms, key=lambda w: w.id)
        return train, test
    if kind == "policy":
        chosen, _ = _take(rng, normal, ratios.policy_normal, "normal windows")
        train = sorted(chosen + picked_anoms, key=lambda w: w.id)
        return train, list(windows)
    raise ValueError(f"unknown split kind {kind!r}")


def _standardized(windows: list[Window], stats: Standardization) -> list[Window]:
    return [Window(w.id, stats.apply(w.data), w.label, w.index, w.activity, w.mixed) for w in windows]


def build_bundle(
    windows: list[Window], kind: str, ratios: SplitRatios = SplitRatios(), seed: int = 0,
    meta: dict | None = None,
) -> DatasetBundle:
    """Split raw windows and standardize every partition with ad_train stats."""
    ad_train, ad_test = split(windows, "ad", ratios, seed)
    policy_train, policy_test = split(windows, "policy", ratios, seed + 1)
    if not ad_train:
        raise DataError("no normal windows available for detector training")
    _, stats = standardize(np.concatenate([w.data for w in ad_train]))
    return DatasetBundle(
        kind,
        _standardized(ad_train, stats),
        _standardized(ad_test, stats),
        _standardized(policy_train, stats),
        _standardized(policy_test, stats),
        stats,
        dict(meta or {}, split_seed=seed, ratios=asdict(ratios)),
    )


def default_ratios(kind: str) -> SplitRatios:
    # Anomalous classes are small on the synthetic sets (one day per anomalous
    # week, a few dozen windows per activity), so a 5% sample would leave one or
    # two windows; univariate takes every anomalous day, multivariate half.
    if kind == UNIVARIATE:
        return SplitRatios(0.7, 1.0, 0.3)
    return SplitRatios(0.7, 0.5, 0.3)


def synthetic_bundle(config: SyntheticConfig, ratios: SplitRatios | None = None,
                     split_seed: int | None = None) -> DatasetBundle:
    series = generate(config)
    windows = windows_for(series)
    return build_bundle(
        windows,
        config.kind,
        ratios or default_ratios(config.kind),
        config.seed if split_seed is None else split_seed,
        meta={"source": "synthetic", "synthetic": asdict(config)},
    )


def series_from_csv(path: str | Path, kind: str, header: bool = False) -> LabeledSeries:
    """Value columns (1 or 18 by kind) followed by a 0/1 point-label column."""
    dims = 1 if kind == UNIVARIATE else MV_DIMS
    table = ingest_csv(path, dims + 1, header)
    labels = table[:, -1]
    if not np.all(np.isin(labels, (NORMAL, ANOMALOUS))):
        raise DataError(f"{path}: the last column must hold 0/1 labels")
    labels = labels.astype(int)
    return LabeledSeries(table[:, :-1], labels, labels.copy(), kind)


def csv_bundle(path: str | Path, kind: str, header: bool = False,
               ratios: SplitRatios | None = None, split_seed: int = 0) -> DatasetBundle:
    series = series_from_csv(path, kind, header)
    return build_bundle(windows_for(series), kind, ratios or default_ratios(kind), split_seed,
                        meta={"source": "csv", "csv_path": str(path)})


def save_bundle(bundle: DatasetBundle, directory: str | Path) -> None:
    """Write ``manifest.json`` plus ``<partition>.npy`` / ``<partition>.csv``.

    The ``.npy`` file holds the (N, T, D) standardized window values, the
    matching ``.csv`` one line per window: id, label, activity, index, mixed.
    """
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    counts = {}
    for name, windows in bundle.partitions().items():
        data = np.stack([w.data for w in windows]) if windows else np.zeros((0, 0, 0))
        np.save(out / f"{name}.npy", data)
        with open(out / f"{name}.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["id", "label", "activity", "index", "mixed"])
            for w in windows:
                wr.writerow([w.id, w.label, w.activity, w.index, int(w.mixed)])
        counts[name] = {
            "windows": len(windows),
            "anomalous": sum(w.label for w in windows),
        }
    manifest = {
        "format": "hecad-dataset",
        "version": 1,
        "kind": bundle.kind,
        "counts": counts,
        "standardization": bundle.standardization.to_dict(),
        **bundle.meta,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_bundle(directory: str | Path) -> DatasetBundle:
    src = Path(directory)
    manifest_path = src / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no dataset manifest in {src}")
    manifest = json.loads(manifest_path.read_text())
    parts = {}
    for name in ("ad_train", "ad_test", "policy_train", "policy_test"):
        data = np.load(src / f"{name}.npy")
        with open(src / f"{name}.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        parts[name] = [
            Window(int(r["id"]), data[i], int(r["label"]), int(r["index"]), int(r["activity"]),
                   bool(int(r.get("mixed") or 0)))
            for i, r in enumerate(rows)
        ]
    meta = {k: v for k, v in manifest.items()
            if k not in ("format", "version", "kind", "counts", "standardization")}
    return DatasetBundle(
        manifest["kind"], parts["ad_train"], parts["ad_test"], parts["policy_train"],
        parts["policy_test"], Standardization.from_dict(manifest["standardization"]), meta,
    )
