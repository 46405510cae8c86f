"""Command-line entry point.

Artifacts live under the configured output directory::

    data/               dataset bundle (manifest.json, <part>.npy, <part>.csv)
    detectors/<layer>.json, detectors/<layer>_history.csv
    policy/policy.json, policy/curve.csv
    results/records.csv, results/plot.csv, results/summary.txt, results/summary.json

Exit codes: 0 success, 2 config/schema error, 3 missing artifact,
4 runtime or numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import datasets as ds
from . import detectors as det
from . import hec, nn, policy, transport
from .config import ConfigError, ExperimentConfig, load_config

log = logging.getLogger("hecad")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_RUNTIME = 0, 2, 3, 4


class MissingArtifact(FileNotFoundError):
    pass


class Layout:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.data = self.root / "data"
        self.detectors = self.root / "detectors"
        self.policy_dir = self.root / "policy"
        self.results = self.root / "results"

    def detector(self, layer: str) -> Path:
        return self.detectors / f"{layer}.json"

    @property
    def policy(self) -> Path:
        return self.policy_dir / "policy.json"


def _layout(cfg: ExperimentConfig) -> Layout:
    return Layout(cfg.output_dir)


def load_data(layout: Layout) -> ds.DatasetBundle:
    if not (layout.data / "manifest.json").exists():
        raise MissingArtifact(f"no dataset bundle in {layout.data}; run 'generate-data' first")
    return ds.load_bundle(layout.data)


def load_detectors(layout: Layout) -> dict[str, det.TrainedDetector]:
    missing = [layer for layer in det.LAYERS if not layout.detector(layer).exists()]
    if missing:
        raise MissingArtifact(
            f"missing detector bundle(s) for {', '.join(missing)} in {layout.detectors}; run 'train' first")
    return {layer: det.TrainedDetector.load(layout.detector(layer)) for layer in det.LAYERS}


def contexts_for(windows, kind: str, detectors: dict[str, det.TrainedDetector]) -> np.ndarray:
    return policy.extract_contexts(windows, kind, detectors["iot"] if kind == ds.MULTIVARIATE else None)


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_generate_data(cfg: ExperimentConfig, force: bool = False) -> int:
    layout = _layout(cfg)
    if (layout.data / "manifest.json").exists() and not force:
        log.info("dataset exists in %s; skipping (use --force to rebuild)", layout.data)
        return EXIT_OK
    d = cfg.dataset
    if d.source == "csv":
        if not Path(d.csv_path).exists():
            raise MissingArtifact(f"CSV input {d.csv_path} not found")
        bundle = ds.csv_bundle(d.csv_path, d.kind, d.csv_header, d.ratios, d.split_seed)
    else:
        bundle = ds.synthetic_bundle(d.synthetic(), d.ratios, d.split_seed)
    ds.save_bundle(bundle, layout.data)
    counts = {k: len(v) for k, v in bundle.partitions().items()}
    print(f"wrote {d.kind} dataset to {layout.data}: {counts}")
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, force: bool = False) -> int:
    layout = _layout(cfg)
    bundle = load_data(layout)
    if bundle.kind != cfg.kind:
        raise ConfigError(f"dataset on disk is {bundle.kind!r} but the config says {cfg.kind!r}")
    layout.detectors.mkdir(parents=True, exist_ok=True)
    for layer, spec in cfg.detectors.specs(cfg.kind).items():
        path = layout.detector(layer)
        if path.exists() and not force:
            log.info("%s exists; skipping", path)
            continue
        log.info("training %s (%d epochs)", spec.name, spec.train.epochs)
        detector, history = det.build_detector(spec, bundle.ad_train, cfg.detectors.init_seed)
        detector.save(path)
        with open(layout.detectors / f"{layer}_history.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["epoch", "loss"])
            for i, v in enumerate(history.epoch_loss, start=1):
                wr.writerow([i, repr(v)])
        print(f"{spec.name}: ad_test accuracy {det.accuracy(detector, bundle.ad_test):.2f}% -> {path}")
    return EXIT_OK


def cmd_train_policy(cfg: ExperimentConfig, force: bool = False) -> int:
    layout = _layout(cfg)
    if layout.policy.exists() and not force:
        log.info("%s exists; skipping", layout.policy)
        return EXIT_OK
    bundle = load_data(layout)
    detectors = load_detectors(layout)
    windows = bundle.policy_train
    outputs = hec.LayerOutputs.compute(windows, detectors)
    ctx = contexts_for(windows, cfg.kind, detectors)
    scaler = policy.context_scaler(ctx, cfg.kind)
    if scaler is not None:
        ctx = scaler.apply(ctx)
    samples = policy.build_bandit_samples(
        windows, outputs.correctness(), hec.arm_delays(cfg.delay, cfg.kind, len(windows)), ctx)
    rc = cfg.policy.reward_config(cfg.kind)
    params, curve = policy.train_policy(samples, rc, cfg.policy.optimizer_config(), cfg.policy.policy_seed)
    layout.policy_dir.mkdir(parents=True, exist_ok=True)
    policy.save_policy(layout.policy, params, cfg.policy.policy_seed,
                       {"kind": cfg.kind, "alpha": rc.alpha, "baseline_decay": rc.baseline_decay,
                        "context_scaler": scaler.to_dict() if scaler is not None else None})
    curve.write_csv(layout.policy_dir / "curve.csv")
    print(f"policy: mean reward {curve.mean_reward[0]:.4f} (epoch 1) -> "
          f"{curve.mean_reward[-1]:.4f} (epoch {curve.epoch[-1]}) -> {layout.policy}")
    return EXIT_OK


def cmd_evaluate(cfg: ExperimentConfig, scheme: str = "all") -> int:
    layout = _layout(cfg)
    schemes = list(cfg.schemes) if scheme == "all" else [scheme]
    if scheme != "all" and scheme not in hec.SCHEMES:
        raise ConfigError(f"--scheme must be 'all' or one of {hec.SCHEMES}")
    bundle = load_data(layout)
    detectors = load_detectors(layout)
    params, ctx = None, None
    if "adaptive" in schemes:
        if not layout.policy.exists():
            raise MissingArtifact(f"no policy at {layout.policy}; run 'train-policy' first")
        params, meta = policy.load_policy(layout.policy)
        ctx = contexts_for(bundle.policy_test, cfg.kind, detectors)
        if meta.get("context_scaler"):
            ctx = policy.ContextScaler.from_dict(meta["context_scaler"]).apply(ctx)
    outputs = hec.LayerOutputs.compute(bundle.policy_test, detectors)
    results = hec.run_all(outputs, cfg.delay, cfg.policy.reward_config(cfg.kind), cfg.kind,
                          params, ctx, schemes)
    layout.results.mkdir(parents=True, exist_ok=True)
    hec.write_records_csv(layout.results / "records.csv", results)
    hec.write_plot_csv(layout.results / "plot.csv", results)
    table = hec.summary_table(results, f"{cfg.kind} ({len(bundle.policy_test)} windows)")
    (layout.results / "summary.txt").write_text(table)
    hec.write_summary_json(layout.results / "summary.json", results, {"kind": cfg.kind})
    print(table, end="")
    return EXIT_OK


def _addr(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {text!r}")
    return host, int(port)


def cmd_serve(node_config: str) -> int:
    path = Path(node_config)
    if not path.exists():
        raise MissingArtifact(f"node config {path} not found")
    try:
        ncfg = transport.NodeConfig.from_dict(json.loads(path.read_text()))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not Path(ncfg.detector_path).exists():
        raise MissingArtifact(f"detector bundle {ncfg.detector_path} not found")
    node = transport.Node(ncfg)
    node.start()
    host, port = node.address
    print(f"listening {host}:{port} role={ncfg.role}", flush=True)
    try:
        node._thread.join()
    except KeyboardInterrupt:
        pass
    finally:
        node.shutdown()
    return EXIT_OK


def cmd_probe(address: tuple[str, int], cfg: ExperimentConfig | None, index: int,
              kind: str, timeout_s: float) -> int:
    if cfg is not None:
        windows = load_data(_layout(cfg)).policy_test
        if not 0 <= index < len(windows):
            raise ConfigError(f"--index must lie in [0, {len(windows)})")
        window = windows[index]
    else:
        shape = (ds.DAY_LEN, 1) if kind == ds.UNIVARIATE else (ds.MV_WINDOW_LEN, ds.MV_DIMS)
        window = ds.Window(index, np.zeros(shape), ds.NORMAL, index)
    result = transport.client_detect(address, window, timeout_s)
    print(json.dumps({"id": result.window_id, "verdict": result.verdict, "layer": result.layer,
                      "hops": result.hops, "confident": result.confident,
                      "delay_ms": round(result.delay_ms, 3), "error": result.error}))
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hecad", description="Adaptive anomaly detection in a three-tier HEC stack.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(name: str, help_: str) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=True, help="experiment config JSON")
        sp.add_argument("--output", help="override the output directory")
        sp.add_argument("--seed", type=int, help="override every named seed")
        return sp

    with_config("generate-data", "build the dataset bundle").add_argument("--force", action="store_true")
    with_config("train", "train the three detectors").add_argument("--force", action="store_true")
    with_config("train-policy", "train the bandit policy").add_argument("--force", action="store_true")
    ev = with_config("evaluate", "run the detection schemes")
    ev.add_argument("--scheme", default="all", help="'all' or one scheme name")

    sv = sub.add_parser("serve", help="run one node of the distributed stack")
    sv.add_argument("--node-config", required=True, help="node config JSON")

    pr = sub.add_parser("probe", help="send one detection request to a node")
    pr.add_argument("--address", required=True, type=_addr, help="HOST:PORT of the device node")
    pr.add_argument("--config", help="take the window from this experiment's policy_test set")
    pr.add_argument("--output", help="override the output directory")
    pr.add_argument("--index", type=int, default=0, help="window position in policy_test")
    pr.add_argument("--kind", choices=ds.KINDS, default=ds.UNIVARIATE,
                    help="window shape when no --config is given (an all-zero window is sent)")
    pr.add_argument("--timeout", type=float, default=transport.DEFAULT_TIMEOUT_S, help="seconds")
    return p


def _config(args) -> ExperimentConfig:
    if not Path(args.config).exists():
        raise ConfigError(f"config file {args.config} not found")
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if args.output:
        cfg.output_dir = args.output
    return cfg


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    c = args.command
    if c == "serve":
        return cmd_serve(args.node_config)
    if c == "probe":
        cfg = _config(args) if args.config else None
        return cmd_probe(args.address, cfg, args.index, args.kind, args.timeout)
    cfg = _config(args)
    if c == "generate-data":
        return cmd_generate_data(cfg, args.force)
    if c == "train":
        return cmd_train(cfg, args.force)
    if c == "train-policy":
        return cmd_train_policy(cfg, args.force)
    return cmd_evaluate(cfg, args.scheme)


def main(argv: list[str] | None = None) -> int:
    try:
        return run(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifact, hec.ArtifactError, FileNotFoundError) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (nn.NumericalError, policy.PolicyError, det.DetectorError, ds.DataError,
            transport.ProtocolError, TimeoutError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
