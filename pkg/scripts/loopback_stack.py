"""Run trained detectors as three local node processes and compare the wire
verdicts with in-process successive detection.

    python3 scripts/loopback_stack.py configs/univariate.json --windows 100 --delays
"""

import argparse
import statistics
import sys
import tempfile

import numpy as np

from hecad import hec
from hecad.cli import Layout, load_data, load_detectors
from hecad.config import load_config
from hecad.detectors import LAYERS
from hecad.transport import DEFAULT_LINK_DELAY_MS, DetectClient, LoopbackStack


def run(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("config")
    p.add_argument("--output", help="override the output directory")
    p.add_argument("--windows", type=int, default=100)
    p.add_argument("--delays", action="store_true",
                   help="inject the default per-link delays (edge 125 ms, cloud 125 ms one-way)")
    p.add_argument("--seed", type=int, default=0, help="window sampling seed")
    args = p.parse_args(argv)

    cfg = load_config(args.config)
    layout = Layout(args.output or cfg.output_dir)
    windows = load_data(layout).policy_test
    detectors = load_detectors(layout)
    rng = np.random.default_rng(args.seed)
    picked = [windows[i] for i in rng.choice(len(windows), min(args.windows, len(windows)), replace=False)]
    outputs = hec.LayerOutputs.compute(picked, detectors)
    expected = hec.run_scheme("successive", outputs, cfg.delay, cfg.policy.reward_config(cfg.kind), cfg.kind)

    delays = DEFAULT_LINK_DELAY_MS if args.delays else {}
    mismatches, measured = 0, {layer: [] for layer in LAYERS}
    with tempfile.TemporaryDirectory() as tmp, \
            LoopbackStack({layer: layout.detector(layer) for layer in LAYERS}, tmp, delays) as stack, \
            DetectClient(stack.device_addr) as client:
        for i, (w, rec) in enumerate(zip(picked, expected.records)):
            r = client.detect(w)
            # nodes score one window at a time; batched scoring differs in the last ulps
            want = detectors[rec.layer].detect(w.data)
            if (r.verdict, r.layer, r.min_logpd) != (rec.verdict, rec.layer, want.min_logpd) or r.error:
                mismatches += 1
            measured[r.layer].append(r.delay_ms)

    print(f"{len(picked)} windows, {mismatches} mismatches against in-process successive detection")
    for layer, values in measured.items():
        if values:
            sim = hec.e2e_delay(cfg.delay, layer, cfg.kind, list(LAYERS[:LAYERS.index(layer) + 1]))
            print(f"  answered at {layer:<5}: {len(values):4d}  median wire delay "
                  f"{statistics.median(values):8.2f} ms  (simulated {sim:.2f} ms)")
    return 1 if mismatches else 0


if __name__ == "__main__":
    sys.exit(run())
