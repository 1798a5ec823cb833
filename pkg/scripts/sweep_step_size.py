#!/usr/bin/env python3
"""Stability sweep for the SGLD step size on the synthetic dataset.

For each candidate step size this script runs a short training, then reports
whether it stayed finite, the trailing energy gap (negative minus positive,
positive = learning), and the gradient norm. The shipped default in
configs/synthetic-32.yaml is the sweep's smallest stable value with a clearly
positive gap; rerun after changing the sampler or the texture generator:

    python scripts/sweep_step_size.py --out sweep.csv
"""

import argparse
import csv
import tempfile
import time

import numpy as np

from ebad.data import SyntheticSpec, generate_synthetic, load_mvtec, load_split_images
from ebad.network import topology_for_input
from ebad.sampler import SamplerConfig
from ebad.training import TrainConfig, TrainingDivergedError, fit

CANDIDATES = [0.001, 0.003, 0.01, 0.03, 0.1, 0.3]


def run_one(step_size: float, images, topology, epochs: int) -> dict:
    config = TrainConfig(
        learning_rate=1e-4,
        batch_size=8,
        epochs=epochs,
        seed=0,
        sampler=SamplerConfig(step_size=step_size, n_steps=100),
    )
    t0 = time.perf_counter()
    try:
        _, history = fit(images, topology, config)
    except TrainingDivergedError as exc:
        return {"step_size": step_size, "stable": 0, "tail_gap": "",
                "tail_grad_norm": "", "seconds": round(time.perf_counter() - t0, 1),
                "note": f"diverged at iteration {exc.iteration}"}
    tail = history.records[-max(1, len(history) // 5):]
    return {
        "step_size": step_size,
        "stable": 1,
        "tail_gap": float(np.mean([r.gap for r in tail])),
        "tail_grad_norm": float(np.mean([r.grad_norm for r in tail])),
        "seconds": round(time.perf_counter() - t0, 1),
        "note": "",
    }


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="sweep_step_size.csv")
    parser.add_argument("--epochs", type=int, default=1)
    parser.add_argument("--train-count", type=int, default=64)
    args = parser.parse_args()

    spec = SyntheticSpec(seed=0, image_size=32, train_count=args.train_count,
                         test_good_count=1, test_defect_count=1,
                         texture="stripes", channels=1)
    with tempfile.TemporaryDirectory() as tmp:
        generate_synthetic(spec, tmp)
        manifest = load_mvtec(tmp, spec.category, "train", channels=1)
        images = load_split_images(manifest, spec.image_size)
    topology = topology_for_input(spec.image_size, spec.channels)

    rows = []
    for step_size in CANDIDATES:
        row = run_one(step_size, images, topology, args.epochs)
        rows.append(row)
        print(f"step_size={step_size}: stable={row['stable']} gap={row['tail_gap']}"
              f" ({row['seconds']}s) {row['note']}")
    with open(args.out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
