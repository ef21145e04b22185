#!/usr/bin/env python3
"""Per-epoch wall-time comparison across inducing-point budgets.

The decoupled model with two sets of p points competes against the single-set
model with 2p points on the same data; both see identical minibatch streams.

Example:
    python scripts/run_scaling_benchmark.py --points 128,256 --epochs 5
"""

import argparse
import json

import numpy as np

from entd.tensordata import synth_count
from entd.trainer import TrainConfig, fit


def median_epoch_seconds(model, tensor, p_u, p_v, epochs, seed):
    config = TrainConfig(
        model=model,
        likelihood="negbin",
        rank=3,
        inducing_u=p_u,
        inducing_v=p_v,
        batch_size=128,
        epochs=epochs,
        lr=1e-3,
        seed=seed,
    )
    report = fit(config, tensor)
    return float(np.median([r.seconds for r in report.records]))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--shape", default="50,40,25")
    ap.add_argument("--points", default="128,256", help="per-set sizes p to sweep")
    ap.add_argument("--epochs", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    shape = tuple(int(s) for s in args.shape.split(","))
    tensor, _ = synth_count(shape, 3, 20.0, args.seed)
    rows = []
    for p in (int(s) for s in args.points.split(",")):
        decoupled = median_epoch_seconds("ented", tensor, p, p, args.epochs, args.seed)
        single = median_epoch_seconds("gptf-pg", tensor, 2 * p, 0, args.epochs, args.seed)
        rows.append(
            {"p": p, "ented_2xp": decoupled, "gptf_pg_2p": single, "ratio": decoupled / single}
        )
        print(json.dumps(rows[-1], sort_keys=True), flush=True)


if __name__ == "__main__":
    main()
