"""Volume accuracy as a function of the volume self-training threshold.

Trains the slice stages once, then refits the volume stage at each threshold
on the same features. Optionally repeats over several data seeds.
"""

import argparse

import numpy as np

from mriqa import tensor as T
from mriqa.pipeline import PipelineConfig, run_benchmark
from mriqa.synth import NoiseModel, generate_dataset


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--thresholds", type=float, nargs="+", default=[0.5, 0.6, 0.7, 0.8, 0.9])
    ap.add_argument("--config", help="PipelineConfig JSON")
    a = ap.parse_args()
    T.set_precision("float32")
    cfg = PipelineConfig.load(a.config) if a.config else PipelineConfig()

    table = []
    for seed in a.seeds:
        data = generate_dataset((20, 20, 20), 60, NoiseModel(0.3), seed=seed, unlabeled_volumes=200)
        _, report = run_benchmark(data, cfg, seed=seed, thresholds=a.thresholds)
        table.append([report.sweep[p] for p in a.thresholds])
        print(f"seed={seed} " + " ".join(f"p={p:.2f}:{report.sweep[p]:.4f}" for p in a.thresholds), flush=True)
    mean = np.mean(table, axis=0)
    print("mean " + " ".join(f"p={p:.2f}:{m:.4f}" for p, m in zip(a.thresholds, mean)))


if __name__ == "__main__":
    main()
