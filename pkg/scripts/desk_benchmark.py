"""End-to-end desk benchmark: synthetic data, full protocol, clean-test scores.

    python3 scripts/desk_benchmark.py --seed 0 --trace trace.txt
"""

import argparse
import logging
import time
from pathlib import Path

from mriqa import tensor as T
from mriqa.pipeline import PipelineConfig, run_benchmark
from mriqa.synth import NoiseModel, generate_dataset


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0, help="data seed")
    ap.add_argument("--pipeline-seed", type=int, default=0)
    ap.add_argument("--config", help="PipelineConfig JSON")
    ap.add_argument("--noise-rate", type=float, default=0.3)
    ap.add_argument("--trace", help="write the self-training trace here")
    ap.add_argument("--verbose", action="store_true")
    a = ap.parse_args()
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    T.set_precision("float32")
    cfg = PipelineConfig.load(a.config) if a.config else PipelineConfig()

    start = time.perf_counter()
    data = generate_dataset((20, 20, 20), 60, NoiseModel(a.noise_rate), seed=a.seed, unlabeled_volumes=200)
    _, report = run_benchmark(data, cfg, seed=a.pipeline_seed)
    print("\n".join(report.lines()))
    print(f"elapsed_s={time.perf_counter() - start:.1f}")
    if a.trace:
        Path(a.trace).write_text(report.trace)


if __name__ == "__main__":
    main()
