"""Parameter counts, analytic MACs and single-slice CPU timing of the four
network variants at full width."""

import argparse

from mriqa import tensor as T
from mriqa.cost_model import bench, block_crf, count_macs, mac_table
from mriqa.nrnet import VARIANTS, build_variant


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--input-size", type=int, default=64)
    ap.add_argument("--reps", type=int, default=100)
    ap.add_argument("--layers", action="store_true", help="print the per-layer MAC table")
    a = ap.parse_args()
    T.set_precision("float32")

    for c in (128, 256, 512):
        print(f"residual block c={c // 2}->{c} d=3: separable saves {float(1 / block_crf(c // 2, c, 3)):.2f}x")
    if a.layers:
        for v in VARIANTS:
            print(f"# {v}\n{mac_table(count_macs(build_variant(v, input_size=a.input_size)))}")
    report = bench(VARIANTS, a.input_size, a.reps)
    print(report.table())
    for name, held in report.orderings().items():
        print(f"{name}: {'holds' if held else 'violated'}")


if __name__ == "__main__":
    main()
