"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict that is printed in the pytest terminal
summary. The desk benchmark and the timing run take several minutes.
"""

import time
from fractions import Fraction

import numpy as np

from mriqa import tensor as T
from mriqa.cost_model import ConvShape, bench, block_crf, cc_dsconv, cc_std_conv, total_macs
from mriqa.domain import QualityLabel
from mriqa.forest import DecisionTree, ForestConfig
from mriqa.metrics import SLICE_EXCLUSION, ConfusionMatrix, metrics
from mriqa.nrnet import VARIANTS, NRNet, build_variant, nres_forward
from mriqa.pipeline import PipelineConfig, SliceSet, desk_train_config, run_benchmark, run_pipeline
from mriqa.selftrain import SelfTrainConfig, init_volume_labels, select_slices
from mriqa.synth import NoiseModel, PhantomConfig, generate_dataset
from mriqa.training import FocalLossConfig, focal_loss

from conftest import record_criterion
from test_forest import oracle_tree
from test_metrics import T1_SLICE, T1_VOLUME, T2_SLICE, T2_VOLUME
from test_nrnet import brute_force_nonlocal


def r4(values):
    return [None if v is None else round(v, 4) for v in values]


def test_metric_fidelity():
    t1 = metrics(ConfusionMatrix(np.array(T1_SLICE), SLICE_EXCLUSION))
    t2 = metrics(ConfusionMatrix(np.array(T2_SLICE), SLICE_EXCLUSION))
    v1 = metrics(ConfusionMatrix(np.array(T1_VOLUME)))
    v2 = metrics(ConfusionMatrix(np.array(T2_VOLUME)))
    got = [r4(t1.sensitivity), r4(t1.specificity), r4(t2.sensitivity), r4(t2.specificity),
           r4(v1.sensitivity), r4(v1.specificity), r4(v2.sensitivity), r4(v2.specificity)]
    want = [[0.9473, None, 0.9917], [1.0, None, 1.0], [0.9865, None, 1.0], [1.0, None, 0.996],
            [0.92, 1.0, 1.0], [1.0, 0.9355, 1.0], [1.0, 0.6667, 1.0], [0.9474, 1.0, 0.963]]
    ok = got == want
    record_criterion(1, ok, "slice and volume sensitivity/specificity reproduced to 4 decimals")
    assert ok, got


def test_cost_model_identity():
    rng = np.random.default_rng(0)
    exact = 0
    for _ in range(1000):
        c, co = (int(v) for v in rng.integers(1, 513, size=2))
        h, w, d = int(rng.integers(1, 65)), int(rng.integers(1, 65)), int(rng.integers(1, 8))
        s = ConvShape(c, co, h, w, d)
        exact += Fraction(cc_dsconv(s), cc_std_conv(s)) == Fraction(1, co) + Fraction(1, d * d)
    counted = {}
    for tag in VARIANTS:
        cfg = build_variant(tag, input_size=16, stem_channels=8, widths=(16, 32, 64))
        with T.count_macs() as macs:
            NRNet(cfg).forward(np.zeros((1, 16, 16)))
        counted[tag] = sum(macs.values()) == total_macs(cfg)
    savings = {c: float(1 / block_crf(c // 2, c, 3)) for c in (128, 256, 512)}
    ok = exact == 1000 and all(counted.values()) and all(6 <= v <= 7 for v in savings.values())
    record_criterion(2, ok, f"{exact}/1000 exact ratios, instrumented==analytic {counted}, "
                            f"block savings {', '.join(f'{k}:{v:.2f}x' for k, v in savings.items())}")
    assert ok


def projected(fn, shape, rng):
    R = T.Tensor(rng.normal(size=shape))
    return lambda: T.sum_all(T.mul(fn(), R))


def layer_errors(seed):
    """Worst relative gradient error per layer for one random draw."""
    rng = np.random.default_rng([seed, 7])
    x = T.Tensor(rng.normal(size=(2, 3, 6, 6)))
    k = T.Tensor(rng.normal(size=(4, 3, 3, 3)))
    dk = T.Tensor(rng.normal(size=(3, 3, 3)))
    pk, pb = T.Tensor(rng.normal(size=(4, 3))), T.Tensor(rng.normal(size=4))
    a, b = T.Tensor(rng.normal(size=(3, 5))), T.Tensor(rng.normal(size=(5, 2)))
    g, beta = T.Tensor(rng.normal(size=3) + 1.5), T.Tensor(rng.normal(size=3))
    e = 2
    phi, psi, gv, wo = (T.Tensor(rng.normal(size=s) * 0.5) for s in [(e, 3), (e, 3), (e, 3), (3, e)])
    state = T.BatchNormState(3)
    checks = {
        "conv2d": (lambda: T.conv2d(x, k, 2, 1), (2, 4, 3, 3), [x, k]),
        "depthwise_conv2d": (lambda: T.depthwise_conv2d(x, dk, 1, 1), (2, 3, 6, 6), [x, dk]),
        "pointwise_conv2d": (lambda: T.pointwise_conv2d(x, pk, 1, pb), (2, 4, 6, 6), [x, pk, pb]),
        "matmul": (lambda: T.matmul(a, b), (3, 2), [a, b]),
        "relu": (lambda: T.relu(x), x.shape, [x]),
        "add": (lambda: T.add(x, x), x.shape, [x]),
        "global_avg_pool": (lambda: T.global_avg_pool(x), (2, 3), [x]),
        "softmax": (lambda: T.softmax(a, -1), (3, 5), [a]),
        "nres": (lambda: nres_forward(x, phi, psi, gv, wo), x.shape, [x, phi, psi, gv, wo]),
        "batchnorm2d": (lambda: T.batchnorm2d(x, g, beta, state, "train"), x.shape, [x, g, beta]),
    }
    out = {}
    for name, (fn, shape, wrt) in checks.items():
        f = projected(fn, shape, rng)
        out[name] = max(T.finite_diff_check(f, t) for t in wrt)
    return out


def network_error(seed):
    rng = np.random.default_rng([seed, 11])
    net = NRNet(build_variant("DSRes+NRes", 8, 2, (4, 4, 4)), seed=seed)
    net.params["b3.out"].data = rng.normal(size=net.params["b3.out"].shape)  # zero at init
    x = rng.random((3, 8, 8))
    focal = FocalLossConfig(class_weights=(1.0, 2.0, 1.5))
    f = lambda: focal_loss(net.forward(x, "train"), [0, 1, 2], focal, net.weights())
    return max(T.finite_diff_check(f, p) for p in net.params.values())


def test_gradient_correctness():
    start = time.perf_counter()
    worst: dict[str, float] = {}
    for seed in range(20):
        errs = layer_errors(seed)
        errs["network+focal"] = network_error(seed)
        for k, v in errs.items():
            worst[k] = max(worst.get(k, 0.0), v)
    limit = {k: (1e-3 if k in ("batchnorm2d", "network+focal") else 1e-4) for k in worst}
    bad = {k: v for k, v in worst.items() if v >= limit[k]}
    elapsed = time.perf_counter() - start
    ok = not bad and elapsed < 300
    plain = max(v for k, v in worst.items() if limit[k] == 1e-4)
    record_criterion(3, ok, f"20 seeds, worst plain-layer {plain:.1e}, "
                            f"batchnorm {worst['batchnorm2d']:.1e}, network {worst['network+focal']:.1e}, "
                            f"{elapsed:.0f}s")
    assert ok, (bad, elapsed)


def test_nonlocal_oracle():
    rng = np.random.default_rng(4)
    worst, row_err = 0.0, 0.0
    shapes = [(8, 8, 8)] + [tuple(int(v) for v in rng.integers(1, 9, size=3)) for _ in range(29)]
    for c, h, w in shapes:
        e = max(1, c // 2)
        x, phi, psi, g, wo = (rng.normal(size=s) for s in [(c, h, w), (e, c), (e, c), (e, c), (c, e)])
        out, attn, _ = nres_forward(*(T.Tensor(v) for v in (x, phi, psi, g, wo)), return_parts=True)
        want, want_attn = brute_force_nonlocal(x, phi, psi, g, wo)
        worst = max(worst, np.abs(out.data - want).max(), np.abs(attn.data[0] - want_attn).max())
        row_err = max(row_err, np.abs(attn.data.sum(axis=-1) - 1).max())
    ok = worst < 1e-10 and row_err < 1e-6
    record_criterion(4, ok, f"30 inputs up to 8x8x8, max abs diff {worst:.1e}, row-sum error {row_err:.1e}")
    assert ok


def test_forest_oracle():
    rng = np.random.default_rng(5)
    matches = 0
    for _ in range(100):
        n, f = int(rng.integers(1, 9)), int(rng.integers(1, 4))
        X = rng.integers(0, 5, size=(n, f)).astype(float)
        y = rng.integers(0, 3, size=n)
        matches += DecisionTree().fit(X, y).nodes == oracle_tree(X.tolist(), y.tolist())
    record_criterion(5, matches == 100, f"{matches}/100 trees identical to exhaustive search")
    assert matches == 100


def test_desk_benchmark():
    start = time.perf_counter()
    data = generate_dataset((20, 20, 20), 60, NoiseModel(0.3), seed=0, unlabeled_volumes=200)
    with T.precision("float32"):  # same precision as the CLI and scripts
        _, rep = run_benchmark(data, PipelineConfig(), seed=0)
    elapsed = time.perf_counter() - start
    s = rep.sweep
    checks = {
        "a": rep.post_slice_accuracy >= rep.pre_slice_accuracy,
        "b": rep.volume_accuracy >= 0.90,
        "c": all(s[p] >= s[0.6] for p in (0.7, 0.8, 0.9)),
        "d": rep.slice_iterations == 2 and rep.volume_iterations == 2,
        "runtime": elapsed < 1800,
    }
    ok = all(checks.values())
    record_criterion(6, ok, f"slice acc {rep.pre_slice_accuracy:.4f}->{rep.post_slice_accuracy:.4f}, "
                            f"volume acc {rep.volume_accuracy:.4f}, sweep "
                            f"{' '.join(f'{p}:{a:.3f}' for p, a in sorted(s.items()))}, iterations "
                            f"{rep.slice_iterations}/{rep.volume_iterations}, {elapsed:.0f}s, "
                            f"failed {[k for k, v in checks.items() if not v]}")
    assert ok, "\n".join(rep.lines())


def small_pipeline_trace():
    data = generate_dataset((3, 3, 3), 8, NoiseModel(0.3), seed=3, unlabeled_volumes=6, test_counts=(1, 1, 1),
                            phantom=PhantomConfig(size=16))
    cfg = PipelineConfig(net=build_variant("DSRes+NRes", 16, 4, (8, 8, 8)), pretrain=desk_train_config(epochs=3),
                         semi_epochs=1, retrain_epochs=1, selftrain=SelfTrainConfig(p_slice=0.34, p_volume=0.34),
                         forest=ForestConfig(n_trees=5))
    with T.precision("float32"):
        res = run_pipeline(SliceSet.from_synth(data.train), SliceSet.from_synth(data.unlabeled), cfg, seed=1)
    return res.trace_text()


def test_protocol_invariants():
    rng = np.random.default_rng(6)
    partition, monotone = True, True
    for _ in range(500):
        n = int(rng.integers(1, 40))
        P = rng.dirichlet(np.ones(3), size=n)
        prev = rng.integers(0, 3, size=n)
        lo, hi = np.sort(rng.uniform(0.34, 0.99, size=2))
        a, b = select_slices(prev, P, lo), select_slices(prev, P, hi)
        partition &= sorted(np.r_[a.kept, a.pruned].tolist()) == list(range(n))
        monotone &= set(b.kept.tolist()) <= set(a.kept.tolist())
    L = QualityLabel
    rules = (init_volume_labels([L.PASS] * 49 + [L.QUESTIONABLE] * 6 + [L.FAIL] * 5) == L.PASS
             and init_volume_labels([L.PASS] * 10 + [L.QUESTIONABLE] * 20 + [L.FAIL] * 30) == L.FAIL
             and init_volume_labels([L.PASS] * 30 + [L.QUESTIONABLE] * 25 + [L.FAIL] * 5) == L.QUESTIONABLE)
    total = all(init_volume_labels(rng.integers(0, 3, size=int(rng.integers(1, 80)))) in tuple(L)
                for _ in range(500))
    first, second = small_pipeline_trace(), small_pipeline_trace()
    deterministic = first == second and first.count("\n") == 4
    ok = partition and monotone and rules and total and deterministic
    record_criterion(7, ok, f"partition={partition} monotone={monotone} rule examples={rules} totality={total} "
                            f"identical traces={deterministic}")
    assert ok, (first, second)


def test_timing_ordering():
    with T.precision("float32"):
        rep = bench(("CRes", "DSRes", "DSRes+NRes"), input_size=64, reps=100, seed=0)
    m = {v: rep.median(v) for v in ("DSRes+NRes", "DSRes", "CRes")}
    ok = m["DSRes+NRes"] <= m["DSRes"] <= m["CRes"]
    record_criterion(8, ok, "median ms " + ", ".join(f"{k}={v:.2f}" for k, v in m.items()))
    assert ok
