"""Multiply-accumulate (MAC) accounting and CPU timing for NR-Net variants."""

from __future__ import annotations

import time
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import InvalidInputError
from .nrnet import VARIANTS, NRNet, NRNetConfig, build_variant


@dataclass(frozen=True)
class ConvShape:
    c: int
    c_out: int
    h_out: int
    w_out: int
    d: int

    def __post_init__(self):
        for name in ("c", "c_out", "h_out", "w_out", "d"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise InvalidInputError(f"{name} must be a positive integer, got {v!r}")


def cc_std_conv(s: ConvShape) -> int:
    return s.c * s.c_out * s.d * s.d * s.h_out * s.w_out


def cc_dsconv(s: ConvShape) -> int:
    """Depthwise d x d filtering followed by 1x1 channel mixing."""
    return s.c * s.d * s.d * s.h_out * s.w_out + s.c * s.c_out * s.h_out * s.w_out


def crf_conv(s: ConvShape) -> Fraction:
    return Fraction(1, s.c_out) + Fraction(1, s.d * s.d)


def crf_dsres(s: ConvShape) -> Fraction:
    """Closed-form residual-block reduction factor ``1/c' + 3/(2 d^2 + 1)``."""
    return Fraction(1, s.c_out) + Fraction(3, 2 * s.d * s.d + 1)


def residual_block_macs(c: int, c_out: int, d: int, h_out: int, w_out: int, separable: bool,
                        projection: bool = True) -> int:
    """Two d x d convolutions (c -> c_out -> c_out) plus an optional 1x1 skip projection."""
    conv = cc_dsconv if separable else cc_std_conv
    total = conv(ConvShape(c, c_out, h_out, w_out, d)) + conv(ConvShape(c_out, c_out, h_out, w_out, d))
    if projection:
        total += c * c_out * h_out * w_out
    return total


def block_crf(c: int, c_out: int, d: int, h_out: int = 1, w_out: int = 1) -> Fraction:
    """Exact separable / standard MAC ratio of one residual block."""
    return Fraction(residual_block_macs(c, c_out, d, h_out, w_out, True),
                    residual_block_macs(c, c_out, d, h_out, w_out, False))


@dataclass(frozen=True)
class LayerCost:
    name: str
    kind: str
    macs: int
    params: int
    out_shape: tuple[int, int, int]


def _out(h: int, stride: int) -> int:
    return (h - 1) // stride + 1


def count_macs(config: NRNetConfig, input_size: int | None = None) -> list[LayerCost]:
    """Per-layer MACs and parameter counts (batchnorm affine terms included) for one slice.

    Residual additions, batchnorm and softmax are not MACs and are left out.
    """
    h = input_size or config.input_size
    c = config.in_channels
    rows: list[LayerCost] = []
    for i, b in enumerate(config.blocks):
        p = f"b{i}"
        co, d, s = b.out_channels, b.kernel, b.stride
        ho = _out(h, s)
        L = ho * ho
        if b.kind == "conv":
            rows.append(LayerCost(p + ".conv", "conv", c * co * d * d * L, c * co * d * d + 2 * co, (co, ho, ho)))
        elif b.kind in ("cres", "dsres"):
            sep = b.kind == "dsres"
            proj = co != c or s != 1
            conv = cc_dsconv if sep else cc_std_conv
            first = conv(ConvShape(c, co, ho, ho, d))
            second = conv(ConvShape(co, co, ho, ho, d))
            if sep:
                params = c * d * d + c * co + co * d * d + co * co
            else:
                params = c * co * d * d + co * co * d * d
            rows.append(LayerCost(p + ".conv1", b.kind, first, 0, (co, ho, ho)))
            rows.append(LayerCost(p + ".conv2", b.kind, second, params + 4 * co, (co, ho, ho)))
            if proj:
                rows.append(LayerCost(p + ".skip", "pointwise", c * co * L, c * co, (co, ho, ho)))
        elif b.kind == "nres":
            e = b.embed_channels or c // 2
            L = h * h
            rows.append(LayerCost(p + ".embed", "pointwise", 3 * e * c * L, 3 * e * c, (e, h, h)))
            rows.append(LayerCost(p + ".attention", "matmul", 2 * L * L * e, 0, (e, h, h)))
            rows.append(LayerCost(p + ".out", "pointwise", c * e * L, c * e, (co, h, h)))
            ho = h
        h, c = ho, co
    k = config.num_classes
    rows.append(LayerCost("cls", "pointwise", c * k * h * h, c * k + k, (k, h, h)))
    return rows


def total_macs(config: NRNetConfig, input_size: int | None = None) -> int:
    return sum(r.macs for r in count_macs(config, input_size))


def total_params(config: NRNetConfig) -> int:
    return sum(r.params for r in count_macs(config))


def mac_table(rows: list[LayerCost]) -> str:
    lines = [f"{'layer':<14}{'kind':<11}{'MACs':>14}{'params':>10}  out"]
    for r in rows:
        lines.append(f"{r.name:<14}{r.kind:<11}{r.macs:>14,}{r.params:>10,}  {r.out_shape}")
    lines.append(f"{'total':<25}{sum(r.macs for r in rows):>14,}{sum(r.params for r in rows):>10,}")
    return "\n".join(lines)


# -- timing --------------------------------------------------------------------

ORDERINGS = (("DSRes+NRes", "DSRes"), ("DSRes", "CRes"), ("DSRes+NRes", "CRes+NRes"), ("CRes+NRes", "CRes"))


@dataclass
class BenchRow:
    variant: str
    params: int
    macs: int
    median_ms: float


@dataclass
class BenchReport:
    input_size: int
    reps: int
    rows: list[BenchRow]

    def median(self, variant: str) -> float:
        return next(r.median_ms for r in self.rows if r.variant == variant)

    def orderings(self) -> dict[str, bool]:
        """``faster<=slower`` checks over the variants present."""
        have = {r.variant for r in self.rows}
        return {f"{a}<={b}": self.median(a) <= self.median(b) for a, b in ORDERINGS if a in have and b in have}

    def key_values(self) -> list[str]:
        out = [f"variant={r.variant} params={r.params} macs={r.macs} median_ms={r.median_ms:.4f} "
               f"input_size={self.input_size} reps={self.reps}" for r in self.rows]
        out += [f"ordering {k} holds={v}" for k, v in self.orderings().items()]
        return out

    def table(self) -> str:
        lines = [f"{'variant':<12}{'params':>12}{'MACs':>16}{'median ms':>12}"]
        lines += [f"{r.variant:<12}{r.params:>12,}{r.macs:>16,}{r.median_ms:>12.3f}" for r in self.rows]
        return "\n".join(lines)


def bench(variants=VARIANTS, input_size: int = 64, reps: int = 100, seed: int = 0,
          configs: dict[str, NRNetConfig] | None = None) -> BenchReport:
    """Median single-slice inference time per variant, single-threaded.

    Repetitions are interleaved across variants so slow drifts in machine
    load affect every variant alike.
    """
    from threadpoolctl import threadpool_limits

    if reps < 3:
        raise InvalidInputError(f"need at least 3 repetitions, got {reps}")
    configs = configs or {v: build_variant(v, input_size=input_size) for v in variants}
    models = {v: NRNet(configs[v], seed=seed) for v in variants}
    x = np.random.default_rng(seed).random((1, input_size, input_size))
    times: dict[str, list[float]] = {v: [] for v in variants}
    with threadpool_limits(1):
        for m in models.values():
            m.forward(x)  # warm-up
        for _ in range(reps):
            for v, m in models.items():
                t0 = time.perf_counter()
                m.forward(x)
                times[v].append(time.perf_counter() - t0)
    rows = [BenchRow(v, models[v].num_parameters, total_macs(configs[v], input_size),
                     1e3 * float(np.median(times[v]))) for v in variants]
    return BenchReport(input_size, reps, rows)
