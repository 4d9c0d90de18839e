"""NR-Net: conv stem, residual stages (depthwise-separable or standard), an
optional nonlocal residual block, and a 1x1-conv / GAP / softmax classifier.

The four ablation architectures are produced by :func:`build_variant`.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .domain import SlicePrediction, argmax_label
from .errors import ConfigError, FormatError, ShapeError

VARIANTS = ("CRes", "CRes+NRes", "DSRes", "DSRes+NRes")
BLOCK_KINDS = ("conv", "dsres", "cres", "nres")


@dataclass
class BlockConfig:
    kind: str
    out_channels: int
    kernel: int = 3
    stride: int = 1
    embed_channels: int | None = None  # nres only; defaults to out_channels // 2


@dataclass
class NRNetConfig:
    input_size: int = 256
    in_channels: int = 1
    blocks: list[BlockConfig] = field(default_factory=list)
    num_classes: int = 3
    variant: str = "DSRes+NRes"
    bn_eps: float = 1e-5
    bn_momentum: float = 0.9

    def __post_init__(self):
        self.blocks = [b if isinstance(b, BlockConfig) else BlockConfig(**b) for b in self.blocks]
        self.validate()

    def validate(self) -> None:
        if self.num_classes != 3:
            raise ConfigError("the classifier must emit exactly 3 classes")
        c = self.in_channels
        for i, b in enumerate(self.blocks):
            if b.kind not in BLOCK_KINDS:
                raise ConfigError(f"block {i}: unknown kind {b.kind!r}")
            if b.kernel % 2 == 0:
                raise ConfigError(f"block {i}: kernel extent must be odd")
            if b.kind in ("dsres", "cres") and b.out_channels < c:
                raise ConfigError(f"block {i}: out_channels {b.out_channels} < in_channels {c}")
            if b.kind == "nres":
                if b.out_channels != c:
                    raise ConfigError(f"block {i}: nonlocal block must keep {c} channels")
                if b.embed_channels is not None and b.embed_channels > c:
                    raise ConfigError(f"block {i}: embedding channels exceed {c}")
            c = b.out_channels

    @property
    def max_channels(self) -> int:
        return max(b.out_channels for b in self.blocks)

    @property
    def nres_count(self) -> int:
        return sum(b.kind == "nres" for b in self.blocks)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NRNetConfig":
        return cls(**d)


def build_variant(tag: str, input_size: int = 256, stem_channels: int = 64,
                  widths: tuple[int, int, int] = (128, 256, 512), kernel: int = 3) -> NRNetConfig:
    """One of the four ablation networks.

    Stages one and two downsample by 2; the third stage is either a
    nonlocal block at the second width or a stride-1 residual block at the
    third width, so every variant ends at the same spatial resolution.
    """
    if tag not in VARIANTS:
        raise ConfigError(f"unknown variant {tag!r}; expected one of {VARIANTS}")
    res = "dsres" if tag.startswith("DSRes") else "cres"
    w1, w2, w3 = widths
    blocks = [
        BlockConfig("conv", stem_channels, kernel, 2),
        BlockConfig(res, w1, kernel, 2),
        BlockConfig(res, w2, kernel, 2),
    ]
    if tag.endswith("NRes"):
        blocks.append(BlockConfig("nres", w2, 1, 1, embed_channels=w2 // 2))
    else:
        blocks.append(BlockConfig(res, w3, kernel, 1))
    return NRNetConfig(input_size=input_size, blocks=blocks, variant=tag)


def desk_config(tag: str = "DSRes+NRes", input_size: int = 64) -> NRNetConfig:
    """Narrow network for CPU-scale experiments (channels 8 / 16 / 32 / 64)."""
    return build_variant(tag, input_size=input_size, stem_channels=8, widths=(16, 32, 64))


# -- nonlocal block ------------------------------------------------------------

def nres_forward(x: T.Tensor, phi: T.Tensor, psi: T.Tensor, g: T.Tensor, w_out: T.Tensor,
                 return_parts: bool = False):
    """Nonlocal residual block on ``[n, c, h, w]`` (or ``[c, h, w]``) features.

    Every location aggregates ``g`` of all locations, weighted by a softmax
    over ``phi(x_i) . psi(x_j)``; a 1x1 projection maps the aggregate back to
    ``c`` channels before the residual add. With ``return_parts`` the
    attention ``[n, hw, hw]`` and the pre-projection aggregate are returned too.
    """
    single = x.ndim == 3
    if single:
        x = T.reshape(x, (1,) + x.shape)
    n, c, h, w = x.shape
    e = phi.shape[0]
    L = h * w
    theta = T.transpose(T.reshape(T.pointwise_conv2d(x, phi), (n, e, L)), (0, 2, 1))
    key = T.reshape(T.pointwise_conv2d(x, psi), (n, e, L))
    value = T.transpose(T.reshape(T.pointwise_conv2d(x, g), (n, e, L)), (0, 2, 1))
    attention = T.softmax(T.matmul(theta, key), axis=-1)
    agg = T.reshape(T.transpose(T.matmul(attention, value), (0, 2, 1)), (n, e, h, w))
    out = T.add(x, T.pointwise_conv2d(agg, w_out))
    if single:
        out = T.reshape(out, (c, h, w))
        agg = T.reshape(agg, (e, h, w))
    if return_parts:
        return out, attention, agg
    return out


# -- network -----------------------------------------------------------------

class NRNet:
    """Parameters, batchnorm state and the forward pass for one NRNetConfig."""

    def __init__(self, config: NRNetConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, T.Parameter] = {}
        self.bn: dict[str, T.BatchNormState] = {}
        self.weight_names: list[str] = []  # kernels subject to L2 regularization
        rng = np.random.default_rng(seed)
        c = config.in_channels
        for i, b in enumerate(config.blocks):
            c = self._init_block(f"b{i}", b, c, rng)
        self._weight(f"cls.w", rng.normal(0, np.sqrt(1.0 / c), (config.num_classes, c)))
        self.params["cls.b"] = T.Parameter(np.zeros(config.num_classes), "cls.b")

    # parameter construction
    def _weight(self, name: str, value: np.ndarray) -> None:
        self.params[name] = T.Parameter(value, name)
        self.weight_names.append(name)

    def _batchnorm(self, name: str, channels: int) -> None:
        self.params[name + ".gamma"] = T.Parameter(np.ones(channels), name + ".gamma")
        self.params[name + ".beta"] = T.Parameter(np.zeros(channels), name + ".beta")
        self.bn[name] = T.BatchNormState(channels, self.config.bn_momentum, self.config.bn_eps)

    def _init_block(self, p: str, b: BlockConfig, c: int, rng) -> int:
        co, d = b.out_channels, b.kernel
        he = lambda fan_in, shape: rng.normal(0, np.sqrt(2.0 / fan_in), shape)
        if b.kind == "conv":
            self._weight(p + ".conv", he(c * d * d, (co, c, d, d)))
            self._batchnorm(p + ".bn", co)
        elif b.kind == "cres":
            self._weight(p + ".conv1", he(c * d * d, (co, c, d, d)))
            self._batchnorm(p + ".bn1", co)
            self._weight(p + ".conv2", he(co * d * d, (co, co, d, d)))
            self._batchnorm(p + ".bn2", co)
            if co != c or b.stride != 1:
                self._weight(p + ".skip", he(c, (co, c)))
        elif b.kind == "dsres":
            self._weight(p + ".dw1", he(d * d, (c, d, d)))
            self._weight(p + ".pw1", he(c, (co, c)))
            self._batchnorm(p + ".bn1", co)
            self._weight(p + ".dw2", he(d * d, (co, d, d)))
            self._weight(p + ".pw2", he(co, (co, co)))
            self._batchnorm(p + ".bn2", co)
            if co != c or b.stride != 1:
                self._weight(p + ".skip", he(c, (co, c)))
        elif b.kind == "nres":
            e = b.embed_channels or c // 2
            for part in ("phi", "psi", "g"):
                self._weight(f"{p}.{part}", rng.normal(0, np.sqrt(1.0 / c), (e, c)))
            # zero output projection: the block starts as the identity
            self._weight(p + ".out", np.zeros((c, e)))
        return co

    @property
    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def parameters(self) -> list[T.Parameter]:
        return list(self.params.values())

    def weights(self) -> list[T.Parameter]:
        return [self.params[n] for n in self.weight_names]

    # forward
    def _bn(self, x, name: str, mode: str):
        return T.batchnorm2d(x, self.params[name + ".gamma"], self.params[name + ".beta"], self.bn[name], mode)

    def block_forward(self, i: int, x: T.Tensor, mode: str) -> T.Tensor:
        b = self.config.blocks[i]
        p = f"b{i}"
        P = self.params
        pad = b.kernel // 2
        if b.kind == "conv":
            return T.relu(self._bn(T.conv2d(x, P[p + ".conv"], b.stride, pad), p + ".bn", mode))
        if b.kind == "nres":
            return nres_forward(x, P[p + ".phi"], P[p + ".psi"], P[p + ".g"], P[p + ".out"])
        if b.kind == "cres":
            y = T.relu(self._bn(T.conv2d(x, P[p + ".conv1"], b.stride, pad), p + ".bn1", mode))
            y = self._bn(T.conv2d(y, P[p + ".conv2"], 1, pad), p + ".bn2", mode)
        else:
            y = T.pointwise_conv2d(T.depthwise_conv2d(x, P[p + ".dw1"], b.stride, pad), P[p + ".pw1"])
            y = T.relu(self._bn(y, p + ".bn1", mode))
            y = T.pointwise_conv2d(T.depthwise_conv2d(y, P[p + ".dw2"], 1, pad), P[p + ".pw2"])
            y = self._bn(y, p + ".bn2", mode)
        skip = T.pointwise_conv2d(x, P[p + ".skip"], b.stride) if p + ".skip" in P else x
        return T.relu(T.add(y, skip))

    def features(self, x: T.Tensor, mode: str = "infer") -> T.Tensor:
        for i in range(len(self.config.blocks)):
            x = self.block_forward(i, x, mode)
        return x

    def forward(self, images, mode: str = "infer") -> T.Tensor:
        """Class probabilities ``[n, 3]`` for images ``[n, h, w]`` or ``[n, c, h, w]``."""
        x = images if isinstance(images, T.Tensor) else T.Tensor(images)
        if x.ndim == 3:
            x = T.Tensor(x.data[:, None])
        size = self.config.input_size
        if x.shape[1:] != (self.config.in_channels, size, size):
            raise ShapeError(f"input {x.shape[1:]} does not match network input "
                             f"({self.config.in_channels}, {size}, {size})")
        z = T.pointwise_conv2d(self.features(x, mode), self.params["cls.w"], bias=self.params["cls.b"])
        return T.softmax(T.global_avg_pool(z), axis=-1)

    def predict(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Inference-mode probabilities for a stack of slices, as float64 ``[n, 3]``."""
        out = []
        for start in range(0, len(images), batch_size):
            out.append(self.forward(np.asarray(images[start:start + batch_size]), "infer").data)
        if not out:
            return np.zeros((0, 3))
        probs = np.concatenate(out).astype(np.float64)
        return probs / probs.sum(axis=1, keepdims=True)

    # state
    def state(self) -> dict[str, np.ndarray]:
        s = {k: p.data for k, p in self.params.items()}
        for k, bn in self.bn.items():
            s[k + ".running_mean"] = bn.mean
            s[k + ".running_var"] = bn.var
        return s

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if state[k].shape != p.data.shape:
                raise ShapeError(f"{k}: stored shape {state[k].shape} != {p.data.shape}")
            p.data = np.array(state[k], dtype=T.get_dtype())
            p.grad = np.zeros_like(p.data)
        for k, bn in self.bn.items():
            bn.mean = np.array(state[k + ".running_mean"], dtype=T.get_dtype())
            bn.var = np.array(state[k + ".running_var"], dtype=T.get_dtype())

    def copy(self) -> "NRNet":
        other = NRNet.__new__(NRNet)
        other.config = self.config
        other.weight_names = list(self.weight_names)
        other.params = {k: T.Parameter(p.data.copy(), k) for k, p in self.params.items()}
        other.bn = {}
        for k, bn in self.bn.items():
            nb = T.BatchNormState(len(bn.mean), bn.momentum, bn.eps)
            nb.mean, nb.var = bn.mean.copy(), bn.var.copy()
            other.bn[k] = nb
        return other


def nrnet_forward(image: np.ndarray, model: NRNet, mode: str = "infer") -> SlicePrediction:
    probs = model.forward(np.asarray(image)[None], mode).data[0].astype(np.float64)
    probs = probs / probs.sum()
    return SlicePrediction(tuple(probs), argmax_label(probs))


# -- checkpoint container ------------------------------------------------------

MAGIC = b"NRNETCKP"
FORMAT_VERSION = 1


def save_checkpoint(model: NRNet, path, meta: dict | None = None) -> None:
    """Binary container: magic, version, tensors (float32 LE), then JSON config."""
    buf = io.BytesIO()
    state = model.state()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(state)))
    for name, arr in state.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    text = json.dumps({"config": model.config.to_dict(), "meta": meta or {}}, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[NRNet, dict]:
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: not an NR-Net checkpoint")
    pos = len(MAGIC)
    version, count = struct.unpack_from("<II", raw, pos)
    pos += 8
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        state[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
    (tlen,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    doc = json.loads(raw[pos:pos + tlen].decode("utf-8"))
    model = NRNet(NRNetConfig.from_dict(doc["config"]))
    model.load_state(state)
    return model, doc["meta"]
