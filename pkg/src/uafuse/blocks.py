"""SE-Res and Dense-ASPP blocks, and the per-modality stream built from them."""
from __future__ import annotations

from dataclasses import dataclass, fields, is_dataclass

import numpy as np

from . import tensor as T
from .config import NetworkConfig
from .tensor import DimensionError, Tensor


@dataclass
class ConvParams:
    weight: Tensor
    bias: Tensor
    dilation: int = 1

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv3d(x, self.weight, self.bias, dilation=self.dilation)

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]


@dataclass
class LinearParams:
    weight: Tensor
    bias: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


@dataclass
class SEResBlockParams:
    conv1: ConvParams
    conv2: ConvParams
    se_fc1: LinearParams
    se_fc2: LinearParams
    reduction: int


@dataclass
class DenseASPPBlockParams:
    branches: list[ConvParams]
    projection: ConvParams


@dataclass
class StreamParams:
    stem: ConvParams
    blocks: list
    head: ConvParams
    taps: tuple[int, ...]


def named_parameters(obj, prefix: str = "") -> dict[str, Tensor]:
    """Flatten a params tree into ``{"a.b.0.weight": Tensor}``."""
    out: dict[str, Tensor] = {}
    if isinstance(obj, Tensor):
        out[prefix] = obj
    elif is_dataclass(obj):
        for f in fields(obj):
            out.update(named_parameters(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name))
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            out.update(named_parameters(item, f"{prefix}.{i}" if prefix else str(i)))
    return out


# ---------------------------------------------------------------------------
# initialization: fan-in scaled uniform weights, zero biases

INIT_GAIN = 3.0  # variance 1/fan_in; the He value of 6 starts the heads badly saturated


def _param(arr: np.ndarray, precision: str) -> Tensor:
    return Tensor(arr, requires_grad=True, precision=precision)


def init_conv(rng: np.random.Generator, cin: int, cout: int, k: int, dilation: int = 1,
              precision: str = "single") -> ConvParams:
    bound = np.sqrt(INIT_GAIN / (cin * k ** 3))
    w = rng.uniform(-bound, bound, size=(cout, cin, k, k, k))
    return ConvParams(_param(w, precision), _param(np.zeros(cout), precision), dilation)


def init_linear(rng: np.random.Generator, cin: int, cout: int, precision: str = "single") -> LinearParams:
    bound = np.sqrt(INIT_GAIN / cin)
    w = rng.uniform(-bound, bound, size=(cout, cin))
    return LinearParams(_param(w, precision), _param(np.zeros(cout), precision))


def init_se_res(rng, channels: int, reduction: int, k: int = 3, precision: str = "single") -> SEResBlockParams:
    if channels % reduction:
        raise DimensionError(f"SE reduction {reduction} does not divide {channels} channels")
    return SEResBlockParams(
        conv1=init_conv(rng, channels, channels, k, precision=precision),
        conv2=init_conv(rng, channels, channels, k, precision=precision),
        se_fc1=init_linear(rng, channels, channels // reduction, precision),
        se_fc2=init_linear(rng, channels // reduction, channels, precision),
        reduction=reduction,
    )


def init_dense_aspp(rng, channels: int, branch_width: int, dilations, k: int = 3,
                    precision: str = "single") -> DenseASPPBlockParams:
    branches = []
    cin = channels
    for d in dilations:
        branches.append(init_conv(rng, cin, branch_width, k, dilation=d, precision=precision))
        cin += branch_width
    return DenseASPPBlockParams(branches, init_conv(rng, cin, channels, 1, precision=precision))


def init_stream(rng, cfg: NetworkConfig, precision: str = "single") -> StreamParams:
    c, k = cfg.width, cfg.kernel
    blocks = []
    for kind in cfg.blocks:
        if kind == "se_res":
            blocks.append(init_se_res(rng, c, cfg.se_reduction, k, precision))
        else:
            blocks.append(init_dense_aspp(rng, c, cfg.aspp_branch_width, cfg.dilations, k, precision))
    head = init_conv(rng, c * len(cfg.tap_indices), cfg.num_classes, 1, precision=precision)
    return StreamParams(init_conv(rng, 1, c, k, precision=precision), blocks, head, cfg.tap_indices)


# ---------------------------------------------------------------------------
# forward passes

def se_excitation(f: Tensor, p: SEResBlockParams) -> Tensor:
    """Per-channel gate in (0, 1) from the pooled residual branch."""
    return T.sigmoid(p.se_fc2(T.relu(p.se_fc1(T.global_avg_pool(f)))))


def se_res_forward(x: Tensor, p: SEResBlockParams) -> Tensor:
    """relu(x + s * f(x)) with f = conv -> relu -> conv and s the SE gate."""
    if x.shape[0] != p.conv1.in_channels or p.conv2.out_channels != x.shape[0]:
        raise DimensionError(f"SE-Res block expects {p.conv1.in_channels} channels, got {x.shape[0]}")
    f = p.conv2(T.relu(p.conv1(x)))
    return T.relu(T.add(x, T.scale_channels(f, se_excitation(f, p))))


def dense_aspp_forward(x: Tensor, p: DenseASPPBlockParams) -> Tensor:
    feats = [x]
    for branch in p.branches:
        inp = feats[0] if len(feats) == 1 else T.concat(feats)
        if inp.shape[0] != branch.in_channels:
            raise DimensionError(
                f"Dense-ASPP branch expects {branch.in_channels} input channels, wiring gives {inp.shape[0]}")
        feats.append(T.relu(branch(inp)))
    merged = T.concat(feats)
    if merged.shape[0] != p.projection.in_channels:
        raise DimensionError(
            f"Dense-ASPP projection expects {p.projection.in_channels} channels, wiring gives {merged.shape[0]}")
    return T.relu(p.projection(merged))


def block_forward(x: Tensor, block) -> Tensor:
    if isinstance(block, SEResBlockParams):
        return se_res_forward(x, block)
    return dense_aspp_forward(x, block)


def stream_forward(x: Tensor, p: StreamParams, min_spatial: int = 1) -> tuple[list[Tensor], Tensor]:
    """Run one modality stream; returns the tapped feature levels and its own class probabilities."""
    if x.data.ndim != 4 or x.shape[0] != p.stem.in_channels:
        raise DimensionError(f"stream input must be [{p.stem.in_channels}, M, N, D], got {x.shape}")
    if min(x.shape[1:]) < min_spatial:
        raise DimensionError(f"spatial dims {x.shape[1:]} below the minimum patch extent {min_spatial}")
    h = T.relu(p.stem(x))
    levels = []
    for i, block in enumerate(p.blocks):
        h = block_forward(h, block)
        if i in p.taps:
            levels.append(h)
    y = T.softmax_over_classes(p.head(T.concat(levels) if len(levels) > 1 else levels[0]))
    return levels, y
