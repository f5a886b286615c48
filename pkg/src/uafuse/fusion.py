"""Prediction-uncertainty gating and the fused two-stream network.

Each stream's class-probability map yields a per-voxel uncertainty
``U = C**C * prod_i y_i`` (1 at the uniform distribution, 0 when any class
probability vanishes). Stream features are scaled by ``1 - U`` before the
per-stream adaptation layer, and the adapted maps are concatenated for the
final classifier.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .blocks import ConvParams, StreamParams, init_conv, init_stream, named_parameters, stream_forward
from .config import NetworkConfig
from .tensor import PROB_EPS, DimensionError, Tensor

SUM_TOL = 1e-4


class InvalidProbabilityError(ValueError):
    pass


@dataclass
class UncertaintyField:
    values: np.ndarray  # [M, N, D], each in [0, 1]
    source: str | None = None


@dataclass
class FusionHeadParams:
    adapt: list[ConvParams]
    head: ConvParams


def _check_prob(y: np.ndarray) -> None:
    if y.ndim < 2 or y.shape[0] < 2:
        raise InvalidProbabilityError(f"need a class axis with at least 2 classes, got shape {y.shape}")
    dev = np.abs(y.sum(axis=0, dtype=np.float64) - 1.0)
    if dev.max() > SUM_TOL:
        idx = tuple(int(v) for v in np.unravel_index(int(dev.argmax()), dev.shape))
        raise InvalidProbabilityError(f"class probabilities at voxel {idx} sum to {1.0 + float(dev.max()):.6g}, not 1")
    if (y < 0).any():
        raise InvalidProbabilityError("negative class probability")


def uncertainty_tensor(y, differentiable: bool = False, eps: float = PROB_EPS) -> Tensor:
    """Uncertainty as a [1, M, N, D] tensor; attached to the tape only if ``differentiable``."""
    yt = y if isinstance(y, Tensor) else Tensor(y)
    yd = yt.data
    _check_prob(yd)
    c = yd.shape[0]
    floored = np.maximum(yd, eps)
    # sorting before the reduction makes the result exactly invariant to class order
    logu = np.sort(np.log(floored.astype(np.float64)), axis=0).sum(axis=0) + c * np.log(c)
    u = np.exp(logu)
    u[(yd <= 0).any(axis=0)] = 0.0
    np.clip(u, 0.0, 1.0, out=u)
    u = u.astype(yd.dtype)[None]
    if not differentiable:
        return Tensor(u)
    live = yd > eps

    def fn(g):
        return (np.where(live, g * u / floored, 0.0).astype(yd.dtype),)

    return T.record(u, (yt,), fn)


def compute_uncertainty(y, source: str | None = None) -> UncertaintyField:
    return UncertaintyField(uncertainty_tensor(y).data[0], source)


def direct_uncertainty(y: np.ndarray) -> np.ndarray:
    """Plain product form, no log-space; reference for the log-space path."""
    c = y.shape[0]
    return np.prod(y, axis=0) / (1.0 / c) ** c


def _gate_tensor(u, like: Tensor) -> Tensor:
    if isinstance(u, UncertaintyField):
        u = u.values
    if isinstance(u, Tensor):
        if u.data.ndim == 3:
            u = Tensor(u.data[None])
        if u.shape[1:] != like.shape[1:]:
            raise DimensionError(f"uncertainty field {u.shape[1:]} does not match features {like.shape[1:]}")
        ones = Tensor(np.ones(u.shape, dtype=u.data.dtype))
        return T.add(ones, T.scale(u, -1.0))
    u = np.asarray(u)
    if u.ndim == 4:
        u = u[0]
    if u.shape != like.shape[1:]:
        raise DimensionError(f"uncertainty field {u.shape} does not match features {like.shape[1:]}")
    return Tensor((1.0 - u)[None].astype(like.data.dtype))


def gate_features(levels: Sequence[Tensor], u) -> list[Tensor]:
    """Scale every channel of every level by ``1 - U`` voxel-wise."""
    if not levels:
        return []
    gate = _gate_tensor(u, levels[0])
    return [T.mul(level, gate) for level in levels]


def fuse_and_predict(gated_streams: Sequence[Sequence[Tensor]], p: FusionHeadParams) -> Tensor:
    """softmax(head(concat(adapt_1(concat(gated_1)), adapt_2(concat(gated_2), ...))))."""
    if len(gated_streams) != len(p.adapt):
        raise DimensionError(f"{len(gated_streams)} streams given for {len(p.adapt)} adaptation layers")
    adapted = []
    for levels, adapt in zip(gated_streams, p.adapt):
        x = T.concat(levels) if len(levels) > 1 else levels[0]
        adapted.append(T.relu(adapt(x)))
    shapes = {a.shape for a in adapted}
    if len(shapes) != 1:
        raise DimensionError(f"adapted stream outputs differ in shape: {sorted(shapes)}")
    return T.softmax_over_classes(p.head(T.concat(adapted)))


@dataclass
class NetworkOutput:
    y_modal: list[Tensor]
    y_final: Tensor | None
    uncertainty: list[UncertaintyField] | None


class UAFNet:
    """Self-contained modality streams plus the uncertainty-gated fusion head."""

    def __init__(self, config: NetworkConfig, streams: list[StreamParams], fusion: FusionHeadParams):
        self.config = config
        self.streams = streams
        self.fusion = fusion

    @classmethod
    def init(cls, config: NetworkConfig, seed: int = 0, precision: str = "single") -> UAFNet:
        rng = np.random.default_rng(seed)
        streams = [init_stream(rng, config, precision) for _ in range(config.num_modalities)]
        level_ch = config.width * len(config.tap_indices)
        adapt = [init_conv(rng, level_ch, config.adapt_width, 1, precision=precision)
                 for _ in range(config.num_modalities)]
        head = init_conv(rng, config.adapt_width * config.num_modalities, config.num_classes, 1, precision=precision)
        return cls(config, streams, FusionHeadParams(adapt, head))

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, s in enumerate(self.streams):
            out.update(named_parameters(s, f"stream{i + 1}"))
        out.update(named_parameters(self.fusion, "fusion"))
        return out

    def fusion_parameters(self) -> dict[str, Tensor]:
        return named_parameters(self.fusion, "fusion")

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def forward(self, modalities, with_fusion: bool = True, min_spatial: int | None = None) -> NetworkOutput:
        """``modalities``: array [num_modalities, M, N, D] or a list of [1, M, N, D] tensors."""
        cfg = self.config
        if isinstance(modalities, np.ndarray):
            dtype = self.streams[0].stem.weight.data.dtype
            modalities = [Tensor(modalities[i:i + 1].astype(dtype, copy=False)) for i in range(len(modalities))]
        if len(modalities) != cfg.num_modalities:
            raise DimensionError(f"network built for {cfg.num_modalities} modalities, got {len(modalities)}")
        ms = cfg.min_spatial if min_spatial is None else min_spatial
        levels, probs = [], []
        for x, sp in zip(modalities, self.streams):
            lv, y = stream_forward(x, sp, ms)
            levels.append(lv)
            probs.append(y)
        if not with_fusion:
            return NetworkOutput(probs, None, None)
        fields_, gated = [], []
        for i, (lv, y) in enumerate(zip(levels, probs)):
            u = uncertainty_tensor(y, differentiable=cfg.uncertainty_grad)
            fields_.append(UncertaintyField(u.data[0], f"modal{i + 1}"))
            feats = [T.concat(lv) if len(lv) > 1 else lv[0]]
            gated.append(gate_features(feats, u) if cfg.gating else feats)
        return NetworkOutput(probs, fuse_and_predict(gated, self.fusion), fields_)
