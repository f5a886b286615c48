"""Dataclass configs for the network and the training run."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields


BLOCK_KINDS = ("se_res", "dense_aspp")
LR_SCHEDULES = ("constant", "cosine")


@dataclass
class NetworkConfig:
    num_modalities: int = 2
    num_classes: int = 5
    width: int = 16
    aspp_branch_width: int = 8
    dilations: tuple[int, ...] = (1, 2, 4, 8)
    se_reduction: int = 4
    adapt_width: int = 16
    blocks: tuple[str, ...] = ("se_res", "se_res", "dense_aspp", "se_res")
    taps: tuple[int, ...] | None = None  # block indices whose outputs feed the heads; None = all
    kernel: int = 3
    min_spatial: int = 32
    gating: bool = True
    uncertainty_grad: bool = False

    def __post_init__(self):
        self.dilations = tuple(self.dilations)
        self.blocks = tuple(self.blocks)
        if self.taps is not None:
            self.taps = tuple(self.taps)
        self.validate()

    @property
    def tap_indices(self) -> tuple[int, ...]:
        return tuple(range(len(self.blocks))) if self.taps is None else self.taps

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.num_modalities < 1:
            raise ValueError("num_modalities must be positive")
        if self.width % self.se_reduction:
            raise ValueError(f"SE reduction {self.se_reduction} must divide width {self.width}")
        if not self.dilations or any(b <= a for a, b in zip(self.dilations, self.dilations[1:])):
            raise ValueError(f"dilations must be nonempty and strictly increasing, got {self.dilations}")
        if min(self.dilations) < 1:
            raise ValueError("dilations must be positive")
        if self.kernel % 2 == 0:
            raise ValueError("kernel extent must be odd")
        for b in self.blocks:
            if b not in BLOCK_KINDS:
                raise ValueError(f"unknown block kind {b!r}; expected one of {BLOCK_KINDS}")
        if not self.blocks:
            raise ValueError("a stream needs at least one block")
        if any(t < 0 or t >= len(self.blocks) for t in self.tap_indices) or not self.tap_indices:
            raise ValueError(f"tap indices {self.tap_indices} out of range for {len(self.blocks)} blocks")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> NetworkConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainConfig:
    stage_switch_epoch: int = 30
    total_epochs: int = 60
    batch_size: int = 1
    patches_per_epoch: int = 4
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    lr_schedule: str = "constant"  # or "cosine": per-step decay to lr_floor * learning_rate
    lr_floor: float = 0.05
    seed: int = 0
    sampling: str = "class-balanced"
    patch_size: tuple[int, int, int] = (32, 32, 32)
    stride: tuple[int, int, int] = (14, 14, 14)
    val_every: int = 10
    val_stride: tuple[int, int, int] | None = None  # None = same as stride
    network: NetworkConfig = field(default_factory=NetworkConfig)

    def __post_init__(self):
        if isinstance(self.network, dict):
            self.network = NetworkConfig.from_dict(self.network)
        self.patch_size = tuple(self.patch_size)
        self.stride = tuple(self.stride)
        if self.val_stride is not None:
            self.val_stride = tuple(self.val_stride)
        if not 0 < self.stage_switch_epoch <= self.total_epochs:
            raise ValueError("need 0 < stage_switch_epoch <= total_epochs")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}")
        if not 0 <= self.lr_floor <= 1:
            raise ValueError("lr_floor must lie in [0, 1]")
        if self.sampling not in ("target-only", "class-balanced"):
            raise ValueError(f"sampling must be 'target-only' or 'class-balanced', got {self.sampling!r}")
        if self.batch_size < 1 or self.patches_per_epoch < self.batch_size:
            raise ValueError("need 1 <= batch_size <= patches_per_epoch")

    def lr_at(self, step: int, total_steps: int) -> float:
        """Learning rate for optimizer step ``step`` (0-based) out of ``total_steps``."""
        if self.lr_schedule == "constant" or total_steps <= 1:
            return self.learning_rate
        frac = min(step / (total_steps - 1), 1.0)
        scale = self.lr_floor + (1 - self.lr_floor) * 0.5 * (1 + math.cos(math.pi * frac))
        return self.learning_rate * scale

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "network"}
        d = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        d["network"] = self.network.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)
