"""Synthetic two-modality labeled phantoms.

Labels are smooth, randomly deformed ellipsoidal blobs placed apart from each
other, so foreground classes touch but rarely swallow one another. Each modality draws voxel
intensities from its own class -> (mean, std) contrast table.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .volume import Volume

CORRUPTION_MODES = ("swap-contrast", "noise")
SEPARATION_TRIES = 200
OVERLAP = 0.7  # centers at least this fraction of the summed radii apart, when achievable


class PhantomSpecError(ValueError):
    pass


@dataclass
class Corruption:
    modality: int  # 0-based
    region: tuple[tuple[int, int], tuple[int, int], tuple[int, int]]  # [start, stop) per axis
    mode: str = "swap-contrast"
    noise_std: float = 2.0

    def __post_init__(self):
        self.region = tuple(tuple(int(v) for v in r) for r in self.region)
        if self.mode not in CORRUPTION_MODES:
            raise PhantomSpecError(f"corruption mode must be one of {CORRUPTION_MODES}, got {self.mode!r}")
        if len(self.region) != 3 or any(len(r) != 2 or r[0] >= r[1] for r in self.region):
            raise PhantomSpecError(f"corruption region must be three [start, stop) pairs, got {self.region}")

    def mask(self, dims) -> np.ndarray:
        m = np.zeros(dims, dtype=bool)
        m[tuple(slice(a, b) for a, b in self.region)] = True
        return m


def inverted_contrast(num_classes: int = 5, spacing: float = 0.8, std: float = 0.1):
    """Modality 2 reverses modality 1's class ordering, as in in-/opposed-phase pairs."""
    means = [0.2 + spacing * c for c in range(num_classes)]
    return [[(m, std) for m in means], [(m, std) for m in reversed(means)]]


@dataclass
class PhantomSpec:
    dims: tuple[int, int, int] = (64, 64, 64)
    num_classes: int = 5
    contrast: list = field(default_factory=inverted_contrast)  # [modality][class] -> (mean, std)
    radius_range: tuple[float, float] = (0.2, 0.3)  # fraction of the smallest extent
    deform: float = 0.35
    smoothness: float = 5.0
    min_class_fraction: float = 0.004
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    modality_names: list[str] = field(default_factory=lambda: ["modal1", "modal2"])
    corruption: Corruption | None = None

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.radius_range = tuple(self.radius_range)
        self.contrast = [[tuple(float(v) for v in entry) for entry in table] for table in self.contrast]
        if isinstance(self.corruption, dict):
            self.corruption = Corruption(**self.corruption)
        self.validate()

    def validate(self) -> None:
        if len(self.dims) != 3 or min(self.dims) < 4:
            raise PhantomSpecError(f"dims must be three extents >= 4, got {self.dims}")
        if self.num_classes < 2:
            raise PhantomSpecError("num_classes must be at least 2")
        if not self.contrast:
            raise PhantomSpecError("contrast table needs at least one modality")
        for m, table in enumerate(self.contrast):
            if len(table) < self.num_classes:
                raise PhantomSpecError(
                    f"contrast table for modality {m + 1} is missing class {len(table)} (has {len(table)} of {self.num_classes})")
            if any(len(e) != 2 or e[1] < 0 for e in table):
                raise PhantomSpecError(f"contrast entries must be (mean, std >= 0) in modality {m + 1}")
        if len(self.modality_names) != len(self.contrast):
            raise PhantomSpecError("need one modality name per contrast table")
        if self.corruption is not None:
            if not 0 <= self.corruption.modality < len(self.contrast):
                raise PhantomSpecError(f"corruption modality {self.corruption.modality} out of range")
            for (a, b), d in zip(self.corruption.region, self.dims):
                if a < 0 or b > d:
                    raise PhantomSpecError(f"corruption region {self.corruption.region} exceeds dims {self.dims}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["spacing"] = list(self.spacing)
        d["radius_range"] = list(self.radius_range)
        d["contrast"] = [[list(e) for e in t] for t in self.contrast]
        if self.corruption is not None:
            d["corruption"]["region"] = [list(r) for r in self.corruption.region]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> PhantomSpec:
        try:
            return cls(**d)
        except TypeError as exc:
            raise PhantomSpecError(str(exc)) from exc


def _smooth_noise(rng, dims, sigma):
    f = gaussian_filter(rng.standard_normal(dims), sigma, mode="wrap")
    return f / (f.std() + 1e-12)


def _labels(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    """Adjacent blobs: centers are spread apart and each class only paints background,
    so no class is carved away by a later one."""
    dims = np.asarray(spec.dims)
    grid = np.indices(spec.dims, dtype=np.float64)
    label = np.zeros(spec.dims, dtype=np.int64)
    rmin, rmax = spec.radius_range
    placed: list[tuple[np.ndarray, float]] = []
    for c in range(1, spec.num_classes):
        radii = rng.uniform(rmin, rmax, size=3) * dims.min()
        lo = np.minimum(radii, dims / 2)
        r = float(radii.mean())
        best, best_gap = None, -np.inf
        for _ in range(SEPARATION_TRIES):
            center = rng.uniform(lo, dims - lo)
            gap = min((np.linalg.norm(center - pc) - (r + pr) * OVERLAP for pc, pr in placed), default=0.0)
            if gap > best_gap:
                best, best_gap = center, gap
            if gap >= 0:
                break
        placed.append((best, r))
        f = sum(((grid[a] - best[a]) / radii[a]) ** 2 for a in range(3))
        f += spec.deform * _smooth_noise(rng, spec.dims, spec.smoothness)
        label[(f < 1.0) & (label == 0)] = c
    return label


def generate_phantom(spec: PhantomSpec, seed: int, max_tries: int = 50) -> Volume:
    """Deterministic in (spec, seed)."""
    spec.validate()
    rng = np.random.default_rng(seed)
    need = spec.min_class_fraction * np.prod(spec.dims)
    for _ in range(max_tries):
        label = _labels(spec, rng)
        if np.bincount(label.ravel(), minlength=spec.num_classes).min() >= need:
            break
    else:
        raise PhantomSpecError(f"could not place all {spec.num_classes} classes in {max_tries} tries; enlarge radius_range")

    mods = []
    for table in spec.contrast:
        t = np.asarray(table[:spec.num_classes])
        mods.append(t[label, 0] + t[label, 1] * rng.standard_normal(spec.dims))

    region = None
    if spec.corruption is not None:
        cor = spec.corruption
        region = cor.mask(spec.dims)
        img = mods[cor.modality]
        if cor.mode == "swap-contrast":
            # each class takes the next class's contrast, so no class keeps its own
            t = np.asarray(spec.contrast[cor.modality][:spec.num_classes])
            shifted = (label[region] + 1) % spec.num_classes
            img[region] = t[shifted, 0] + t[shifted, 1] * rng.standard_normal(int(region.sum()))
        else:
            img[region] += cor.noise_std * rng.standard_normal(int(region.sum()))

    return Volume([m.astype(np.float32) for m in mods], label, spec.spacing, list(spec.modality_names), region)
