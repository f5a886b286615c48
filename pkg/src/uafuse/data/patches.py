"""Patch gridding, target filtering, class-balanced sampling and overlap stitching."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np


class EmptyTargetError(ValueError):
    pass


def axis_starts(dim: int, patch: int, stride: int) -> list[int]:
    """0, s, 2s, ... with the last start clamped so the window ends at ``dim``.

    A stride longer than the patch would leave gaps, so the step is capped at ``patch``.
    """
    if patch > dim:
        raise ValueError(f"patch extent {patch} exceeds volume extent {dim}")
    if stride < 1 or patch < 1:
        raise ValueError("patch and stride must be positive")
    starts = list(range(0, dim - patch + 1, min(stride, patch)))
    if starts[-1] != dim - patch:
        starts.append(dim - patch)
    return starts


@dataclass
class PatchGrid:
    dims: tuple[int, int, int]
    patch_size: tuple[int, int, int]
    stride: tuple[int, int, int]
    starts: list[tuple[int, int, int]]
    keep_mask: np.ndarray = None
    dominant_class: np.ndarray = None  # -1 where not kept

    def __post_init__(self):
        n = len(self.starts)
        if self.keep_mask is None:
            self.keep_mask = np.ones(n, dtype=bool)
        if self.dominant_class is None:
            self.dominant_class = np.full(n, -1, dtype=np.int64)

    def window(self, i: int) -> tuple[slice, slice, slice]:
        return tuple(slice(s, s + p) for s, p in zip(self.starts[i], self.patch_size))

    def __len__(self) -> int:
        return len(self.starts)


def build_patch_grid(dims, patch_size=(32, 32, 32), stride=(14, 14, 14)) -> PatchGrid:
    dims, patch_size, stride = tuple(dims), tuple(patch_size), tuple(stride)
    per_axis = [axis_starts(d, p, s) for d, p, s in zip(dims, patch_size, stride)]
    return PatchGrid(dims, patch_size, stride, list(itertools.product(*per_axis)))


def annotate(grid: PatchGrid, label: np.ndarray, num_classes: int | None = None) -> PatchGrid:
    """Mark patches with at least one foreground voxel and record their dominant foreground class."""
    if label.shape != grid.dims:
        raise ValueError(f"label dims {label.shape} differ from grid dims {grid.dims}")
    nc = int(label.max()) + 1 if num_classes is None else num_classes
    keep = np.zeros(len(grid), dtype=bool)
    dom = np.full(len(grid), -1, dtype=np.int64)
    for i in range(len(grid)):
        counts = np.bincount(label[grid.window(i)].ravel(), minlength=nc)
        if counts[1:].sum() > 0:
            keep[i] = True
            dom[i] = 1 + int(np.argmax(counts[1:]))
    grid.keep_mask, grid.dominant_class = keep, dom
    return grid


@dataclass
class PatchSampler:
    """Draws training patches as (volume index, patch index) pairs."""

    mode: str
    entries: list[tuple[int, int]]  # kept patches
    dominant: np.ndarray  # dominant foreground class per entry
    by_class: dict[int, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("target-only", "class-balanced"):
            raise ValueError(f"unknown sampling mode {self.mode!r}")
        self.by_class = {}
        for j, c in enumerate(self.dominant):
            self.by_class.setdefault(int(c), []).append(j)

    def draw(self, rng: np.random.Generator, n: int) -> list[tuple[int, int]]:
        if self.mode == "target-only":
            idx = rng.integers(0, len(self.entries), size=n)
        else:
            classes = sorted(self.by_class)
            picks = rng.integers(0, len(classes), size=n)
            idx = [self.by_class[classes[p]][rng.integers(0, len(self.by_class[classes[p]]))] for p in picks]
        return [self.entries[int(i)] for i in idx]


def filter_and_balance(grids, labels, mode: str = "target-only", num_classes: int | None = None) -> PatchSampler:
    """Keep patches containing target voxels; build a sampler over all volumes' kept patches.

    ``grids``/``labels`` may be a single grid and label array or parallel lists.
    """
    if isinstance(grids, PatchGrid):
        grids, labels = [grids], [labels]
    entries, dom = [], []
    for v, (g, lab) in enumerate(zip(grids, labels)):
        annotate(g, lab, num_classes)
        for i in np.flatnonzero(g.keep_mask):
            entries.append((v, int(i)))
            dom.append(int(g.dominant_class[i]))
    if not entries:
        raise EmptyTargetError("no patch contains a foreground voxel; the volume is background-only")
    return PatchSampler(mode, entries, np.asarray(dom, dtype=np.int64))


def stitch(predictions, grid: PatchGrid, dims=None) -> np.ndarray:
    """Average overlapping per-patch maps [C, p, p, p] into a full [C, M, N, D] map."""
    dims = grid.dims if dims is None else tuple(dims)
    if len(predictions) != len(grid):
        raise ValueError(f"{len(predictions)} patch predictions for {len(grid)} grid starts")
    for i, p in enumerate(predictions):
        if p is None:
            raise ValueError(f"missing prediction for patch {i} at {grid.starts[i]}")
    c = predictions[0].shape[0]
    acc = np.zeros((c,) + dims, dtype=np.float64)
    count = np.zeros(dims, dtype=np.int64)
    for i, p in enumerate(predictions):
        w = grid.window(i)
        acc[(slice(None),) + w] += p
        count[w] += 1
    if (count == 0).any():
        raise ValueError("patch grid leaves voxels uncovered")
    return acc / count
