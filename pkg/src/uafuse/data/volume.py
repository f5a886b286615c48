from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .nifti import read_nifti, write_nifti


@dataclass
class Volume:
    modalities: list[np.ndarray]  # each [M, N, D] float32
    label: np.ndarray | None = None  # [M, N, D] integer
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    modality_names: list[str] = field(default_factory=list)
    region: np.ndarray | None = None  # corruption mask, phantoms only

    def __post_init__(self):
        if not self.modalities:
            raise ValueError("a volume needs at least one modality")
        dims = self.modalities[0].shape
        for m in self.modalities:
            if m.shape != dims:
                raise ValueError(f"modality dims differ: {m.shape} vs {dims}")
        if self.label is not None and self.label.shape != dims:
            raise ValueError(f"label dims {self.label.shape} differ from modality dims {dims}")
        if not self.modality_names:
            self.modality_names = [f"modal{i + 1}" for i in range(len(self.modalities))]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.modalities[0].shape

    def stack(self) -> np.ndarray:
        return np.stack(self.modalities).astype(np.float32, copy=False)


def normalize(vol: Volume) -> Volume:
    """Z-score each modality over its nonzero voxels; a constant modality becomes all zeros."""
    out = []
    for m in vol.modalities:
        m = np.asarray(m, dtype=np.float64)
        support = m != 0
        res = np.zeros_like(m)
        if support.any():
            vals = m[support]
            std = vals.std()
            if std > 0:
                res[support] = (vals - vals.mean()) / std
        out.append(res.astype(np.float32))
    return replace(vol, modalities=out)


def save_case(vol: Volume, case_dir) -> None:
    case_dir = Path(case_dir)
    case_dir.mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(vol.modalities):
        write_nifti(m.astype(np.float32), vol.spacing, case_dir / f"modal{i + 1}.nii")
    if vol.label is not None:
        write_nifti(vol.label.astype(np.uint8), vol.spacing, case_dir / "label.nii")
    if vol.region is not None:
        write_nifti(vol.region.astype(np.uint8), vol.spacing, case_dir / "region.nii")


def load_case(case_dir, num_modalities: int | None = None, with_label: bool = True) -> Volume:
    case_dir = Path(case_dir)
    mods, spacing = [], (1.0, 1.0, 1.0)
    i = 1
    while (case_dir / f"modal{i}.nii").exists() and (num_modalities is None or i <= num_modalities):
        grid, spacing = read_nifti(case_dir / f"modal{i}.nii")
        mods.append(grid.astype(np.float32))
        i += 1
    if not mods:
        raise FileNotFoundError(f"{case_dir}: no modal1.nii found")
    if num_modalities is not None and len(mods) != num_modalities:
        raise FileNotFoundError(f"{case_dir}: expected {num_modalities} modalities, found {len(mods)}")
    label = None
    if with_label and (case_dir / "label.nii").exists():
        label = read_nifti(case_dir / "label.nii")[0].astype(np.int64)
    region = None
    if (case_dir / "region.nii").exists():
        region = read_nifti(case_dir / "region.nii")[0].astype(bool)
    return Volume(mods, label, spacing, region=region)
