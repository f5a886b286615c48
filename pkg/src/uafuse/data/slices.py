"""8-bit PGM export of axial slices for quick visual inspection."""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np

# fixed class -> gray level; classes beyond the table wrap around
CLASS_GRAY = np.array([0, 255, 170, 110, 60, 220, 140, 30], dtype=np.uint8)


def to_gray(vol: np.ndarray) -> np.ndarray:
    """Integer grids map through the class table; real grids are min-max scaled."""
    if np.issubdtype(vol.dtype, np.integer) or np.issubdtype(vol.dtype, np.bool_):
        return CLASS_GRAY[np.asarray(vol, dtype=np.int64) % len(CLASS_GRAY)]
    lo, hi = float(vol.min()), float(vol.max())
    if hi <= lo:
        return np.zeros(vol.shape, dtype=np.uint8)
    return np.round((vol - lo) / (hi - lo) * 255).astype(np.uint8)


def write_pgm(img: np.ndarray, path) -> None:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    return np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=m.end()).reshape(h, w)


def export_slices(vol: np.ndarray, out_dir, prefix: str = "slice") -> list[Path]:
    """One PGM per index along the last axis; rows are the second axis, columns the first."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    gray = to_gray(vol)
    paths = []
    for z in range(gray.shape[2]):
        p = out_dir / f"{prefix}_{z:03d}.pgm"
        write_pgm(gray[:, :, z].T, p)
        paths.append(p)
    return paths
