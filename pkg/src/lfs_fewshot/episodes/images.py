"""Portable pixmap I/O and resizing."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image


def read_pnm(path: str | Path) -> np.ndarray:
    """P5/P6 file -> float64 array ``3 x h x w`` in [0, 1] (grey is replicated)."""
    with Image.open(path) as img:
        if img.format != "PPM":
            raise ValueError(f"{path}: not a portable pixmap/graymap")
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def read_mask(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("L")) > 127


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    """``h x w x 3`` uint8 -> binary P6."""
    Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8), mode="RGB").save(path, format="PPM")


def write_pgm(path: str | Path, grey: np.ndarray) -> None:
    """``h x w`` uint8 -> binary P5."""
    Image.fromarray(np.ascontiguousarray(grey, dtype=np.uint8), mode="L").save(path, format="PPM")


def write_pgm_ascii(path: str | Path, grey: np.ndarray) -> None:
    """``h x w`` integers in [0, 255] -> plain P2 graymap."""
    grey = np.asarray(grey, dtype=np.int64)
    h, w = grey.shape
    lines = ["P2", f"{w} {h}", "255"]
    lines += [" ".join(str(int(v)) for v in row) for row in grey]
    Path(path).write_text("\n".join(lines) + "\n")


def read_pgm_ascii(path: str | Path) -> np.ndarray:
    tokens = [t for line in Path(path).read_text().splitlines()
              for t in line.split("#", 1)[0].split()]
    if tokens[0] != "P2":
        raise ValueError(f"{path}: not a P2 graymap")
    w, h = int(tokens[1]), int(tokens[2])
    return np.array(tokens[4:4 + w * h], dtype=np.int64).reshape(h, w)


def resize(image: np.ndarray, size: int | tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a ``c x h x w`` array."""
    if isinstance(size, int):
        size = (size, size)
    if tuple(image.shape[-2:]) == tuple(size):
        return image
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float64))[None]
    out = F.interpolate(t, size=size, mode="bilinear", align_corners=False)
    return out[0].numpy()


def upscale_nearest(grid: np.ndarray, height: int, width: int) -> np.ndarray:
    h, w = grid.shape
    rows = (np.arange(height) * h) // height
    cols = (np.arange(width) * w) // width
    return grid[rows[:, None], cols[None, :]]
