"""Synthetic fine-grained dataset: parametric flower shapes on shared clutter.

Each class is a shape family (petal count, petal depth, hue band, radial
brightness profile). Instances are drawn at random pose and scale onto
backgrounds taken from a single pool shared by every class, so only the
foreground pixels carry class information. Foreground masks are written
next to the images under ``masks/``.
"""
from __future__ import annotations

import colorsys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import numerics as nx
from .images import resize, write_pgm, write_ppm
from .manifest import DatasetManifest, ImageEntry, write_manifest

GOLDEN = 0.6180339887498949


@dataclass(frozen=True)
class SynthConfig:
    classes: int = 20
    images_per_class: int = 30
    size: int = 32
    fg_fraction: float = 0.2
    clutter_level: float = 0.5
    n_train: int | None = None
    n_val: int | None = None
    n_backgrounds: int = 48

    def split_counts(self) -> tuple[int, int, int]:
        if self.n_train is not None and self.n_val is not None:
            n_train, n_val = self.n_train, self.n_val
        else:
            n_train = self.classes // 2
            n_val = max(1, round(self.classes * 0.2))
        n_test = self.classes - n_train - n_val
        if min(n_train, n_val, n_test) < 1:
            raise ValueError(f"cannot split {self.classes} classes into train/val/test")
        return n_train, n_val, n_test


@dataclass(frozen=True)
class ShapeFamily:
    petals: int
    depth: float
    hue: float
    profile: float


def class_family(index: int) -> ShapeFamily:
    return ShapeFamily(
        petals=3 + (2 * index) % 5,
        depth=(0.12, 0.3, 0.48)[index % 3],
        hue=(index * GOLDEN) % 1.0,
        profile=(-0.5, 0.0, 0.5)[(index // 3) % 3],
    )


def _background(rng: np.random.Generator, size: int, clutter: float) -> np.ndarray:
    """Low-saturation textured clutter, ``size x size x 3`` in [0, 1]."""
    base = rng.uniform(0.35, 0.6)
    coarse = rng.normal(0.0, 1.0, (3, 5, 5))
    coarse = coarse.mean(axis=0, keepdims=True) * 0.8 + coarse * 0.2
    low = resize(coarse, size)
    fine = rng.normal(0.0, 1.0, (1, size, size)) + 0.25 * rng.normal(0.0, 1.0, (3, size, size))
    img = base + clutter * (0.12 * low + 0.06 * fine)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    for _ in range(int(round(6 * clutter))):
        cy, cx = rng.uniform(0, size, 2)
        ry, rx = rng.uniform(1.5, size / 5, 2)
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = (dx * np.cos(theta) + dy * np.sin(theta)) / rx
        v = (-dx * np.sin(theta) + dy * np.cos(theta)) / ry
        blob = (u * u + v * v) < 1.0
        tint = np.array(colorsys.hsv_to_rgb(rng.uniform(), rng.uniform(0.05, 0.25), rng.uniform(0.3, 0.7)))
        img[:, blob] = tint[:, None]
    return np.clip(img.transpose(1, 2, 0), 0.0, 1.0)


def render_instance(rng: np.random.Generator, family: ShapeFamily, background: np.ndarray,
                    fg_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """Draw one shape onto ``background``; returns (rgb uint8, bool mask)."""
    size = background.shape[0]
    img = background.copy()
    mask = np.zeros((size, size), dtype=bool)
    if fg_fraction > 0:
        radius = np.sqrt(fg_fraction * size * size / np.pi) * rng.uniform(0.85, 1.15)
        reach = radius * (1 + family.depth)
        lo, hi = reach * 0.6, size - reach * 0.6
        cy, cx = rng.uniform(lo, hi, 2) if hi > lo else (size / 2, size / 2)
        rot = rng.uniform(0, 2 * np.pi)
        yy, xx = np.mgrid[0:size, 0:size] + 0.5
        dist = np.hypot(yy - cy, xx - cx)
        ang = np.arctan2(yy - cy, xx - cx)
        edge = radius * (1 + family.depth * np.cos(family.petals * (ang - rot)))
        mask = dist < edge
        hue = (family.hue + rng.uniform(-0.015, 0.015)) % 1.0
        rgb = np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.75, 0.95), rng.uniform(0.75, 0.95)))
        shade = 1 + family.profile * (dist / np.maximum(edge, 1e-9) - 0.5)
        img[mask] = np.clip(rgb[None, :] * shade[mask][:, None], 0.0, 1.0)
    return np.round(img * 255).astype(np.uint8), mask


def synth_generate(cfg: SynthConfig, root: str | Path, seed: int) -> DatasetManifest:
    """Write images, masks and ``manifest.tsv`` under ``root``."""
    if cfg.classes < 4:
        raise ValueError("need at least 4 classes")
    root = Path(root)
    n_train, n_val, _ = cfg.split_counts()
    bg_rng = nx.make_rng(seed, 0)
    pool = [_background(bg_rng, cfg.size, cfg.clutter_level) for _ in range(cfg.n_backgrounds)]

    entries = []
    for c in range(cfg.classes):
        split = "train" if c < n_train else "val" if c < n_train + n_val else "test"
        cid = f"c{c:03d}"
        (root / "images" / cid).mkdir(parents=True, exist_ok=True)
        (root / "masks" / cid).mkdir(parents=True, exist_ok=True)
        family = class_family(c)
        rng = nx.make_rng(seed, 1, c)
        for i in range(cfg.images_per_class):
            bg = pool[rng.integers(len(pool))]
            bg = np.rot90(bg, k=int(rng.integers(4)))
            if rng.random() < 0.5:
                bg = bg[:, ::-1]
            rgb, mask = render_instance(rng, family, np.ascontiguousarray(bg), cfg.fg_fraction)
            rel = f"images/{cid}/{i:03d}.ppm"
            write_ppm(root / rel, rgb)
            write_pgm(root / "masks" / cid / f"{i:03d}.pgm", mask.astype(np.uint8) * 255)
            entries.append(ImageEntry(split, cid, rel, cfg.size, cfg.size))
    manifest = DatasetManifest(root, entries)
    write_manifest(manifest, root / "manifest.tsv")
    return manifest


def mask_path(manifest_root: str | Path, image_rel: str) -> Path:
    rel = Path(image_rel)
    return Path(manifest_root) / "masks" / rel.parent.name / (rel.stem + ".pgm")
