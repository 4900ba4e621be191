"""Dataset manifests: one tab-separated record per image.

    split <TAB> class_id <TAB> relative_path <TAB> width <TAB> height

Paths are relative to the directory holding the manifest file.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ManifestError
from .images import read_pnm, resize

SPLITS = ("train", "val", "test")
PNM_SUFFIXES = {".ppm": "P6", ".pgm": "P5"}


@dataclass(frozen=True)
class ImageEntry:
    split: str
    class_id: str
    path: str
    width: int
    height: int

    @property
    def format(self) -> str:
        return PNM_SUFFIXES.get(Path(self.path).suffix.lower(), "unknown")


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ImageEntry] = field(default_factory=list)

    def classes(self, split: str) -> list[str]:
        seen = dict.fromkeys(e.class_id for e in self.entries if e.split == split)
        return list(seen)

    def by_class(self, split: str) -> dict[str, list[ImageEntry]]:
        out: dict[str, list[ImageEntry]] = defaultdict(list)
        for e in self.entries:
            if e.split == split:
                out[e.class_id].append(e)
        return dict(out)

    def validate(self, check_files: bool = True) -> None:
        owner: dict[str, str] = {}
        for e in self.entries:
            if e.split not in SPLITS:
                raise ManifestError(f"class {e.class_id}: unknown split {e.split!r}")
            prev = owner.setdefault(e.class_id, e.split)
            if prev != e.split:
                raise ManifestError(f"split overlap: class {e.class_id} appears in {prev} and {e.split}")
            if e.format == "unknown":
                raise ManifestError(f"class {e.class_id}: unsupported image format {e.path}")
            if e.width <= 0 or e.height <= 0:
                raise ManifestError(f"class {e.class_id}: non-positive size for {e.path}")
            if check_files and not (self.root / e.path).is_file():
                raise ManifestError(f"class {e.class_id}: missing image file {e.path}")


def load_manifest(path: str | Path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise ManifestError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(parts)}")
        split, class_id, rel, width, height = parts
        try:
            entries.append(ImageEntry(split, class_id, rel, int(width), int(height)))
        except ValueError:
            raise ManifestError(f"{path}:{lineno}: class {class_id}: bad width/height") from None
    manifest = DatasetManifest(path.parent, entries)
    manifest.validate(check_files)
    return manifest


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    lines = [f"{e.split}\t{e.class_id}\t{e.path}\t{e.width}\t{e.height}" for e in manifest.entries]
    Path(path).write_text("\n".join(lines) + "\n")


class ImageStore:
    """All images of one split, decoded and resized once."""

    def __init__(self, manifest: DatasetManifest, split: str, size: int):
        self.split = split
        self.size = size
        groups = manifest.by_class(split)
        if not groups:
            raise ManifestError(f"split {split!r} has no classes")
        self.class_ids = list(groups)
        self.images: list[np.ndarray] = []
        for cid in self.class_ids:
            arrs = [resize(read_pnm(manifest.root / e.path), size) for e in groups[cid]]
            self.images.append(np.stack(arrs))

    def counts(self) -> list[int]:
        return [len(a) for a in self.images]

    def channel_stats(self) -> tuple[np.ndarray, np.ndarray]:
        pixels = np.concatenate([a.transpose(1, 0, 2, 3).reshape(3, -1) for a in self.images], axis=1)
        return pixels.mean(axis=1), np.maximum(pixels.std(axis=1), 1e-6)
