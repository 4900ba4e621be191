"""Episode sampling and image augmentation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..errors import SamplingError
from .images import resize
from .manifest import ImageStore

CROP_FRACTION = 7 / 8
JITTER = 0.2


@dataclass(frozen=True)
class EpisodeSpec:
    way: int
    shot: int
    query: int

    def __post_init__(self):
        if self.way < 2 or self.shot < 1 or self.query < 1:
            raise ValueError(f"invalid episode spec {self}")


@dataclass(frozen=True)
class Episode:
    """Indices into an ``ImageStore``; labels are positions in ``classes``."""

    classes: tuple[int, ...]
    support: tuple[tuple[int, int], ...]
    query: tuple[tuple[int, int], ...]
    support_labels: tuple[int, ...]
    query_labels: tuple[int, ...]

    @property
    def class_map(self) -> dict[int, int]:
        return {c: i for i, c in enumerate(self.classes)}


def sample_episode(class_sizes, spec: EpisodeSpec, rng: np.random.Generator) -> Episode:
    """Draw classes without replacement, then ``shot + query`` distinct images per class."""
    sizes = class_sizes.counts() if isinstance(class_sizes, ImageStore) else list(class_sizes)
    need = spec.shot + spec.query
    eligible = [i for i, n in enumerate(sizes) if n >= need]
    if len(sizes) < spec.way:
        raise SamplingError(f"split has {len(sizes)} classes, episode needs {spec.way}")
    if len(eligible) < len(sizes):
        raise SamplingError(f"every class needs at least {need} images")
    classes = tuple(int(c) for c in rng.choice(len(sizes), size=spec.way, replace=False))
    support, query, s_lab, q_lab = [], [], [], []
    for label, c in enumerate(classes):
        picks = rng.choice(sizes[c], size=need, replace=False)
        support += [(c, int(i)) for i in picks[: spec.shot]]
        query += [(c, int(i)) for i in picks[spec.shot:]]
        s_lab += [label] * spec.shot
        q_lab += [label] * spec.query
    return Episode(classes, tuple(support), tuple(query), tuple(s_lab), tuple(q_lab))


def center_crop(image: np.ndarray, fraction: float = CROP_FRACTION) -> np.ndarray:
    h, w = image.shape[-2:]
    ch, cw = max(1, round(h * fraction)), max(1, round(w * fraction))
    top, left = (h - ch) // 2, (w - cw) // 2
    return image[:, top:top + ch, left:left + cw]


def flip(image: np.ndarray) -> np.ndarray:
    return image[:, :, ::-1]


def augment(image: np.ndarray, rng: np.random.Generator | None, mode: str = "train",
            force_flip: bool | None = None) -> np.ndarray:
    """Train: random flip, random 7/8 crop resized back, brightness/contrast jitter.
    Eval: centre 7/8 crop resized back. Values stay in [0, 1]."""
    h, w = image.shape[-2:]
    if mode == "eval":
        return resize(center_crop(image), (h, w))
    if mode != "train":
        raise ValueError(f"unknown augmentation mode {mode!r}")
    do_flip = rng.random() < 0.5 if force_flip is None else force_flip
    out = flip(image) if do_flip else image
    ch, cw = max(1, round(h * CROP_FRACTION)), max(1, round(w * CROP_FRACTION))
    top = int(rng.integers(h - ch + 1))
    left = int(rng.integers(w - cw + 1))
    out = resize(out[:, top:top + ch, left:left + cw], (h, w))
    brightness = rng.uniform(1 - JITTER, 1 + JITTER)
    contrast = rng.uniform(1 - JITTER, 1 + JITTER)
    out = out * brightness
    mean = out.mean()
    out = (out - mean) * contrast + mean
    return np.clip(out, 0.0, 1.0)


def episode_tensors(store: ImageStore, episode: Episode, rng: np.random.Generator | None,
                    mode: str) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """(support images, support labels, query images, query labels)."""

    def batch(refs):
        return torch.from_numpy(np.stack([augment(store.images[c][i], rng, mode) for c, i in refs]))

    return (batch(episode.support), torch.tensor(episode.support_labels),
            batch(episode.query), torch.tensor(episode.query_labels))
