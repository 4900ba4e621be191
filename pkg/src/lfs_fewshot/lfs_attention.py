"""Local Foreground Selection (LFS) attention and its transformer encoder.

Feature maps are flattened into raster-ordered tokens, refined by an encoder
whose attention combines convolutional (local) projections with a binary
foreground-selection mask obtained by per-row thresholding of the relevance
matrix, and returned as a feature pool of the same shape.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from . import numerics as nx
from .errors import DimensionError

MODES = ("self", "local", "select", "lfs")
CONV_MODES = ("local", "lfs")
MASKED_MODES = ("select", "lfs")


@dataclass(frozen=True)
class AttentionConfig:
    mode: str = "lfs"
    fs_ratio: float = 0.5
    heads: int = 1
    kernel: int = 3
    layers: int = 1
    mlp_mult: int = 2

    def validate(self, d: int) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown attention mode {self.mode!r}; expected one of {MODES}")
        # ratios below 1/m are allowed: the selection index is clamped to >= 1
        if not 0.0 < self.fs_ratio <= 1.0:
            raise ValueError(f"fs_ratio must lie in (0, 1], got {self.fs_ratio}")
        if self.heads < 1 or d % self.heads:
            raise ValueError(f"d={d} not divisible by heads={self.heads}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel must be odd")
        if self.layers < 1 or self.mlp_mult < 1:
            raise ValueError("layers and mlp_mult must be positive")


def tokenize(fmap: torch.Tensor, e_pos: torch.Tensor) -> torch.Tensor:
    """``[b x] d x h x w`` feature map -> ``[b x] r x d`` tokens plus positional embedding."""
    d, h, w = fmap.shape[-3:]
    if e_pos.shape != (h * w, d):
        raise DimensionError(f"e_pos shape {tuple(e_pos.shape)} does not match r x d = ({h * w}, {d})")
    return fmap.flatten(-2).transpose(-1, -2) + e_pos


def untokenize(tokens: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """Inverse raster: ``b x r x d`` -> ``b x d x h x w``."""
    b, r, d = tokens.shape
    if r != h * w:
        raise DimensionError(f"{r} tokens cannot form a {h}x{w} grid")
    return tokens.transpose(1, 2).reshape(b, d, h, w)


def conv_project(tokens: torch.Tensor, h: int, w: int, dw: torch.Tensor, pw: torch.Tensor) -> torch.Tensor:
    grid = untokenize(tokens, h, w)
    return nx.depthwise_separable_conv(grid, dw, pw).flatten(2).transpose(1, 2)


def conv_project_qkv(tokens: torch.Tensor, h: int, w: int, params) -> tuple[torch.Tensor, ...]:
    """Q, K, V through depthwise-separable convolutions over the token grid.

    ``params`` maps ``"q" | "k" | "v"`` to ``(dw, pw)`` pairs.
    """
    return tuple(conv_project(tokens, h, w, *params[key]) for key in ("q", "k", "v"))


def relevance_scores(q: torch.Tensor, k: torch.Tensor, d_k: int | None = None) -> torch.Tensor:
    """``Q K^T / sqrt(d_k)``; ``d_k`` defaults to the key width."""
    return nx.matmul(q, k.transpose(-1, -2)) / math.sqrt(d_k or q.shape[-1])


def selection_index(fs_ratio: float, m: int) -> int:
    # the epsilon absorbs products like 0.29 * 100 = 28.999999999999996
    return min(max(math.floor(fs_ratio * m + 1e-9), 1), m - 1)


def fs_threshold_mask(relevance: torch.Tensor, fs_ratio: float) -> torch.Tensor:
    """Binary foreground-selection mask over the last axis of ``relevance``.

    Each row is sorted in descending order and the value at position
    ``clamp(floor(fs_ratio * m), 1, m - 1)`` becomes the threshold; entries
    strictly above it are kept. ``fs_ratio == 1`` keeps every entry. A row
    emptied by ties keeps its first maximal entry.
    """
    r = relevance.detach()
    m = r.shape[-1]
    if fs_ratio >= 1.0 or m == 1:
        return torch.ones_like(r)
    idx = selection_index(fs_ratio, m)
    ordered = torch.sort(r, dim=-1, descending=True, stable=True).values
    keep = r > ordered[..., idx:idx + 1]
    empty = ~keep.any(dim=-1, keepdim=True)
    if empty.any():
        first_max = torch.zeros_like(keep).scatter_(-1, r.argmax(dim=-1, keepdim=True), True)
        keep = keep | (empty & first_max)
    nx.note_branch(keep)
    return keep.to(r.dtype)


def binarize(x: torch.Tensor) -> torch.Tensor:
    return (x > 0).to(x.dtype)


def attention_heatmap(probs: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """Per-token attention received, min-max scaled to [0, 1] on an ``h x w`` grid.

    ``probs`` is ``[b x] heads x m x m``. A constant grid maps to all zeros.
    """
    importance = probs.mean(dim=-3).mean(dim=-2)
    lo = importance.amin(dim=-1, keepdim=True)
    hi = importance.amax(dim=-1, keepdim=True)
    span = hi - lo
    scaled = torch.where(span > 1e-12, (importance - lo) / span.clamp_min(1e-300), torch.zeros_like(importance))
    return scaled.reshape(*scaled.shape[:-1], h, w)


def _normal(shape, std, generator):
    t = torch.empty(*shape, dtype=nx.DTYPE)
    with torch.no_grad():
        t.normal_(0.0, std, generator=generator)
    return nn.Parameter(t)


def _delta_kernel(d: int, k: int) -> torch.Tensor:
    t = torch.zeros(d, k, k, dtype=nx.DTYPE)
    t[:, k // 2, k // 2] = 1.0
    return t


class LFSAttention(nn.Module):
    """Multi-head attention with mode-dependent projections and masking.

    ``self``: linear projections, no mask. ``local``: conv projections, no mask.
    ``select``: linear projections, FS mask. ``lfs``: conv projections, FS mask.
    """

    def __init__(self, d: int, cfg: AttentionConfig, generator: torch.Generator | None = None):
        super().__init__()
        cfg.validate(d)
        self.d = d
        self.cfg = cfg
        # Q and K start tied, so the initial relevance is a positive semi-definite
        # similarity between tokens; depthwise kernels start as centred deltas so
        # zero padding on small grids does not dominate the projections.
        if cfg.mode in CONV_MODES:
            for key in "qkv":
                setattr(self, f"dw_{key}", nn.Parameter(_delta_kernel(d, cfg.kernel)))
            self.pw_q = _normal((d, d), 1.0 / math.sqrt(d), generator)
            self.pw_k = nn.Parameter(self.pw_q.detach().clone())
            self.pw_v = _normal((d, d), 1.0 / math.sqrt(d), generator)
        else:
            self.w_q = _normal((d, d), 1.0 / math.sqrt(d), generator)
            self.w_k = nn.Parameter(self.w_q.detach().clone())
            self.w_v = _normal((d, d), 1.0 / math.sqrt(d), generator)
        self.out_w = _normal((d, d), 1.0 / math.sqrt(d), generator)
        self.out_b = nn.Parameter(torch.zeros(d, dtype=nx.DTYPE))

    def project(self, tokens: torch.Tensor, h: int, w: int) -> tuple[torch.Tensor, ...]:
        if self.cfg.mode in CONV_MODES:
            params = {key: (getattr(self, f"dw_{key}"), getattr(self, f"pw_{key}")) for key in "qkv"}
            return conv_project_qkv(tokens, h, w, params)
        return tuple(tokens @ getattr(self, f"w_{key}") for key in "qkv")

    def split_heads(self, x: torch.Tensor) -> torch.Tensor:
        b, m, d = x.shape
        return x.reshape(b, m, self.cfg.heads, d // self.cfg.heads).transpose(1, 2)

    def forward(self, tokens: torch.Tensor, h: int, w: int, return_probs: bool = False):
        q, k, v = (self.split_heads(t) for t in self.project(tokens, h, w))
        scores = relevance_scores(q, k)
        if self.cfg.mode in MASKED_MODES:
            mask = fs_threshold_mask(scores, self.cfg.fs_ratio)
        else:
            mask = torch.ones_like(scores)
        probs = nx.masked_softmax_rows(scores, mask)
        mixed = (probs @ v).transpose(1, 2).reshape(tokens.shape)
        out = mixed @ self.out_w + self.out_b
        return (out, probs) if return_probs else out


class EncoderLayer(nn.Module):
    """``out = MLP(LN(y + attention(y)))``."""

    def __init__(self, d: int, cfg: AttentionConfig, generator: torch.Generator | None = None):
        super().__init__()
        hidden = cfg.mlp_mult * d
        self.attn = LFSAttention(d, cfg, generator)
        self.ln_gain = nn.Parameter(torch.ones(d, dtype=nx.DTYPE))
        self.ln_bias = nn.Parameter(torch.zeros(d, dtype=nx.DTYPE))
        self.fc1_w = _normal((d, hidden), math.sqrt(2.0 / d), generator)
        self.fc1_b = nn.Parameter(torch.zeros(hidden, dtype=nx.DTYPE))
        self.fc2_w = _normal((hidden, d), math.sqrt(1.0 / hidden), generator)
        self.fc2_b = nn.Parameter(torch.zeros(d, dtype=nx.DTYPE))

    def forward(self, y: torch.Tensor, h: int, w: int, return_probs: bool = False):
        y_hat, probs = self.attn(y, h, w, return_probs=True)
        z = nx.layer_norm(y + y_hat, self.ln_gain, self.ln_bias)
        out = nx.relu(z @ self.fc1_w + self.fc1_b) @ self.fc2_w + self.fc2_b
        return (out, probs) if return_probs else out


def encoder_block(tokens: torch.Tensor, layers, h: int, w: int) -> torch.Tensor:
    y = tokens
    for layer in layers:
        y = layer(y, h, w)
    return y


class LFSModule(nn.Module):
    """Tokenizer plus a stack of LFS encoder layers; maps feature maps to feature pools."""

    def __init__(self, d: int, grid: tuple[int, int], cfg: AttentionConfig,
                 generator: torch.Generator | None = None):
        super().__init__()
        cfg.validate(d)
        self.d = d
        self.grid = tuple(grid)
        self.cfg = cfg
        h, w = self.grid
        self.e_pos = _normal((h * w, d), 0.02, generator)
        self.layers = nn.ModuleList(EncoderLayer(d, cfg, generator) for _ in range(cfg.layers))

    def forward(self, fmap: torch.Tensor, return_probs: bool = False):
        h, w = self.grid
        if tuple(fmap.shape[-2:]) != self.grid:
            raise DimensionError(f"feature map grid {tuple(fmap.shape[-2:])} != configured {self.grid}")
        y = tokenize(fmap, self.e_pos)
        probs = None
        for layer in self.layers:
            y, probs = layer(y, h, w, return_probs=True)
        return (y, probs) if return_probs else y

    def heatmap(self, fmap: torch.Tensor) -> torch.Tensor:
        _, probs = self.forward(fmap, return_probs=True)
        return attention_heatmap(probs, *self.grid)
