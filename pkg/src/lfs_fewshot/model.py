"""Full few-shot classifier: Conv-4 -> LFS encoder -> reconstruction head."""
from __future__ import annotations

from dataclasses import dataclass, fields

import torch
import torch.nn as nn

from . import numerics as nx
from .backbone import Conv4
from .errors import CheckpointError
from .lfs_attention import AttentionConfig, LFSModule
from .reconstruction import ReconstructionHead


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 64
    image_size: int = 32
    head: str = "frn"
    mode: str = "lfs"
    fs_ratio: float = 0.5
    heads: int = 1
    layers: int = 1
    mlp_mult: int = 2
    kernel: int = 3
    l2_normalize: bool = True

    def attention(self) -> AttentionConfig:
        return AttentionConfig(mode=self.mode, fs_ratio=self.fs_ratio, heads=self.heads,
                               kernel=self.kernel, layers=self.layers, mlp_mult=self.mlp_mult)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


class FewShotModel(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        side = Conv4.output_size(cfg.image_size)
        if side < 1:
            raise ValueError(f"image_size {cfg.image_size} too small for four pooling stages")
        gen = nx.torch_generator(seed)
        self.backbone = Conv4(cfg.channels, generator=gen)
        self.lfsm = LFSModule(cfg.channels, (side, side), cfg.attention(), generator=gen)
        self.head = ReconstructionHead(cfg.head, cfg.channels, cfg.l2_normalize)
        self.register_buffer("data_mean", torch.zeros(3, dtype=nx.DTYPE))
        self.register_buffer("data_std", torch.ones(3, dtype=nx.DTYPE))

    def set_normalization(self, mean, std) -> None:
        with torch.no_grad():
            self.data_mean.copy_(torch.as_tensor(mean, dtype=nx.DTYPE))
            self.data_std.copy_(torch.as_tensor(std, dtype=nx.DTYPE))

    def normalize(self, images: torch.Tensor) -> torch.Tensor:
        return (images - self.data_mean[:, None, None]) / self.data_std[:, None, None]

    def feature_maps(self, images: torch.Tensor) -> torch.Tensor:
        return self.backbone(self.normalize(images))

    def pools(self, images: torch.Tensor) -> torch.Tensor:
        return self.lfsm(self.feature_maps(images))

    def forward(self, support: torch.Tensor, support_labels: torch.Tensor, query: torch.Tensor,
                way: int) -> torch.Tensor:
        """Logits ``n_query x way``; every class needs the same number of shots."""
        pools = self.pools(torch.cat([support, query]))
        s_pools, q_pools = pools[: len(support)], pools[len(support):]
        labels = torch.as_tensor(support_labels)
        per_class = [s_pools[labels == c].reshape(-1, s_pools.shape[-1]) for c in range(way)]
        if len({p.shape[0] for p in per_class}) != 1 or per_class[0].shape[0] == 0:
            raise ValueError("every class needs the same, non-zero number of support images")
        logits = self.head(q_pools, torch.stack(per_class))
        return nx.check_finite(logits, "logits")

    def heatmaps(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(feature energy grid, LFS importance grid), each ``b x h x w`` in [0, 1]."""
        fmap = self.feature_maps(images)
        energy = fmap.pow(2).sum(dim=1).sqrt()
        lo = energy.flatten(1).amin(1)[:, None, None]
        hi = energy.flatten(1).amax(1)[:, None, None]
        span = hi - lo
        energy = torch.where(span > 1e-12, (energy - lo) / span.clamp_min(1e-300), torch.zeros_like(energy))
        return energy, self.lfsm.heatmap(fmap)

    # checkpoint plumbing -------------------------------------------------

    def state_tensors(self) -> dict[str, torch.Tensor]:
        return dict(self.state_dict())

    def load_tensors(self, tensors: dict[str, torch.Tensor]) -> None:
        own = self.state_dict()
        missing = sorted(set(own) - set(tensors))
        extra = sorted(set(tensors) - set(own))
        if missing or extra:
            raise CheckpointError(f"checkpoint mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, t in tensors.items():
            if tuple(t.shape) != tuple(own[name].shape):
                raise CheckpointError(f"checkpoint mismatch for {name}: {tuple(t.shape)} vs {tuple(own[name].shape)}")
        self.load_state_dict({k: v.to(nx.DTYPE) for k, v in tensors.items()})

    def save(self, path) -> None:
        nx.save_checkpoint(path, self.state_tensors())

    @classmethod
    def load(cls, path, cfg: ModelConfig) -> "FewShotModel":
        model = cls(cfg)
        model.load_tensors(nx.load_checkpoint(path))
        model.eval()
        return model
