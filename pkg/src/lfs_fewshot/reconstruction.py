"""Feature-reconstruction classification heads (uni- and bi-directional).

A target pool is rebuilt as a ridge-regularised linear combination of the
rows of a basis pool. The mean squared reconstruction error is the distance
used for classification.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import numerics as nx
from .errors import DimensionError, SingularityError


@dataclass
class ReconResult:
    recon: torch.Tensor
    weights: torch.Tensor
    residual: torch.Tensor


def euclidean_recon_distance(orig: torch.Tensor, recon: torch.Tensor) -> torch.Tensor:
    """Mean squared entry-wise difference over the last two axes."""
    if orig.shape != recon.shape:
        raise DimensionError(f"shape mismatch {tuple(orig.shape)} vs {tuple(recon.shape)}")
    return (orig - recon).pow(2).mean(dim=(-2, -1))


def _cholesky(gram: torch.Tensor) -> torch.Tensor:
    chol, info = torch.linalg.cholesky_ex(gram)
    if (info != 0).any():
        raise SingularityError("reconstruction system is not positive definite")
    # near-zero pivots: numerically singular even though the factorisation ran
    diag = torch.diagonal(chol, dim1=-2, dim2=-1).pow(2)
    scale = torch.diagonal(gram, dim1=-2, dim2=-1).amax(dim=-1, keepdim=True).clamp_min(1e-300)
    if (diag <= gram.shape[-1] * torch.finfo(gram.dtype).eps * scale).any():
        raise SingularityError("reconstruction system is numerically singular")
    return chol


def _solve_weights(target: torch.Tensor, basis: torch.Tensor, lam) -> torch.Tensor:
    """``W = T B^T (B B^T + lam I)^-1`` via Cholesky; batch dims broadcast."""
    n = basis.shape[-2]
    eye = torch.eye(n, dtype=basis.dtype)
    gram = basis @ basis.transpose(-1, -2) + lam * eye
    chol = _cholesky(gram)
    rhs = target @ basis.transpose(-1, -2)  # ... x t x n
    return torch.cholesky_solve(rhs.transpose(-1, -2), chol).transpose(-1, -2)


def ridge_reconstruct(target: torch.Tensor, basis: torch.Tensor, lam: float) -> ReconResult:
    if target.shape[-1] != basis.shape[-1]:
        raise DimensionError("target and basis must share the feature dimension")
    lam_t = torch.as_tensor(lam, dtype=basis.dtype)
    if lam_t.min() < 0:
        raise ValueError("lambda must be non-negative")
    weights = _solve_weights(target, basis, lam_t)
    recon = weights @ basis
    return ReconResult(recon, weights, euclidean_recon_distance(target, recon))


def _ridge_lambda(n_basis: int, d: int, alpha: torch.Tensor) -> torch.Tensor:
    return (n_basis / d) * torch.exp(alpha)


def query_from_support_residuals(queries: torch.Tensor, supports: torch.Tensor, alpha) -> torch.Tensor:
    """Residual of rebuilding each query pool from each class pool.

    ``queries``: N x r x d, ``supports``: C x n x d -> N x C.
    """
    n_q, r, d = queries.shape
    n_basis = supports.shape[1]
    lam = _ridge_lambda(n_basis, d, torch.as_tensor(alpha, dtype=supports.dtype))
    flat = queries.reshape(1, n_q * r, d)
    recon = _solve_weights(flat, supports, lam) @ supports  # C x (N r) x d
    err = (flat - recon).pow(2).reshape(-1, n_q, r * d).mean(dim=-1)
    return err.transpose(0, 1)


def support_from_query_residuals(queries: torch.Tensor, supports: torch.Tensor, alpha) -> torch.Tensor:
    """Residual of rebuilding each class pool from each query pool; N x C."""
    n_q, r, d = queries.shape
    n_cls, n_rows, _ = supports.shape
    lam = _ridge_lambda(r, d, torch.as_tensor(alpha, dtype=supports.dtype))
    flat = supports.reshape(1, n_cls * n_rows, d)
    recon = _solve_weights(flat, queries, lam) @ queries  # N x (C n) x d
    return (flat - recon).pow(2).reshape(n_q, n_cls, n_rows * d).mean(dim=-1)


def bifrn_mutual_reconstruct(queries, supports, alpha) -> tuple[torch.Tensor, torch.Tensor]:
    return (query_from_support_residuals(queries, supports, alpha),
            support_from_query_residuals(queries, supports, alpha))


def frn_logits(queries, supports, alpha, beta) -> torch.Tensor:
    return -torch.exp(torch.as_tensor(beta, dtype=queries.dtype)) * query_from_support_residuals(queries, supports, alpha)


def bifrn_logits(queries, supports, alpha, beta, weights) -> torch.Tensor:
    """``weights`` is the normalised ``(w_qs, w_sq)`` pair."""
    w = torch.as_tensor(weights, dtype=queries.dtype)
    d_qs, d_sq = bifrn_mutual_reconstruct(queries, supports, alpha)
    dist = w[0] * d_qs + w[1] * d_sq
    return -torch.exp(torch.as_tensor(beta, dtype=queries.dtype)) * dist


class ReconstructionHead(nn.Module):
    """Learnable ridge penalty, temperature and (for ``bifrn``) mixture weights."""

    def __init__(self, kind: str = "frn", d: int = 64, l2_normalize: bool = True):
        super().__init__()
        if kind not in ("frn", "bifrn"):
            raise ValueError(f"unknown head {kind!r}")
        self.kind = kind
        self.l2_normalize = l2_normalize
        self.alpha = nn.Parameter(torch.zeros((), dtype=nx.DTYPE))
        # unit-norm rows keep residuals below 1/d; start the temperature near 10 d
        self.beta = nn.Parameter(torch.tensor(math.log(10.0 * d), dtype=nx.DTYPE))
        if kind == "bifrn":
            self.mix = nn.Parameter(torch.zeros(2, dtype=nx.DTYPE))

    def mixture(self) -> torch.Tensor:
        return torch.softmax(self.mix, dim=0)

    def prepare(self, pools: torch.Tensor) -> torch.Tensor:
        return F.normalize(pools, dim=-1, eps=1e-12) if self.l2_normalize else pools

    def forward(self, query_pools: torch.Tensor, support_pools: torch.Tensor) -> torch.Tensor:
        q, s = self.prepare(query_pools), self.prepare(support_pools)
        if self.kind == "frn":
            return frn_logits(q, s, self.alpha, self.beta)
        return bifrn_logits(q, s, self.alpha, self.beta, self.mixture())
