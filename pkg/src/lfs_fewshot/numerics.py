"""Dense tensor primitives, optimizer, gradient checking and checkpoint I/O.

All math runs on CPU torch tensors in float64. Autograd supplies the
reverse-mode rules; the helpers here pin down the exact forms (masking,
tie-breaking, eps values) the rest of the package relies on.
"""
from __future__ import annotations

import math
import struct
import threading
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
import torch.nn.functional as F

from .errors import (
    CheckpointError,
    DegenerateMaskError,
    DimensionError,
    NonFiniteError,
    TrainingDivergenceError,
)

DTYPE = torch.float64
LN_EPS = 1e-5
BN_EPS = 1e-5
# running = BN_RETAIN * running + (1 - BN_RETAIN) * batch
BN_RETAIN = 0.9

CHECKPOINT_MAGIC = b"LFSCKPT1"

Tensor = torch.Tensor


def configure_determinism() -> None:
    """Single-threaded, deterministic CPU kernels."""
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """PCG64 stream keyed by ``(seed, *keys)``; identical on every platform."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, keys)])))


def torch_generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed))


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return t


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() < 1 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {tuple(a.shape)} by {tuple(b.shape)}")
    return torch.matmul(a, b)


def masked_softmax_rows(scores: Tensor, mask: Tensor) -> Tensor:
    """Softmax along the last axis over the entries where ``mask`` is one.

    Masked-out entries are excluded (treated as -inf) and come out exactly 0.
    """
    if scores.shape != mask.shape:
        raise DimensionError(f"mask shape {tuple(mask.shape)} != scores shape {tuple(scores.shape)}")
    keep = mask != 0
    if not keep.any(dim=-1).all():
        raise DegenerateMaskError("mask row with no retained entries")
    return scores.masked_fill(~keep, float("-inf")).softmax(dim=-1)


def argsort_desc_row(v: Tensor) -> Tensor:
    """Descending order; ties keep ascending original index."""
    return torch.sort(torch.as_tensor(v), dim=-1, descending=True, stable=True).indices


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: affine params must have shape ({d},)")
    return F.layer_norm(x, (d,), gain, bias, eps)


def depthwise_separable_conv(
    x: Tensor,
    dw: Tensor,
    pw: Tensor,
    stride: int = 1,
    padding: int | str = "same",
) -> Tensor:
    """Per-channel k x k convolution followed by 1x1 channel mixing.

    ``x`` is ``d x h x w`` or batched ``b x d x h x w``; ``dw`` is ``d x k x k``
    and ``pw`` is ``d_out x d``.
    """
    unbatched = x.dim() == 3
    if unbatched:
        x = x.unsqueeze(0)
    if x.dim() != 4:
        raise DimensionError(f"depthwise_separable_conv: expected 3-d or 4-d input, got {x.dim()}-d")
    d, k = x.shape[1], dw.shape[-1]
    if dw.shape != (d, k, k) or k % 2 == 0:
        raise DimensionError(f"depthwise kernel must be ({d}, k, k) with k odd, got {tuple(dw.shape)}")
    if pw.dim() != 2 or pw.shape[1] != d:
        raise DimensionError(f"pointwise weight must be (d_out, {d}), got {tuple(pw.shape)}")
    pad = (k - 1) // 2 if padding == "same" else int(padding)
    if k > x.shape[2] + 2 * pad or k > x.shape[3] + 2 * pad:
        raise DimensionError("kernel larger than padded input")
    y = F.conv2d(x, dw.unsqueeze(1), stride=stride, padding=pad, groups=d)
    y = F.conv2d(y, pw[:, :, None, None])
    return y.squeeze(0) if unbatched else y


def conv2d(x: Tensor, weight: Tensor, padding: int = 1) -> Tensor:
    if x.dim() != 4 or weight.dim() != 4 or weight.shape[1] != x.shape[1]:
        raise DimensionError(f"conv2d: input {tuple(x.shape)} incompatible with weight {tuple(weight.shape)}")
    k = weight.shape[-1]
    if k > x.shape[2] + 2 * padding or k > x.shape[3] + 2 * padding:
        raise DimensionError("kernel larger than padded input")
    return F.conv2d(x, weight, padding=padding)


def batch_norm(
    x: Tensor,
    gain: Tensor,
    bias: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    training: bool,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalisation of ``b x d x h x w`` input.

    In training mode the running moments are updated in place.
    """
    if x.dim() != 4:
        raise DimensionError("batch_norm expects b x d x h x w input")
    if training and x.shape[0] * x.shape[2] * x.shape[3] < 2:
        raise DimensionError("batch_norm in train mode needs at least 2 values per channel")
    return F.batch_norm(
        x, running_mean, running_var, gain, bias,
        training=training, momentum=1.0 - BN_RETAIN, eps=eps,
    )


# Piecewise operations log which branch each element took while a recorder is
# active, so finite-difference probes can tell when they straddle a kink.
_branches = threading.local()


@contextmanager
def record_branches():
    prev = getattr(_branches, "log", None)
    _branches.log = log = []
    try:
        yield log
    finally:
        _branches.log = prev


def note_branch(pattern: Tensor) -> None:
    log = getattr(_branches, "log", None)
    if log is not None:
        log.append(pattern.detach().clone())


def same_branches(a: list[Tensor], b: list[Tensor]) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and torch.equal(x, y) for x, y in zip(a, b))


def relu(x: Tensor) -> Tensor:
    note_branch(x > 0)
    return torch.relu(x)


def max_pool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    if x.shape[-1] < window or x.shape[-2] < window:
        raise DimensionError("max_pool2d: spatial extent smaller than the window")
    if getattr(_branches, "log", None) is not None:
        out, idx = F.max_pool2d(x, window, stride, return_indices=True)
        note_branch(idx)
        return out
    return F.max_pool2d(x, window, stride)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class NesterovSGD:
    """SGD with Nesterov momentum and L2 weight decay.

    Per step, with ``g`` the gradient plus ``weight_decay * w``::

        buf = momentum * buf + g
        w   = w - lr * (g + momentum * buf)

    Gradients are zeroed after every step.
    """

    def __init__(self, params: Iterable[tuple[str, torch.nn.Parameter]], lr: float,
                 momentum: float = 0.9, weight_decay: float = 5e-4):
        self.params = list(params)
        names = [n for n, _ in self.params]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.momentum_buf = {n: torch.zeros_like(p) for n, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self) -> None:
        for name, p in self.params:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise TrainingDivergenceError(f"non-finite gradient for {name}")
        for name, p in self.params:
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            if self.weight_decay:
                g = g + self.weight_decay * p
            buf = self.momentum_buf[name]
            buf.mul_(self.momentum).add_(g)
            p.sub_(self.lr * (g + self.momentum * buf))
        self.zero_grad()


def sgd_nesterov_step(optimizer: NesterovSGD, lr: float | None = None) -> None:
    if lr is not None:
        optimizer.lr = lr
    optimizer.step()


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def _named(params) -> list[tuple[str, Tensor]]:
    if isinstance(params, Mapping):
        return list(params.items())
    out = []
    for i, p in enumerate(params):
        out.append(p if isinstance(p, tuple) else (f"param{i}", p))
    return out


def grad_check_report(loss_fn: Callable[[], Tensor], params, h: float = 1e-4,
                      max_entries: int | None = None, seed: int = 0,
                      branch_aware: bool = False, refined: dict[str, int] | None = None) -> dict[str, float]:
    """Worst relative error per parameter between autograd and central differences.

    Relative error is ``|a - b| / max(|a|, |b|, 1e-8)``. Tensors larger than
    ``max_entries`` are probed at a seeded random subset of coordinates.

    With ``branch_aware`` a probe whose ``w +- h`` evaluations take a different
    branch of a ReLU, max-pool or selection mask than ``w`` itself is retried
    with ``h / 10`` (down to ``h / 1000``); the central difference is not an
    oracle across a kink. ``refined`` collects how many coordinates needed it.
    """
    rng = make_rng(seed, 0x6c66)
    named = _named(params)
    for _, p in named:
        p.grad = None
    with record_branches() as base:
        loss_fn().backward()
    analytic = {n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)) for n, p in named}
    for _, p in named:
        p.grad = None

    def probe(flat, i, orig, step):
        flat[i] = orig + step
        with record_branches() as plus:
            f_plus = loss_fn().item()
        flat[i] = orig - step
        with record_branches() as minus:
            f_minus = loss_fn().item()
        flat[i] = orig
        smooth = same_branches(plus, base) and same_branches(minus, base)
        return (f_plus - f_minus) / (2 * step), smooth

    report = {}
    with torch.no_grad():
        for name, p in named:
            flat = p.data.view(-1)
            a_flat = analytic[name].view(-1)
            worst = 0.0
            coords = range(flat.numel())
            if max_entries is not None and flat.numel() > max_entries:
                coords = sorted(int(i) for i in rng.choice(flat.numel(), size=max_entries, replace=False))
            for i in coords:
                orig = flat[i].item()
                step = h
                numeric, smooth = probe(flat, i, orig, step)
                while branch_aware and not smooth and step > h * 1e-3 * 1.5:
                    step /= 10
                    numeric, smooth = probe(flat, i, orig, step)
                if refined is not None and step != h:
                    refined[name] = refined.get(name, 0) + 1
                a = a_flat[i].item()
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, err)
            report[name] = worst
    return report


def grad_check(loss_fn: Callable[[], Tensor], params, h: float = 1e-4,
               max_entries: int | None = None, seed: int = 0, branch_aware: bool = False) -> float:
    return max(grad_check_report(loss_fn, params, h, max_entries, seed, branch_aware).values(), default=0.0)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: str | Path, tensors: Mapping[str, Tensor]) -> None:
    chunks = [CHECKPOINT_MAGIC]
    for name, t in tensors.items():
        arr = np.asarray(t.detach().cpu().numpy(), dtype="<f8", order="C")
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<Q", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<Q", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> dict[str, Tensor]:
    buf = Path(path).read_bytes()
    if not buf.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: bad magic")
    pos = len(CHECKPOINT_MAGIC)
    out: dict[str, Tensor] = {}

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated record")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    while pos < len(buf):
        (name_len,) = struct.unpack("<Q", take(8))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = math.prod(shape)
        values = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape)
        if name in out:
            raise CheckpointError(f"{path}: duplicate record {name!r}")
        out[name] = torch.from_numpy(values.astype(np.float64))
    return out
