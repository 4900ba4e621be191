"""Episodic training and evaluation."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .. import numerics as nx
from ..errors import SingularityError, TrainingDivergenceError
from ..model import FewShotModel, ModelConfig
from .manifest import DatasetManifest, ImageStore
from .sampling import EpisodeSpec, episode_tensors, sample_episode

log = logging.getLogger(__name__)

LogitFn = Callable[[torch.Tensor, torch.Tensor, torch.Tensor, int], torch.Tensor]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    episodes_per_epoch: int = 20
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    decay_every: int = 10
    train_way: int = 5
    train_shot: int = 5
    train_query: int = 5
    val_every: int = 5
    val_tasks: int = 50
    val_query: int = 15
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.episodes_per_epoch < 1 or self.decay_every < 1 or self.val_every < 1:
            raise ValueError("epoch counts must be positive")
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("optimizer hyperparameters must be non-negative")


@dataclass
class EvalReport:
    n_tasks: int
    mean: float
    ci95: float
    accuracies: list[float] = field(default_factory=list)

    @classmethod
    def from_accuracies(cls, accuracies) -> "EvalReport":
        acc = np.asarray(accuracies, dtype=np.float64)
        n = len(acc)
        ci = 1.96 * acc.std(ddof=1) / math.sqrt(n) if n > 1 else 0.0
        return cls(n, float(acc.mean()), float(ci), [float(a) for a in acc])

    def to_text(self) -> str:
        return f"n_tasks={self.n_tasks}\nmean={self.mean:.17g}\nci95={self.ci95:.17g}\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        return cls(int(kv["n_tasks"]), float(kv["mean"]), float(kv["ci95"]))

    def write(self, path: str | Path, trace_path: str | Path | None = None) -> None:
        Path(path).write_text(self.to_text())
        if trace_path is not None:
            Path(trace_path).write_text("".join(f"{i}\t{a:.17g}\n" for i, a in enumerate(self.accuracies)))


@dataclass
class TrainResult:
    model: FewShotModel
    trace: list[tuple[int, int, float]]
    val_history: list[tuple[int, float]]
    best_epoch: int


class DivergenceError(TrainingDivergenceError):
    """Carries the last finite model state so callers can keep it."""

    def __init__(self, msg: str, last_good: dict[str, torch.Tensor], trace):
        super().__init__(msg)
        self.last_good = last_good
        self.trace = trace


def format_trace(trace) -> str:
    return "".join(f"{epoch}\t{episode}\t{loss:.9g}\n" for epoch, episode, loss in trace)


def model_logit_fn(model: FewShotModel) -> LogitFn:
    def fn(support, support_labels, query, way):
        with torch.no_grad():
            return model(support, support_labels, query, way)
    return fn


def evaluate_logits(logit_fn: LogitFn, store: ImageStore, spec: EpisodeSpec, n_tasks: int,
                    seed: int, workers: int = 1) -> EvalReport:
    """Accuracy over ``n_tasks`` episodes; task ``i`` draws from ``make_rng(seed, i)``."""

    def run(i: int) -> float:
        rng = nx.make_rng(seed, i)
        episode = sample_episode(store, spec, rng)
        support, s_lab, query, q_lab = episode_tensors(store, episode, None, "eval")
        logits = logit_fn(support, s_lab, query, spec.way)
        return float((logits.argmax(dim=1) == q_lab).double().mean())

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            accs = list(pool.map(run, range(n_tasks)))
    else:
        accs = [run(i) for i in range(n_tasks)]
    return EvalReport.from_accuracies(accs)


def evaluate_model(model: FewShotModel, store: ImageStore, spec: EpisodeSpec, n_tasks: int,
                   seed: int, workers: int = 1) -> EvalReport:
    was_training = model.training
    model.eval()
    try:
        return evaluate_logits(model_logit_fn(model), store, spec, n_tasks, seed, workers)
    finally:
        model.train(was_training)


def evaluate(checkpoint: str | Path, model_cfg: ModelConfig, manifest: DatasetManifest,
             spec: EpisodeSpec, n_tasks: int, seed: int, workers: int = 1,
             split: str = "test") -> EvalReport:
    nx.configure_determinism()
    model = FewShotModel.load(checkpoint, model_cfg)
    store = ImageStore(manifest, split, model_cfg.image_size)
    return evaluate_model(model, store, spec, n_tasks, seed, workers)


def _snapshot(model: FewShotModel) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def train(model_cfg: ModelConfig, cfg: TrainConfig, manifest: DatasetManifest,
          out_dir: str | Path | None = None) -> TrainResult:
    """Episodic cross-entropy training with validation-based model selection.

    When ``out_dir`` is given, ``checkpoint.lfs`` and ``trace.tsv`` are written there.
    """
    nx.configure_determinism()
    model = FewShotModel(model_cfg, seed=cfg.seed)
    train_store = ImageStore(manifest, "train", model_cfg.image_size)
    val_store = ImageStore(manifest, "val", model_cfg.image_size)
    model.set_normalization(*train_store.channel_stats())

    spec = EpisodeSpec(cfg.train_way, cfg.train_shot, cfg.train_query)
    val_spec = EpisodeSpec(min(5, len(val_store.class_ids)), cfg.train_shot, cfg.val_query)
    opt = nx.NesterovSGD(model.named_parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    rng = nx.make_rng(cfg.seed, 2)

    trace: list[tuple[int, int, float]] = []
    val_history: list[tuple[int, float]] = []
    best_acc, best_epoch, best_state = -1.0, -1, _snapshot(model)
    last_good = _snapshot(model)

    model.train()
    for epoch in range(cfg.epochs):
        lr = cfg.lr * 0.1 ** (epoch // cfg.decay_every)
        for i in range(cfg.episodes_per_epoch):
            episode = sample_episode(train_store, spec, rng)
            support, s_lab, query, q_lab = episode_tensors(train_store, episode, rng, "train")
            try:
                logits = model(support, s_lab, query, spec.way)
                loss = F.cross_entropy(logits, q_lab)
                if not torch.isfinite(loss):
                    raise TrainingDivergenceError("non-finite loss")
                loss.backward()
                nx.sgd_nesterov_step(opt, lr)
            except (TrainingDivergenceError, FloatingPointError, SingularityError) as exc:
                raise DivergenceError(f"diverged at epoch {epoch} episode {i}: {exc}", last_good, trace) from exc
            trace.append((epoch, i, float(loss.item())))
        last_good = _snapshot(model)
        log.info("epoch %d lr %.4g mean loss %.4f", epoch, lr,
                 np.mean([t[2] for t in trace[-cfg.episodes_per_epoch:]]))

        if (epoch + 1) % cfg.val_every == 0 or epoch == cfg.epochs - 1:
            report = evaluate_model(model, val_store, val_spec, cfg.val_tasks, seed=cfg.seed + 1)
            val_history.append((epoch, report.mean))
            log.info("epoch %d val acc %.4f +- %.4f", epoch, report.mean, report.ci95)
            if report.mean > best_acc:
                best_acc, best_epoch, best_state = report.mean, epoch, _snapshot(model)

    model.load_state_dict(best_state)
    model.eval()
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        model.save(out / "checkpoint.lfs")
        (out / "trace.tsv").write_text(format_trace(trace))
    return TrainResult(model, trace, val_history, best_epoch)
