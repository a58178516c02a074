"""Training loop: seeded batches, augmentation, combined loss, AdamW + cosine."""

from __future__ import annotations

import contextlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from threadpoolctl import threadpool_limits

from .data import PairedDataset, augment, make_pyramid
from .errors import ConfigError, ContractError, TrainingError
from .grid import GridFormer
from .losses import FeatureExtractor, LossConfig, LossReport, combined_loss
from .optim import OptimizerState, adamw_step, cosine_lr
from .serialization import checkpoint_save
from .tensor import Tape, Tensor, backward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr_start: float = 3e-4
    lr_end: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    total_steps: int = 1000
    batch_size: int = 1
    patch_size: int = 64
    seed: int = 0
    deterministic: bool = True
    grad_clip: float = 0.0
    checkpoint_every: int = 0
    log_every: int = 50

    def __post_init__(self) -> None:
        if self.lr_end > self.lr_start:
            raise ConfigError("lr_end must not exceed lr_start")
        if self.total_steps < 1 or self.batch_size < 1:
            raise ConfigError("total_steps and batch_size must be positive")


@dataclass
class TraceRow:
    step: int
    charbonnier: float
    perceptual: float
    loss: float
    lr: float

    def csv(self) -> str:
        return f"{self.step},{self.charbonnier!r},{self.perceptual!r},{self.loss!r},{self.lr!r}"


TRACE_HEADER = "step,l_char,l_per,l,lr"


@dataclass
class TrainResult:
    trace: list[TraceRow] = field(default_factory=list)
    state: OptimizerState = field(default_factory=OptimizerState)

    def write_trace(self, path: str | Path) -> None:
        Path(path).write_text("\n".join([TRACE_HEADER] + [r.csv() for r in self.trace]) + "\n")


class BatchSampler:
    """Dataset order shuffled by a seeded permutation per epoch."""

    def __init__(self, n: int, seed: int):
        self.n, self.seed = n, seed
        self.epoch, self.pos = 0, 0
        self.order = self._perm()

    def _perm(self) -> np.ndarray:
        return np.random.default_rng([self.seed, 7, self.epoch]).permutation(self.n)

    def take(self, k: int) -> list[int]:
        out = []
        for _ in range(k):
            if self.pos == self.n:
                self.epoch += 1
                self.pos = 0
                self.order = self._perm()
            out.append(int(self.order[self.pos]))
            self.pos += 1
        return out


def make_batch(ds: PairedDataset, indices: list[int], step: int, cfg: TrainConfig, dtype):
    deg, cln = [], []
    for slot, i in enumerate(indices):
        rng = np.random.default_rng([cfg.seed, 11, step, slot])
        patch = cfg.patch_size if cfg.patch_size and cfg.patch_size < min(ds.clean[i].shape[-2:]) else None
        d, c = augment(ds.degraded[i], ds.clean[i], rng, patch)
        deg.append(d)
        cln.append(c)
    return np.stack(deg).astype(dtype), np.stack(cln).astype(dtype)


def clip_gradients(params, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params))
    if norm > max_norm > 0:
        factor = max_norm / norm
        for p in params:
            p.grad = p.grad * p.grad.dtype.type(factor)
    return norm


def train_step(model, extractor, degraded: np.ndarray, clean: np.ndarray, loss_cfg: LossConfig) -> LossReport:
    """Forward + backward on one batch; leaves gradients on the parameters."""
    rows = model.config.rows
    x = [Tensor(a) for a in make_pyramid(degraded, rows)]
    y = [Tensor(a) for a in make_pyramid(clean, rows)]
    model.zero_grad()
    with Tape():
        out = model(x)
        loss, report = combined_loss(out, y, loss_cfg, extractor)
    backward(loss, model.parameters())
    return report


def train_loop(
    model: GridFormer,
    dataset: PairedDataset,
    cfg: TrainConfig,
    loss_cfg: LossConfig | None = None,
    out_dir: str | Path | None = None,
    callback: Callable[[int, TraceRow], bool | None] | None = None,
) -> TrainResult:
    """Run ``cfg.total_steps`` optimizer steps (fewer if ``callback`` returns True).

    The learning-rate schedule always spans ``cfg.total_steps``.  With
    ``out_dir`` set, writes ``final.gfck``, ``trace.csv`` and periodic
    ``stepNNNNNN.gfck`` checkpoints there.
    """
    if len(dataset) == 0:
        raise ContractError("training dataset is empty")
    loss_cfg = loss_cfg or LossConfig()
    dtype = model.config.np_dtype
    extractor = FeatureExtractor(seed=loss_cfg.extractor_seed, dtype=dtype) if loss_cfg.alpha > 0 else None
    sampler = BatchSampler(len(dataset), cfg.seed)
    params = model.parameters()
    result = TrainResult()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    limits = threadpool_limits(1) if cfg.deterministic else contextlib.nullcontext()
    with limits:
        for step in range(cfg.total_steps):
            lr = cosine_lr(step, cfg.total_steps, cfg.lr_start, cfg.lr_end)
            deg, cln = make_batch(dataset, sampler.take(cfg.batch_size), step, cfg, dtype)
            report = train_step(model, extractor, deg, cln, loss_cfg)
            if not math.isfinite(report.total):
                raise TrainingError(f"non-finite loss {report.total} at step {step}")
            if cfg.grad_clip > 0:
                clip_gradients(params, cfg.grad_clip)
            adamw_step(params, result.state, lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
            row = TraceRow(step, report.charbonnier, report.perceptual, report.total, lr)
            result.trace.append(row)
            stop = callback is not None and bool(callback(step, row))
            if cfg.log_every and step % cfg.log_every == 0:
                log.info("step %d loss %.6g char %.6g per %.6g lr %.3g", step, row.loss, row.charbonnier, row.perceptual, lr)
            if out is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                checkpoint_save(model, out / f"step{step + 1:06d}.gfck")
            if stop:
                break
    if out is not None:
        checkpoint_save(model, out / "final.gfck")
        result.write_trace(out / "trace.csv")
    return result
