"""Optimisation loop: gradient clipping, SGD / Adam steps, plateau annealing, epochs."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from rseq import numerics as nx
from rseq.data import Batch
from rseq.errors import ConfigError, NumericFault, UsageError
from rseq.model import RTransformerModel, accuracy, cross_entropy_loss, model_forward
from rseq.numerics import Rng, Tensor

OPTIMIZERS = ("sgd", "adam")
IMPROVEMENT_EPS = 1e-4


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    lr_candidates: list[float] = field(default_factory=list)
    clip_norm: float | None = 0.5
    anneal_factor: float = 0.5
    patience: int = 1
    max_epochs: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.kind!r}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.lr_candidates and not any(math.isclose(self.lr, c) for c in self.lr_candidates):
            raise ConfigError(f"lr={self.lr} is not among lr_candidates {self.lr_candidates}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError(f"clip_norm must be positive or none, got {self.clip_norm}")
        if not 0.0 < self.anneal_factor < 1.0:
            raise ConfigError(f"anneal_factor must lie in (0, 1), got {self.anneal_factor}")
        if self.patience < 1:
            raise ConfigError(f"patience must be positive, got {self.patience}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be positive, got {self.max_epochs}")


@dataclass
class TrainState:
    current_lr: float
    step: int = 0
    epoch: int = 0
    best_val: float = math.inf
    plateau_counter: int = 0
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    rng: Rng = field(default_factory=lambda: Rng(0))

    @classmethod
    def fresh(cls, cfg: OptimizerConfig, seed: int = 0) -> "TrainState":
        return cls(current_lr=cfg.lr, rng=Rng(seed))


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    steps: int
    wall_ms: int
    losses: list[float] = field(default_factory=list)
    accuracy: float = 0.0


def _named(params) -> list[tuple[str, Tensor]]:
    if hasattr(params, "named_parameters"):
        return list(params.named_parameters())
    if isinstance(params, dict):
        return list(params.items())
    return [(str(i), p) for i, p in enumerate(params)]


def global_grad_norm(params) -> float:
    total = 0.0
    for _, p in _named(params):
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return math.sqrt(total)


def clip_gradients(params, clip_norm: float) -> float:
    """Rescale all gradients together when their global L2 norm exceeds ``clip_norm``.

    Returns the norm measured before clipping.
    """
    if clip_norm is None or clip_norm <= 0:
        raise ConfigError(f"clip_norm must be positive, got {clip_norm}")
    norm = global_grad_norm(params)
    if norm > clip_norm:
        scale = clip_norm / norm
        for _, p in _named(params):
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.grad.dtype)
    return norm


def optimizer_step(params, state: TrainState, cfg: OptimizerConfig) -> None:
    """Apply one update with ``state.current_lr`` and zero the gradients.

    Every new value is computed first and committed only if all are finite, so
    a diverging step leaves the parameters untouched.
    """
    named = _named(params)
    if any(p.grad is None for _, p in named):
        missing = [n for n, p in named if p.grad is None]
        raise UsageError(f"optimizer_step called without gradients for {missing[:5]}")
    lr = state.current_lr
    t = state.step + 1
    updates = []
    for name, p in named:
        g = p.grad
        if cfg.kind == "sgd":
            new = p.data - lr * g
            updates.append((p, new, None))
        else:
            m, v = state.moments.get(name, (np.zeros_like(p.data), np.zeros_like(p.data)))
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
            m_hat = m / (1.0 - cfg.beta1 ** t)
            v_hat = v / (1.0 - cfg.beta2 ** t)
            new = p.data - lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
            updates.append((p, new, (name, m, v)))
    for p, new, _ in updates:
        if not np.all(np.isfinite(new)):
            raise NumericFault("optimizer_step")
    for p, new, mom in updates:
        p.data = new.astype(p.data.dtype, copy=False)
        p.grad = None
        if mom is not None:
            state.moments[mom[0]] = (mom[1], mom[2])
    state.step = t


def lr_on_plateau(state: TrainState, val_metric: float, cfg: OptimizerConfig) -> float:
    """Lower is better. After ``patience`` evaluations without improvement, anneal the LR."""
    if val_metric < state.best_val - IMPROVEMENT_EPS:
        state.best_val = val_metric
        state.plateau_counter = 0
    else:
        state.plateau_counter += 1
        if state.plateau_counter >= cfg.patience:
            state.current_lr *= cfg.anneal_factor
            state.plateau_counter = 0
    return state.current_lr


def train_step(model: RTransformerModel, batch: Batch, state: TrainState,
               cfg: OptimizerConfig) -> tuple[float, float]:
    """One update; returns the batch loss and argmax accuracy measured before the step."""
    try:
        logits = model_forward(model, batch, training=True, rng=state.rng)
        loss = cross_entropy_loss(logits, batch.targets)
        nx.backward(loss)
    except NumericFault:
        nx.clear_tape()
        for p in model.parameters():
            p.grad = None
        raise
    if cfg.clip_norm is not None:
        clip_gradients(model, cfg.clip_norm)
    optimizer_step(model, state, cfg)
    return loss.item(), accuracy(logits, batch.targets)


def train_epoch(model: RTransformerModel, batches: Iterable[Batch], state: TrainState,
                cfg: OptimizerConfig, on_step: Callable[[int, float], None] | None = None) -> EpochMetrics:
    """forward -> loss -> backward -> clip -> step over every batch.

    A numeric fault propagates out of the epoch; parameters stay at the last
    good step because faulty updates are never committed.
    """
    start = time.perf_counter()
    losses, accs = [], []
    for batch in batches:
        loss, acc = train_step(model, batch, state, cfg)
        losses.append(loss)
        accs.append(acc)
        if on_step is not None:
            on_step(state.step, loss)
    state.epoch += 1
    wall_ms = int(round((time.perf_counter() - start) * 1000))
    if not losses:
        raise UsageError("train_epoch received no batches")
    return EpochMetrics(state.epoch, float(np.mean(losses)), len(losses), wall_ms, losses,
                        float(np.mean(accs)))


def evaluate(model: RTransformerModel, batches: Iterable[Batch]) -> tuple[float, float]:
    """Token-weighted mean loss and argmax accuracy over ``batches`` (no dropout, no tape)."""
    total_loss = 0.0
    total_hits = 0.0
    count = 0
    with nx.no_grad():
        for batch in batches:
            logits = model_forward(model, batch, training=False)
            n = int(np.sum(np.asarray(batch.targets) != -1))
            total_loss += cross_entropy_loss(logits, batch.targets).item() * n
            total_hits += accuracy(logits, batch.targets) * n
            count += n
    if count == 0:
        raise UsageError("evaluate() needs at least one target")
    return total_loss / count, total_hits / count


def format_metrics(step: int, epoch: int, split: str, loss: float, metric: float, lr: float,
                   wall_ms: int) -> str:
    return (f"step={step} epoch={epoch} split={split} loss={loss:.10g} metric={metric:.10g} "
            f"lr={lr:.10g} wall_ms={wall_ms}")


def parse_metrics_line(line: str) -> dict:
    out = {}
    for part in line.split():
        key, value = part.split("=", 1)
        out[key] = value if key == "split" else (int(value) if key in ("step", "epoch", "wall_ms")
                                                  else float(value))
    return out
