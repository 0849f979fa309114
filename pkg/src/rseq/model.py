from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Iterator

import numpy as np

from rseq import numerics as nx
from rseq.data import Batch
from rseq.errors import ConfigError, DataError
from rseq.layers import CELL_GATES, init_layer, layer_forward
from rseq.numerics import Rng, Tensor

TASK_KINDS = ("next_step", "seq_classify")


@dataclass
class ModelConfig:
    num_layers: int = 2
    d_model: int = 64
    num_heads: int = 4
    d_ff: int = 128
    window: int = 7
    cell_kind: str = "gru"
    vocab_size: int = 0
    input_dim: int = 0
    task_kind: str = "next_step"
    num_classes: int = 0
    dropout_rate: float = 0.0
    tie_embeddings: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("num_layers", "d_model", "num_heads", "d_ff", "window"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.num_heads:
            raise ConfigError(f"num_heads={self.num_heads} must divide d_model={self.d_model}")
        if self.cell_kind not in CELL_GATES:
            raise ConfigError(f"cell_kind must be one of {sorted(CELL_GATES)}, got {self.cell_kind!r}")
        if self.task_kind not in TASK_KINDS:
            raise ConfigError(f"task_kind must be one of {TASK_KINDS}, got {self.task_kind!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if (self.vocab_size > 0) == (self.input_dim > 0):
            raise ConfigError("exactly one of vocab_size (token input) or input_dim (real input) must be set")
        if self.task_kind == "next_step" and self.vocab_size < 1:
            raise ConfigError("next_step prediction needs a token vocabulary (vocab_size)")
        if self.task_kind == "seq_classify" and self.num_classes < 1:
            raise ConfigError("seq_classify needs num_classes >= 1")
        if self.tie_embeddings and (self.task_kind != "next_step" or self.vocab_size < 1):
            raise ConfigError("tie_embeddings only applies to next_step token models")

    @property
    def output_size(self) -> int:
        return self.vocab_size if self.task_kind == "next_step" else self.num_classes

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class RTransformerModel:
    """Embedding (or input projection), a stack of identical layers, and a linear head."""

    def __init__(self, config: ModelConfig, rng: Rng):
        self.config = config
        d = config.d_model
        if config.vocab_size:
            a = 1.0 / math.sqrt(config.vocab_size)
            self.embedding = nx.parameter(rng.uniform(-a, a, (config.vocab_size, d)))
            self.w_in = self.b_in = None
        else:
            a = 1.0 / math.sqrt(config.input_dim)
            self.embedding = None
            self.w_in = nx.parameter(rng.uniform(-a, a, (config.input_dim, d)))
            self.b_in = nx.zeros(d, requires_grad=True)
        self.layers = [init_layer(rng, d, config.num_heads, config.d_ff, config.window, config.cell_kind)
                       for _ in range(config.num_layers)]
        self.w_out = None if config.tie_embeddings else nx.parameter(
            rng.uniform(-1.0 / math.sqrt(d), 1.0 / math.sqrt(d), (d, config.output_size)))
        self.b_out = nx.zeros(config.output_size, requires_grad=True)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        if self.embedding is not None:
            yield "embedding", self.embedding
        else:
            yield "input.w", self.w_in
            yield "input.b", self.b_in
        for i, layer in enumerate(self.layers):
            for name, t in layer.named_parameters():
                yield f"layers.{i}.{name}", t
        if self.w_out is not None:
            yield "head.w", self.w_out
        yield "head.b", self.b_out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def __call__(self, inputs, training: bool = False, rng: Rng | None = None) -> Tensor:
        cfg = self.config
        if cfg.vocab_size:
            ids = np.asarray(inputs)
            if ids.dtype.kind not in "iu":
                raise DataError(f"token inputs must be integers, got dtype {ids.dtype}")
            bad = np.argwhere((ids < 0) | (ids >= cfg.vocab_size))
            if bad.size:
                pos = tuple(int(i) for i in bad[0])
                raise DataError(f"token id {int(ids[pos])} at index {pos} is outside vocab of size "
                                f"{cfg.vocab_size}")
            x = nx.embedding(self.embedding, ids)
        else:
            feats = nx.as_tensor(np.asarray(inputs, dtype=nx.get_default_dtype()))
            if feats.shape[-1] != cfg.input_dim:
                raise DataError(f"feature width {feats.shape[-1]} != input_dim {cfg.input_dim}")
            x = nx.matmul(feats, self.w_in) + self.b_in
        for layer in self.layers:
            x = layer_forward(layer, x, cfg.dropout_rate, training, rng)
        if cfg.task_kind == "seq_classify":
            x = x[..., -1, :]
        w_out = self.embedding.T if cfg.tie_embeddings else self.w_out
        return nx.matmul(x, w_out) + self.b_out


def build_model(config: ModelConfig, seed: int = 0) -> RTransformerModel:
    return RTransformerModel(config, Rng(seed))


def model_forward(m: RTransformerModel, batch: Batch, training: bool = False,
                  rng: Rng | None = None) -> Tensor:
    """Logits ``[B, T, vocab]`` for next_step batches, ``[B, num_classes]`` for seq_classify."""
    if batch.task_kind != m.config.task_kind:
        raise DataError(f"batch task {batch.task_kind!r} does not match model task {m.config.task_kind!r}")
    return m(batch.inputs, training=training, rng=rng)


def cross_entropy_loss(logits: Tensor, targets, ignore_index: int = -1) -> Tensor:
    targets = np.asarray(targets)
    n_cls = logits.shape[-1]
    live = targets[targets != ignore_index]
    if live.size and (live.min() < 0 or live.max() >= n_cls):
        raise DataError(f"target ids must lie in [0, {n_cls}), found range [{live.min()}, {live.max()}]")
    return nx.cross_entropy(logits, targets, ignore_index)


def perplexity(mean_nll_nats: float) -> float:
    return math.exp(mean_nll_nats)


def bits_per_char(mean_nll_nats: float) -> float:
    return mean_nll_nats / math.log(2.0)


def accuracy(logits, targets, ignore_index: int = -1) -> float:
    """Fraction of argmax hits; np.argmax already breaks ties toward the lowest index."""
    scores = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    targets = np.asarray(targets)
    keep = targets != ignore_index
    if not keep.any():
        return 0.0
    pred = np.argmax(scores, axis=-1)
    return float(np.mean(pred[keep] == targets[keep]))


def param_count(m) -> int:
    """Total learnable scalars of a model, a LayerParams, or a name -> Tensor mapping."""
    if isinstance(m, dict):
        tensors = m.values()
    elif isinstance(m, (list, tuple)):
        tensors = m
    else:
        tensors = (t for _, t in m.named_parameters())
    return sum(int(t.size) for t in tensors)

