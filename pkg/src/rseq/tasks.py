"""Bind a RunConfig to concrete data: model shape, batch streams, and the reported metric."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from rseq import data as D
from rseq.config import RunConfig, resolve_data_dir
from rseq.errors import ConfigError, IngestionError
from rseq.model import ModelConfig, bits_per_char, perplexity
from rseq.numerics import Rng

EVAL_TRACKS = 4
_VAL_KEY = 1_000_003
_TEST_KEY = 1_000_033


@dataclass
class Task:
    name: str
    model_config: ModelConfig
    metric_name: str
    train_batches: Callable[[int], Iterable[D.Batch]]  # epoch number (1-based) -> batches
    eval_batches: dict[str, list[D.Batch]]
    info: dict

    def metric(self, loss: float, acc: float) -> float:
        if self.metric_name == "bpc":
            return bits_per_char(loss)
        if self.metric_name == "perplexity":
            return perplexity(loss) if loss < 700 else math.inf
        return acc


def _model_config(cfg: RunConfig, **task_fields) -> ModelConfig:
    return ModelConfig(num_layers=cfg.num_layers, d_model=cfg.d_model, num_heads=cfg.num_heads,
                       d_ff=cfg.d_ff, window=cfg.window, cell_kind=cfg.cell_kind,
                       dropout_rate=cfg.dropout, tie_embeddings=cfg.tie_embeddings, **task_fields)


def _text_task(cfg: RunConfig, level: str) -> Task:
    vocab, streams = D.load_text_corpus(resolve_data_dir(cfg.data_dir), level)
    train = D.batchify(streams["train"], cfg.batch_size, cfg.seq_len)
    evals = {}
    for split in ("valid", "test"):
        if split in streams:
            tracks = min(EVAL_TRACKS, max(1, len(streams[split]) // (cfg.seq_len + 1)))
            evals[split] = D.batchify(streams[split], tracks, cfg.seq_len)
    if "valid" not in evals:
        raise IngestionError(f"{cfg.data_dir} has no valid.txt")
    per_epoch = cfg.steps_per_epoch or len(train)
    data_rng = Rng(cfg.seed)

    def batches(epoch: int):
        order = data_rng.spawn(epoch).permutation(len(train))
        return [train[i] for i in order[:per_epoch]]

    unigram = D.unigram_nll(streams["train"], streams["valid"], vocab.size)
    mc = _model_config(cfg, vocab_size=vocab.size, task_kind="next_step")
    return Task("charlm" if level == "char" else "wordlm", mc,
                "bpc" if level == "char" else "perplexity", batches, evals,
                {"vocab": vocab, "unigram_valid_nll": unigram, "streams": streams})


def _copy_task(cfg: RunConfig) -> Task:
    data_rng = Rng(cfg.seed)
    gen = lambda rng: D.gen_copy_task(rng, cfg.batch_size, cfg.copy_symbols,  # noqa: E731
                                      cfg.copy_payload, cfg.copy_blank)
    per_epoch = cfg.steps_per_epoch or 250

    def batches(epoch: int):
        rng = data_rng.spawn(epoch)
        return (gen(rng) for _ in range(per_epoch))

    evals = {}
    for split, key in (("valid", _VAL_KEY), ("test", _TEST_KEY)):
        rng = data_rng.spawn(key)
        evals[split] = [gen(rng) for _ in range(cfg.val_batches)]
    mc = _model_config(cfg, vocab_size=D.copy_vocab_size(cfg.copy_symbols), task_kind="next_step")
    return Task("copy", mc, "accuracy", batches, evals, {})


def _pixel_task(cfg: RunConfig) -> Task:
    data_rng = Rng(cfg.seed)
    if cfg.data_dir == "synthetic":
        sets = {}
        for split, n, key in (("train", cfg.synthetic_train, 1), ("valid", cfg.synthetic_test, _VAL_KEY),
                              ("test", cfg.synthetic_test, _TEST_KEY)):
            images, labels = D.gen_synthetic_digits(data_rng.spawn(key), n)
            sets[split] = ((images.reshape(n, -1).astype(np.float64) / 255.0)[:, :, None],
                           labels.astype(np.int64))
    else:
        root = resolve_data_dir(cfg.data_dir)
        sets = {}
        for split in ("train", "valid", "test"):
            f = Path(root) / f"{split}-images.raw"
            if f.exists():
                sets[split] = D.load_pixel_sequences(f)
        if "train" not in sets:
            raise IngestionError(f"{root} has no train-images.raw")
        if "valid" not in sets:
            if "test" not in sets:
                raise IngestionError(f"{root} has neither valid- nor test-images.raw")
            sets["valid"] = sets["test"]
    x_train, y_train = sets["train"]
    per_epoch = cfg.steps_per_epoch

    def batches(epoch: int):
        out = D.pixel_batches(x_train, y_train, cfg.batch_size, data_rng.spawn(epoch))
        return out if not per_epoch else (b for _, b in zip(range(per_epoch), out))

    evals = {split: list(D.pixel_batches(x, y, cfg.batch_size))
             for split, (x, y) in sets.items() if split != "train"}
    mc = _model_config(cfg, input_dim=1, task_kind="seq_classify", num_classes=10)
    return Task("mnist", mc, "accuracy", batches, evals, {})


def build_task(cfg: RunConfig) -> Task:
    if cfg.task == "charlm":
        return _text_task(cfg, "char")
    if cfg.task == "wordlm":
        return _text_task(cfg, "word")
    if cfg.task == "copy":
        return _copy_task(cfg)
    if cfg.task == "mnist":
        return _pixel_task(cfg)
    raise ConfigError(f"task {cfg.task!r} has no data pipeline here (polyphonic music ingestion is not "
                      "supported); its config documents hyperparameters only")
