"""Dataset ingestion and synthetic task generation.

Text corpora live in a directory holding ``train.txt``, ``valid.txt`` and
``test.txt``. Pixel data uses a small raw little-endian format::

    images: u64 count, u64 height, u64 width, then count*height*width u8 pixels (row-major)
    labels: u64 count, then count u8 labels
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from rseq.errors import DataError, IngestionError
from rseq.numerics import Rng

PAD_ID = 0
UNK_ID = 1
RESERVED = ("<pad>", "<unk>")
SPLITS = ("train", "valid", "test")

COPY_BLANK = 0
COPY_TRIGGER = 1
IGNORE = -1


@dataclass
class Batch:
    inputs: np.ndarray
    targets: np.ndarray
    task_kind: str

    def __post_init__(self):
        B = self.inputs.shape[0]
        if self.task_kind == "next_step":
            if self.targets.shape != self.inputs.shape[:2]:
                raise DataError(f"next_step targets {self.targets.shape} must match inputs "
                                f"{self.inputs.shape[:2]}")
        elif self.task_kind == "seq_classify":
            if self.targets.shape != (B,):
                raise DataError(f"seq_classify targets must have shape ({B},), got {self.targets.shape}")
        else:
            raise DataError(f"unknown task kind {self.task_kind!r}")

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


class Vocab:
    """Symbol/id bijection; ids 0 and 1 are reserved for padding and unknown symbols."""

    def __init__(self, symbols):
        self.itos = list(RESERVED) + sorted(set(symbols) - set(RESERVED))
        self.stoi = {s: i for i, s in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def size(self) -> int:
        return len(self.itos)

    def encode(self, symbols) -> np.ndarray:
        return np.fromiter((self.stoi.get(s, UNK_ID) for s in symbols), dtype=np.int64)

    def decode(self, ids) -> list[str]:
        return [self.itos[int(i)] for i in ids]


def _tokenize(text: str, level: str) -> list[str]:
    if level == "char":
        return list(text)
    if level == "word":
        return text.split()
    raise ValueError(f"level must be 'char' or 'word', got {level!r}")


def load_text_corpus(path, level: str = "char") -> tuple[Vocab, dict[str, np.ndarray]]:
    """Build a vocabulary from ``train.txt`` and encode every split present under ``path``."""
    root = Path(path)
    streams: dict[str, np.ndarray] = {}
    tokens: dict[str, list[str]] = {}
    for split in SPLITS:
        f = root / f"{split}.txt"
        if not f.exists():
            if split == "train":
                raise IngestionError(f"missing training file {f}")
            continue
        try:
            text = f.read_bytes().decode("utf-8")
        except UnicodeDecodeError as exc:
            raise IngestionError(f"{f} is not valid UTF-8: {exc}") from None
        tokens[split] = _tokenize(text, level)
    if not tokens["train"]:
        raise IngestionError(f"training corpus {root / 'train.txt'} is empty")
    vocab = Vocab(tokens["train"])
    for split, toks in tokens.items():
        streams[split] = vocab.encode(toks)
    return vocab, streams


def batchify(stream, batch_size: int, seq_len: int) -> list[Batch]:
    """Cut ``stream`` into ``batch_size`` parallel tracks and step through them ``seq_len`` at a time.

    Targets are the inputs shifted by one; a trailing remainder that cannot
    fill a whole window is dropped.
    """
    stream = np.asarray(stream)
    if batch_size < 1 or seq_len < 1:
        raise DataError("batch_size and seq_len must be positive")
    if len(stream) < batch_size * (seq_len + 1):
        raise DataError(f"stream of {len(stream)} tokens is too short for {batch_size} tracks of "
                        f"{seq_len + 1}")
    track_len = len(stream) // batch_size
    tracks = stream[:track_len * batch_size].reshape(batch_size, track_len)
    n = (track_len - 1) // seq_len
    return [Batch(tracks[:, i * seq_len:(i + 1) * seq_len].copy(),
                  tracks[:, i * seq_len + 1:(i + 1) * seq_len + 1].copy(), "next_step")
            for i in range(n)]


def gen_copy_task(rng: Rng, batch_size: int, num_symbols: int = 8, payload_len: int = 10,
                  blank_len: int = 40) -> Batch:
    """Copy-memory batch.

    Input: payload (ids ``2..num_symbols+1``), ``blank_len`` blanks, a trigger,
    ``payload_len - 1`` blanks. The payload must be emitted starting at the
    trigger position; every other target is ``IGNORE``.
    """
    if num_symbols < 2:
        raise DataError("copy task needs at least 2 payload symbols")
    L, K = payload_len, blank_len
    T = 2 * L + K
    payload = rng.integers(2, num_symbols + 2, (batch_size, L))
    inputs = np.full((batch_size, T), COPY_BLANK, dtype=np.int64)
    inputs[:, :L] = payload
    inputs[:, L + K] = COPY_TRIGGER
    targets = np.full((batch_size, T), IGNORE, dtype=np.int64)
    targets[:, L + K:] = payload
    return Batch(inputs, targets, "next_step")


def copy_vocab_size(num_symbols: int) -> int:
    return num_symbols + 2


# -- pixel sequences ------------------------------------------------------------

def write_pixel_files(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    count, h, w = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack("<QQQ", count, h, w))
        f.write(images.tobytes(order="C"))
    with open(labels_path, "wb") as f:
        f.write(struct.pack("<Q", len(labels)))
        f.write(labels.tobytes())


def load_pixel_sequences(images_path, labels_path=None) -> tuple[np.ndarray, np.ndarray]:
    """Read raw images and labels; returns features ``[N, H*W, 1]`` in [0, 1] and labels ``[N]``.

    ``labels_path`` defaults to the images path with ``images`` replaced by ``labels``.
    """
    images_path = Path(images_path)
    if labels_path is None:
        labels_path = images_path.with_name(images_path.name.replace("images", "labels"))
    raw = Path(images_path).read_bytes()
    if len(raw) < 24:
        raise IngestionError(f"{images_path}: header truncated")
    count, h, w = struct.unpack_from("<QQQ", raw)
    if len(raw) - 24 != count * h * w:
        raise IngestionError(f"{images_path}: header promises {count}x{h}x{w} pixels, "
                             f"file holds {len(raw) - 24}")
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=24).reshape(count, h * w)
    lraw = Path(labels_path).read_bytes()
    if len(lraw) < 8:
        raise IngestionError(f"{labels_path}: header truncated")
    (n_labels,) = struct.unpack_from("<Q", lraw)
    if n_labels != count or len(lraw) - 8 != n_labels:
        raise IngestionError(f"{count} images but {n_labels} labels ({len(lraw) - 8} label bytes)")
    labels = np.frombuffer(lraw, dtype=np.uint8, offset=8).astype(np.int64)
    return (pixels.astype(np.float64) / 255.0)[:, :, None], labels


def pixel_batches(features: np.ndarray, labels: np.ndarray, batch_size: int,
                  rng: Rng | None = None) -> Iterator[Batch]:
    """Yield classification batches, shuffled with ``rng`` when given; a short final batch is kept."""
    order = np.arange(len(labels)) if rng is None else rng.permutation(len(labels))
    for i in range(0, len(order), batch_size):
        idx = order[i:i + batch_size]
        yield Batch(features[idx], labels[idx], "seq_classify")


_DIGIT_GLYPHS = [
    [".####.", "#....#", "#...##", "#.##.#", "##...#", "#....#", ".####."],
    ["..##..", ".###..", "..##..", "..##..", "..##..", "..##..", ".####."],
    [".####.", "#....#", ".....#", "...##.", "..#...", ".#....", "######"],
    [".####.", "#....#", ".....#", "..###.", ".....#", "#....#", ".####."],
    ["...##.", "..#.#.", ".#..#.", "#...#.", "######", "....#.", "....#."],
    ["######", "#.....", "#####.", ".....#", ".....#", "#....#", ".####."],
    ["..###.", ".#....", "#.....", "#####.", "#....#", "#....#", ".####."],
    ["######", ".....#", "....#.", "...#..", "..#...", "..#...", "..#..."],
    [".####.", "#....#", "#....#", ".####.", "#....#", "#....#", ".####."],
    [".####.", "#....#", "#....#", ".#####", ".....#", "....#.", ".###.."],
]


def gen_synthetic_digits(rng: Rng, count: int, noise: float = 0.15) -> tuple[np.ndarray, np.ndarray]:
    """Tiny 8x8 digit images: a 7x6 glyph at a random offset plus pixel noise."""
    glyphs = np.array([[[c == "#" for c in row] for row in g] for g in _DIGIT_GLYPHS], dtype=np.float64)
    labels = rng.integers(0, 10, count)
    images = np.zeros((count, 8, 8))
    dy = rng.integers(0, 2, count)
    dx = rng.integers(0, 3, count)
    for n in range(count):
        images[n, dy[n]:dy[n] + 7, dx[n]:dx[n] + 6] = glyphs[labels[n]]
    images = np.clip(images * 0.85 + rng.uniform(0.0, noise, images.shape), 0.0, 1.0)
    return np.round(images * 255).astype(np.uint8), labels.astype(np.uint8)


def unigram_nll(train_stream: np.ndarray, eval_stream: np.ndarray, vocab_size: int) -> float:
    """Validation NLL (nats) of the add-one-smoothed unigram frequency model fit on train."""
    counts = np.bincount(train_stream, minlength=vocab_size).astype(np.float64) + 1.0
    logp = np.log(counts / counts.sum())
    return float(-logp[eval_stream].mean())
