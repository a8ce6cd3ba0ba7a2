"""Synthetic sequence tasks standing in for speech workloads.

Three generators share one feature space:

* ``frame_content``: every frame carries one vocabulary token (a fixed
  codebook direction) plus noise; the label is the token sequence and the
  natural loss is the alignment-marginalizing sequence loss.
* ``utterance_speaker``: a constant per-sequence offset drawn from a
  fixed speaker codebook is added to all frames; the label is the
  speaker index. The offset is an input-space, frame-constant cue.
* ``utterance_class``: one of C fixed temporal envelopes modulates the
  frame energy; the label is the envelope index. The cue is temporal,
  not frame-local.

Codebooks and envelopes are fixed functions of the feature dimension and
the vocabulary/class count (not of the dataset seed), playing the role
of a stable external world that pretraining and downstream tasks share.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng as rngmod

TASK_KINDS = ("frame_content", "utterance_speaker", "utterance_class")

_CODEBOOK_SEED = 0x5EED  # world constants, independent of dataset seeds


@dataclass(frozen=True)
class SyntheticTaskSpec:
    kind: str
    input_dim: int = 8
    vocab_size: int = 3
    num_classes: int = 4
    min_len: int = 20
    max_len: int = 40
    noise: float = 0.1
    num_train: int = 64
    num_eval: int = 32

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}, expected one of {TASK_KINDS}")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")


@dataclass(frozen=True)
class Example:
    features: np.ndarray  # [T, input_dim] float32
    label: object  # list[int] token sequence, or int class index


@dataclass(frozen=True)
class Dataset:
    spec: SyntheticTaskSpec
    train: tuple[Example, ...]
    eval: tuple[Example, ...]


def token_codebook(input_dim: int, vocab_size: int = 3) -> np.ndarray:
    """Fixed unit-norm token directions, one per vocabulary entry."""
    draw = rngmod.stream(_CODEBOOK_SEED, "tokens", input_dim, vocab_size)
    book = draw.standard_normal((vocab_size, input_dim))
    return book / np.linalg.norm(book, axis=1, keepdims=True)


def speaker_codebook(input_dim: int, num_speakers: int) -> np.ndarray:
    draw = rngmod.stream(_CODEBOOK_SEED, "speakers", input_dim, num_speakers)
    book = draw.standard_normal((num_speakers, input_dim))
    return book / np.linalg.norm(book, axis=1, keepdims=True)


def class_envelopes(num_classes: int, length: int) -> np.ndarray:
    """C fixed slow amplitude profiles over a unit time grid, values ~[0.5, 1.5]."""
    u = np.linspace(0.0, 1.0, length)
    rows = []
    for c in range(num_classes):
        phase = np.pi * c / num_classes
        rows.append(1.0 + 0.5 * np.sin(2.0 * np.pi * (c % 2 + 1) * u + phase))
    return np.stack(rows)


_SPEAKER_OFFSET_SCALE = 0.6


def generate_task(spec: SyntheticTaskSpec, seed: int) -> Dataset:
    """Materialize a dataset; bitwise reproducible from (spec, seed)."""
    draw = rngmod.stream(seed, "task", spec.kind)
    train = tuple(_example(spec, draw, i) for i in range(spec.num_train))
    eval_ = tuple(_example(spec, draw, i) for i in range(spec.num_eval))
    return Dataset(spec=spec, train=train, eval=eval_)


def _example(spec: SyntheticTaskSpec, draw: np.random.Generator, index: int) -> Example:
    steps = int(draw.integers(spec.min_len, spec.max_len + 1))
    if spec.kind == "frame_content":
        return _frame_content_example(spec, draw, steps)
    if spec.kind == "utterance_speaker":
        # round-robin labels guarantee every speaker appears in each split
        label = index % spec.num_classes
        return _speaker_example(spec, draw, steps, label)
    label = index % spec.num_classes
    return _envelope_example(spec, draw, steps, label)


def _frame_content_example(spec, draw, steps):
    book = token_codebook(spec.input_dim, spec.vocab_size)
    tokens: list[int] = []
    frames: list[np.ndarray] = []
    while len(frames) < steps:
        tok = int(draw.integers(0, spec.vocab_size))
        if tokens and tok == tokens[-1]:
            continue  # consecutive tokens kept distinct so runs collapse cleanly
        seg = int(draw.integers(3, 7))
        seg = min(seg, steps - len(frames))
        if seg == 0:
            break
        tokens.append(tok)
        frames.extend(book[tok] for _ in range(seg))
    feats = np.stack(frames) + spec.noise * draw.standard_normal((len(frames), spec.input_dim))
    # labels are 1-based so index 0 stays free for the blank symbol
    return Example(feats.astype(np.float32), [t + 1 for t in tokens])


def _speaker_example(spec, draw, steps, speaker):
    tok_book = token_codebook(spec.input_dim, spec.vocab_size)
    spk_book = speaker_codebook(spec.input_dim, spec.num_classes)
    tokens = draw.integers(0, spec.vocab_size, size=steps)
    feats = tok_book[tokens] + _SPEAKER_OFFSET_SCALE * spk_book[speaker]
    feats = feats + spec.noise * draw.standard_normal((steps, spec.input_dim))
    return Example(feats.astype(np.float32), int(speaker))


def _envelope_example(spec, draw, steps, label):
    tok_book = token_codebook(spec.input_dim, spec.vocab_size)
    tokens = draw.integers(0, spec.vocab_size, size=steps)
    envelope = class_envelopes(spec.num_classes, steps)[label]
    feats = tok_book[tokens] * envelope[:, None]
    feats = feats + spec.noise * draw.standard_normal((steps, spec.input_dim))
    return Example(feats.astype(np.float32), int(label))


def nearest_token_decode(features: np.ndarray, input_dim: int, vocab_size: int) -> list[int]:
    """Per-frame nearest codebook row, runs collapsed; labels 1-based."""
    book = token_codebook(input_dim, vocab_size)
    ids = np.argmin(
        np.linalg.norm(features[:, None, :] - book[None, :, :], axis=2), axis=1
    )
    out: list[int] = []
    for t in ids:
        if not out or out[-1] != t + 1:
            out.append(int(t) + 1)
    return out
