"""Frozen-by-default transformer encoder exposing every layer's output.

The encoder stands in for a large pretrained speech model at desk scale:
a linear frontend with sinusoidal positions replaces the audio frontend,
and post-LN encoder layers (residual add, then LayerNorm) replace the
full-scale stack. The forward pass keeps and returns all per-layer
outputs so downstream adapters can tap any of them.

Adapters are passed INTO the forward pass per layer rather than stored
here; the backbone itself stays a plain encoder, and with no adapters
attached its output is exactly the plain transformer computation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import rng as rngmod
from .nn import LayerNorm, Linear, Module, param
from .tensor import (
    Tensor,
    add,
    backward,
    concat,
    gelu,
    matmul,
    mul,
    scale,
    softmax,
    sub,
    transpose,
    tsum,
)

CHECKPOINT_VERSION = 1

AdapterFn = Callable[[Tensor], Tensor]


@dataclass(frozen=True)
class BackboneConfig:
    num_layers: int
    d_model: int
    num_heads: int
    d_ffn: int
    input_dim: int
    max_seq_len: int = 512

    def __post_init__(self):
        for field in ("num_layers", "d_model", "num_heads", "d_ffn", "input_dim", "max_seq_len"):
            if getattr(self, field) <= 0:
                raise ValueError(f"{field} must be positive")
        if self.d_model % self.num_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by num_heads {self.num_heads}"
            )


# Trained-experiment scale: gradient checks and multi-seed runs finish in
# seconds. The large preset exists for parameter accounting only.
TOY = BackboneConfig(num_layers=4, d_model=32, num_heads=2, d_ffn=64, input_dim=8,
                     max_seq_len=256)
WAVLM_BASE = BackboneConfig(num_layers=12, d_model=768, num_heads=8, d_ffn=3072,
                            input_dim=512, max_seq_len=1024)

PRESETS = {"toy": TOY, "wavlm-base": WAVLM_BASE}


def sinusoidal_positions(length: int, d_model: int, dtype=np.float32) -> np.ndarray:
    """Classic fixed positional table: sin on even dims, cos on odd dims."""
    pos = np.arange(length)[:, None].astype(np.float64)
    idx = np.arange(d_model)[None, :].astype(np.float64)
    angle = pos / np.power(10000.0, 2.0 * (idx // 2) / d_model)
    table = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(dtype)


class SelfAttention(Module):
    def __init__(self, d_model: int, num_heads: int, rng: np.random.Generator):
        self.wq = Linear(d_model, d_model, rng)
        self.wk = Linear(d_model, d_model, rng)
        self.wv = Linear(d_model, d_model, rng)
        self.wo = Linear(d_model, d_model, rng)
        self.num_heads = num_heads
        self.d_head = d_model // num_heads
        self._score_scale = 1.0 / math.sqrt(self.d_head)

    def __call__(self, x: Tensor) -> Tensor:
        q, k, v = self.wq(x), self.wk(x), self.wv(x)
        heads = []
        for h in range(self.num_heads):
            cols = slice(h * self.d_head, (h + 1) * self.d_head)
            qh, kh, vh = q[:, cols], k[:, cols], v[:, cols]
            scores = scale(matmul(qh, transpose(kh)), self._score_scale)
            heads.append(matmul(softmax(scores, axis=-1), vh))
        return self.wo(concat(heads, axis=1))


class FeedForward(Module):
    def __init__(self, d_model: int, d_ffn: int, rng: np.random.Generator):
        self.w1 = Linear(d_model, d_ffn, rng)
        self.w2 = Linear(d_ffn, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.w2(gelu(self.w1(x)))


class EncoderLayer(Module):
    """Post-LN transformer layer with optional adapter insertion points.

    ``post_attn``/``post_ffn`` transform the sublayer output before the
    residual add and normalization complete it. With both absent this is
    the plain layer; the adapter machinery is strictly additive.
    """

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.attn = SelfAttention(cfg.d_model, cfg.num_heads, rng)
        self.ln1 = LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ffn, rng)
        self.ln2 = LayerNorm(cfg.d_model)

    def __call__(self, x: Tensor, post_attn: AdapterFn | None = None,
                 post_ffn: AdapterFn | None = None) -> Tensor:
        a = self.attn(x)
        if post_attn is not None:
            a = post_attn(a)
        x = self.ln1(add(x, a))
        f = self.ffn(x)
        if post_ffn is not None:
            f = post_ffn(f)
        return self.ln2(add(x, f))


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.frontend = Linear(cfg.input_dim, cfg.d_model, rng)
        self.layers = [EncoderLayer(cfg, rng) for _ in range(cfg.num_layers)]
        self._positions = sinusoidal_positions(cfg.max_seq_len, cfg.d_model)

    def frontend_forward(self, features: Tensor) -> Tensor:
        steps = features.shape[0]
        if steps > self.cfg.max_seq_len:
            raise ValueError(
                f"sequence length {steps} exceeds max_seq_len {self.cfg.max_seq_len}"
            )
        pos = Tensor(self._positions[:steps].astype(features.data.dtype))
        return add(self.frontend(features), pos)

    def forward(
        self,
        features: Tensor,
        post_attn: dict[int, AdapterFn] | None = None,
        post_ffn: dict[int, AdapterFn] | None = None,
    ) -> tuple[Tensor, list[Tensor]]:
        """Return (frontend output, [output of every encoder layer, bottom to top])."""
        h = self.frontend_forward(features)
        front = h
        outputs: list[Tensor] = []
        for i, layer in enumerate(self.layers):
            h = layer(
                h,
                post_attn.get(i) if post_attn else None,
                post_ffn.get(i) if post_ffn else None,
            )
            outputs.append(h)
        return front, outputs

    __call__ = forward


# ---------------------------------------------------------------------------
# toy self-supervised pretraining: masked-frame regression


class MaskedFramePretrainer(Module):
    """Replaces random frames with a learned vector and regresses them back
    from the top encoder layer. The reconstruction head and mask vector are
    scaffolding; only the backbone weights survive pretraining.
    """

    def __init__(self, backbone: Backbone, rng: np.random.Generator):
        self.backbone = backbone
        self.mask_vec = param(rng, (backbone.cfg.input_dim,), scale=0.1)
        self.recon = Linear(backbone.cfg.d_model, backbone.cfg.input_dim, rng)

    def loss(self, features: np.ndarray, mask_rows: np.ndarray) -> Tensor:
        """Mean squared reconstruction error over the masked rows only.

        With no masked rows the loss is exactly zero (and so are its
        gradients); the masked objective never sees unmasked terms.
        """
        m = Tensor(mask_rows.astype(features.dtype)[:, None])
        keep = scale(m, -1.0) + 1.0
        x = Tensor(features)
        corrupted = add(mul(x, keep), mul(self.mask_vec, m))
        _, outputs = self.backbone.forward(corrupted)
        pred = self.recon(outputs[-1])
        diff = mul(sub(pred, x), m)
        denom = max(1.0, float(mask_rows.sum()) * features.shape[1])
        return scale(tsum(mul(diff, diff)), 1.0 / denom)

    def heldout_loss(self, corpus: Sequence[np.ndarray], masks: Sequence[np.ndarray]) -> float:
        return float(np.mean([self.loss(f, m).item() for f, m in zip(corpus, masks)]))


def pretrain_toy(
    backbone: Backbone,
    corpus: Sequence[np.ndarray],
    steps: int,
    lr: float,
    seed: int,
    mask_prob: float = 0.15,
    batch_size: int = 8,
) -> Backbone:
    """Train the backbone in place on masked-frame regression, then freeze it."""
    if len(corpus) == 0:
        raise ValueError("pretraining corpus is empty")
    from .training import Adam  # late import: training depends on this module

    trainer = MaskedFramePretrainer(backbone, rngmod.stream(seed, "pretrain", "init"))
    opt = Adam(dict(trainer.named_parameters()), lr=lr)
    draw = rngmod.stream(seed, "pretrain", "batches")
    for _ in range(steps):
        picks = draw.integers(0, len(corpus), size=batch_size)
        total = None
        for idx in picks:
            features = corpus[int(idx)]
            mask_rows = draw.random(features.shape[0]) < mask_prob
            term = trainer.loss(features, mask_rows)
            total = term if total is None else total + term
        opt.zero_grad()
        backward(scale(total, 1.0 / batch_size))
        opt.step()
    backbone.set_trainable(False)
    return backbone


def make_pretrain_corpus(cfg: BackboneConfig, seed: int, size: int = 48,
                         min_len: int = 20, max_len: int = 40) -> list[np.ndarray]:
    """Generic content-bearing sequences for the masked-frame task."""
    from .tasks import token_codebook  # shared fixed codebook

    draw = rngmod.stream(seed, "pretrain", "corpus")
    book = token_codebook(cfg.input_dim)
    vocab = book.shape[0]
    corpus = []
    for _ in range(size):
        steps = int(draw.integers(min_len, max_len + 1))
        tokens = draw.integers(0, vocab, size=steps)
        feats = book[tokens] + 0.1 * draw.standard_normal((steps, cfg.input_dim))
        corpus.append(feats.astype(np.float32))
    return corpus


# ---------------------------------------------------------------------------
# checkpoint format: JSON map of parameter path -> shape + row-major values


def save_checkpoint(module: Module, path: str) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "params": {
            name: {
                "shape": list(p.data.shape),
                "dtype": str(p.data.dtype),
                "data": [float(v) for v in p.data.reshape(-1)],
            }
            for name, p in module.named_parameters()
        },
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_checkpoint(module: Module, path: str) -> None:
    with open(path) as fh:
        payload = json.load(fh)
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version: {version!r}")
    stored = payload["params"]
    for name, p in module.named_parameters():
        if name not in stored:
            raise ValueError(f"checkpoint missing parameter {name}")
        entry = stored[name]
        if tuple(entry["shape"]) != p.data.shape:
            raise ValueError(
                f"shape mismatch for {name}: checkpoint {entry['shape']} vs model {list(p.data.shape)}"
            )
        p.data = np.asarray(entry["data"], dtype=entry["dtype"]).reshape(p.data.shape)
