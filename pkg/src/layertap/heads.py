"""Downstream heads and the alignment-marginalizing sequence loss.

Two heads cover the task families:

* ``CtcHead``: one linear layer to per-frame logits over vocabulary plus
  blank (index 0), trained with ``ctc_loss``.
* ``ClassifierHead``: linear, average pooling over time, linear; returns
  both class logits and the pooled embedding (the pooled vector doubles
  as the utterance embedding for verification scoring).

``ctc_loss`` marginalizes over all blank-augmented alignments of the
target in log space and backpropagates the exact posterior-based
gradient to the logits. The per-utterance loss is not length-normalized.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .nn import Linear, Module
from .tensor import Tensor, make_node, mean_over_time, reshape

BLANK = 0


@dataclass(frozen=True)
class HeadSpec:
    kind: str  # "ctc" or "classifier"
    vocab_size: int | None = None
    num_classes: int | None = None
    hidden: int | None = None  # classifier width; defaults to the input width

    def __post_init__(self):
        if self.kind == "ctc":
            if not self.vocab_size or self.vocab_size < 1:
                raise ValueError("ctc head needs a positive vocab_size")
        elif self.kind == "classifier":
            if not self.num_classes or self.num_classes < 2:
                raise ValueError("classifier head needs num_classes >= 2")
        else:
            raise ValueError(f"unknown head kind {self.kind!r}")


class CtcHead(Module):
    def __init__(self, d_in: int, vocab_size: int, rng: np.random.Generator):
        self.fc = Linear(d_in, vocab_size + 1, rng)
        self.vocab_size = vocab_size

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc(x)


class ClassifierHead(Module):
    def __init__(self, d_in: int, num_classes: int, rng: np.random.Generator,
                 hidden: int | None = None):
        hidden = hidden or d_in
        self.fc1 = Linear(d_in, hidden, rng)
        self.fc2 = Linear(hidden, num_classes, rng)
        self.hidden = hidden
        self.num_classes = num_classes

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """(class logits, pooled embedding) for a [T, d_in] input."""
        pooled = mean_over_time(self.fc1(x))
        logits = reshape(self.fc2(reshape(pooled, (1, self.hidden))), (self.num_classes,))
        return logits, pooled


def make_head(spec: HeadSpec, d_in: int, rng: np.random.Generator) -> Module:
    if spec.kind == "ctc":
        return CtcHead(d_in, spec.vocab_size, rng)
    return ClassifierHead(d_in, spec.num_classes, rng, spec.hidden)


def head_param_count(spec: HeadSpec, d_in: int) -> int:
    if spec.kind == "ctc":
        out = spec.vocab_size + 1
        return d_in * out + out
    hidden = spec.hidden or d_in
    return (d_in * hidden + hidden) + (hidden * spec.num_classes + spec.num_classes)


# ---------------------------------------------------------------------------
# CTC loss


def _validate_target(targets: Sequence[int], steps: int, vocab: int) -> None:
    for t in targets:
        if not 1 <= t <= vocab:
            raise ValueError(f"label {t} out of range 1..{vocab}")
    repeats = sum(1 for a, b in zip(targets, targets[1:]) if a == b)
    if steps < len(targets) + repeats:
        raise ValueError(
            f"target of length {len(targets)} with {repeats} repeats is infeasible "
            f"in {steps} frames"
        )


def ctc_loss(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Negative log-probability of all alignments producing ``targets``.

    ``logits`` is [T, V+1] with blank at index 0 and labels 1..V. The
    recursion runs in 64-bit log space regardless of the training dtype.
    """
    if logits.data.ndim != 2:
        raise ValueError(f"ctc_loss expects [T, V+1] logits, got shape {logits.shape}")
    steps, width = logits.shape
    vocab = width - 1
    targets = list(targets)
    _validate_target(targets, steps, vocab)

    x = logits.data.astype(np.float64)
    lp = x - x.max(axis=1, keepdims=True)
    lp = lp - np.log(np.exp(lp).sum(axis=1, keepdims=True))

    ext = np.zeros(2 * len(targets) + 1, dtype=np.int64)
    ext[1::2] = targets
    s_len = ext.size
    # skip transition s-2 -> s is legal only onto a label differing from ext[s-2]
    skip_ok = np.zeros(s_len, dtype=bool)
    if s_len > 2:
        skip_ok[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])

    neg_inf = -np.inf
    alpha = np.full((steps, s_len), neg_inf)
    alpha[0, 0] = lp[0, ext[0]]
    if s_len > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, steps):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        if s_len > 2:
            acc[2:] = np.logaddexp(acc[2:], np.where(skip_ok[2:], prev[:-2], neg_inf))
        alpha[t] = acc + lp[t, ext]

    loglik = alpha[-1, -1]
    if s_len > 1:
        loglik = np.logaddexp(loglik, alpha[-1, -2])
    if loglik == neg_inf:
        raise ValueError("target has zero probability under the given logits")

    def grad_fn(out):
        beta = np.full((steps, s_len), neg_inf)
        beta[-1, -1] = 0.0
        if s_len > 1:
            beta[-1, -2] = 0.0
        for t in range(steps - 2, -1, -1):
            nxt = beta[t + 1] + lp[t + 1, ext]
            acc = nxt.copy()
            acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
            if s_len > 2:
                acc[:-2] = np.logaddexp(acc[:-2], np.where(skip_ok[2:], nxt[2:], neg_inf))
            beta[t] = acc
        occupancy = alpha + beta - loglik  # log p(state s at frame t | target)
        posterior = np.zeros((steps, width))
        occ = np.exp(occupancy)  # exp(-inf) -> 0 for unreachable states
        for s in range(s_len):
            posterior[:, ext[s]] += occ[:, s]
        grad = (np.exp(lp) - posterior) * float(out.grad)
        logits._accumulate(grad.astype(logits.data.dtype))

    return make_node(np.asarray(-loglik, dtype=logits.data.dtype), (logits,), grad_fn, "ctc_loss")


def ctc_greedy_decode(logits) -> list[int]:
    """Per-frame argmax (ties toward the lowest index), collapse repeats,
    drop blanks."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    ids = arr.argmax(axis=1)
    out: list[int] = []
    prev = None
    for i in ids:
        i = int(i)
        if i != prev and i != BLANK:
            out.append(i)
        prev = i
    return out
