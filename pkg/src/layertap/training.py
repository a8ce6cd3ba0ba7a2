"""Seeded training runs over the synthetic tasks.

``train`` owns the whole lifecycle of one run: generate the dataset,
pretrain (or reuse) a frozen backbone, assemble the adapted model, apply
the strategy, optimize with Adam, evaluate, and cross-check the
parameter accounting and the freeze contract. Divergence (any
non-finite value during training) is recorded in the report, never
raised to the caller.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from . import rng as rngmod
from .adapters import (
    AdaptationStrategy,
    AdaptedModel,
    apply_strategy,
    count_learnable_params,
    frozen_parameters,
    head_input_dim,
)
from .backbone import Backbone, BackboneConfig, make_pretrain_corpus, pretrain_toy
from .heads import HeadSpec, ctc_greedy_decode, ctc_loss, make_head
from .metrics import TrialScore, accuracy, cosine_similarity, eer, weighted_accuracy, wer
from .tasks import Dataset, Example, SyntheticTaskSpec, generate_task
from .tensor import NonFiniteError, Tensor, backward, cross_entropy, scale

LR_GRID = (1e-3, 5e-4, 1e-4, 5e-5, 1e-5)


class Adam:
    """Adam with bias correction; no weight decay, no schedule."""

    def __init__(self, params: Mapping[str, Tensor] | Sequence[Tensor], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if isinstance(params, Mapping):
            params = list(params.values())
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mhat = m / (1 - self.b1**self.t)
            vhat = v / (1 - self.b2**self.t)
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)


@dataclass(frozen=True)
class RunConfig:
    backbone: BackboneConfig
    strategy: AdaptationStrategy
    task: SyntheticTaskSpec
    steps: int = 2000
    lr: float = 1e-3
    batch_size: int = 8
    seeds: tuple[int, ...] = (0,)
    pretrain_steps: int = 300
    pretrain_lr: float = 1e-3
    head_hidden: int | None = None
    out_dir: str | None = None


@dataclass
class RunReport:
    strategy: str
    tap_variant: str
    task: str
    seed: int
    lr: float
    steps_run: int
    losses: list[float]
    metric_name: str
    initial_metric: float | None
    final_metric: float | None
    aux_metrics: dict[str, float]
    trainable_params: int
    total_params: int
    trainable_ratio: float
    param_breakdown: dict[str, int]
    layer_weights: list[float] | None
    tap_positions: list[int] | None
    weight_centroid: float | None
    diverged: bool
    diverged_at: int | None
    frozen_hash_before: str
    frozen_hash_after: str
    wall_clock_s: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @staticmethod
    def from_json(text: str) -> "RunReport":
        return RunReport(**json.loads(text))


def head_spec_for(task: SyntheticTaskSpec, hidden: int | None = None) -> HeadSpec:
    if task.kind == "frame_content":
        return HeadSpec(kind="ctc", vocab_size=task.vocab_size)
    return HeadSpec(kind="classifier", num_classes=task.num_classes, hidden=hidden)


# pretrained backbones are reused across runs with the same provenance;
# entries store parameter arrays, each run gets its own copies
_PRETRAIN_CACHE: dict[tuple, list[tuple[str, np.ndarray]]] = {}


def pretrained_backbone(cfg: BackboneConfig, seed: int, steps: int, lr: float) -> Backbone:
    key = (cfg, seed, steps, lr)
    if key not in _PRETRAIN_CACHE:
        backbone = Backbone(cfg, rngmod.stream(seed, "backbone", "init"))
        corpus = make_pretrain_corpus(cfg, seed)
        pretrain_toy(backbone, corpus, steps=steps, lr=lr, seed=seed)
        _PRETRAIN_CACHE[key] = [(n, p.data.copy()) for n, p in backbone.named_parameters()]
    backbone = Backbone(cfg, rngmod.stream(seed, "backbone", "init"))
    for (_, stored), (_, p) in zip(_PRETRAIN_CACHE[key], backbone.named_parameters()):
        p.data = stored.copy()
    backbone.set_trainable(False)
    return backbone


def _hash_params(params: Mapping[str, Tensor]) -> str:
    digest = hashlib.sha256()
    for name in sorted(params):
        digest.update(name.encode())
        digest.update(params[name].data.tobytes())
    return digest.hexdigest()


def _example_loss(model: AdaptedModel, example: Example, task_kind: str) -> Tensor:
    feats = Tensor(example.features)
    if task_kind == "frame_content":
        logits = model.forward(feats)
        return ctc_loss(logits, example.label)
    logits, _ = model.forward(feats)
    return cross_entropy(logits, example.label)


def evaluate(model: AdaptedModel, dataset: Dataset) -> tuple[str, float, dict[str, float]]:
    """(metric name, primary error metric, auxiliary metrics) on the eval split."""
    kind = dataset.spec.kind
    if kind == "frame_content":
        rates = []
        for ex in dataset.eval:
            logits = model.forward(Tensor(ex.features))
            rates.append(wer(ex.label, ctc_greedy_decode(logits)))
        return "wer", float(np.mean(rates)), {}

    preds, golds, embeddings = [], [], []
    for ex in dataset.eval:
        logits, emb = model.forward(Tensor(ex.features))
        preds.append(int(np.argmax(logits.data)))
        golds.append(ex.label)
        embeddings.append(emb.data.astype(np.float64))

    aux: dict[str, float] = {}
    if kind == "utterance_speaker":
        primary = 1.0 - accuracy(preds, golds)
        trials = [
            TrialScore(str(i), str(j), cosine_similarity(embeddings[i], embeddings[j]),
                       golds[i] == golds[j])
            for i in range(len(golds))
            for j in range(i + 1, len(golds))
        ]
        if any(t.same for t in trials) and any(not t.same for t in trials):
            rate, _ = eer(trials)
            aux["eer"] = rate
        return "error_rate", primary, aux

    primary = 1.0 - weighted_accuracy(preds, golds, dataset.spec.num_classes)
    return "error_rate", primary, aux


def train(config: RunConfig, seed: int | None = None,
          backbone: Backbone | None = None) -> RunReport:
    seed = config.seeds[0] if seed is None else seed
    start = time.perf_counter()

    dataset = generate_task(config.task, seed)
    if backbone is None:
        backbone = pretrained_backbone(config.backbone, seed, config.pretrain_steps,
                                       config.pretrain_lr)

    head_spec = head_spec_for(config.task, config.head_hidden)
    model_rng = rngmod.stream(seed, "adapters", config.strategy.label())
    head = make_head(head_spec, head_input_dim(config.strategy, config.backbone), model_rng)
    model = AdaptedModel(backbone, head, config.strategy, model_rng)

    trainable = apply_strategy(model, config.strategy)
    counted = count_learnable_params(config.strategy, config.backbone, head_spec)
    if counted.trainable != trainable.total:
        raise AssertionError(
            f"parameter accounting mismatch: closed form {counted.trainable} "
            f"vs enumeration {trainable.total}"
        )
    total_model = sum(p.data.size for _, p in model.named_parameters())
    if counted.total_model != total_model:
        raise AssertionError(
            f"total accounting mismatch: closed form {counted.total_model} vs {total_model}"
        )

    frozen = frozen_parameters(model)
    frozen_before = _hash_params(frozen)

    metric_name, initial_metric, _ = evaluate(model, dataset)

    opt = Adam(trainable.params, lr=config.lr)
    batches = rngmod.stream(seed, "batches", config.strategy.label())
    losses: list[float] = []
    diverged = False
    diverged_at = None
    for step in range(config.steps):
        picks = batches.integers(0, len(dataset.train), size=config.batch_size)
        try:
            # numpy's own overflow warnings are redundant noise here: any
            # non-finite value raises NonFiniteError, flagging the run
            with np.errstate(over="ignore", invalid="ignore"):
                total = None
                for idx in picks:
                    term = _example_loss(model, dataset.train[int(idx)], config.task.kind)
                    total = term if total is None else total + term
                batch_loss = scale(total, 1.0 / config.batch_size)
                opt.zero_grad()
                backward(batch_loss)
                opt.step()
        except NonFiniteError:
            diverged = True
            diverged_at = step
            break
        losses.append(batch_loss.item())

    final_metric = None
    aux: dict[str, float] = {}
    if not diverged:
        _, final_metric, aux = evaluate(model, dataset)

    frozen_after = _hash_params(frozen)
    if frozen_after != frozen_before:
        raise AssertionError("freeze contract violated: frozen parameters changed")

    weights = tap_positions = centroid = None
    if model.layer_weights is not None:
        values = model.layer_weights.values()
        weights = [float(w) for w in values]
        tap_positions = [i + 1 for i in model.tap_positions]  # 1-based for reports
        centroid = float(sum(l * w for l, w in zip(tap_positions, values)))

    report = RunReport(
        strategy=config.strategy.label(),
        tap_variant=config.strategy.tap.variant,
        task=config.task.kind,
        seed=seed,
        lr=config.lr,
        steps_run=len(losses),
        losses=losses,
        metric_name=metric_name,
        initial_metric=initial_metric,
        final_metric=final_metric,
        aux_metrics=aux,
        trainable_params=trainable.total,
        total_params=total_model,
        trainable_ratio=trainable.total / total_model,
        param_breakdown=dict(counted.components),
        layer_weights=weights,
        tap_positions=tap_positions,
        weight_centroid=centroid,
        diverged=diverged,
        diverged_at=diverged_at,
        frozen_hash_before=frozen_before,
        frozen_hash_after=frozen_after,
        wall_clock_s=time.perf_counter() - start,
    )
    if config.out_dir:
        os.makedirs(config.out_dir, exist_ok=True)
        with open(os.path.join(config.out_dir, "run.json"), "w") as fh:
            fh.write(report.to_json())
    return report
