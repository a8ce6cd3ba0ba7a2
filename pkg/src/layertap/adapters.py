"""Adapters over a frozen encoder and the strategies that wire them up.

Two adapter families:

* **Tap adapters** bridge an encoder layer's output straight to the
  downstream head. Eight variants trade parameters for capacity, from a
  bare learnable mixing weight up to a residual bottleneck block. The
  tapped, adapted outputs are fused by a learnable softmax-weighted sum.
* **Serial adapters** are residual bottleneck blocks inserted after the
  feedforward of an encoder layer (and, in the paired baseline, also
  after self-attention). Their up-projection starts at zero so a fresh
  serial adapter is exactly the identity map.

An ``AdaptationStrategy`` names which family goes where and which
parameters train; ``apply_strategy`` enforces it on an assembled model
and returns the exact trainable set. ``count_learnable_params`` computes
the same accounting in closed form, without instantiating anything.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .backbone import Backbone, BackboneConfig
from .nn import LayerNorm, Linear, Module
from .tensor import Tensor, add, gelu, relu, softmax, weighted_sum

TAP_VARIANTS = ("weight", "ln", "act_ln", "fc", "fc_act", "fc_ln", "full", "skip")

STRATEGY_KINDS = ("fine_tune_top", "serial_paired", "tap_serial", "tap_only", "serial_only")

_ACTIVATIONS = {"relu": relu, "gelu": gelu}


@dataclass(frozen=True)
class TapConfig:
    """Configuration of the per-layer tap transform.

    ``embed_dim`` is the projection width of the fc-bearing variants;
    ``bottleneck_dim`` only matters for the residual ``skip`` variant.
    """

    variant: str = "full"
    embed_dim: int = 512
    bottleneck_dim: int = 256
    activation: str = "gelu"

    def __post_init__(self):
        if self.variant not in TAP_VARIANTS:
            raise ValueError(f"unknown tap variant {self.variant!r}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.embed_dim < 1 or self.bottleneck_dim < 1:
            raise ValueError("tap dims must be positive")

    def output_dim(self, d_model: int) -> int:
        return self.embed_dim if self.variant in ("fc", "fc_act", "fc_ln", "full") else d_model

    def params_per_layer(self, d_model: int) -> int:
        d, e, b = d_model, self.embed_dim, self.bottleneck_dim
        return {
            "weight": 0,
            "ln": 2 * d,
            "act_ln": 2 * d,
            "fc": d * e + e,
            "fc_act": d * e + e,
            "fc_ln": (d * e + e) + 2 * e,
            "full": (d * e + e) + 2 * e,
            "skip": (d * b + b) + (b * d + d) + 2 * d,
        }[self.variant]


class BottleneckAdapter(Module):
    """x + ln(up(act(down(x)))): a residual bottleneck block.

    The up-projection (weights and bias) is zero-initialized, so output
    equals input exactly until training moves it. Serves both as the
    serial in-layer adapter and as the ``skip`` tap variant.
    """

    def __init__(self, d_model: int, bottleneck_dim: int, activation: str,
                 rng: np.random.Generator):
        if bottleneck_dim >= d_model:
            raise ValueError(
                f"bottleneck_dim {bottleneck_dim} must be smaller than d_model {d_model}"
            )
        self.down = Linear(d_model, bottleneck_dim, rng)
        self.up = Linear(bottleneck_dim, d_model, zero_init=True)
        self.ln = LayerNorm(d_model)
        self._act = _ACTIVATIONS[activation]

    def __call__(self, x: Tensor) -> Tensor:
        return add(x, self.ln(self.up(self._act(self.down(x)))))


class IdentityTap(Module):
    def __call__(self, x: Tensor) -> Tensor:
        return x


class NormTap(Module):
    def __init__(self, d_model: int):
        self.ln = LayerNorm(d_model)

    def __call__(self, x: Tensor) -> Tensor:
        return self.ln(x)


class ActNormTap(Module):
    def __init__(self, d_model: int, activation: str):
        self.ln = LayerNorm(d_model)
        self._act = _ACTIVATIONS[activation]

    def __call__(self, x: Tensor) -> Tensor:
        return self.ln(self._act(x))


class ProjTap(Module):
    def __init__(self, d_model: int, embed_dim: int, rng):
        self.fc = Linear(d_model, embed_dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc(x)


class ProjActTap(Module):
    def __init__(self, d_model: int, embed_dim: int, activation: str, rng):
        self.fc = Linear(d_model, embed_dim, rng)
        self._act = _ACTIVATIONS[activation]

    def __call__(self, x: Tensor) -> Tensor:
        return self._act(self.fc(x))


class ProjNormTap(Module):
    def __init__(self, d_model: int, embed_dim: int, rng):
        self.fc = Linear(d_model, embed_dim, rng)
        self.ln = LayerNorm(embed_dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.ln(self.fc(x))


class FullTap(Module):
    """fc -> activation -> layer norm, the full tap composition."""

    def __init__(self, d_model: int, embed_dim: int, activation: str, rng):
        self.fc = Linear(d_model, embed_dim, rng)
        self.ln = LayerNorm(embed_dim)
        self._act = _ACTIVATIONS[activation]

    def __call__(self, x: Tensor) -> Tensor:
        return self.ln(self._act(self.fc(x)))


def make_tap(cfg: TapConfig, d_model: int, rng: np.random.Generator) -> Module:
    v = cfg.variant
    if v == "weight":
        return IdentityTap()
    if v == "ln":
        return NormTap(d_model)
    if v == "act_ln":
        return ActNormTap(d_model, cfg.activation)
    if v == "fc":
        return ProjTap(d_model, cfg.embed_dim, rng)
    if v == "fc_act":
        return ProjActTap(d_model, cfg.embed_dim, cfg.activation, rng)
    if v == "fc_ln":
        return ProjNormTap(d_model, cfg.embed_dim, rng)
    if v == "full":
        return FullTap(d_model, cfg.embed_dim, cfg.activation, rng)
    return BottleneckAdapter(d_model, cfg.bottleneck_dim, cfg.activation, rng)


class LayerWeights(Module):
    """Learnable mixing weights, softmax-normalized from free logits.

    Logits start at zero, so mixing starts uniform. ``values`` evaluates
    the softmax in 64-bit; reports and exports use it so the weights sum
    to 1 within 1e-9 regardless of the training dtype.
    """

    def __init__(self, count: int):
        self.logits = Tensor(np.zeros(count), requires_grad=True)

    def tensor(self) -> Tensor:
        return softmax(self.logits, axis=-1)

    def values(self) -> np.ndarray:
        z = self.logits.data.astype(np.float64)
        z = z - z.max()
        e = np.exp(z)
        return e / e.sum()


def aggregate(adapted: Sequence[Tensor], layer_weights: LayerWeights) -> Tensor:
    """Convex combination of the tapped representations."""
    if len(adapted) != layer_weights.logits.data.size:
        raise ValueError(
            f"{len(adapted)} tapped layers but {layer_weights.logits.data.size} weights"
        )
    return weighted_sum(adapted, layer_weights.tensor())


# ---------------------------------------------------------------------------
# strategies


@dataclass(frozen=True)
class AdaptationStrategy:
    """Which adapters exist and which parameters train.

    kinds:
      fine_tune_top   unfreeze the top ``top_layers`` encoder layers
      serial_paired   bottleneck adapters after BOTH sublayers of the top
                      ``top_layers`` layers (the classic insertion baseline)
      tap_serial      taps on the top ``tap_layers`` layers, serial adapters
                      in ``serial_layers`` layers counted down from the
                      second layer from the top
      tap_only        taps on every layer, no serial adapters
      serial_only     serial adapters in every layer, no taps

    The downstream head is always trainable. All adapter strategies also
    train the encoder LayerNorms; fine_tune_top trains only whole layers.
    """

    kind: str
    top_layers: int | None = None
    tap_layers: int | None = None
    serial_layers: int | None = None
    tap: TapConfig = field(default_factory=TapConfig)
    serial_bottleneck: int = 256
    serial_activation: str = "gelu"

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy kind {self.kind!r}")

    def validate(self, num_layers: int) -> None:
        if self.kind == "fine_tune_top":
            if self.top_layers is None or not 0 <= self.top_layers <= num_layers:
                raise ValueError(f"fine_tune_top needs 0 <= top_layers <= {num_layers}")
        elif self.kind == "serial_paired":
            if self.top_layers is None or not 1 <= self.top_layers <= num_layers:
                raise ValueError(f"serial_paired needs 1 <= top_layers <= {num_layers}")
        elif self.kind == "tap_serial":
            if self.tap_layers is None or not 1 <= self.tap_layers <= num_layers:
                raise ValueError(f"tap_serial needs 1 <= tap_layers <= {num_layers}")
            if self.serial_layers is None or not 0 <= self.serial_layers <= num_layers - 1:
                raise ValueError(
                    f"tap_serial needs 0 <= serial_layers <= {num_layers - 1}"
                )

    def label(self) -> str:
        if self.kind == "fine_tune_top":
            return f"fine_tune_top({self.top_layers})"
        if self.kind == "serial_paired":
            return f"serial_paired({self.top_layers})"
        if self.kind == "tap_serial":
            return f"tap_serial(k={self.tap_layers},l={self.serial_layers})"
        return self.kind

    # layer index helpers (0-based, bottom to top)
    def tap_indices(self, num_layers: int) -> list[int]:
        if self.kind == "tap_serial":
            return list(range(num_layers - self.tap_layers, num_layers))
        if self.kind == "tap_only":
            return list(range(num_layers))
        return []

    def serial_indices(self, num_layers: int) -> list[int]:
        if self.kind == "tap_serial":
            # counted down from the second layer from the top
            return list(range(num_layers - 1 - self.serial_layers, num_layers - 1))
        if self.kind == "serial_only":
            return list(range(num_layers))
        return []

    def paired_indices(self, num_layers: int) -> list[int]:
        if self.kind == "serial_paired":
            return list(range(num_layers - self.top_layers, num_layers))
        return []


def fine_tune_top(top_layers: int) -> AdaptationStrategy:
    return AdaptationStrategy("fine_tune_top", top_layers=top_layers)


def serial_paired(top_layers: int, bottleneck: int = 256) -> AdaptationStrategy:
    return AdaptationStrategy("serial_paired", top_layers=top_layers,
                              serial_bottleneck=bottleneck, serial_activation="gelu")


def tap_serial(tap_layers: int, serial_layers: int, tap: TapConfig | None = None,
               bottleneck: int = 256) -> AdaptationStrategy:
    tap = tap or TapConfig()
    return AdaptationStrategy("tap_serial", tap_layers=tap_layers,
                              serial_layers=serial_layers, tap=tap,
                              serial_bottleneck=bottleneck,
                              serial_activation=tap.activation)


def tap_only(tap: TapConfig | None = None) -> AdaptationStrategy:
    return AdaptationStrategy("tap_only", tap=tap or TapConfig())


def serial_only(bottleneck: int = 256, activation: str = "gelu") -> AdaptationStrategy:
    return AdaptationStrategy("serial_only", serial_bottleneck=bottleneck,
                              serial_activation=activation)


# ---------------------------------------------------------------------------
# assembled model


class AdaptedModel(Module):
    """Backbone plus the adapters and head demanded by a strategy."""

    def __init__(self, backbone: Backbone, head: Module, strategy: AdaptationStrategy,
                 rng: np.random.Generator):
        cfg = backbone.cfg
        strategy.validate(cfg.num_layers)
        self.backbone = backbone
        self.head = head
        self.strategy = strategy
        self.tap_positions = strategy.tap_indices(cfg.num_layers)
        self.taps = [make_tap(strategy.tap, cfg.d_model, rng) for _ in self.tap_positions]
        self.layer_weights = LayerWeights(len(self.tap_positions)) if self.tap_positions else None

        serial_at = set(strategy.serial_indices(cfg.num_layers))
        paired_at = set(strategy.paired_indices(cfg.num_layers))
        self.serial: list[Module | None] = [
            BottleneckAdapter(cfg.d_model, strategy.serial_bottleneck,
                              strategy.serial_activation, rng) if i in serial_at else None
            for i in range(cfg.num_layers)
        ]
        self.paired_attn: list[Module | None] = [
            BottleneckAdapter(cfg.d_model, strategy.serial_bottleneck, "gelu", rng)
            if i in paired_at else None
            for i in range(cfg.num_layers)
        ]
        self.paired_ffn: list[Module | None] = [
            BottleneckAdapter(cfg.d_model, strategy.serial_bottleneck, "gelu", rng)
            if i in paired_at else None
            for i in range(cfg.num_layers)
        ]

    def forward(self, features: Tensor):
        post_attn = {i: a for i, a in enumerate(self.paired_attn) if a is not None}
        post_ffn = {i: a for i, a in enumerate(self.paired_ffn) if a is not None}
        for i, a in enumerate(self.serial):
            if a is not None:
                post_ffn[i] = a
        _, layer_outputs = self.backbone.forward(features, post_attn or None, post_ffn or None)
        if self.tap_positions:
            adapted = [tap(layer_outputs[i]) for i, tap in zip(self.tap_positions, self.taps)]
            fused = aggregate(adapted, self.layer_weights)
        else:
            fused = layer_outputs[-1]
        return self.head(fused)

    __call__ = forward


@dataclass
class TrainableSet:
    params: dict[str, Tensor]

    @property
    def names(self) -> list[str]:
        return list(self.params)

    @property
    def total(self) -> int:
        return sum(p.data.size for p in self.params.values())


def apply_strategy(model: AdaptedModel, strategy: AdaptationStrategy | None = None) -> TrainableSet:
    """Freeze everything, then unfreeze exactly what the strategy trains."""
    if strategy is None:
        strategy = model.strategy
    if strategy != model.strategy:
        raise ValueError("strategy differs from the one the model was assembled with")

    model.set_trainable(False)
    num_layers = model.backbone.cfg.num_layers

    if strategy.kind == "fine_tune_top":
        for layer in model.backbone.layers[num_layers - strategy.top_layers:]:
            layer.set_trainable(True)
    else:
        for mod in (*model.taps, *model.serial, *model.paired_attn, *model.paired_ffn):
            if mod is not None:
                mod.set_trainable(True)
        if model.layer_weights is not None:
            model.layer_weights.set_trainable(True)
        for layer in model.backbone.layers:
            layer.ln1.set_trainable(True)
            layer.ln2.set_trainable(True)
    model.head.set_trainable(True)

    return TrainableSet({name: p for name, p in model.named_parameters() if p.requires_grad})


def frozen_parameters(model: AdaptedModel) -> dict[str, Tensor]:
    return {name: p for name, p in model.named_parameters() if not p.requires_grad}


def head_input_dim(strategy: AdaptationStrategy, cfg: BackboneConfig) -> int:
    """Width of the representation the downstream head consumes."""
    if strategy.tap_indices(cfg.num_layers):
        return strategy.tap.output_dim(cfg.d_model)
    return cfg.d_model


# ---------------------------------------------------------------------------
# exact parameter accounting, closed form


def _linear_params(d_in: int, d_out: int) -> int:
    return d_in * d_out + d_out


def _ln_params(d: int) -> int:
    return 2 * d


def _bottleneck_params(d: int, b: int) -> int:
    return _linear_params(d, b) + _linear_params(b, d) + _ln_params(d)


def encoder_layer_params(cfg: BackboneConfig) -> int:
    attn = 4 * _linear_params(cfg.d_model, cfg.d_model)
    ffn = _linear_params(cfg.d_model, cfg.d_ffn) + _linear_params(cfg.d_ffn, cfg.d_model)
    return attn + ffn + 2 * _ln_params(cfg.d_model)


def backbone_params(cfg: BackboneConfig) -> int:
    return _linear_params(cfg.input_dim, cfg.d_model) + cfg.num_layers * encoder_layer_params(cfg)


@dataclass(frozen=True)
class ParamCount:
    components: dict[str, int]
    trainable: int
    total_model: int
    head: int

    @property
    def ratio(self) -> float:
        return self.trainable / self.total_model

    @property
    def ratio_excluding_head(self) -> float:
        return (self.trainable - self.head) / (self.total_model - self.head)


def count_learnable_params(
    strategy: AdaptationStrategy,
    cfg: BackboneConfig,
    head: "HeadSpec | None" = None,
) -> ParamCount:
    """Exact trainable-scalar count, decomposed by component.

    Matches brute-force enumeration of an instantiated model under the
    same strategy (a tested invariant). ``head=None`` counts the bare
    architecture without a downstream head.
    """
    from .heads import head_param_count  # local import avoids a cycle

    strategy.validate(cfg.num_layers)
    d = cfg.d_model
    comps: dict[str, int] = {}

    n_taps = len(strategy.tap_indices(cfg.num_layers))
    n_serial = len(strategy.serial_indices(cfg.num_layers))
    n_paired = len(strategy.paired_indices(cfg.num_layers))

    if strategy.kind == "fine_tune_top":
        comps["encoder_layers"] = strategy.top_layers * encoder_layer_params(cfg)
    else:
        comps["encoder_layer_norms"] = cfg.num_layers * 2 * _ln_params(d)
    if n_taps:
        comps["taps"] = n_taps * strategy.tap.params_per_layer(d)
        comps["layer_weights"] = n_taps
    if n_serial:
        comps["serial_adapters"] = n_serial * _bottleneck_params(d, strategy.serial_bottleneck)
    if n_paired:
        comps["paired_adapters"] = 2 * n_paired * _bottleneck_params(d, strategy.serial_bottleneck)

    head_n = 0
    if head is not None:
        d_in = strategy.tap.output_dim(d) if n_taps else d
        head_n = head_param_count(head, d_in)
        comps["head"] = head_n

    added = (
        comps.get("taps", 0)
        + comps.get("layer_weights", 0)
        + comps.get("serial_adapters", 0)
        + comps.get("paired_adapters", 0)
        + head_n
    )
    trainable = sum(comps.values())
    total_model = backbone_params(cfg) + added
    return ParamCount(components=comps, trainable=trainable, total_model=total_model, head=head_n)


def tap_param_table(
    cfg: BackboneConfig,
    embed_dim: int = 512,
    bottleneck_dim: int = 256,
) -> dict[str, int]:
    """Per-variant tap parameter totals across all layers.

    The weight-only variant owns no per-layer transforms, so its row
    counts the mixing scalars themselves; every other row counts only
    the per-layer transform parameters.
    """
    table = {}
    for variant in TAP_VARIANTS:
        tap = TapConfig(variant=variant, embed_dim=embed_dim, bottleneck_dim=bottleneck_dim)
        per_layer = tap.params_per_layer(cfg.d_model)
        table[variant] = cfg.num_layers * per_layer if per_layer else cfg.num_layers
    return table


def format_param_count(n: int) -> str:
    """Raw integer below 10k, otherwise rounded millions like '4.74M'."""
    if n < 10_000:
        return str(n)
    return f"{n / 1e6:.2f}M"
