import numpy as np
import pytest

from layertap import rng as rngmod
from layertap.adapters import (
    TAP_VARIANTS,
    AdaptedModel,
    BottleneckAdapter,
    LayerWeights,
    TapConfig,
    aggregate,
    apply_strategy,
    backbone_params,
    count_learnable_params,
    fine_tune_top,
    format_param_count,
    frozen_parameters,
    head_input_dim,
    make_tap,
    serial_only,
    serial_paired,
    tap_only,
    tap_param_table,
    tap_serial,
)
from layertap.backbone import TOY, WAVLM_BASE, Backbone, BackboneConfig
from layertap.gradcheck import grad_check
from layertap.heads import HeadSpec, make_head
from layertap.tensor import Tensor, mul, tsum

SMALL = BackboneConfig(num_layers=3, d_model=8, num_heads=2, d_ffn=16, input_dim=4,
                       max_seq_len=64)
SMALL_TAP = TapConfig(variant="full", embed_dim=6, bottleneck_dim=4)


def build_model(strategy, cfg=SMALL, seed=0, task="classifier"):
    backbone = Backbone(cfg, rngmod.stream(seed, "bb"))
    backbone.set_trainable(False)
    if task == "classifier":
        spec = HeadSpec(kind="classifier", num_classes=3)
    else:
        spec = HeadSpec(kind="ctc", vocab_size=3)
    head = make_head(spec, head_input_dim(strategy, cfg), rngmod.stream(seed, "head"))
    return AdaptedModel(backbone, head, strategy, rngmod.stream(seed, "adapters")), spec


# ---------------------------------------------------------------------------
# tap variants


def test_weight_variant_is_identity():
    tap = make_tap(TapConfig(variant="weight"), 8, rngmod.stream(0, "t"))
    x = Tensor(np.random.default_rng(0).standard_normal((4, 8)).astype(np.float32))
    assert tap(x) is x


def test_ln_variant_constant_rows_map_to_beta():
    tap = make_tap(TapConfig(variant="ln"), 4, rngmod.stream(0, "t"))
    tap.ln.beta.data[:] = np.array([0.5, -1.0, 0.0, 2.0], dtype=np.float32)
    x = Tensor(np.full((3, 4), 7.0, dtype=np.float32))
    np.testing.assert_allclose(tap(x).data, np.tile(tap.ln.beta.data, (3, 1)))


@pytest.mark.parametrize("variant", TAP_VARIANTS)
def test_every_variant_forward_shape(variant):
    cfg = TapConfig(variant=variant, embed_dim=6, bottleneck_dim=4)
    tap = make_tap(cfg, 8, rngmod.stream(1, "t"))
    x = Tensor(np.random.default_rng(1).standard_normal((5, 8)).astype(np.float32))
    out = tap(x)
    assert out.shape == (5, cfg.output_dim(8))


def test_full_variant_gradients():
    cfg = TapConfig(variant="full", embed_dim=6)
    tap = make_tap(cfg, 8, rngmod.stream(2, "t")).astype(np.float64)
    x = Tensor(np.random.default_rng(2).standard_normal((4, 8)), requires_grad=True)
    probe = Tensor(np.random.default_rng(3).standard_normal((4, 6)))
    err = grad_check(lambda: tsum(mul(tap(x), probe)),
                     [x, tap.fc.w, tap.fc.b, tap.ln.gamma, tap.ln.beta])
    assert err < 1e-5


def test_variant_param_counts_match_instantiation():
    for variant in TAP_VARIANTS:
        cfg = TapConfig(variant=variant, embed_dim=6, bottleneck_dim=4)
        tap = make_tap(cfg, 8, rngmod.stream(3, "t"))
        built = sum(p.data.size for p in tap.parameters())
        assert built == cfg.params_per_layer(8), variant


# ---------------------------------------------------------------------------
# aggregation


def test_aggregate_identical_inputs_is_fixed_point():
    x = np.random.default_rng(4).standard_normal((3, 5)).astype(np.float32)
    weights = LayerWeights(4)
    weights.logits.data[:] = np.array([0.3, -1.0, 2.0, 0.0], dtype=np.float32)
    out = aggregate([Tensor(x) for _ in range(4)], weights)
    np.testing.assert_allclose(out.data, x, atol=1e-6)


def test_aggregate_zero_logits_uniform():
    weights = LayerWeights(4)
    np.testing.assert_allclose(weights.values(), np.full(4, 0.25), atol=1e-12)
    assert abs(weights.values().sum() - 1.0) < 1e-9


def test_aggregate_two_layer_closed_form():
    weights = LayerWeights(2)
    weights.logits.data[:] = np.array([np.log(3.0), 0.0], dtype=np.float32)
    np.testing.assert_allclose(weights.values(), [0.75, 0.25], atol=1e-7)
    a1 = np.random.default_rng(5).standard_normal((2, 3))
    a2 = np.random.default_rng(6).standard_normal((2, 3))
    out = aggregate([Tensor(a1, dtype=np.float64), Tensor(a2, dtype=np.float64)], weights)
    np.testing.assert_allclose(out.data, 0.75 * a1 + 0.25 * a2, atol=1e-7)


def test_aggregate_invariant_to_logit_shift():
    weights = LayerWeights(3)
    weights.logits.data[:] = np.array([0.1, -0.4, 1.3], dtype=np.float32)
    before = weights.values()
    weights.logits.data += 5.0
    np.testing.assert_allclose(weights.values(), before, atol=1e-7)


def test_aggregate_count_mismatch():
    weights = LayerWeights(3)
    with pytest.raises(ValueError, match="2 tapped layers but 3"):
        aggregate([Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 2)))], weights)


def test_layer_weights_positive_and_normalized():
    weights = LayerWeights(6)
    weights.logits.data[:] = np.random.default_rng(7).standard_normal(6).astype(np.float32) * 4
    values = weights.values()
    assert (values > 0).all()
    assert abs(values.sum() - 1.0) < 1e-9


# ---------------------------------------------------------------------------
# residual bottleneck adapter


def test_bottleneck_identity_at_init():
    adapter = BottleneckAdapter(8, 4, "gelu", rngmod.stream(8, "a"))
    rng = np.random.default_rng(8)
    for _ in range(20):
        x = Tensor(rng.standard_normal((6, 8)).astype(np.float32))
        np.testing.assert_array_equal(adapter(x).data, x.data)


def test_bottleneck_width_validation():
    with pytest.raises(ValueError, match="smaller than d_model"):
        BottleneckAdapter(8, 8, "gelu", rngmod.stream(9, "a"))


def test_bottleneck_gradient_through_residual():
    adapter = BottleneckAdapter(8, 4, "relu", rngmod.stream(10, "a")).astype(np.float64)
    adapter.up.w.data += 0.1 * np.random.default_rng(10).standard_normal(adapter.up.w.shape)
    x = Tensor(np.random.default_rng(11).standard_normal((3, 8)), requires_grad=True)
    probe = Tensor(np.random.default_rng(12).standard_normal((3, 8)))
    err = grad_check(lambda: tsum(mul(adapter(x), probe)),
                     [x, adapter.down.w, adapter.down.b, adapter.up.w, adapter.up.b,
                      adapter.ln.gamma, adapter.ln.beta])
    assert err < 1e-5


# ---------------------------------------------------------------------------
# strategies


def test_strategy_validation_ranges():
    with pytest.raises(ValueError):
        fine_tune_top(-1).validate(3)
    with pytest.raises(ValueError):
        fine_tune_top(4).validate(3)
    with pytest.raises(ValueError):
        serial_paired(0).validate(3)
    with pytest.raises(ValueError):
        tap_serial(0, 1).validate(3)
    with pytest.raises(ValueError):
        tap_serial(2, 3).validate(3)
    tap_serial(3, 2).validate(3)


def test_serial_indices_count_down_from_second_from_top():
    s = tap_serial(2, 2)
    assert s.tap_indices(4) == [2, 3]
    assert s.serial_indices(4) == [1, 2]  # layers below the top one
    assert tap_serial(4, 3).serial_indices(4) == [0, 1, 2]
    assert tap_serial(1, 0).serial_indices(4) == []


def test_fine_tune_top_zero_trains_only_head():
    model, spec = build_model(fine_tune_top(0))
    trainable = apply_strategy(model)
    head_size = sum(p.data.size for p in model.head.parameters())
    assert trainable.total == head_size
    assert all(name.startswith("head.") for name in trainable.names)


def test_tap_only_leaves_attention_and_ffn_frozen():
    model, _ = build_model(tap_only(SMALL_TAP))
    trainable = apply_strategy(model)
    assert not any(".attn." in name or ".ffn." in name for name in trainable.names)
    assert any(name.startswith("taps.") for name in trainable.names)
    assert "layer_weights.logits" in trainable.names


def test_partition_into_trainable_and_frozen():
    for strategy in (fine_tune_top(1), serial_paired(2, bottleneck=4),
                     tap_serial(3, 2, SMALL_TAP, bottleneck=4),
                     tap_only(SMALL_TAP), serial_only(bottleneck=4)):
        model, _ = build_model(strategy)
        trainable = apply_strategy(model)
        frozen = frozen_parameters(model)
        all_names = {name for name, _ in model.named_parameters()}
        assert set(trainable.names) | set(frozen) == all_names
        assert not set(trainable.names) & set(frozen)


def test_apply_strategy_rejects_mismatched_strategy():
    model, _ = build_model(tap_only(SMALL_TAP))
    with pytest.raises(ValueError, match="differs"):
        apply_strategy(model, fine_tune_top(1))


# ---------------------------------------------------------------------------
# parameter accounting


def test_count_matches_enumeration_for_every_strategy():
    strategies = [fine_tune_top(0), fine_tune_top(2), serial_paired(2, bottleneck=4),
                  tap_serial(3, 2, SMALL_TAP, bottleneck=4),
                  tap_serial(1, 0, SMALL_TAP, bottleneck=4),
                  tap_only(SMALL_TAP), serial_only(bottleneck=4)]
    for strategy in strategies:
        for task in ("classifier", "ctc"):
            model, spec = build_model(strategy, task=task)
            trainable = apply_strategy(model)
            counted = count_learnable_params(strategy, SMALL, spec)
            assert counted.trainable == trainable.total, strategy.label()
            total = sum(p.data.size for _, p in model.named_parameters())
            assert counted.total_model == total, strategy.label()


def test_count_matches_enumeration_for_every_variant():
    for variant in TAP_VARIANTS:
        tap = TapConfig(variant=variant, embed_dim=6, bottleneck_dim=4)
        strategy = tap_only(tap)
        model, spec = build_model(strategy)
        trainable = apply_strategy(model)
        counted = count_learnable_params(strategy, SMALL, spec)
        assert counted.trainable == trainable.total, variant


def test_full_strategy_count_closed_form_at_toy():
    # taps on all L layers + serial adapters on L-1 + L weights + encoder LNs
    tap = TapConfig(variant="full", embed_dim=16, bottleneck_dim=8)
    strategy = tap_serial(TOY.num_layers, TOY.num_layers - 1, tap, bottleneck=8)
    counted = count_learnable_params(strategy, TOY)
    d, e, b, L = TOY.d_model, 16, 8, TOY.num_layers
    tap_each = d * e + e + 2 * e
    serial_each = (d * b + b) + (b * d + d) + 2 * d
    expected = L * tap_each + L + (L - 1) * serial_each + L * 2 * 2 * d
    assert counted.trainable == expected


def test_tap_param_table_reference_counts():
    table = tap_param_table(WAVLM_BASE)
    assert table["weight"] == 12
    assert table["ln"] == 18_432
    assert table["act_ln"] == 18_432
    assert table["fc"] == 4_724_736
    assert table["fc_act"] == 4_724_736
    assert table["fc_ln"] == 4_737_024
    assert table["full"] == 4_737_024
    assert table["skip"] == 4_749_312


def test_format_param_count_display():
    assert format_param_count(12) == "12"
    assert format_param_count(18_432) == "0.02M"
    assert format_param_count(4_724_736) == "4.72M"
    assert format_param_count(4_737_024) == "4.74M"
    assert format_param_count(4_749_312) == "4.75M"


def test_backbone_params_matches_instantiation():
    bb = Backbone(SMALL, rngmod.stream(20, "bb"))
    assert backbone_params(SMALL) == sum(p.data.size for p in bb.parameters())


# ---------------------------------------------------------------------------
# assembled model behavior


def test_model_without_taps_consumes_top_layer():
    strategy = fine_tune_top(1)
    model, _ = build_model(strategy, seed=21)
    feats = Tensor(np.random.default_rng(21).standard_normal((4, SMALL.input_dim)).astype(np.float32))
    logits, emb = model.forward(feats)
    _, outputs = model.backbone.forward(feats)
    expected_logits, expected_emb = model.head(outputs[-1])
    np.testing.assert_array_equal(logits.data, expected_logits.data)
    np.testing.assert_array_equal(emb.data, expected_emb.data)


def test_adapter_machinery_strictly_additive_at_init():
    # freshly built serial adapters are identities and taps start as a
    # uniform mixture, so a taps-equipped forward with the weight variant
    # over one layer reduces to the plain top-layer path
    strategy = tap_serial(1, 2, TapConfig(variant="weight"), bottleneck=4)
    model, _ = build_model(strategy, seed=22)
    feats = Tensor(np.random.default_rng(22).standard_normal((4, SMALL.input_dim)).astype(np.float32))
    logits, _ = model.forward(feats)
    _, outputs = model.backbone.forward(feats)
    expected, _ = model.head(outputs[-1])
    np.testing.assert_allclose(logits.data, expected.data, atol=1e-6)
