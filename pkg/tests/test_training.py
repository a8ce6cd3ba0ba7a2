import numpy as np
import pytest

from layertap.adapters import TapConfig, fine_tune_top, serial_paired, tap_only, tap_serial
from layertap.backbone import BackboneConfig
from layertap.tasks import SyntheticTaskSpec
from layertap.tensor import Tensor, backward, mul, tsum
from layertap.training import Adam, RunConfig, RunReport, pretrained_backbone, train

# smaller than the toy preset so unit tests stay fast; acceptance runs use
# the full toy preset
FAST = BackboneConfig(num_layers=3, d_model=16, num_heads=2, d_ffn=32, input_dim=8,
                      max_seq_len=64)
FAST_TAP = TapConfig(variant="full", embed_dim=8, bottleneck_dim=4)


def fast_config(**overrides):
    defaults = dict(
        backbone=FAST,
        strategy=tap_serial(3, 2, FAST_TAP, bottleneck=4),
        task=SyntheticTaskSpec(kind="utterance_class", num_train=16, num_eval=8),
        steps=25,
        lr=1e-3,
        batch_size=4,
        seeds=(0,),
        pretrain_steps=15,
    )
    defaults.update(overrides)
    return RunConfig(**defaults)


def test_adam_minimizes_quadratic():
    w = Tensor(np.array([3.0, -2.0, 1.5]), requires_grad=True, dtype=np.float64)
    target = np.array([1.0, 1.0, 1.0])
    opt = Adam([w], lr=0.1)
    for _ in range(200):
        diff = w + Tensor(-target, dtype=np.float64)
        loss = tsum(mul(diff, diff))
        opt.zero_grad()
        backward(loss)
        opt.step()
    np.testing.assert_allclose(w.data, target, atol=1e-3)


def test_adam_skips_parameters_without_gradients():
    w = Tensor(np.array([1.0]), requires_grad=True)
    untouched = Tensor(np.array([5.0]), requires_grad=True)
    opt = Adam([w, untouched], lr=0.5)
    backward(tsum(mul(w, w)))
    opt.step()
    assert untouched.data[0] == 5.0
    assert w.data[0] != 1.0


def test_zero_steps_final_equals_initial():
    report = train(fast_config(steps=0))
    assert report.steps_run == 0
    assert report.final_metric == report.initial_metric


def test_head_only_training_reduces_loss():
    report = train(fast_config(strategy=fine_tune_top(0), steps=120,
                               task=SyntheticTaskSpec(kind="utterance_class",
                                                      num_train=16, num_eval=8,
                                                      noise=0.05)))
    assert not report.diverged
    first = np.mean(report.losses[:10])
    last = np.mean(report.losses[-10:])
    assert last < first


def test_divergence_is_flagged_not_raised():
    report = train(fast_config(lr=1e30, steps=20))
    assert report.diverged
    assert report.diverged_at is not None
    assert report.final_metric is None
    assert report.steps_run <= 20


def test_reports_are_bitwise_reproducible():
    a = train(fast_config(steps=12))
    b = train(fast_config(steps=12))
    assert a.losses == b.losses
    assert a.final_metric == b.final_metric
    assert a.initial_metric == b.initial_metric
    assert a.layer_weights == b.layer_weights
    assert a.frozen_hash_after == b.frozen_hash_after


def test_different_seeds_differ():
    a = train(fast_config(steps=12), seed=0)
    b = train(fast_config(steps=12), seed=1)
    assert a.losses != b.losses


def test_freeze_contract_smoke_across_strategies():
    for strategy in (fine_tune_top(1), serial_paired(2, bottleneck=4),
                     tap_only(FAST_TAP)):
        report = train(fast_config(strategy=strategy, steps=20))
        assert report.frozen_hash_before == report.frozen_hash_after


def test_report_accounting_fields_consistent():
    report = train(fast_config(steps=5))
    assert report.trainable_params == sum(report.param_breakdown.values())
    assert 0 < report.trainable_ratio < 1
    assert report.total_params > report.trainable_params


def test_ctc_task_trains_and_reports_wer():
    config = fast_config(
        task=SyntheticTaskSpec(kind="frame_content", num_train=16, num_eval=8),
        steps=20,
    )
    report = train(config)
    assert report.metric_name == "wer"
    assert report.initial_metric > 0
    assert not report.diverged


def test_speaker_task_reports_auxiliary_eer():
    config = fast_config(
        task=SyntheticTaskSpec(kind="utterance_speaker", num_train=16, num_eval=8),
        steps=10,
    )
    report = train(config)
    assert report.metric_name == "error_rate"
    assert "eer" in report.aux_metrics
    assert 0.0 <= report.aux_metrics["eer"] <= 1.0


def test_layer_weight_fields_only_for_tap_strategies():
    with_taps = train(fast_config(steps=5))
    assert with_taps.layer_weights is not None
    assert with_taps.tap_positions == [1, 2, 3]
    assert abs(sum(with_taps.layer_weights) - 1.0) < 1e-9
    without = train(fast_config(strategy=fine_tune_top(1), steps=5))
    assert without.layer_weights is None
    assert without.weight_centroid is None


def test_run_json_roundtrip(tmp_path):
    config = fast_config(steps=5, out_dir=str(tmp_path / "run"))
    report = train(config)
    loaded = RunReport.from_json(open(tmp_path / "run" / "run.json").read())
    assert loaded.losses == report.losses
    assert loaded.final_metric == report.final_metric
    assert loaded.strategy == report.strategy


def test_pretrained_backbone_cache_gives_fresh_copies():
    a = pretrained_backbone(FAST, seed=3, steps=5, lr=1e-3)
    b = pretrained_backbone(FAST, seed=3, steps=5, lr=1e-3)
    pa = dict(a.named_parameters())
    pb = dict(b.named_parameters())
    for name in pa:
        np.testing.assert_array_equal(pa[name].data, pb[name].data)
        assert pa[name].data is not pb[name].data
    assert all(not p.requires_grad for p in a.parameters())
