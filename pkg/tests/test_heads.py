import itertools

import numpy as np
import pytest

from layertap import rng as rngmod
from layertap.gradcheck import grad_check
from layertap.heads import (
    BLANK,
    ClassifierHead,
    CtcHead,
    HeadSpec,
    ctc_greedy_decode,
    ctc_loss,
    head_param_count,
    make_head,
)
from layertap.tensor import Tensor, tsum


# ---------------------------------------------------------------------------
# brute-force alignment oracle: enumerate every frame-label path, collapse,
# and sum the probabilities of the paths that produce the target


def collapse(path):
    out = []
    prev = None
    for p in path:
        if p != prev and p != BLANK:
            out.append(p)
        prev = p
    return out


def ctc_oracle(logits: np.ndarray, targets: list[int]) -> float:
    lp = logits - logits.max(axis=1, keepdims=True)
    lp = lp - np.log(np.exp(lp).sum(axis=1, keepdims=True))
    steps, width = lp.shape
    total = -np.inf
    for path in itertools.product(range(width), repeat=steps):
        if collapse(path) == targets:
            total = np.logaddexp(total, sum(lp[t, path[t]] for t in range(steps)))
    return -total


def rand_logits(rng, steps, width, scale=1.0):
    return rng.standard_normal((steps, width)) * scale


# ---------------------------------------------------------------------------
# ctc_loss


def test_single_frame_single_label():
    logits = np.array([[0.2, 1.1, -0.4]])
    lp = logits - np.log(np.exp(logits).sum())
    loss = ctc_loss(Tensor(logits, dtype=np.float64), [1])
    np.testing.assert_allclose(loss.item(), -lp[0, 1], rtol=1e-12)


def test_two_frames_empty_target_is_all_blank_path():
    rng = np.random.default_rng(0)
    logits = rand_logits(rng, 2, 4)
    lp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    loss = ctc_loss(Tensor(logits, dtype=np.float64), [])
    np.testing.assert_allclose(loss.item(), -(lp[0, BLANK] + lp[1, BLANK]), rtol=1e-12)


def test_matches_enumeration_t4_v3():
    rng = np.random.default_rng(1)
    for _ in range(10):
        logits = rand_logits(rng, 4, 4)
        loss = ctc_loss(Tensor(logits, dtype=np.float64), [1, 2])
        np.testing.assert_allclose(loss.item(), ctc_oracle(logits, [1, 2]), atol=1e-9)


def test_matches_enumeration_random_shapes():
    rng = np.random.default_rng(2)
    for _ in range(25):
        vocab = int(rng.integers(1, 4))
        steps = int(rng.integers(1, 7))
        target = []
        while True:
            length = int(rng.integers(0, 4))
            target = [int(rng.integers(1, vocab + 1)) for _ in range(length)]
            repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
            if steps >= length + repeats:
                break
        logits = rand_logits(rng, steps, vocab + 1, scale=float(rng.uniform(0.3, 3.0)))
        loss = ctc_loss(Tensor(logits, dtype=np.float64), target)
        np.testing.assert_allclose(loss.item(), ctc_oracle(logits, target), atol=1e-9)


def test_loss_is_nonnegative():
    rng = np.random.default_rng(3)
    for _ in range(20):
        logits = rand_logits(rng, 5, 4, scale=float(rng.uniform(0.1, 5.0)))
        assert ctc_loss(Tensor(logits, dtype=np.float64), [1, 2]).item() >= 0.0


def test_swapping_distinct_labels_changes_loss():
    rng = np.random.default_rng(4)
    changed = 0
    for _ in range(10):
        logits = rand_logits(rng, 5, 4)
        a = ctc_loss(Tensor(logits, dtype=np.float64), [1, 2]).item()
        b = ctc_loss(Tensor(logits, dtype=np.float64), [2, 1]).item()
        changed += a != b
    assert changed == 10


def test_extreme_logits_stay_finite():
    rng = np.random.default_rng(5)
    for scale in (1.0, 50.0, 500.0):
        logits = rand_logits(rng, 6, 4, scale=scale)
        value = ctc_loss(Tensor(logits, dtype=np.float64), [1, 3]).item()
        assert np.isfinite(value)


def test_infeasible_target_rejected():
    logits = np.zeros((2, 3))
    with pytest.raises(ValueError, match="infeasible"):
        ctc_loss(Tensor(logits), [1, 1])  # needs T >= 3 with the repeat
    with pytest.raises(ValueError, match="infeasible"):
        ctc_loss(Tensor(np.zeros((1, 3))), [1, 2])


def test_label_out_of_range_rejected():
    with pytest.raises(ValueError, match="out of range"):
        ctc_loss(Tensor(np.zeros((3, 3))), [2, 3])
    with pytest.raises(ValueError, match="out of range"):
        ctc_loss(Tensor(np.zeros((3, 3))), [0])


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)
    logits = Tensor(rand_logits(rng, 5, 4), dtype=np.float64, requires_grad=True)
    err = grad_check(lambda: ctc_loss(logits, [1, 2, 1]), [logits])
    assert err < 1e-4


# ---------------------------------------------------------------------------
# greedy decoding


def test_decode_collapse_rule():
    # frame argmaxes blank,a,a,blank,a -> a,a
    logits = np.array([
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 1.0, 0.0],
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
    ])
    assert ctc_greedy_decode(logits) == [1, 1]


def test_decode_all_blanks_empty():
    logits = np.tile(np.array([5.0, 0.0, 0.0]), (4, 1))
    assert ctc_greedy_decode(logits) == []


def test_decode_ties_break_toward_lowest_index():
    logits = np.zeros((3, 4))  # every frame ties -> argmax 0 (blank)
    assert ctc_greedy_decode(logits) == []


def test_decode_recovers_sharpened_path():
    rng = np.random.default_rng(7)
    for _ in range(10):
        steps = int(rng.integers(3, 9))
        path = rng.integers(0, 4, size=steps)
        logits = rng.standard_normal((steps, 4))
        logits[np.arange(steps), path] += 50.0  # sharpen toward the path
        assert ctc_greedy_decode(logits) == collapse(path.tolist())


# ---------------------------------------------------------------------------
# classifier head


def test_classifier_single_frame_is_plain_mlp():
    head = ClassifierHead(6, 3, rngmod.stream(8, "head"))
    x = np.random.default_rng(8).standard_normal((1, 6)).astype(np.float32)
    logits, emb = head(Tensor(x))
    hidden = x @ head.fc1.w.data + head.fc1.b.data
    np.testing.assert_allclose(emb.data, hidden[0], atol=1e-6)
    np.testing.assert_allclose(
        logits.data, (hidden @ head.fc2.w.data + head.fc2.b.data)[0], atol=1e-6
    )


def test_classifier_duplicated_frames_match_single():
    head = ClassifierHead(6, 3, rngmod.stream(9, "head"))
    x = np.random.default_rng(9).standard_normal((1, 6)).astype(np.float32)
    once_logits, once_emb = head(Tensor(x))
    twice_logits, twice_emb = head(Tensor(np.vstack([x, x])))
    np.testing.assert_allclose(twice_logits.data, once_logits.data, atol=1e-6)
    np.testing.assert_allclose(twice_emb.data, once_emb.data, atol=1e-6)


def test_classifier_pooling_is_frame_order_invariant():
    head = ClassifierHead(5, 4, rngmod.stream(10, "head"))
    x = np.random.default_rng(10).standard_normal((7, 5)).astype(np.float32)
    logits, emb = head(Tensor(x))
    perm = np.random.default_rng(11).permutation(7)
    logits_p, emb_p = head(Tensor(x[perm]))
    np.testing.assert_allclose(logits_p.data, logits.data, atol=1e-6)
    np.testing.assert_allclose(emb_p.data, emb.data, atol=1e-6)


def test_classifier_gradients():
    from layertap.tensor import cross_entropy

    head = ClassifierHead(5, 3, rngmod.stream(11, "head")).astype(np.float64)
    x = Tensor(np.random.default_rng(12).standard_normal((4, 5)), requires_grad=True)

    def f():
        logits, _ = head(x)
        return cross_entropy(logits, 1)

    err = grad_check(f, [x, head.fc1.w, head.fc1.b, head.fc2.w, head.fc2.b])
    assert err < 1e-5


def test_classifier_rejects_empty_sequence():
    head = ClassifierHead(5, 3, rngmod.stream(13, "head"))
    with pytest.raises(Exception):
        head(Tensor(np.zeros((0, 5))))


# ---------------------------------------------------------------------------
# specs and counts


def test_head_spec_validation():
    with pytest.raises(ValueError):
        HeadSpec(kind="ctc")
    with pytest.raises(ValueError):
        HeadSpec(kind="classifier", num_classes=1)
    with pytest.raises(ValueError):
        HeadSpec(kind="nope")


def test_head_param_count_matches_instantiation():
    rng = rngmod.stream(14, "head")
    for spec in (HeadSpec(kind="ctc", vocab_size=5),
                 HeadSpec(kind="classifier", num_classes=4),
                 HeadSpec(kind="classifier", num_classes=4, hidden=7)):
        head = make_head(spec, 6, rng)
        built = sum(p.data.size for p in head.parameters())
        assert head_param_count(spec, 6) == built


def test_ctc_head_output_width():
    head = CtcHead(6, 3, rngmod.stream(15, "head"))
    out = head(Tensor(np.zeros((4, 6), dtype=np.float32)))
    assert out.shape == (4, 4)
