"""Task evaluation: word error rate, equal error rate, adaptive score
normalization for verification trials, and per-class accuracies.

Conventions:

* ``eer`` sweeps the distinct scores as thresholds (accept when
  score >= threshold) and linearly interpolates between the adjacent
  thresholds where false-accept and false-reject cross. Tied scores
  collapse into a single threshold step.
* ``adaptive_s_norm`` z-scores a raw trial score against the top-K
  highest cohort scores on the enrollment and test sides and averages
  the two z-scores. Standard deviations are sample (ddof=1) ones.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np


@dataclass(frozen=True)
class TrialScore:
    enroll_id: str
    test_id: str
    score: float
    same: bool


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity of a zero vector is undefined")
    return float(np.dot(a, b) / (na * nb))


# ---------------------------------------------------------------------------
# word error rate


def wer(reference: Sequence, hypothesis: Sequence) -> float:
    """Levenshtein distance (unit costs) divided by reference length."""
    if len(reference) == 0:
        raise ValueError("reference sequence is empty")
    n, m = len(reference), len(hypothesis)
    dist = np.arange(m + 1)
    for i in range(1, n + 1):
        prev_diag = dist[0]
        dist[0] = i
        for j in range(1, m + 1):
            cur = dist[j]
            if reference[i - 1] == hypothesis[j - 1]:
                dist[j] = prev_diag
            else:
                dist[j] = 1 + min(prev_diag, dist[j - 1], cur)
            prev_diag = cur
    return float(dist[m]) / n


# ---------------------------------------------------------------------------
# equal error rate


def eer(trials: Sequence[TrialScore]) -> tuple[float, float]:
    """Rate and threshold where false-accept meets false-reject."""
    same = np.array([t.score for t in trials if t.same], dtype=np.float64)
    diff = np.array([t.score for t in trials if not t.same], dtype=np.float64)
    if same.size == 0 or diff.size == 0:
        raise ValueError("eer needs at least one same and one different trial")

    thresholds = np.unique(np.concatenate([same, diff]))
    # sentinel above every score: reject-all endpoint (FAR 0, FRR 1)
    span = max(1.0, float(thresholds[-1] - thresholds[0]))
    thresholds = np.append(thresholds, thresholds[-1] + 1e-6 * span)

    far = np.array([(diff >= t).mean() for t in thresholds])
    frr = np.array([(same < t).mean() for t in thresholds])
    gap = far - frr  # nonincreasing in the threshold
    for i, g in enumerate(gap):
        if g == 0.0:
            return float(far[i]), float(thresholds[i])
        if g < 0.0:
            # crossed between i-1 and i (i > 0 because gap starts at +1)
            g0, g1 = gap[i - 1], gap[i]
            t = g0 / (g0 - g1)
            rate = far[i - 1] + t * (far[i] - far[i - 1])
            thr = thresholds[i - 1] + t * (thresholds[i] - thresholds[i - 1])
            return float(rate), float(thr)
    raise AssertionError("threshold sweep found no crossing")


# ---------------------------------------------------------------------------
# adaptive s-norm


def adaptive_s_norm(
    raw: float,
    enroll_cohort_scores: Sequence[float],
    test_cohort_scores: Sequence[float],
    k: int,
) -> float:
    """Average of the two top-K cohort z-scores of a raw trial score."""
    if k < 1:
        raise ValueError("k must be at least 1")
    if len(enroll_cohort_scores) < k or len(test_cohort_scores) < k:
        raise ValueError("cohort smaller than k")

    def stats(scores):
        top = np.sort(np.asarray(scores, dtype=np.float64))[-k:]
        mu = float(top.mean())
        sd = float(top.std(ddof=1)) if k > 1 else 0.0
        if sd == 0.0:
            raise ValueError("degenerate cohort: zero variance among top-k scores")
        return mu, sd

    mu_e, sd_e = stats(enroll_cohort_scores)
    mu_t, sd_t = stats(test_cohort_scores)
    return 0.5 * ((raw - mu_e) / sd_e + (raw - mu_t) / sd_t)


# ---------------------------------------------------------------------------
# accuracies


def accuracy(pred: Sequence[int], gold: Sequence[int]) -> float:
    if len(pred) != len(gold) or len(gold) == 0:
        raise ValueError("pred and gold must be equal-length and non-empty")
    return float(np.mean(np.asarray(pred) == np.asarray(gold)))


def weighted_accuracy(pred: Sequence[int], gold: Sequence[int], num_classes: int) -> float:
    """Unweighted mean over classes of the per-class accuracy."""
    if len(pred) != len(gold) or len(gold) == 0:
        raise ValueError("pred and gold must be equal-length and non-empty")
    pred = np.asarray(pred)
    gold = np.asarray(gold)
    rates = []
    for c in range(num_classes):
        sel = gold == c
        if not sel.any():
            raise ValueError(f"class {c} absent from gold labels")
        rates.append(float((pred[sel] == c).mean()))
    return float(np.mean(rates))


# ---------------------------------------------------------------------------
# trial list files and score output

_SAME_LABELS = {"1", "same", "target"}
_DIFF_LABELS = {"0", "different", "nontarget"}


def read_trial_list(path: str) -> list[tuple[bool, str, str]]:
    """One trial per line: ``label enroll_id test_id``."""
    trials = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 'label enroll_id test_id'")
            label = parts[0].lower()
            if label in _SAME_LABELS:
                same = True
            elif label in _DIFF_LABELS:
                same = False
            else:
                raise ValueError(f"{path}:{lineno}: unknown label {parts[0]!r}")
            trials.append((same, parts[1], parts[2]))
    return trials


def score_trials(
    trials: Iterable[tuple[bool, str, str]],
    embeddings: Mapping[str, np.ndarray],
    cohort: Sequence[np.ndarray] | None = None,
    k: int | None = None,
) -> list[tuple[TrialScore, float]]:
    """Cosine-score trials, optionally s-normalized against a cohort.

    Returns (raw trial, normalized score) pairs; without a cohort the
    normalized score equals the raw one.
    """
    cohort_arr = None
    if cohort is not None:
        cohort_arr = [np.asarray(c, dtype=np.float64) for c in cohort]
        if k is None:
            k = min(10, len(cohort_arr))
    out = []
    for same, enroll_id, test_id in trials:
        e = embeddings[enroll_id]
        t = embeddings[test_id]
        raw = cosine_similarity(e, t)
        if cohort_arr is None:
            norm = raw
        else:
            enroll_side = [cosine_similarity(e, c) for c in cohort_arr]
            test_side = [cosine_similarity(t, c) for c in cohort_arr]
            norm = adaptive_s_norm(raw, enroll_side, test_side, k)
        out.append((TrialScore(enroll_id, test_id, raw, same), norm))
    return out


def write_score_csv(path: str, scored: Sequence[tuple[TrialScore, float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["enroll_id", "test_id", "raw", "normalized"])
        for trial, norm in scored:
            writer.writerow([trial.enroll_id, trial.test_id, repr(trial.score), repr(norm)])
