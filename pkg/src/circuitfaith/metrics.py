"""Faithfulness metrics comparing a circuit's outputs against the full model's.

Logits are ``[B, T, V]`` arrays (a ``[B, V]`` array is read as one position).
Per-prompt values average over positions, so every metric has a per-prompt
form that ``FaithfulnessReport`` can summarise.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .reports import dumps

ORDERS = ("ratio_of_means", "mean_of_ratios")
METRIC_KINDS = ("kl", "mse", "logit_diff", "correct_percent", "answer_probability")
EXCLUDE_BELOW = 1e-12


class MetricError(ValueError):
    pass


def _as_btv(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, None, :]
    if x.ndim != 3:
        raise MetricError(f"expected [B, T, V] logits, got shape {x.shape}")
    return x


def _as_choices(a, B: int, T: int) -> np.ndarray:
    """Token choices as an int array ``[B, T, k]``."""
    a = np.asarray(a, dtype=np.int64)
    if a.ndim == 1:  # one token per prompt, every position
        a = a[:, None, None]
    elif a.ndim == 2:
        a = a[:, :, None] if a.shape[1] == T else a[:, None, :]
    if a.ndim != 3 or a.shape[0] != B:
        raise MetricError(f"answer array of shape {a.shape} does not fit a batch of {B}")
    return np.broadcast_to(a, (B, T, a.shape[2]))


@dataclass
class AnswerSpec:
    """Correct and incorrect answer tokens, or a regression target.

    ``correct`` / ``incorrect`` are int arrays ``[B]`` (one token per prompt),
    ``[B, T]`` (one per position) or ``[B, 1, k]`` / ``[B, T, k]`` (several tokens
    whose logits are averaged). ``valid`` masks positions out of the logit
    difference, e.g. where the clean and corrupt answers coincide.
    """

    correct: np.ndarray | None = None
    incorrect: np.ndarray | None = None
    target: np.ndarray | None = None
    valid: np.ndarray | None = None

    def __post_init__(self):
        if self.correct is None and self.target is None:
            raise MetricError("an answer spec needs correct tokens or a regression target")
        if self.correct is not None and self.incorrect is not None:
            c = np.asarray(self.correct)
            i = np.asarray(self.incorrect)
            if c.shape[:1] != i.shape[:1]:
                raise MetricError("correct and incorrect answers cover different prompts")
            c3, i3 = _pad3(c), _pad3(i)
            T = max(c3.shape[1], i3.shape[1])
            c3 = np.broadcast_to(c3, (c3.shape[0], T, c3.shape[2]))
            i3 = np.broadcast_to(i3, (i3.shape[0], T, i3.shape[2]))
            overlap = (c3[:, :, :, None] == i3[:, :, None, :]).any(axis=(2, 3))
            if self.valid is not None:
                overlap &= np.broadcast_to(np.asarray(self.valid, dtype=bool).reshape(c3.shape[0], -1),
                                           overlap.shape)
            if overlap.any():
                b, t = np.argwhere(overlap)[0]
                raise MetricError(f"prompt {b} position {t}: a token is both correct and incorrect")

    @classmethod
    def from_batch(cls, batch) -> "AnswerSpec":
        """Clean answers are correct, corrupt answers incorrect (positions where they agree are masked)."""
        if batch.regression:
            return cls(target=np.asarray(batch.clean_answers, dtype=np.float64))
        c = np.asarray(batch.clean_answers, dtype=np.int64)
        i = np.asarray(batch.corrupt_answers, dtype=np.int64)
        return cls(correct=c, incorrect=i, valid=c != i)


def _pad3(a: np.ndarray) -> np.ndarray:
    if a.ndim == 1:
        return a[:, None, None]
    if a.ndim == 2:
        return a[:, :, None]
    return a


def _answer_logit(logits: np.ndarray, choices: np.ndarray) -> np.ndarray:
    """Mean logit over each position's answer tokens, ``[B, T]``."""
    return np.take_along_axis(logits, choices, axis=2).mean(axis=2)


def _position_mask(answers: AnswerSpec, B: int, T: int) -> np.ndarray:
    if answers.valid is None:
        return np.ones((B, T), dtype=bool)
    v = np.asarray(answers.valid, dtype=bool)
    if v.ndim == 1:
        v = v[:, None]
    return np.broadcast_to(v, (B, T))


def logit_diff(logits, answers: AnswerSpec) -> np.ndarray:
    """Per-prompt correct-minus-incorrect logit, averaged over valid positions."""
    if answers.correct is None or answers.incorrect is None:
        raise MetricError("logit difference needs correct and incorrect tokens")
    x = _as_btv(logits)
    B, T, _ = x.shape
    diff = _answer_logit(x, _as_choices(answers.correct, B, T)) - _answer_logit(
        x, _as_choices(answers.incorrect, B, T))
    mask = _position_mask(answers, B, T)
    if not mask.any(axis=1).all():
        bad = int(np.flatnonzero(~mask.any(axis=1))[0])
        raise MetricError(f"prompt {bad} has no position with distinct correct/incorrect answers")
    return np.where(mask, diff, 0.0).sum(axis=1) / mask.sum(axis=1)


@dataclass
class LogitDiffRecovered:
    percent: float
    order: str
    per_prompt: np.ndarray  # ablated/full ratio per prompt, ×100 (nan where excluded)
    excluded: list[int] = field(default_factory=list)


def logit_diff_recovered(F_logits, M_logits, answers: AnswerSpec,
                         order: str = "ratio_of_means") -> LogitDiffRecovered:
    """Percentage of the full model's (``M``) logit difference that ``F`` recovers."""
    if order not in ORDERS:
        raise MetricError(f"order must be one of {ORDERS}, got {order!r}")
    f = logit_diff(F_logits, answers)
    m = logit_diff(M_logits, answers)
    small = np.abs(m) < EXCLUDE_BELOW
    excluded = [int(i) for i in np.flatnonzero(small)]
    ratios = np.full(f.shape, np.nan)
    ratios[~small] = 100.0 * f[~small] / m[~small]
    if order == "ratio_of_means":
        denom = m.mean()
        if abs(denom) < EXCLUDE_BELOW:
            raise MetricError("mean full-model logit difference is zero; ratio of means undefined")
        return LogitDiffRecovered(float(100.0 * f.mean() / denom), order, ratios, excluded)
    if small.all():
        raise MetricError("every prompt has a zero full-model logit difference")
    return LogitDiffRecovered(float(ratios[~small].mean()), order, ratios, excluded)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def per_prompt_kl(F_logits, M_logits, direction: str = "full_to_ablated") -> np.ndarray:
    """KL(softmax(M) || softmax(F)) per prompt, mean over positions.

    ``direction="ablated_to_full"`` swaps the arguments.
    """
    f, m = _as_btv(F_logits), _as_btv(M_logits)
    if f.shape != m.shape:
        raise MetricError(f"logit shapes differ: {f.shape} vs {m.shape}")
    if direction == "ablated_to_full":
        f, m = m, f
    elif direction != "full_to_ablated":
        raise MetricError(f"unknown KL direction {direction!r}")
    lm, lf = _log_softmax(m), _log_softmax(f)
    kl = (np.exp(lm) * (lm - lf)).sum(axis=-1)
    return np.maximum(kl, 0.0).mean(axis=1)


def kl_divergence(F_logits, M_logits, direction: str = "full_to_ablated") -> float:
    return float(per_prompt_kl(F_logits, M_logits, direction).mean())


def _top_choice(logits: np.ndarray, candidates: Sequence[int] | None) -> np.ndarray:
    if candidates is None:
        return logits.argmax(axis=-1)  # first maximum, i.e. lowest id on ties
    cand = np.array(sorted(set(int(c) for c in candidates)))
    return cand[logits[..., cand].argmax(axis=-1)]


def per_prompt_correct(F_logits, answers: AnswerSpec, candidates: Sequence[int] | None = None
                       ) -> np.ndarray:
    """Fraction of positions (per prompt) whose top logit is a correct token, ×100."""
    x = _as_btv(F_logits)
    B, T, _ = x.shape
    correct = _as_choices(answers.correct, B, T)
    if candidates is not None:
        cset = set(int(c) for c in candidates)
        if not any(int(c) in cset for c in np.unique(correct)):
            raise MetricError("candidate restriction excludes every correct token")
    top = _top_choice(x, candidates)
    hit = (correct == top[:, :, None]).any(axis=2)
    return 100.0 * hit.mean(axis=1)


def correct_answer_percent(F_logits, answers: AnswerSpec, candidates: Sequence[int] | None = None
                           ) -> float:
    return float(per_prompt_correct(F_logits, answers, candidates).mean())


def per_prompt_answer_probability(F_logits, answers: AnswerSpec) -> np.ndarray:
    x = _as_btv(F_logits)
    B, T, _ = x.shape
    p = np.exp(_log_softmax(x))
    return np.take_along_axis(p, _as_choices(answers.correct, B, T), axis=2).mean(axis=(1, 2))


def answer_probability(F_logits, answers: AnswerSpec) -> float:
    return float(per_prompt_answer_probability(F_logits, answers).mean())


def per_prompt_mse(F_outputs, targets) -> np.ndarray:
    f = np.asarray(F_outputs, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != f.shape and t.ndim == f.ndim - 1 and f.shape[-1] == 1:
        t = t[..., None]
    if f.shape != t.shape:
        raise MetricError(f"output shape {f.shape} != target shape {t.shape}")
    sq = (f - t) ** 2
    return sq.reshape(sq.shape[0], -1).mean(axis=1)


def mse(F_outputs, targets) -> float:
    return float(per_prompt_mse(F_outputs, targets).mean())


# ------------------------------------------------------------------ summaries


@dataclass
class DistributionStats:
    mean: float
    median: float
    q1: float
    q3: float
    iqr: float
    min: float
    max: float
    outliers: list[int]

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("mean", "median", "q1", "q3", "iqr", "min", "max", "outliers")}


def distribution_stats(values) -> DistributionStats:
    """Quartiles by linear interpolation between order statistics; 1.5·IQR outliers."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise MetricError("no values to summarise")
    q1, med, q3 = (float(q) for q in np.quantile(v, [0.25, 0.5, 0.75], method="linear"))
    iqr = q3 - q1
    lo, hi = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    out = [int(i) for i in np.flatnonzero((v < lo) | (v > hi))]
    return DistributionStats(float(v.mean()), med, q1, q3, iqr, float(v.min()), float(v.max()), out)


@dataclass
class FaithfulnessReport:
    kind: str
    per_prompt: np.ndarray
    spec_fingerprint: str
    value: float
    excluded: list[int] = field(default_factory=list)

    @property
    def stats(self) -> DistributionStats:
        keep = np.isfinite(self.per_prompt)
        return distribution_stats(self.per_prompt[keep])

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "value": self.value,
            "spec_fingerprint": self.spec_fingerprint,
            "excluded_prompts": list(self.excluded),
            "aggregate": self.stats.to_dict(),
            "per_prompt": [None if not math.isfinite(x) else float(x) for x in self.per_prompt],
        }

    def to_json(self) -> str:
        return dumps(self.to_dict())

    def per_prompt_csv(self) -> str:
        buf = io.StringIO(newline="")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["prompt_id", self.kind])
        for i, x in enumerate(self.per_prompt):
            w.writerow([i, repr(float(x))])
        return buf.getvalue()


def faithfulness(kind: str, full, ablated, answers: AnswerSpec | None = None,
                 spec_fingerprint: str = "", order: str = "mean_of_ratios",
                 candidates: Sequence[int] | None = None) -> FaithfulnessReport:
    """Report how closely ``ablated`` outputs track ``full`` under metric ``kind``.

    ``mse`` is measured against the full model's outputs, not the oracle target,
    so that it measures the circuit rather than the model.
    """
    if kind == "kl":
        pp = per_prompt_kl(ablated, full)
        return FaithfulnessReport(kind, pp, spec_fingerprint, float(pp.mean()))
    if kind == "mse":
        pp = per_prompt_mse(ablated, full)
        return FaithfulnessReport(kind, pp, spec_fingerprint, float(pp.mean()))
    if answers is None:
        raise MetricError(f"metric {kind!r} needs an answer spec")
    if kind == "logit_diff":
        res = logit_diff_recovered(ablated, full, answers, order)
        return FaithfulnessReport(kind, res.per_prompt, spec_fingerprint, res.percent, res.excluded)
    if kind == "correct_percent":
        pp = per_prompt_correct(ablated, answers, candidates)
        return FaithfulnessReport(kind, pp, spec_fingerprint, float(pp.mean()))
    if kind == "answer_probability":
        pp = per_prompt_answer_probability(ablated, answers)
        return FaithfulnessReport(kind, pp, spec_fingerprint, float(pp.mean()))
    raise MetricError(f"unknown metric {kind!r}; expected one of {METRIC_KINDS}")


def divergence(kind: str, full, ablated) -> np.ndarray:
    """Per-prompt divergence of ``ablated`` from ``full``: KL for logits, MSE for regression."""
    if kind == "kl":
        return per_prompt_kl(ablated, full)
    if kind == "mse":
        return per_prompt_mse(ablated, full)
    raise MetricError(f"divergence must be 'kl' or 'mse', got {kind!r}")
