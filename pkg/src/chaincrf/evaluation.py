"""Span-level precision/recall/F1 and token accuracy.

Scores are micro-averaged over the whole corpus and a predicted span
counts only on an exact (start, end, type) match, the conlleval
convention.  Precision is defined as 0 when nothing is predicted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .dataio import SCHEME_BIOES, extract_spans


@dataclass
class EvalResult:
    precision: float
    recall: float
    f1: float
    token_accuracy: float
    gold_spans: int
    pred_spans: int
    correct_spans: int


def span_f1(gold, pred, scheme=SCHEME_BIOES) -> EvalResult:
    """Micro-averaged span F1 plus token accuracy over aligned corpora.

    `gold` and `pred` are lists of label-string sequences of equal
    lengths; a mismatch is reported with the sequence index.
    """
    if len(gold) != len(pred):
        raise ValueError("corpus size mismatch: %d gold vs %d predicted" % (len(gold), len(pred)))
    n_gold = n_pred = n_correct = 0
    n_tokens = n_match = 0
    for idx, (g, p) in enumerate(zip(gold, pred)):
        if len(g) != len(p):
            raise ValueError("sequence %d: length mismatch (%d vs %d)" % (idx, len(g), len(p)))
        gs = extract_spans(g, scheme)
        ps = extract_spans(p, scheme)
        n_gold += len(gs)
        n_pred += len(ps)
        n_correct += len(gs & ps)
        n_tokens += len(g)
        n_match += sum(1 for a, b in zip(g, p) if a == b)
    precision = n_correct / n_pred if n_pred else 0.0
    recall = n_correct / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    acc = n_match / n_tokens if n_tokens else 0.0
    return EvalResult(
        precision=precision, recall=recall, f1=f1, token_accuracy=acc,
        gold_spans=n_gold, pred_spans=n_pred, correct_spans=n_correct,
    )


def token_accuracy(gold, pred) -> float:
    """Fraction of positions whose labels match exactly."""
    return span_f1(gold, pred, scheme="PLAIN").token_accuracy


def mean_and_std(scores):
    """Arithmetic mean and population standard deviation (divide by N)."""
    if not scores:
        raise ValueError("empty score list")
    n = len(scores)
    mean = sum(scores) / n
    var = sum((s - mean) ** 2 for s in scores) / n
    return mean, math.sqrt(var)


def summary_line(result: EvalResult) -> str:
    return "precision=%.4f recall=%.4f f1=%.4f acc=%.4f" % (
        result.precision, result.recall, result.f1, result.token_accuracy,
    )
