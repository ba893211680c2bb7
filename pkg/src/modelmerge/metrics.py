"""Quality metrics: word error rate and classification error rate."""

from __future__ import annotations

from typing import Sequence

import numpy as np


def _tokens(x) -> list[str]:
    return x.split() if isinstance(x, str) else list(x)


def edit_distance(hyp: Sequence, ref: Sequence) -> int:
    """Levenshtein distance with unit substitution/insertion/deletion costs."""
    prev = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, 1):
        cur = [i] + [0] * len(ref)
        for j, r in enumerate(ref, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (h != r))
        prev = cur
    return prev[-1]


def wer(hypothesis, reference) -> float:
    """Edit distance over reference length.

    Strings are split on whitespace; lists of tokens are used as given.

    >>> wer("a x c", "a b c")
    0.3333333333333333
    """
    hyp, ref = _tokens(hypothesis), _tokens(reference)
    if not ref:
        raise ValueError("reference must contain at least one token")
    return edit_distance(hyp, ref) / len(ref)


def corpus_wer(hypotheses, references) -> float:
    """Total edits over total reference tokens across utterances."""
    edits = words = 0
    for hyp, ref in zip(hypotheses, references, strict=True):
        ref = _tokens(ref)
        edits += edit_distance(_tokens(hyp), ref)
        words += len(ref)
    if words == 0:
        raise ValueError("references contain no tokens")
    return edits / words


def error_rate(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError("predictions and labels differ in length")
    if predictions.size == 0:
        raise ValueError("need at least one prediction")
    return float(np.mean(predictions != labels))
