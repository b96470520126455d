"""Ranking margin loss and the annealing schedules for the regularizer weight."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .. import autodiff as ad

PAIRWISE, LITERAL = "pairwise", "literal"
SCHEDULES = ("exp", "log", "linear", "constant")


def margin_terms(pos: ad.Tensor, neg: ad.Tensor, alpha: float, mode: str = PAIRWISE) -> ad.Tensor:
    """Margin loss over a (P,) vector of positive scores and a (P, M) negative grid.

    ``pairwise`` sums one hinge per negative; ``literal`` puts the sum of the
    negatives inside a single hinge per positive.
    """
    if neg.ndim != 2 or neg.shape[1] < 1:
        raise ValueError("every positive needs at least one negative")
    if mode == PAIRWISE:
        return ad.hinge(neg - pos.reshape(-1, 1) + alpha).sum()
    if mode == LITERAL:
        return ad.hinge(neg.sum(axis=1) - pos + alpha).sum()
    raise ValueError(f"unknown margin mode {mode!r}")


def margin_loss(positive_scores: Sequence[float], negative_scores: Sequence[Sequence[float]],
                alpha: float, mode: str = PAIRWISE) -> float:
    if len(positive_scores) != len(negative_scores):
        raise ValueError("one list of negatives is required per positive")
    total = 0.0
    for s_i, negs in zip(positive_scores, negative_scores):
        if len(negs) == 0:
            raise ValueError("empty negative list")
        pos = ad.Tensor(np.array([s_i], dtype=np.float64))
        neg = ad.Tensor(np.asarray(negs, dtype=np.float64).reshape(1, -1))
        total += margin_terms(pos, neg, alpha, mode).item()
    return total


def lambda_schedule(kind: str, gamma: float, t: int, total_steps: int) -> float:
    """Weight of the alignment loss at step ``t`` of ``total_steps``.

    exp: ``exp((t/T - 1) * gamma)``; log: ``1 - exp(-(t/T) * gamma)``;
    linear: ``t/T``; constant: 1.
    """
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if t < 0 or t > total_steps:
        raise ValueError(f"step {t} outside [0, {total_steps}]")
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    r = t / total_steps
    if kind == "exp":
        return math.exp((r - 1.0) * gamma)
    if kind == "log":
        return 1.0 - math.exp(-r * gamma)
    if kind == "linear":
        return r
    if kind == "constant":
        return 1.0
    raise ValueError(f"unknown schedule {kind!r}; expected one of {SCHEDULES}")
