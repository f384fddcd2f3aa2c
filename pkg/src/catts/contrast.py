"""Contrastive answer selection between an original and a noised image.

Each candidate answer is scored as ``(1+alpha)*logP(y|original) -
alpha*logP(y|noised)``; candidates whose original-image probability falls
below ``beta`` times the best candidate's are masked out before the argmax.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .errors import EmptyInput, LengthMismatch

LOGPROB_TOLERANCE = 1e-9


@dataclass(frozen=True)
class CandidateScores:
    """Per-candidate answer-span log-probabilities under both images."""

    candidates: tuple[str, ...]
    orig_logp: tuple[float, ...]
    noised_logp: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "candidates", tuple(self.candidates))
        object.__setattr__(self, "orig_logp", tuple(float(x) for x in self.orig_logp))
        object.__setattr__(self, "noised_logp", tuple(float(x) for x in self.noised_logp))
        if not self.candidates:
            raise EmptyInput("at least one candidate required")
        if not len(self.candidates) == len(self.orig_logp) == len(self.noised_logp):
            raise LengthMismatch(
                f"{len(self.candidates)} candidates, {len(self.orig_logp)} original "
                f"scores, {len(self.noised_logp)} noised scores"
            )
        for x in self.orig_logp + self.noised_logp:
            if not math.isfinite(x) or x > LOGPROB_TOLERANCE:
                raise ValueError(f"invalid log-probability {x!r}")


def contrastive_scores(scores: CandidateScores, alpha: float) -> list[float]:
    """``(1+alpha)*orig - alpha*noised`` per candidate; alpha=0 is a no-op."""
    if alpha < 0.0:
        raise ValueError(f"contrast strength alpha must be >= 0, got {alpha}")
    return [
        (1.0 + alpha) * o - alpha * n
        for o, n in zip(scores.orig_logp, scores.noised_logp)
    ]


def plausibility_mask(orig_probs: Sequence[float], beta: float) -> list[bool]:
    """Keep candidates with probability >= beta * max probability.

    The best candidate always survives, so at least one entry is True.
    """
    if not orig_probs:
        raise EmptyInput("plausibility mask needs at least one probability")
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"plausibility cutoff beta must be in [0, 1], got {beta}")
    for p in orig_probs:
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"probability {p} outside [0, 1]")
    cutoff = beta * max(orig_probs)
    return [p >= cutoff for p in orig_probs]


def contrastive_select(
    scores: CandidateScores, alpha: float, beta: float
) -> tuple[str, float]:
    """Pick the self-check answer: masked argmax of the contrastive scores.

    Original-image log-probabilities are exponentiated and normalized across
    the candidate set before the plausibility cutoff.  Ties break toward the
    lexicographically smallest candidate.  Returns (answer, contrastive
    score).
    """
    raw = [math.exp(min(lp, 0.0)) for lp in scores.orig_logp]
    total = math.fsum(raw)
    probs = [r / total for r in raw]
    mask = plausibility_mask(probs, beta)
    contrast = contrastive_scores(scores, alpha)

    best: tuple[str, float] | None = None
    for cand, score, keep in sorted(zip(scores.candidates, contrast, mask)):
        if not keep:
            continue
        if best is None or score > best[1]:
            best = (cand, score)
    assert best is not None  # mask always keeps the max-probability candidate
    return best
