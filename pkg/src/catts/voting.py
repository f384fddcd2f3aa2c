"""The shared answer-score dictionary every scaling module contributes to.

Internal self-consistency votes are certainty-weighted and L1-normalized, the
expert voter's ballot is merged in with weight ``tau``, and reflection /
self-check add their single answers with their own weights.  Contributions are
pure additions, so module order never changes the final scores; provenance
entries record which module added what, which lets reports attribute the final
answer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

from .errors import (
    BallotMismatch,
    EmptyTally,
    NoSamples,
    UnnormalizedBallot,
    ZeroMass,
)

# Parsed expert ballots are renormalized before use, so by the time a ballot
# reaches the tally its mass must be unit to this tolerance.
BALLOT_SUM_TOLERANCE = 1e-3

INTERNAL_TAG = "consistency"


class Provenance(NamedTuple):
    tag: str
    candidate: str
    delta: float


@dataclass(frozen=True)
class WeightedSample:
    """One sampled answer with its certainty-scale voting weight."""

    answer: str
    weight: float

    def __post_init__(self) -> None:
        if not 0.0 < self.weight <= 1.0:
            raise ValueError(f"weight must be in (0, 1], got {self.weight}")


@dataclass(frozen=True)
class VoteTally:
    """Candidate scores plus an append-only provenance log.

    Invariant: every score is non-negative and equals the sum of its
    provenance deltas.
    """

    scores: dict[str, float] = field(default_factory=dict)
    provenance: tuple[Provenance, ...] = ()

    def total(self) -> float:
        return math.fsum(self.scores.values())

    def internal_count(self, candidate: str) -> int:
        return sum(
            1
            for p in self.provenance
            if p.tag == INTERNAL_TAG and p.candidate == candidate
        )

    def to_dict(self) -> dict:
        return {
            "scores": dict(sorted(self.scores.items())),
            "provenance": [list(p) for p in self.provenance],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "VoteTally":
        return cls(
            scores=dict(payload["scores"]),
            provenance=tuple(Provenance(*p) for p in payload["provenance"]),
        )


def internal_vote(samples: Sequence[WeightedSample]) -> VoteTally:
    """Sum sample weights by answer: the certainty-weighted internal vote."""
    if not samples:
        raise NoSamples("internal vote requires at least one sample")
    scores: dict[str, float] = {}
    log: list[Provenance] = []
    for s in samples:
        scores[s.answer] = scores.get(s.answer, 0.0) + s.weight
        log.append(Provenance(INTERNAL_TAG, s.answer, s.weight))
    return VoteTally(scores=scores, provenance=tuple(log))


def normalize(tally: VoteTally) -> VoteTally:
    """Divide every score (and provenance delta) by the total mass."""
    total = tally.total()
    if total <= 0.0:
        raise ZeroMass("cannot normalize a tally with zero total score")
    scores = {k: v / total for k, v in tally.scores.items()}
    log = tuple(Provenance(p.tag, p.candidate, p.delta / total) for p in tally.provenance)
    return VoteTally(scores=scores, provenance=log)


def merge_expert(
    tally: VoteTally,
    ballot: Sequence[tuple[str, float]],
    tau: float,
    candidates: Iterable[str] | None = None,
    tag: str = "expert",
) -> VoteTally:
    """Add ``tau * c_k`` for each ballot entry, creating absent candidates.

    The ballot must cover each candidate exactly once and sum to 1 within
    ``BALLOT_SUM_TOLERANCE``; it is rescaled to exactly unit mass before
    applying so the tally gains exactly ``tau`` total.  When ``candidates``
    is given, the ballot keys must equal that set.
    """
    if tau < 0.0:
        raise ValueError(f"expert weight tau must be >= 0, got {tau}")
    keys = [c for c, _ in ballot]
    if len(set(keys)) != len(keys):
        raise BallotMismatch(f"duplicate candidates in ballot: {keys}")
    if candidates is not None and set(keys) != set(candidates):
        raise BallotMismatch(
            f"ballot covers {sorted(keys)}, expected {sorted(set(candidates))}"
        )
    mass = math.fsum(c for _, c in ballot)
    if abs(mass - 1.0) > BALLOT_SUM_TOLERANCE:
        raise UnnormalizedBallot(f"ballot confidences sum to {mass}, expected 1")
    if tau == 0.0:
        return tally

    scores = dict(tally.scores)
    log = list(tally.provenance)
    for cand, conf in ballot:
        delta = tau * (conf / mass)
        scores[cand] = scores.get(cand, 0.0) + delta
        log.append(Provenance(tag, cand, delta))
    return VoteTally(scores=scores, provenance=tuple(log))


def add_weighted(tally: VoteTally, answer: str, tau: float, tag: str) -> VoteTally:
    """Increment one answer's score by ``tau``, initializing it if absent."""
    if tau < 0.0:
        raise ValueError(f"vote weight tau must be >= 0, got {tau}")
    if tau == 0.0:
        return tally
    scores = dict(tally.scores)
    scores[answer] = scores.get(answer, 0.0) + tau
    return VoteTally(
        scores=scores,
        provenance=tally.provenance + (Provenance(tag, answer, tau),),
    )


def combine(tallies: Sequence[VoteTally]) -> VoteTally:
    """Deterministic index-ordered reduction of staged module contributions."""
    scores: dict[str, float] = {}
    log: list[Provenance] = []
    for t in tallies:
        for k, v in t.scores.items():
            scores[k] = scores.get(k, 0.0) + v
        log.extend(t.provenance)
    return VoteTally(scores=scores, provenance=tuple(log))


def final_answer(tally: VoteTally) -> str:
    """Select the maximum-score candidate.

    Ties break toward the candidate with more internal-vote provenance
    entries, then toward the lexicographically smallest candidate.
    """
    if not tally.scores:
        raise EmptyTally("no candidates to select from")
    # max() keeps the first encountered on key ties, so sort candidates into
    # the desired tie-break order and rely on strict score comparison.
    ordered = sorted(
        tally.scores,
        key=lambda c: (-tally.internal_count(c), c),
    )
    best = ordered[0]
    for cand in ordered[1:]:
        if tally.scores[cand] > tally.scores[best]:
            best = cand
    return best
