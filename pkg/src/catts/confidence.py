"""Token and sequence confidence on the negative-mean-log-probability scale.

A token's confidence is the negated mean of its top-k log-probabilities
(NMLP): 0 for a probability-1 token, growing as the distribution flattens.
A sequence's NMLP is the arithmetic mean over its tokens.  Downstream
consumers (voting weights, calibration rewards, reports) use the derived
*certainty* scale ``exp(-nmlp)`` in (0, 1], where higher means more certain;
for mean aggregation over k=1 tokens this is the geometric mean of the
top-token probabilities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import BadWindow, EmptyTopK, EmptyTrace, NegativeNmlp, PositiveLogProb

# Entries this far above zero are treated as rounding noise and accepted.
LOGPROB_TOLERANCE = 1e-9

AGGREGATION_MODES = ("mean", "tail", "min_cert", "bottom_group")


@dataclass(frozen=True)
class TokenTopK:
    """Top-k log-probabilities for one generated token, descending."""

    logprobs: tuple[float, ...]

    def __post_init__(self) -> None:
        lp = tuple(float(x) for x in self.logprobs)
        if not lp:
            raise EmptyTopK("token requires at least one log-probability")
        for x in lp:
            if not math.isfinite(x):
                raise ValueError(f"non-finite log-probability {x!r}")
            if x > LOGPROB_TOLERANCE:
                raise PositiveLogProb(f"log-probability {x} > 0")
        for a, b in zip(lp, lp[1:]):
            if b > a + LOGPROB_TOLERANCE:
                raise ValueError(f"log-probabilities not in descending order: {a} < {b}")
        object.__setattr__(self, "logprobs", lp)

    @property
    def k(self) -> int:
        return len(self.logprobs)


@dataclass(frozen=True)
class SequenceTrace:
    """One sampled generation: per-token top-k scores, text, extracted answer."""

    tokens: tuple[TokenTopK, ...]
    text: str = ""
    answer: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if not self.tokens:
            raise EmptyTrace("trace requires at least one token")

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class ConfidenceSummary:
    """Aggregated sequence confidence: raw NMLP plus derived certainty."""

    nmlp: float
    certainty: float
    mode: str


def token_nmlp(topk: TokenTopK) -> float:
    """Negated mean of the token's top-k log-probabilities; always >= 0."""
    return max(0.0, -math.fsum(topk.logprobs) / topk.k)


def sequence_nmlp(trace: SequenceTrace) -> float:
    """Arithmetic mean of per-token NMLP over the whole trace."""
    return math.fsum(token_nmlp(t) for t in trace.tokens) / len(trace)


def certainty(nmlp: float) -> float:
    """Map NMLP onto the higher-is-more-certain scale ``exp(-nmlp)``.

    Strictly decreasing bijection from [0, inf) to (0, 1].  Values within
    ``LOGPROB_TOLERANCE`` below zero are clamped; anything more negative
    raises :class:`NegativeNmlp`.
    """
    if nmlp < -LOGPROB_TOLERANCE:
        raise NegativeNmlp(f"nmlp must be non-negative, got {nmlp}")
    return math.exp(-max(0.0, nmlp))


def aggregate(
    trace: SequenceTrace,
    mode: str = "mean",
    *,
    m: int | None = None,
    eta: float | None = None,
) -> ConfidenceSummary:
    """Aggregate per-token NMLPs into a single sequence confidence.

    Modes:
      - ``mean``: arithmetic mean over all tokens (the default).
      - ``tail``: mean over the last ``m`` tokens, 1 <= m <= T.
      - ``min_cert``: the largest per-token NMLP (the least-certain token).
      - ``bottom_group``: mean of the ceil(eta*T) largest NMLPs, 0 < eta <= 1.
    """
    per_token = [token_nmlp(t) for t in trace.tokens]
    n = len(per_token)
    if mode == "mean":
        value = math.fsum(per_token) / n
        tag = "mean"
    elif mode == "tail":
        if m is None or not 1 <= m <= n:
            raise BadWindow(f"tail window m={m!r} outside [1, {n}]")
        value = math.fsum(per_token[-m:]) / m
        tag = f"tail({m})"
    elif mode == "min_cert":
        value = max(per_token)
        tag = "min_cert"
    elif mode == "bottom_group":
        if eta is None or not 0.0 < eta <= 1.0:
            raise BadWindow(f"bottom_group fraction eta={eta!r} outside (0, 1]")
        count = math.ceil(eta * n)
        worst = sorted(per_token, reverse=True)[:count]
        value = math.fsum(worst) / count
        tag = f"bottom_group({eta:g})"
    else:
        raise BadWindow(f"unknown aggregation mode {mode!r}")
    return ConfidenceSummary(nmlp=value, certainty=certainty(value), mode=tag)


def parse_aggregation(spec: str) -> tuple[str, dict]:
    """Parse a config string like ``mean``, ``tail:4`` or ``bottom_group:0.1``.

    Returns (mode, keyword arguments for :func:`aggregate`).
    """
    name, _, arg = spec.strip().partition(":")
    name = name.strip()
    if name == "mean" or name == "min_cert":
        if arg:
            raise BadWindow(f"mode {name!r} takes no parameter, got {arg!r}")
        return name, {}
    if name == "tail":
        try:
            return name, {"m": int(arg)}
        except ValueError as exc:
            raise BadWindow(f"tail window must be an integer, got {arg!r}") from exc
    if name == "bottom_group":
        try:
            return name, {"eta": float(arg)}
        except ValueError as exc:
            raise BadWindow(f"bottom_group fraction must be a number, got {arg!r}") from exc
    raise BadWindow(f"unknown aggregation mode {name!r}")


def trace_certainty(trace: SequenceTrace, aggregation: str = "mean") -> ConfidenceSummary:
    """Convenience: aggregate a trace using a config-style mode string."""
    mode, kwargs = parse_aggregation(aggregation)
    return aggregate(trace, mode, **kwargs)
