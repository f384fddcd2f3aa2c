"""Reward stack for confidence-calibration training.

A rollout's total reward is the sum of three parts: a binary output reward
(ground truth contained in the answer), a binary format reward (exactly one
terminal answer envelope), and a confidence reward that pays for certainty
dropping under input noise and for being confident exactly when correct.
Group-relative advantages and the KL-penalized objective close the loop.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Sequence

from .confidence import SequenceTrace, trace_certainty
from .errors import (
    AbsoluteContinuityViolation,
    BadHyper,
    BadPattern,
    EmptyGroundTruth,
    SupportMismatch,
)

# One terminal line of the form "Answer: <token>"; uniqueness is enforced by
# r_format, the capture group is what extract_answer returns.
DEFAULT_FORMAT_PATTERN = r"^[ \t]*Answer:[ \t]*(\S+)[ \t]*$"

DISTRIBUTION_TOLERANCE = 1e-6


@dataclass(frozen=True)
class RewardBreakdown:
    """Per-rollout reward components; ``advantage`` stays None until the
    group is complete."""

    r_conf: float
    r_output: float
    r_format: float
    total: float
    advantage: float | None = None

    @classmethod
    def build(cls, r_conf: float, r_output: float, r_format: float) -> "RewardBreakdown":
        return cls(
            r_conf=r_conf,
            r_output=r_output,
            r_format=r_format,
            total=total_reward(r_conf, r_output, r_format),
        )

    def with_advantage(self, advantage: float) -> "RewardBreakdown":
        return RewardBreakdown(
            self.r_conf, self.r_output, self.r_format, self.total, advantage
        )

    def to_dict(self) -> dict:
        return {
            "r_conf": self.r_conf,
            "r_output": self.r_output,
            "r_format": self.r_format,
            "total": self.total,
            "advantage": self.advantage,
        }


def canonicalize(text: str) -> str:
    """Case-fold and collapse whitespace for containment matching."""
    return " ".join(text.casefold().split())


def r_output(answer: str, ground_truth: str) -> float:
    """1.0 iff the canonicalized ground truth appears in the answer."""
    gt = canonicalize(ground_truth)
    if not gt:
        raise EmptyGroundTruth("ground truth empty after canonicalization")
    return 1.0 if gt in canonicalize(answer) else 0.0


def _compile(pattern: str) -> re.Pattern:
    try:
        return re.compile(pattern, re.MULTILINE)
    except re.error as exc:
        raise BadPattern(f"invalid format pattern {pattern!r}: {exc}") from exc


def r_format(text: str, format_spec: str = DEFAULT_FORMAT_PATTERN) -> float:
    """1.0 iff exactly one envelope match exists and it terminates the text."""
    rx = _compile(format_spec)
    matches = list(rx.finditer(text))
    if len(matches) != 1:
        return 0.0
    return 1.0 if text[matches[0].end():].strip() == "" else 0.0


def extract_answer(text: str, format_spec: str = DEFAULT_FORMAT_PATTERN) -> str | None:
    """Pull the answer token out of the last envelope match, if any."""
    rx = _compile(format_spec)
    matches = list(rx.finditer(text))
    if not matches:
        return None
    m = matches[-1]
    return m.group(1) if m.groups() else m.group(0).strip()


def r_conf(
    s_orig: float,
    s_noised: float,
    r_out: float,
    alpha: float,
    beta: float,
) -> float:
    """Confidence reward on the certainty scale.

    ``alpha*tanh(beta*(s_orig - s_noised))`` pays for certainty dropping when
    the input is noised; ``(2*r_out - 1)*s_orig`` pays for being certain when
    correct and uncertain when wrong.  Only the original-image rollout's
    certainty enters the calibration term.
    """
    if alpha <= 0.0 or beta <= 0.0:
        raise BadHyper(f"alpha and beta must be positive, got {alpha}, {beta}")
    for name, s in (("s_orig", s_orig), ("s_noised", s_noised)):
        if not 0.0 < s <= 1.0:
            raise ValueError(f"{name} must be in (0, 1], got {s}")
    if r_out not in (0.0, 1.0):
        raise ValueError(f"r_out must be 0 or 1, got {r_out}")
    perception = alpha * math.tanh(beta * (s_orig - s_noised))
    calibration = (2.0 * r_out - 1.0) * s_orig
    return perception + calibration


def total_reward(r_conf_value: float, r_output_value: float, r_format_value: float) -> float:
    return r_conf_value + r_output_value + r_format_value


def group_advantage(rewards: Sequence[float], eps: float = 1e-6) -> list[float]:
    """Standardize rewards within their group: (r - mean) / (std + eps).

    Uses the population standard deviation; a zero-variance group maps to all
    zeros regardless of eps, so one-element groups are well defined.
    """
    if not rewards:
        raise ValueError("advantage normalization needs at least one reward")
    if eps < 0.0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    n = len(rewards)
    mean = math.fsum(rewards) / n
    var = math.fsum((r - mean) ** 2 for r in rewards) / n
    std = math.sqrt(var)
    if std == 0.0:
        return [0.0] * n
    return [(r - mean) / (std + eps) for r in rewards]


def kl_divergence(p_probs: Sequence[float], q_probs: Sequence[float]) -> float:
    """Kullback-Leibler divergence sum(p * ln(p/q)), with 0*ln(0/q) = 0."""
    if len(p_probs) != len(q_probs):
        raise SupportMismatch(
            f"distributions have different support sizes: {len(p_probs)} vs {len(q_probs)}"
        )
    for name, dist in (("p", p_probs), ("q", q_probs)):
        if any(x < 0.0 for x in dist):
            raise ValueError(f"{name} has negative mass")
        if abs(math.fsum(dist) - 1.0) > DISTRIBUTION_TOLERANCE:
            raise ValueError(f"{name} does not sum to 1: {math.fsum(dist)}")
    terms = []
    for p, q in zip(p_probs, q_probs):
        if p == 0.0:
            continue
        if q == 0.0:
            raise AbsoluteContinuityViolation("q is zero where p has mass")
        terms.append(p * math.log(p / q))
    return math.fsum(terms)


def grpo_objective(group_mean_reward: float, kl: float, beta_kl: float) -> float:
    """Group-mean reward penalized by ``beta_kl`` times the reference KL."""
    if kl < 0.0:
        raise ValueError(f"kl must be >= 0, got {kl}")
    if beta_kl < 0.0:
        raise ValueError(f"beta_kl must be >= 0, got {beta_kl}")
    return group_mean_reward - beta_kl * kl


@dataclass(frozen=True)
class RolloutPair:
    """One rollout under the original input and its noised twin."""

    orig_trace: SequenceTrace
    noised_trace: SequenceTrace

    @property
    def orig_answer(self) -> str | None:
        return self.orig_trace.answer

    @property
    def noised_answer(self) -> str | None:
        return self.noised_trace.answer


def score_rollout_pair(
    pair: RolloutPair,
    ground_truth: str,
    *,
    alpha: float,
    beta: float,
    aggregation: str = "mean",
    format_spec: str = DEFAULT_FORMAT_PATTERN,
) -> RewardBreakdown:
    """Full reward breakdown for one pair.

    Correctness, format, and the calibration term are judged on the
    original-input rollout only; the noised rollout contributes nothing but
    its certainty to the perception term.
    """
    s_orig = trace_certainty(pair.orig_trace, aggregation).certainty
    s_noised = trace_certainty(pair.noised_trace, aggregation).certainty
    r_out = r_output(pair.orig_answer or pair.orig_trace.text, ground_truth)
    r_fmt = r_format(pair.orig_trace.text, format_spec)
    return RewardBreakdown.build(
        r_conf(s_orig, s_noised, r_out, alpha, beta), r_out, r_fmt
    )
