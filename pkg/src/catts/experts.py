"""Expert-model roles: Planner, Voter, and Critic.

Each role renders its prompt template, asks the expert backend, and parses
the reply with a strict line grammar.  Failures never abort a pipeline run:
the planner falls back to the default module order, the voter to a uniform
ballot, and the critic signals the reflection module to skip.
"""

from __future__ import annotations

import logging
import re
from typing import Sequence

from .backends import Backend, GenerationRequest
from .errors import BackendError, CritiqueUnavailable
from .prompts import load_template, render
from .seeding import derive_seed

log = logging.getLogger(__name__)

MODULES = ("consistency", "reflection", "check")
DEFAULT_SCHEDULE: tuple[str, ...] = MODULES

# Parsed ballots may be off by rounding (models often emit two decimals);
# anything inside this window is accepted and rescaled to exactly unit mass.
BALLOT_ACCEPT_WINDOW = 0.05

_SEGMENT_RX = re.compile(
    r"^\s*(?:[-*•]\s*)?(?P<key>.+?)\s*[:=]\s*(?P<value>[+-]?\d+(?:\.\d+)?)\s*(?P<pct>%)?\s*$"
)


def parse_schedule(text: str) -> tuple[str, ...] | None:
    """Extract a permutation of the three module tags, or None.

    Tags are matched as whole words, ordered by first occurrence; each must
    appear exactly once.
    """
    positions = []
    for tag in MODULES:
        hits = [m.start() for m in re.finditer(rf"\b{tag}\b", text, re.IGNORECASE)]
        if len(hits) != 1:
            return None
        positions.append((hits[0], tag))
    return tuple(tag for _, tag in sorted(positions))


def parse_ballot(
    text: str, candidates: Sequence[str]
) -> list[tuple[str, float]] | None:
    """Parse "candidate: number" segments into a per-candidate score map.

    Segments are split on newlines and commas and may carry markdown bullets
    or percent signs (divided by 100).  Every non-empty segment must bind a
    known candidate, each candidate exactly once; anything else is a parse
    failure (None).  Candidates containing commas are not supported by this
    grammar.
    """
    values: dict[str, float] = {}
    known = set(candidates)
    for line in text.splitlines():
        for segment in line.split(","):
            if not segment.strip():
                continue
            m = _SEGMENT_RX.match(segment)
            if m is None:
                return None
            key = m.group("key").strip().strip("*_`'\"").strip()
            if key not in known or key in values:
                return None
            value = float(m.group("value"))
            if m.group("pct"):
                value /= 100.0
            if value < 0.0:
                return None
            values[key] = value
    if set(values) != known:
        return None
    return [(c, values[c]) for c in candidates]


def _ask(
    backend: Backend,
    image_ref: str | None,
    prompt: str,
    *,
    question_id: str | None,
    condition: str,
    seed: int,
    max_tokens: int = 256,
) -> str:
    request = GenerationRequest(
        prompt=prompt,
        images=(image_ref,) if image_ref else (),
        temperature=0.0,
        max_tokens=max_tokens,
        seed=seed,
        question_id=question_id,
        condition=condition,
    )
    return backend.generate(request).trace.text


def plan(
    backend: Backend,
    image_ref: str | None,
    question: str,
    *,
    question_id: str | None = None,
    retries: int = 3,
    seed: int = 0,
) -> tuple[str, ...]:
    """Ask the planner for a module order; fall back to the default one.

    Backend failures and unparseable replies both degrade to
    ``DEFAULT_SCHEDULE`` after ``retries + 1`` attempts.
    """
    prompt = render(load_template("planner"), {"question": question})
    for attempt in range(retries + 1):
        try:
            text = _ask(
                backend,
                image_ref,
                prompt,
                question_id=question_id,
                condition="planner",
                seed=derive_seed(seed, "planner", attempt),
            )
        except BackendError as exc:
            log.warning("planner attempt %d failed (%s); will fall back", attempt + 1, exc)
            continue
        schedule = parse_schedule(text)
        if schedule is not None:
            return schedule
    log.warning("planner gave no valid permutation; using default order")
    return DEFAULT_SCHEDULE


def format_candidates(candidates: Sequence[str]) -> str:
    return "\n".join(f"- {c}" for c in candidates)


def vote(
    backend: Backend,
    image_ref: str | None,
    question: str,
    candidates: Sequence[str],
    max_retries: int = 3,
    *,
    question_id: str | None = None,
    seed: int = 0,
) -> list[tuple[str, float]]:
    """Ask the voter for per-candidate confidences summing to 1.

    Replies whose total lands within ``BALLOT_ACCEPT_WINDOW`` of 1 are
    rescaled exactly; anything else triggers a retry, and exhausted retries
    return the uniform ballot.  The result always covers exactly the input
    candidates and sums to 1 within 1e-12.
    """
    if not candidates:
        raise ValueError("voter needs at least one candidate")
    prompt = render(
        load_template("voter"),
        {"question": question, "candidates": format_candidates(candidates)},
    )
    for attempt in range(max_retries + 1):
        try:
            text = _ask(
                backend,
                image_ref,
                prompt,
                question_id=question_id,
                condition="voter",
                seed=derive_seed(seed, "voter", attempt),
            )
        except BackendError as exc:
            log.warning("voter attempt %d failed (%s)", attempt + 1, exc)
            continue
        ballot = parse_ballot(text, candidates)
        if ballot is None:
            continue
        total = sum(v for _, v in ballot)
        if abs(total - 1.0) > BALLOT_ACCEPT_WINDOW or total <= 0.0:
            continue
        return [(c, v / total) for c, v in ballot]
    log.warning("voter gave no usable ballot after %d attempts; using uniform", max_retries + 1)
    return [(c, 1.0 / len(candidates)) for c in candidates]


def critique(
    backend: Backend,
    image_ref: str | None,
    question: str,
    initial_answer: str,
    initial_certainty: float,
    *,
    question_id: str | None = None,
    retries: int = 3,
    seed: int = 0,
) -> str:
    """Ask the critic for a non-empty critique of the initial answer.

    Raises :class:`CritiqueUnavailable` after ``retries + 1`` empty or failed
    attempts; the caller skips the reflection module in that case.
    """
    prompt = render(
        load_template("critic"),
        {
            "question": question,
            "initial_answer": initial_answer,
            "initial_confidence": format(initial_certainty, ".3f"),
        },
    )
    for attempt in range(retries + 1):
        try:
            text = _ask(
                backend,
                image_ref,
                prompt,
                question_id=question_id,
                condition="critic",
                seed=derive_seed(seed, "critic", attempt),
                max_tokens=512,
            )
        except BackendError as exc:
            log.warning("critic attempt %d failed (%s)", attempt + 1, exc)
            continue
        if text.strip():
            return text.strip()
    raise CritiqueUnavailable(
        f"critic produced no critique in {retries + 1} attempts"
    )
