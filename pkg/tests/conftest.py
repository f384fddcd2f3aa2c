from __future__ import annotations

import math
from pathlib import Path

import pytest

from catts.backends import GenerationRequest, GenerationResult
from catts.confidence import SequenceTrace, TokenTopK
from catts.errors import TransportFailure

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture
def data_dir() -> Path:
    return DATA_DIR


def trace_from_nmlps(*nmlps: float, text: str = "", answer: str | None = None) -> SequenceTrace:
    """Trace whose per-token NMLPs are exactly the given values (k=1)."""
    return SequenceTrace(
        tokens=tuple(TokenTopK((-float(v),)) for v in nmlps),
        text=text,
        answer=answer,
    )


def trace_with_certainty(certainty: float, answer: str, text: str = "") -> SequenceTrace:
    return SequenceTrace(
        tokens=(TokenTopK((math.log(certainty),)),),
        text=text or f"Answer: {answer}",
        answer=answer,
    )


class ScriptedBackend:
    """Sequential test double: replies are served in call order per condition.

    Unlike the simulated backend (seeded draws), this one is for exercising
    retry loops, so the n-th call for a condition gets the n-th scripted
    reply.  A reply of ``TransportFailure`` raises instead of answering.
    """

    def __init__(self, replies: dict[str, list]):
        self.replies = {k: list(v) for k, v in replies.items()}
        self.calls: list[GenerationRequest] = []
        self.backend_id = "scripted"

    def generate(self, request: GenerationRequest) -> GenerationResult:
        self.calls.append(request)
        queue = self.replies.get(request.condition or "", [])
        reply = queue.pop(0) if queue else ""
        if isinstance(reply, Exception):
            raise reply
        if isinstance(reply, type) and issubclass(reply, Exception):
            raise reply("scripted failure")
        return GenerationResult(
            trace=SequenceTrace(
                tokens=(TokenTopK((-0.1,)),), text=reply, answer=None
            ),
            backend_id=self.backend_id,
        )

    def score_candidates(self, image_ref, prompt, candidates, *, question_id=None, condition=None):
        return [-1.0 for _ in candidates]


def always_failing_backend() -> ScriptedBackend:
    backend = ScriptedBackend({})
    backend.generate = _raise_transport  # type: ignore[assignment]
    return backend


def _raise_transport(request):
    raise TransportFailure("scripted outage")
