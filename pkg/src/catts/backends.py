"""Backend-neutral model access.

Two implementations of the same contract: a deterministic simulated backend
that serves scripted responses from a scenario file (the workhorse for every
correctness test), and an HTTP client for chat-completions inference servers
with per-token log-probabilities.
"""

from __future__ import annotations

import base64
import json
import logging
import os
import random
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol, Sequence

import httpx

from .confidence import SequenceTrace, TokenTopK
from .errors import (
    BackendTimeout,
    MalformedResponse,
    MissingLogprobs,
    MissingScenarioEntry,
    SchemaViolation,
    TransportFailure,
)
from .rewards import extract_answer
from .seeding import unit_uniform

log = logging.getLogger(__name__)

SCENARIO_SCHEMA_VERSION = 1
FLOOR_LOGPROB = -13.815510557964274  # ln(1e-6), score for unscripted candidates

# Conditions the pipeline routes to; scenarios may add perturbation tags.
BASE_CONDITIONS = ("original", "noised", "reflected")
EXPERT_CONDITIONS = ("planner", "voter", "critic")


@dataclass(frozen=True)
class GenerationRequest:
    """Backend-neutral sampling request.

    ``question_id`` and ``condition`` route scripted lookups in the simulated
    backend; live backends ignore them.
    """

    prompt: str
    images: tuple[str, ...] = ()
    temperature: float = 1.0
    top_k: int = 40
    max_tokens: int = 512
    seed: int = 0
    logprob_depth: int = 1
    question_id: str | None = None
    condition: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "images", tuple(self.images))
        if len(self.images) > 2:
            raise ValueError(f"at most 2 image refs supported, got {len(self.images)}")
        if self.temperature < 0.0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")
        if self.logprob_depth < 1:
            raise ValueError(f"logprob depth must be >= 1, got {self.logprob_depth}")


@dataclass(frozen=True)
class GenerationResult:
    trace: SequenceTrace
    finish_reason: str = "stop"
    latency_s: float = 0.0
    backend_id: str = ""

    def to_dict(self) -> dict:
        return {
            "text": self.trace.text,
            "answer": self.trace.answer,
            "logprobs": [list(t.logprobs) for t in self.trace.tokens],
            "finish_reason": self.finish_reason,
            "latency_s": self.latency_s,
            "backend_id": self.backend_id,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "GenerationResult":
        trace = SequenceTrace(
            tokens=tuple(TokenTopK(tuple(lp)) for lp in payload["logprobs"]),
            text=payload["text"],
            answer=payload["answer"],
        )
        return cls(
            trace=trace,
            finish_reason=payload["finish_reason"],
            latency_s=payload["latency_s"],
            backend_id=payload["backend_id"],
        )


class Backend(Protocol):
    backend_id: str

    def generate(self, request: GenerationRequest) -> GenerationResult: ...

    def score_candidates(
        self,
        image_ref: str | None,
        prompt: str,
        candidates: Sequence[str],
        *,
        question_id: str | None = None,
        condition: str | None = None,
    ) -> list[float]: ...


def fan_out(
    backend: Backend,
    request: GenerationRequest,
    n: int,
    max_inflight: int = 8,
) -> list[GenerationResult]:
    """Issue ``n`` samples with per-index derived seeds (base ^ index).

    Results come back in index order, so concurrent and sequential issuance
    are indistinguishable.
    """
    requests = [replace(request, seed=request.seed ^ i) for i in range(n)]
    if n <= 1 or max_inflight <= 1:
        return [backend.generate(r) for r in requests]
    with ThreadPoolExecutor(max_workers=min(max_inflight, n)) as pool:
        return list(pool.map(backend.generate, requests))


# --- simulated backend ---


@dataclass(frozen=True)
class ResponseVariant:
    weight: float
    text: str
    answer: str | None
    logprobs: tuple[tuple[float, ...], ...]


@dataclass(frozen=True)
class ScenarioEntry:
    variants: tuple[ResponseVariant, ...]
    candidate_scores: dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class Scenario:
    """Scripted (question id, condition) -> weighted response variants."""

    entries: dict[tuple[str, str], ScenarioEntry]
    name: str = "<dict>"


def _fail(path: str, message: str) -> SchemaViolation:
    return SchemaViolation(f"{path}: {message}")


def _parse_variant(payload: object, path: str) -> ResponseVariant:
    if not isinstance(payload, dict):
        raise _fail(path, "variant must be an object")
    weight = payload.get("weight", 1.0)
    if not isinstance(weight, (int, float)) or not weight > 0:
        raise _fail(f"{path}.weight", f"must be a positive number, got {weight!r}")
    text = payload.get("text", "")
    if not isinstance(text, str):
        raise _fail(f"{path}.text", "must be a string")
    answer = payload.get("answer")
    if answer is not None and not isinstance(answer, str):
        raise _fail(f"{path}.answer", "must be a string when present")
    raw_scripts = payload.get("logprobs", [[0.0]])
    if not isinstance(raw_scripts, list) or not raw_scripts:
        raise _fail(f"{path}.logprobs", "must be a non-empty list of token scripts")
    scripts = []
    for t, token in enumerate(raw_scripts):
        if not isinstance(token, list):
            raise _fail(f"{path}.logprobs[{t}]", "must be a list of numbers")
        try:
            scripts.append(TokenTopK(tuple(token)).logprobs)
        except (ValueError, TypeError) as exc:
            raise _fail(f"{path}.logprobs[{t}]", str(exc)) from exc
    return ResponseVariant(
        weight=float(weight),
        text=text,
        answer=answer,
        logprobs=tuple(scripts),
    )


def parse_scenario(payload: object, name: str = "<dict>") -> Scenario:
    """Validate a scenario document; failures carry the offending path."""
    if not isinstance(payload, dict):
        raise _fail("$", "scenario document must be an object")
    version = payload.get("schema_version")
    if version != SCENARIO_SCHEMA_VERSION:
        raise _fail("$.schema_version", f"expected {SCENARIO_SCHEMA_VERSION}, got {version!r}")
    raw_entries = payload.get("entries")
    if not isinstance(raw_entries, list) or not raw_entries:
        raise _fail("$.entries", "must be a non-empty list")
    entries: dict[tuple[str, str], ScenarioEntry] = {}
    for i, raw in enumerate(raw_entries):
        path = f"$.entries[{i}]"
        if not isinstance(raw, dict):
            raise _fail(path, "entry must be an object")
        qid = raw.get("id")
        condition = raw.get("condition")
        if not isinstance(qid, str) or not qid:
            raise _fail(f"{path}.id", "must be a non-empty string")
        if not isinstance(condition, str) or not condition:
            raise _fail(f"{path}.condition", "must be a non-empty string")
        if (qid, condition) in entries:
            raise _fail(path, f"duplicate entry for ({qid!r}, {condition!r})")
        raw_variants = raw.get("variants")
        if not isinstance(raw_variants, list) or not raw_variants:
            raise _fail(f"{path}.variants", "must be a non-empty list")
        variants = tuple(
            _parse_variant(v, f"{path}.variants[{j}]") for j, v in enumerate(raw_variants)
        )
        scores: dict[str, float] = {}
        raw_scores = raw.get("candidate_scores", {})
        if not isinstance(raw_scores, dict):
            raise _fail(f"{path}.candidate_scores", "must be an object")
        for cand, value in raw_scores.items():
            if not isinstance(value, (int, float)) or value > 1e-9:
                raise _fail(
                    f"{path}.candidate_scores[{cand!r}]",
                    f"must be a log-probability <= 0, got {value!r}",
                )
            scores[cand] = float(value)
        entries[(qid, condition)] = ScenarioEntry(variants=variants, candidate_scores=scores)
    return Scenario(entries=entries, name=name)


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        payload = json.loads(path.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaViolation(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return parse_scenario(payload, name=path.name)


class SimulatedBackend:
    """Deterministic test double serving scripted traces from a scenario."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.backend_id = f"simulated:{scenario.name}"

    def _entry(self, question_id: str | None, condition: str | None) -> ScenarioEntry:
        if question_id is None or condition is None:
            raise MissingScenarioEntry(
                "simulated backend needs question_id and condition on the request"
            )
        try:
            return self.scenario.entries[(question_id, condition)]
        except KeyError:
            raise MissingScenarioEntry(
                f"no scenario entry for ({question_id!r}, {condition!r})"
            ) from None

    def generate(self, request: GenerationRequest) -> GenerationResult:
        entry = self._entry(request.question_id, request.condition)
        variant = self._pick_variant(entry.variants, request.seed)
        depth = min(len(lp) for lp in variant.logprobs)
        if depth < request.logprob_depth:
            raise MissingLogprobs(
                f"scenario script depth {depth} < requested {request.logprob_depth}"
            )
        # Serve exactly the requested depth, like a live server would.
        trace = SequenceTrace(
            tokens=tuple(
                TokenTopK(lp[: request.logprob_depth]) for lp in variant.logprobs
            ),
            text=variant.text,
            answer=variant.answer if variant.answer is not None else extract_answer(variant.text),
        )
        return GenerationResult(trace=trace, backend_id=self.backend_id)

    @staticmethod
    def _pick_variant(
        variants: tuple[ResponseVariant, ...], seed: int
    ) -> ResponseVariant:
        if len(variants) == 1:
            return variants[0]
        total = sum(v.weight for v in variants)
        point = unit_uniform(seed) * total
        acc = 0.0
        for v in variants:
            acc += v.weight
            if point <= acc:
                return v
        return variants[-1]

    def score_candidates(
        self,
        image_ref: str | None,
        prompt: str,
        candidates: Sequence[str],
        *,
        question_id: str | None = None,
        condition: str | None = None,
    ) -> list[float]:
        if not candidates:
            raise ValueError("score_candidates needs at least one candidate")
        entry = self._entry(question_id, condition)
        return [entry.candidate_scores.get(c, FLOOR_LOGPROB) for c in candidates]


def simulated_load(path: str | Path) -> SimulatedBackend:
    return SimulatedBackend(load_scenario(path))


# --- HTTP chat-completions backend ---

_MIME_BY_SUFFIX = {
    ".png": "image/png",
    ".jpg": "image/jpeg",
    ".jpeg": "image/jpeg",
    ".ppm": "image/x-portable-pixmap",
    ".pgm": "image/x-portable-graymap",
}


def image_data_url(path: str | Path) -> str:
    path = Path(path)
    mime = _MIME_BY_SUFFIX.get(path.suffix.lower(), "application/octet-stream")
    payload = base64.b64encode(path.read_bytes()).decode("ascii")
    return f"data:{mime};base64,{payload}"


class HttpBackend:
    """Client for the chat-completions wire protocol with top-k logprobs.

    Retries transport failures, timeouts, and 5xx replies up to ``retries``
    times with exponential backoff plus bounded jitter; 4xx replies fail
    immediately.  Authentication comes from the CATTS_API_KEY environment
    variable when present.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        *,
        api_key: str | None = None,
        timeout: float = 60.0,
        retries: int = 2,
        backoff: float = 0.5,
        jitter: float = 0.1,
        transport: httpx.BaseTransport | None = None,
    ):
        self.model = model
        self.retries = retries
        self.backoff = backoff
        self.jitter = jitter
        self.backend_id = f"http:{base_url.rstrip('/')}"
        self._scoring_warned = False
        headers = {}
        key = api_key if api_key is not None else os.environ.get("CATTS_API_KEY")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._client = httpx.Client(
            base_url=base_url.rstrip("/"),
            timeout=timeout,
            headers=headers,
            transport=transport,
        )

    def build_generate_body(self, request: GenerationRequest) -> dict:
        parts: list[dict] = [
            {"type": "image_url", "image_url": {"url": image_data_url(ref)}}
            for ref in request.images
        ]
        parts.append({"type": "text", "text": request.prompt})
        return {
            "model": self.model,
            "messages": [{"role": "user", "content": parts}],
            "temperature": request.temperature,
            "top_k": request.top_k,
            "max_tokens": request.max_tokens,
            "logprobs": True,
            "top_logprobs": request.logprob_depth,
            "seed": request.seed,
        }

    def _post(self, body: dict) -> dict:
        last_exc: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt:
                delay = self.backoff * (2 ** (attempt - 1))
                time.sleep(delay + random.random() * self.jitter)
            try:
                response = self._client.post("/v1/chat/completions", json=body)
            except httpx.TimeoutException as exc:
                last_exc = BackendTimeout(f"request timed out: {exc}")
                continue
            except httpx.TransportError as exc:
                last_exc = TransportFailure(f"transport failure: {exc}")
                continue
            if response.status_code >= 500:
                last_exc = TransportFailure(f"server error {response.status_code}")
                continue
            if response.status_code >= 400:
                raise TransportFailure(
                    f"request rejected with status {response.status_code}"
                )
            try:
                return response.json()
            except (json.JSONDecodeError, ValueError) as exc:
                raise MalformedResponse(f"response is not JSON: {exc}") from exc
        assert last_exc is not None
        raise last_exc

    @staticmethod
    def _token_topk(entry: dict, depth: int) -> TokenTopK:
        top = entry.get("top_logprobs")
        if top:
            values = [t.get("logprob") for t in top]
        elif "logprob" in entry:
            values = [entry["logprob"]]
        else:
            raise MissingLogprobs("token entry has no log-probabilities")
        cleaned = []
        for v in values:
            if not isinstance(v, (int, float)):
                raise MalformedResponse(f"non-numeric log-probability {v!r}")
            if v > 1e-6:
                raise MalformedResponse(f"log-probability {v} > 0")
            cleaned.append(min(float(v), 0.0))
        if len(cleaned) < depth:
            raise MissingLogprobs(
                f"got {len(cleaned)} log-probabilities per token, requested {depth}"
            )
        return TokenTopK(tuple(sorted(cleaned, reverse=True)[:depth]))

    def _parse_result(
        self, payload: dict, request: GenerationRequest, latency: float
    ) -> GenerationResult:
        try:
            choice = payload["choices"][0]
            text = choice["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedResponse(f"unexpected response shape: {exc!r}") from exc
        if not isinstance(text, str):
            raise MalformedResponse(f"message content is {type(text).__name__}, not str")
        logprobs = choice.get("logprobs")
        content = logprobs.get("content") if isinstance(logprobs, dict) else None
        if not content:
            raise MissingLogprobs("response carries no logprobs.content block")
        tokens = tuple(
            self._token_topk(entry, request.logprob_depth) for entry in content
        )
        trace = SequenceTrace(tokens=tokens, text=text, answer=extract_answer(text))
        return GenerationResult(
            trace=trace,
            finish_reason=choice.get("finish_reason", "stop"),
            latency_s=latency,
            backend_id=self.backend_id,
        )

    def generate(self, request: GenerationRequest) -> GenerationResult:
        body = self.build_generate_body(request)
        start = time.monotonic()
        payload = self._post(body)
        return self._parse_result(payload, request, time.monotonic() - start)

    def score_candidates(
        self,
        image_ref: str | None,
        prompt: str,
        candidates: Sequence[str],
        *,
        question_id: str | None = None,
        condition: str | None = None,
    ) -> list[float]:
        """Generate-then-match emulation of answer-span scoring.

        The chat protocol cannot echo prompt log-probabilities, so each
        candidate is regenerated under a verbatim-repeat instruction and
        scored by the sum of its tokens' top log-probabilities; mismatched
        completions fall back to the floor score.
        """
        if not candidates:
            raise ValueError("score_candidates needs at least one candidate")
        if not self._scoring_warned:
            log.warning(
                "%s: scoring candidates by generate-then-match emulation",
                self.backend_id,
            )
            self._scoring_warned = True
        scores = []
        for cand in candidates:
            request = GenerationRequest(
                prompt=f"{prompt}\n\nReply with exactly: {cand}",
                images=(image_ref,) if image_ref else (),
                temperature=0.0,
                max_tokens=64,
                question_id=question_id,
                condition=condition,
            )
            result = self.generate(request)
            if result.trace.text.strip() == cand:
                total = sum(t.logprobs[0] for t in result.trace.tokens)
                scores.append(min(total, 0.0))
            else:
                scores.append(FLOOR_LOGPROB)
        return scores

    def close(self) -> None:
        self._client.close()


def make_backend(spec: str, *, model: str = "base-model", **http_kwargs) -> Backend:
    """Build a backend from a CLI/config spec string.

    ``simulated:<path>`` (or a bare ``*.json`` path) loads a scenario file;
    ``http://`` / ``https://`` URLs create a live client.
    """
    if spec.startswith(("http://", "https://")):
        return HttpBackend(spec, model=model, **http_kwargs)
    if spec.startswith(("simulated:", "sim:")):
        return simulated_load(spec.split(":", 1)[1])
    if spec.endswith(".json"):
        return simulated_load(spec)
    raise ValueError(
        f"cannot interpret backend spec {spec!r}; use simulated:<path> or an http(s) URL"
    )
