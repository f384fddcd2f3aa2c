import pytest
from hypothesis import given, strategies as st

from catts.errors import CritiqueUnavailable
from catts.experts import (
    DEFAULT_SCHEDULE,
    MODULES,
    critique,
    parse_ballot,
    parse_schedule,
    plan,
    vote,
)

from conftest import ScriptedBackend, always_failing_backend


# --- schedule parsing ---


def test_parse_schedule_orders():
    assert parse_schedule("check, consistency, reflection") == (
        "check",
        "consistency",
        "reflection",
    )
    assert parse_schedule("reflection -> check -> consistency") == (
        "reflection",
        "check",
        "consistency",
    )


def test_parse_schedule_rejects_duplicates_and_gaps():
    assert parse_schedule("consistency, consistency, check") is None
    assert parse_schedule("consistency, reflection") is None
    assert parse_schedule("") is None


def test_parse_schedule_case_insensitive_prose():
    text = "Run Consistency first, then Reflection, and finish with Check."
    assert parse_schedule(text) == ("consistency", "reflection", "check")


@given(st.text(max_size=200))
def test_parse_schedule_fuzz_returns_permutation_or_none(text):
    result = parse_schedule(text)
    assert result is None or sorted(result) == sorted(MODULES)


# --- ballot parsing ---


def test_parse_ballot_single_line():
    assert parse_ballot("A: 0.7, B: 0.3", ["A", "B"]) == [("A", 0.7), ("B", 0.3)]


def test_parse_ballot_multiline_with_bullets_and_percent():
    text = "- A: 70%\n* B = 30%"
    assert parse_ballot(text, ["A", "B"]) == [("A", 0.7), ("B", 0.3)]


def test_parse_ballot_failures():
    assert parse_ballot("A: 0.7, C: 0.3", ["A", "B"]) is None  # unknown key
    assert parse_ballot("A: 0.7", ["A", "B"]) is None  # missing candidate
    assert parse_ballot("A: 0.5, A: 0.5", ["A"]) is None  # duplicate
    assert parse_ballot("here are my thoughts\nA: 1.0", ["A"]) is None  # junk line
    assert parse_ballot("A: -0.5, B: 1.5", ["A", "B"]) is None  # negative


def test_parse_ballot_preserves_candidate_order():
    assert parse_ballot("B: 0.3, A: 0.7", ["A", "B"]) == [("A", 0.7), ("B", 0.3)]


# --- voter ---


def test_vote_parses_scripted_ballot():
    backend = ScriptedBackend({"voter": ["A: 0.7, B: 0.3"]})
    assert vote(backend, None, "Q?", ["A", "B"]) == [("A", 0.7), ("B", 0.3)]


def test_vote_renormalizes_in_tolerance_sum():
    backend = ScriptedBackend({"voter": ["A: 0.69, B: 0.30"]})
    ballot = vote(backend, None, "Q?", ["A", "B"])
    assert ballot[0][1] == pytest.approx(0.696970, abs=1e-6)
    assert ballot[1][1] == pytest.approx(0.303030, abs=1e-6)
    assert sum(v for _, v in ballot) == pytest.approx(1.0, abs=1e-12)


def test_vote_retries_then_uniform():
    backend = ScriptedBackend({"voter": ["garbage"] * 10})
    ballot = vote(backend, None, "Q?", ["A", "B"], max_retries=3)
    assert ballot == [("A", 0.5), ("B", 0.5)]
    assert len(backend.calls) == 4  # initial attempt + 3 retries


def test_vote_retry_succeeds_midway():
    backend = ScriptedBackend({"voter": ["nope", "A: 1.0"]})
    assert vote(backend, None, "Q?", ["A"]) == [("A", 1.0)]
    assert len(backend.calls) == 2


def test_vote_rejects_wildly_unnormalized():
    backend = ScriptedBackend({"voter": ["A: 0.9, B: 0.9"] * 4})
    assert vote(backend, None, "Q?", ["A", "B"], max_retries=3) == [("A", 0.5), ("B", 0.5)]


def test_vote_backend_failure_falls_back_uniform():
    ballot = vote(always_failing_backend(), None, "Q?", ["A", "B", "C"], max_retries=1)
    assert ballot == [("A", 1 / 3), ("B", 1 / 3), ("C", 1 / 3)]


def test_vote_requires_candidates():
    with pytest.raises(ValueError):
        vote(ScriptedBackend({}), None, "Q?", [])


@given(
    st.lists(st.floats(min_value=0.01, max_value=1.0), min_size=2, max_size=5),
)
def test_vote_ballots_sum_to_one(weights):
    total = sum(weights)
    if not 0.95 <= total <= 1.05:
        weights = [w / total for w in weights]
    candidates = [f"c{i}" for i in range(len(weights))]
    text = ", ".join(f"{c}: {w:.6f}" for c, w in zip(candidates, weights))
    backend = ScriptedBackend({"voter": [text]})
    ballot = vote(backend, None, "Q?", candidates)
    assert [c for c, _ in ballot] == candidates
    assert sum(v for _, v in ballot) == pytest.approx(1.0, abs=1e-12)


# --- planner ---


def test_plan_parses_order():
    backend = ScriptedBackend({"planner": ["check, consistency, reflection"]})
    assert plan(backend, None, "Q?") == ("check", "consistency", "reflection")


def test_plan_duplicate_falls_back_to_default():
    backend = ScriptedBackend({"planner": ["consistency, consistency, check"] * 5})
    assert plan(backend, None, "Q?", retries=2) == DEFAULT_SCHEDULE


def test_plan_backend_failure_falls_back_to_default():
    assert plan(always_failing_backend(), None, "Q?", retries=1) == DEFAULT_SCHEDULE


def test_plan_retry_succeeds_midway():
    backend = ScriptedBackend({"planner": ["??", "reflection, consistency, check"]})
    assert plan(backend, None, "Q?") == ("reflection", "consistency", "check")


# --- critic ---


def test_critique_returns_text():
    backend = ScriptedBackend({"critic": ["  Look again at the left edge.  "]})
    assert (
        critique(backend, None, "Q?", "4", 0.5) == "Look again at the left edge."
    )


def test_critique_empty_replies_exhaust_retries():
    backend = ScriptedBackend({"critic": [""] * 10})
    with pytest.raises(CritiqueUnavailable):
        critique(backend, None, "Q?", "4", 0.5, retries=2)
    assert len(backend.calls) == 3


def test_critique_backend_failure_raises_after_retries():
    with pytest.raises(CritiqueUnavailable):
        critique(always_failing_backend(), None, "Q?", "4", 0.5, retries=1)


def test_critic_prompt_includes_question_and_answer():
    backend = ScriptedBackend({"critic": ["fine"]})
    critique(backend, None, "How many ducks?", "4", 0.512)
    prompt = backend.calls[0].prompt
    assert "How many ducks?" in prompt
    assert "4" in prompt
    assert "0.512" in prompt


def test_voter_prompt_lists_candidates():
    backend = ScriptedBackend({"voter": ["A: 1.0"]})
    vote(backend, None, "Which letter?", ["A"])
    prompt = backend.calls[0].prompt
    assert "Which letter?" in prompt
    assert "- A" in prompt


def test_operations_deterministic_given_transcript():
    def fresh():
        return ScriptedBackend(
            {
                "planner": ["check, reflection, consistency"],
                "voter": ["A: 0.6, B: 0.4"],
                "critic": ["Re-examine the shadow."],
            }
        )

    assert plan(fresh(), None, "Q?") == plan(fresh(), None, "Q?")
    assert vote(fresh(), None, "Q?", ["A", "B"]) == vote(fresh(), None, "Q?", ["A", "B"])
    assert critique(fresh(), None, "Q?", "A", 0.5) == critique(fresh(), None, "Q?", "A", 0.5)
