import itertools
import json
import math
import random
from collections import Counter

import pytest

from catts.backends import SimulatedBackend, parse_scenario, simulated_load
from catts.config import RunConfig
from catts.errors import ConfigError, DatasetError
from catts.pipeline import (
    QuestionRecord,
    Sample,
    certainty_filtered_vote,
    load_dataset,
    majority_vote,
    question_prompt,
    run_calibration,
    run_dataset,
    run_question,
    run_scaling,
)

from conftest import DATA_DIR


def scenario_backend(entries):
    return SimulatedBackend(parse_scenario({"schema_version": 1, "entries": entries}))


def single_answer_scenario(qid="q", answer="A", certainty=0.8):
    return [
        {
            "id": qid,
            "condition": "original",
            "variants": [
                {
                    "weight": 1.0,
                    "text": f"so...\nAnswer: {answer}",
                    "answer": answer,
                    "logprobs": [[math.log(certainty)]],
                }
            ],
            "candidate_scores": {answer: -0.4},
        },
        {
            "id": qid,
            "condition": "noised",
            "variants": [{"weight": 1.0, "text": "?", "answer": answer}],
            "candidate_scores": {answer: -1.5},
        },
    ]


@pytest.fixture
def fig4_backend():
    return simulated_load(DATA_DIR / "fig4_scenario.json")


@pytest.fixture
def fig4_record():
    records, _ = load_dataset(DATA_DIR / "fig4_dataset.jsonl")
    return records[0]


# --- records and datasets ---


def test_record_requires_ground_truth_in_choices():
    with pytest.raises(DatasetError):
        QuestionRecord(id="x", question="?", ground_truth="Z", choices=("A", "B"))


def test_record_rejects_unknown_fields():
    with pytest.raises(DatasetError):
        QuestionRecord.from_dict({"id": "x", "question": "?", "ground_truth": "A", "wat": 1})


def test_load_dataset_collects_bad_lines(tmp_path):
    path = tmp_path / "data.jsonl"
    path.write_text(
        '{"id": "a", "question": "?", "ground_truth": "1"}\n'
        "not json at all\n"
        '{"id": "b", "question": "?", "ground_truth": "2"}\n',
        "utf-8",
    )
    records, problems = load_dataset(path)
    assert [r.id for r in records] == ["a", "b"]
    assert len(problems) == 1 and "data.jsonl:2" in problems[0]


def test_load_dataset_empty_file(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("", "utf-8")
    with pytest.raises(DatasetError):
        load_dataset(path)


def test_question_prompt_lists_choices():
    record = QuestionRecord(id="x", question="Pick one.", ground_truth="B", choices=("A", "B"))
    prompt = question_prompt(record)
    assert "Pick one." in prompt and "- A" in prompt and "- B" in prompt
    assert "Answer:" in prompt


# --- run_question behavior ---


def test_single_sample_no_expert_degenerate():
    backend = scenario_backend(single_answer_scenario())
    record = QuestionRecord(id="q", question="?", ground_truth="A")
    config = RunConfig(n_samples=1, tau_reflection=0.0, tau_check=0.0, seed=1)
    trace = run_question(record, config, backend, expert_backend=None)
    assert trace.error is None
    assert trace.final_answer == "A"
    assert trace.schedule == ("consistency", "reflection", "check")
    assert trace.tally.total() == pytest.approx(1.0, abs=1e-9)
    assert trace.modules_run["consistency"] and not trace.modules_run["check"]


def test_check_only_pipeline_returns_check_answer():
    entries = single_answer_scenario()
    # make the check scores prefer "A" trivially; consistency is disabled
    backend = scenario_backend(entries)
    record = QuestionRecord(id="q", question="?", ground_truth="A")
    config = RunConfig(n_samples=4, modules=["check"], seed=2)
    trace = run_question(record, config, backend)
    assert trace.schedule == ("check",)
    assert trace.final_answer == trace.check_answer == "A"
    assert trace.tally.total() == pytest.approx(config.tau_check, abs=1e-12)


def test_full_stack_conservation(fig4_backend, fig4_record):
    config = RunConfig(seed=7)
    trace = run_question(fig4_record, config, fig4_backend, fig4_backend)
    assert trace.error is None
    assert all(trace.modules_run[m] for m in ("consistency", "reflection", "check"))
    assert trace.modules_run["expert_vote"]
    assert trace.tally.total() == pytest.approx(1.0 + 0.5 + 0.5 + 0.5, abs=1e-9)


def test_fig4_trajectory(fig4_backend, fig4_record):
    config = RunConfig(seed=7)
    trace = run_question(fig4_record, config, fig4_backend, fig4_backend)
    assert Counter(s.answer for s in trace.samples) == {"4": 6, "6": 2}
    by_module = {snap["module"]: snap["scores"] for snap in trace.snapshots}
    # consistency picks the wrong answer even after the expert merge
    assert by_module["consistency"]["4"] == pytest.approx(5 / 6 + 0.15, rel=1e-9)
    assert by_module["consistency"]["6"] == pytest.approx(1 / 6 + 0.35, rel=1e-9)
    # reflection flips the lead, self-check confirms it
    assert by_module["reflection"]["6"] == pytest.approx(1 / 6 + 0.35 + 0.5, rel=1e-9)
    assert by_module["check"]["6"] == pytest.approx(1 / 6 + 0.35 + 1.0, rel=1e-9)
    assert trace.check_answer == "6"
    assert trace.final_answer == "6" and trace.correct


def test_planner_order_invariance(fig4_backend, fig4_record):
    outcomes = []
    for order in itertools.permutations(("consistency", "reflection", "check")):
        config = RunConfig(seed=7, planner_order=list(order))
        trace = run_question(fig4_record, config, fig4_backend, fig4_backend)
        outcomes.append((trace.final_answer, trace.tally.scores))
    reference_answer, reference_scores = outcomes[0]
    for answer, scores in outcomes[1:]:
        assert answer == reference_answer
        assert set(scores) == set(reference_scores)
        for key in scores:
            assert scores[key] == pytest.approx(reference_scores[key], abs=1e-12)


def test_hard_backend_failure_yields_error_trace():
    backend = scenario_backend(single_answer_scenario())
    record = QuestionRecord(id="missing", question="?", ground_truth="A")
    trace = run_question(record, RunConfig(), backend)
    assert trace.error is not None and "MissingScenarioEntry" in trace.error
    assert trace.final_answer is None and not trace.correct


def test_reflection_gate_blocks_high_certainty():
    entries = single_answer_scenario(certainty=0.9)
    entries.append(
        {
            "id": "q",
            "condition": "reflected",
            "variants": [{"weight": 1.0, "text": "Answer: A", "answer": "A"}],
        }
    )
    entries.append(
        {"id": "q", "condition": "critic", "variants": [{"weight": 1.0, "text": "look"}]}
    )
    entries.append(
        {"id": "q", "condition": "voter", "variants": [{"weight": 1.0, "text": "A: 1.0"}]}
    )
    backend = scenario_backend(entries)
    record = QuestionRecord(id="q", question="?", ground_truth="A")
    gated = run_question(
        record,
        RunConfig(seed=1, certainty_gate=0.5, planner_order=["consistency", "reflection", "check"]),
        backend,
        backend,
    )
    assert not gated.modules_run["reflection"]
    assert gated.tally.total() == pytest.approx(2.0, abs=1e-9)  # 1 + tau1 + tau3
    open_gate = run_question(record, RunConfig(seed=1, certainty_gate=0.95), backend, backend)
    assert open_gate.modules_run["reflection"]


def test_timings_only_when_configured(fig4_backend, fig4_record):
    without = run_question(fig4_record, RunConfig(seed=7), fig4_backend, fig4_backend)
    assert without.timings is None
    with_timings = run_question(
        fig4_record, RunConfig(seed=7, include_timings=True), fig4_backend, fig4_backend
    )
    assert with_timings.timings is not None and with_timings.timings["total_s"] >= 0.0


# --- baselines ---


def make_sample(answer, certainty=0.5):
    return Sample(answer=answer, certainty=certainty, nmlp=1.0, text="")


def test_majority_vote_matches_mode_oracle():
    rng = random.Random(12)
    for _ in range(50):
        answers = [rng.choice("ABC") for _ in range(rng.randint(1, 15))]
        samples = [make_sample(a, rng.uniform(0.1, 1.0)) for a in answers]
        counts = Counter(answers)
        top = max(counts.values())
        oracle = min(a for a, c in counts.items() if c == top)
        assert majority_vote(samples) == oracle


def test_certainty_filter_keeps_top_fraction():
    samples = [
        make_sample("A", 0.9),
        make_sample("B", 0.8),
        make_sample("B", 0.2),
        make_sample("C", 0.1),
    ]
    # top half = {A@0.9, B@0.8}; tie broken lexicographically
    assert certainty_filtered_vote(samples, 0.5) == "A"
    assert certainty_filtered_vote(samples, 1.0) == "B"


# --- dataset runners ---


def test_run_dataset_demo12_all_correct(tmp_path):
    backend = simulated_load(DATA_DIR / "demo12_scenario.json")
    summary = run_dataset(
        DATA_DIR / "demo12_dataset.jsonl",
        RunConfig(seed=11),
        backend,
        backend,
        out_dir=tmp_path,
    )
    assert summary.accuracy == 1.0
    assert summary.n_errors == 0 and summary.n_skipped == 0
    assert summary.exit_code == 0
    lines = (tmp_path / "traces.jsonl").read_text("utf-8").splitlines()
    assert len(lines) == 12
    payload = json.loads(lines[0])
    assert payload["schema_version"] == 1
    assert (tmp_path / "summary.json").exists()


def test_run_dataset_byte_identical_reruns(tmp_path):
    backend = simulated_load(DATA_DIR / "demo12_scenario.json")
    config = RunConfig(seed=11)
    run_dataset(DATA_DIR / "demo12_dataset.jsonl", config, backend, backend, tmp_path / "a")
    run_dataset(DATA_DIR / "demo12_dataset.jsonl", config, backend, backend, tmp_path / "b")
    assert (tmp_path / "a/traces.jsonl").read_bytes() == (tmp_path / "b/traces.jsonl").read_bytes()


def test_run_dataset_skipped_lines_exit_code(tmp_path):
    backend = scenario_backend(single_answer_scenario())
    dataset = tmp_path / "data.jsonl"
    dataset.write_text(
        '{"id": "q", "question": "?", "ground_truth": "A"}\nbroken\n', "utf-8"
    )
    summary = run_dataset(dataset, RunConfig(seed=1), backend, None, tmp_path / "out")
    assert summary.n_skipped == 1
    assert summary.exit_code == 1


def test_run_dataset_counts_error_traces(tmp_path):
    backend = scenario_backend(single_answer_scenario())
    records = [
        QuestionRecord(id="q", question="?", ground_truth="A"),
        QuestionRecord(id="absent", question="?", ground_truth="A"),
    ]
    summary = run_dataset(records, RunConfig(seed=1), backend, None)
    assert summary.n_errors == 1
    assert summary.exit_code == 1
    assert summary.accuracy == 0.5


def test_run_scaling_fixture_slopes(tmp_path):
    backend = simulated_load(DATA_DIR / "scaling_scenario.json")
    records, _ = load_dataset(DATA_DIR / "scaling_dataset.jsonl")
    result = run_scaling(
        records, RunConfig(seed=5), backend, backend, [1, 4, 16], out_dir=tmp_path
    )
    assert {row["method"] for row in result.rows} == {
        "catts",
        "majority",
        "certainty_filtered",
    }
    assert result.fits["catts"]["slope"] > result.fits["majority"]["slope"]
    csv_text = (tmp_path / "scaling.csv").read_text("utf-8")
    assert csv_text.startswith("method,n,accuracy\n")
    assert (tmp_path / "scaling_summary.json").exists()


def test_run_scaling_single_n_has_no_fit():
    backend = simulated_load(DATA_DIR / "scaling_scenario.json")
    records, _ = load_dataset(DATA_DIR / "scaling_dataset.jsonl")
    result = run_scaling(records, RunConfig(seed=5), backend, backend, [8])
    assert result.fits["catts"] is None


def test_run_scaling_deterministic():
    backend = simulated_load(DATA_DIR / "scaling_scenario.json")
    records, _ = load_dataset(DATA_DIR / "scaling_dataset.jsonl")
    first = run_scaling(records, RunConfig(seed=5), backend, backend, [1, 2, 4])
    second = run_scaling(records, RunConfig(seed=5), backend, backend, [1, 2, 4])
    assert first.to_csv() == second.to_csv()


def test_run_calibration_fixture(tmp_path):
    backend = simulated_load(DATA_DIR / "calib_scenario.json")
    report = run_calibration(
        DATA_DIR / "calib_dataset.jsonl", RunConfig(seed=3), backend, out_dir=tmp_path
    )
    conditions = report["conditions"]
    assert conditions["origin"]["confidence_drop"] == 0.0
    assert conditions["noised"]["confidence_drop"] < 0.0
    assert conditions["occlusion"]["confidence_drop"] < 0.0
    assert 0.0 <= conditions["origin"]["ece"] <= 1.0
    assert (tmp_path / "calibration.json").exists()


def test_run_calibration_requires_origin():
    backend = simulated_load(DATA_DIR / "calib_scenario.json")
    records = [
        QuestionRecord(id="c_noised_1", question="?", ground_truth="K", condition="noised")
    ]
    with pytest.raises(DatasetError):
        run_calibration(records, RunConfig(seed=3), backend)


def test_run_calibration_identical_certainties_zero_drop():
    entries = []
    for condition in ("original", "noised"):
        entries.append(
            {
                "id": f"t_{condition}",
                "condition": condition,
                "variants": [
                    {
                        "weight": 1.0,
                        "text": "Answer: A",
                        "answer": "A",
                        "logprobs": [[math.log(0.8)]],
                    }
                ],
            }
        )
    backend = scenario_backend(entries)
    records = [
        QuestionRecord(id="t_original", question="?", ground_truth="A", condition="origin"),
        QuestionRecord(id="t_noised", question="?", ground_truth="A", condition="noised"),
    ]
    report = run_calibration(records, RunConfig(seed=1), backend)
    assert report["conditions"]["noised"]["confidence_drop"] == pytest.approx(0.0, abs=1e-12)


def test_run_calibration_single_condition_drop_absent():
    backend = scenario_backend(single_answer_scenario())
    records = [QuestionRecord(id="q", question="?", ground_truth="A")]
    report = run_calibration(records, RunConfig(seed=1), backend)
    assert report["conditions"]["origin"]["confidence_drop"] is None


# --- config ---


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"n_samples": 4, "banana": 1})


def test_config_load_and_defaults(tmp_path):
    path = tmp_path / "config.json"
    path.write_text('{"n_samples": 4, "tau_expert": 0.25}', "utf-8")
    config = RunConfig.load(path)
    assert config.n_samples == 4
    assert config.tau_expert == 0.25
    assert config.temperature == 1.0
    assert config.top_k == 40
    assert config.scaling_n == [1, 2, 4, 8, 16, 32]


def test_config_validation():
    with pytest.raises(ConfigError):
        RunConfig(n_samples=0)
    with pytest.raises(ConfigError):
        RunConfig(contrast_beta=1.5)
    with pytest.raises(ConfigError):
        RunConfig(planner_order=["consistency", "check"])
    with pytest.raises(ConfigError):
        RunConfig(modules=["consistency", "anything"])


def test_config_bad_json(tmp_path):
    path = tmp_path / "config.json"
    path.write_text("{oops", "utf-8")
    with pytest.raises(ConfigError):
        RunConfig.load(path)
