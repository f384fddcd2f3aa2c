"""End-to-end orchestration: planner-scheduled consistency, reflection, and
visual self-check feeding one shared vote tally, plus dataset runners.

Module order never changes the outcome: each module stages a pure additive
contribution to the tally, raw sampling work is memoized per question with
functionally derived seeds, and the staged contributions are merged in
schedule order only for snapshotting.  That makes planner permutations
observationally order-insensitive and full runs byte-reproducible.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from . import experts
from .backends import Backend, GenerationRequest, fan_out
from .confidence import trace_certainty
from .config import RunConfig
from .contrast import CandidateScores, contrastive_select
from .errors import CattsError, CritiqueUnavailable, DatasetError, NoRecords
from .experts import MODULES
from .images import (
    apply_noise,
    read_pnm_file,
    saliency_from_image,
    uniform_saliency,
    write_pnm_file,
)
from .metrics import OutcomeRecord, build_report, confidence_drop, ece, scaling_slope
from .metrics import ScalingPoint, accuracy as records_accuracy, auroc
from .rewards import r_output
from .seeding import derive_seed
from .voting import (
    VoteTally,
    WeightedSample,
    add_weighted,
    combine,
    final_answer,
    internal_vote,
    merge_expert,
    normalize,
)

TRACE_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class QuestionRecord:
    """One dataset line: question, ground truth, and optional image refs."""

    id: str
    question: str
    ground_truth: str
    choices: tuple[str, ...] | None = None
    image: str | None = None
    noised_image: str | None = None
    saliency: str | None = None
    condition: str = "origin"

    def __post_init__(self) -> None:
        if not self.id:
            raise DatasetError("record id must be non-empty")
        if not self.ground_truth.strip():
            raise DatasetError(f"record {self.id!r}: ground truth must be non-empty")
        if self.choices is not None:
            object.__setattr__(self, "choices", tuple(self.choices))
            if self.ground_truth not in self.choices:
                raise DatasetError(
                    f"record {self.id!r}: ground truth {self.ground_truth!r} "
                    f"not among choices {list(self.choices)}"
                )

    @classmethod
    def from_dict(cls, payload: dict) -> "QuestionRecord":
        known = {
            "id", "question", "ground_truth", "choices",
            "image", "noised_image", "saliency", "condition",
        }
        unknown = set(payload) - known
        if unknown:
            raise DatasetError(f"unknown record fields: {sorted(unknown)}")
        try:
            return cls(**payload)
        except TypeError as exc:
            raise DatasetError(str(exc)) from exc


def load_dataset(path: str | Path) -> tuple[list[QuestionRecord], list[str]]:
    """Parse a UTF-8 JSON-lines dataset; bad lines are collected, not fatal."""
    path = Path(path)
    try:
        lines = path.read_text("utf-8").splitlines()
    except OSError as exc:
        raise DatasetError(f"cannot read dataset {path}: {exc}") from exc
    records, problems = [], []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            records.append(QuestionRecord.from_dict(json.loads(line)))
        except (json.JSONDecodeError, DatasetError) as exc:
            problems.append(f"{path.name}:{lineno}: {exc}")
    if not records and not problems:
        raise DatasetError(f"dataset {path} is empty")
    return records, problems


@dataclass(frozen=True)
class Sample:
    answer: str | None
    certainty: float
    nmlp: float
    text: str

    def to_dict(self) -> dict:
        return {
            "answer": self.answer,
            "certainty": self.certainty,
            "nmlp": self.nmlp,
        }


@dataclass
class TraceRecord:
    """Everything one question's run produced, ready for the trace file."""

    question_id: str
    schedule: tuple[str, ...] = ()
    samples: list[Sample] = field(default_factory=list)
    candidates: list[str] = field(default_factory=list)
    modules_run: dict[str, bool] = field(default_factory=dict)
    expert_ballot: list[tuple[str, float]] | None = None
    critique: str | None = None
    reflection_answer: str | None = None
    check_answer: str | None = None
    check_scores: dict | None = None
    snapshots: list[dict] = field(default_factory=list)
    tally: VoteTally = field(default_factory=VoteTally)
    final_answer: str | None = None
    correct: bool = False
    mean_certainty: float | None = None
    timings: dict | None = None
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "schema_version": TRACE_SCHEMA_VERSION,
            "question_id": self.question_id,
            "schedule": list(self.schedule),
            "samples": [s.to_dict() for s in self.samples],
            "candidates": self.candidates,
            "modules_run": self.modules_run,
            "expert_ballot": (
                [list(pair) for pair in self.expert_ballot]
                if self.expert_ballot is not None
                else None
            ),
            "critique": self.critique,
            "reflection_answer": self.reflection_answer,
            "check_answer": self.check_answer,
            "check_scores": self.check_scores,
            "snapshots": self.snapshots,
            "tally": self.tally.to_dict(),
            "final_answer": self.final_answer,
            "correct": self.correct,
            "mean_certainty": self.mean_certainty,
            "timings": self.timings,
            "error": self.error,
        }

    def to_json_line(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def question_prompt(record: QuestionRecord) -> str:
    lines = [record.question.strip()]
    if record.choices:
        lines.append("Choices:")
        lines.extend(f"- {c}" for c in record.choices)
    lines.append('Think step by step, then end with one line "Answer: <answer>".')
    return "\n".join(lines)


def _scenario_condition(condition: str) -> str:
    return "original" if condition == "origin" else condition


def _resolve_noised_ref(
    record: QuestionRecord, config: RunConfig, seed: int, work_dir: Path | None
) -> str | None:
    """Prefer a provided noised image; build one when the original exists."""
    if record.noised_image:
        return record.noised_image
    if record.image and work_dir is not None and Path(record.image).exists():
        image = read_pnm_file(record.image)
        if record.saliency and Path(record.saliency).exists():
            saliency = saliency_from_image(read_pnm_file(record.saliency))
        else:
            saliency = uniform_saliency(image.width, image.height)
        noised = apply_noise(image, saliency, config.noise_sigma, seed)
        out = Path(work_dir) / f"{record.id}_noised{Path(record.image).suffix}"
        write_pnm_file(out, noised)
        return str(out)
    return record.image


def _draw_samples(
    record: QuestionRecord,
    config: RunConfig,
    backend: Backend,
    qseed: int,
    n: int,
    condition: str = "original",
) -> list[Sample]:
    request = GenerationRequest(
        prompt=question_prompt(record),
        images=(record.image,) if record.image else (),
        temperature=config.temperature,
        top_k=config.top_k,
        max_tokens=config.max_tokens,
        seed=qseed,
        logprob_depth=config.logprob_depth,
        question_id=record.id,
        condition=condition,
    )
    results = fan_out(backend, request, n, config.max_inflight)
    samples = []
    for res in results:
        summary = trace_certainty(res.trace, config.aggregation)
        samples.append(
            Sample(
                answer=res.trace.answer,
                certainty=summary.certainty,
                nmlp=summary.nmlp,
                text=res.trace.text,
            )
        )
    return samples


def _unique_answers(samples: Sequence[Sample]) -> list[str]:
    seen: list[str] = []
    for s in samples:
        if s.answer is not None and s.answer not in seen:
            seen.append(s.answer)
    return seen


def run_question(
    record: QuestionRecord,
    config: RunConfig,
    backend: Backend,
    expert_backend: Backend | None = None,
    work_dir: Path | None = None,
) -> TraceRecord:
    """Run the full pipeline on one question.

    Consistency samples are the shared raw material: they are drawn once with
    derived seeds whatever the schedule says, because reflection needs the
    first sample as the critic's subject and self-check restricts itself to
    the sampled candidate set.  Expert failures degrade to fallbacks; backend
    failures abort the question with an error trace.
    """
    start = time.monotonic()
    trace = TraceRecord(question_id=record.id)
    qseed = derive_seed(config.seed, record.id)
    enabled = tuple(m for m in MODULES if m in config.modules)
    try:
        if config.planner_order is not None:
            schedule = tuple(config.planner_order)
        elif expert_backend is not None:
            full = experts.plan(
                expert_backend,
                record.image,
                record.question,
                question_id=record.id,
                retries=config.expert_retries,
                seed=derive_seed(qseed, "plan"),
            )
            schedule = tuple(m for m in full if m in enabled)
        else:
            schedule = tuple(m for m in experts.DEFAULT_SCHEDULE if m in enabled)
        trace.schedule = schedule

        samples = _draw_samples(record, config, backend, qseed, config.n_samples)
        trace.samples = samples
        trace.mean_certainty = sum(s.certainty for s in samples) / len(samples)
        candidates = _unique_answers(samples)
        trace.candidates = candidates

        contributions: list[VoteTally] = []
        modules_run = {m: False for m in MODULES}
        modules_run["expert_vote"] = False
        for module in schedule:
            contribution = VoteTally()
            if module == "consistency":
                voters = [
                    WeightedSample(s.answer, s.certainty)
                    for s in samples
                    if s.answer is not None
                ]
                contribution = normalize(internal_vote(voters))
                if expert_backend is not None and config.tau_expert > 0 and candidates:
                    ballot = experts.vote(
                        expert_backend,
                        record.image,
                        record.question,
                        candidates,
                        config.expert_retries,
                        question_id=record.id,
                        seed=derive_seed(qseed, "vote"),
                    )
                    contribution = merge_expert(
                        contribution, ballot, config.tau_expert, candidates
                    )
                    trace.expert_ballot = ballot
                    modules_run["expert_vote"] = True
                modules_run["consistency"] = True
            elif module == "reflection":
                outcome = _run_reflection(
                    record, config, backend, expert_backend, qseed, samples, trace
                )
                if outcome is not None:
                    contribution = outcome
                    modules_run["reflection"] = True
            elif module == "check":
                outcome = _run_check(
                    record, config, backend, qseed, candidates, trace, work_dir
                )
                if outcome is not None:
                    contribution = outcome
                    modules_run["check"] = True
            contributions.append(contribution)
            trace.snapshots.append(
                {"module": module, "scores": combine(contributions).to_dict()["scores"]}
            )

        trace.modules_run = modules_run
        trace.tally = combine(contributions)
        trace.final_answer = final_answer(trace.tally)
        trace.correct = r_output(trace.final_answer, record.ground_truth) == 1.0
    except CattsError as exc:
        trace.error = f"{type(exc).__name__}: {exc}"
    if config.include_timings:
        trace.timings = {"total_s": time.monotonic() - start}
    return trace


def _run_reflection(
    record: QuestionRecord,
    config: RunConfig,
    backend: Backend,
    expert_backend: Backend | None,
    qseed: int,
    samples: Sequence[Sample],
    trace: TraceRecord,
) -> VoteTally | None:
    if expert_backend is None or config.tau_reflection <= 0:
        return None
    mean_certainty = sum(s.certainty for s in samples) / len(samples)
    if config.certainty_gate is not None and mean_certainty >= config.certainty_gate:
        return None
    initial = samples[0]
    try:
        crit = experts.critique(
            expert_backend,
            record.image,
            record.question,
            initial.answer or "(no parsed answer)",
            initial.certainty,
            question_id=record.id,
            retries=config.expert_retries,
            seed=derive_seed(qseed, "critique"),
        )
    except CritiqueUnavailable:
        return None
    trace.critique = crit
    prompt = (
        f"{question_prompt(record)}\n\n"
        f"A reviewer raised this critique of a first attempt:\n{crit}\n\n"
        'Reconsider carefully and end with one line "Answer: <answer>".'
    )
    request = GenerationRequest(
        prompt=prompt,
        images=(record.image,) if record.image else (),
        temperature=config.temperature,
        top_k=config.top_k,
        max_tokens=config.max_tokens,
        seed=derive_seed(qseed, "reflected"),
        logprob_depth=config.logprob_depth,
        question_id=record.id,
        condition="reflected",
    )
    results = fan_out(backend, request, config.reflection_samples, config.max_inflight)
    best: tuple[float, str] | None = None
    for res in results:
        if res.trace.answer is None:
            continue
        certainty = trace_certainty(res.trace, config.aggregation).certainty
        if best is None or certainty > best[0]:
            best = (certainty, res.trace.answer)
    if best is None:
        return None
    trace.reflection_answer = best[1]
    return add_weighted(VoteTally(), best[1], config.tau_reflection, "reflection")


def _run_check(
    record: QuestionRecord,
    config: RunConfig,
    backend: Backend,
    qseed: int,
    candidates: Sequence[str],
    trace: TraceRecord,
    work_dir: Path | None,
) -> VoteTally | None:
    if config.tau_check <= 0 or not candidates:
        return None
    prompt = question_prompt(record)
    noised_ref = _resolve_noised_ref(
        record, config, derive_seed(qseed, "noise"), work_dir
    )
    orig = backend.score_candidates(
        record.image, prompt, candidates, question_id=record.id, condition="original"
    )
    noised = backend.score_candidates(
        noised_ref, prompt, candidates, question_id=record.id, condition="noised"
    )
    scores = CandidateScores(tuple(candidates), tuple(orig), tuple(noised))
    answer, contrast_score = contrastive_select(
        scores, config.contrast_alpha, config.contrast_beta
    )
    trace.check_answer = answer
    trace.check_scores = {
        "candidates": list(candidates),
        "original": list(orig),
        "noised": list(noised),
        "chosen": answer,
        "chosen_score": contrast_score,
    }
    return add_weighted(VoteTally(), answer, config.tau_check, "check")


# --- baseline voting strategies (scaling comparisons) ---


def majority_vote(samples: Sequence[Sample]) -> str:
    """Plain unweighted plurality over parsed answers."""
    voters = [WeightedSample(s.answer, 1.0) for s in samples if s.answer is not None]
    return final_answer(internal_vote(voters))


def certainty_filtered_vote(samples: Sequence[Sample], fraction: float) -> str:
    """Keep the top fraction of samples by certainty, then plurality-vote."""
    answered = [s for s in samples if s.answer is not None]
    if not answered:
        raise NoRecords("no sample produced an answer")
    keep = max(1, math.ceil(len(answered) * fraction))
    ranked = sorted(enumerate(answered), key=lambda kv: (-kv[1].certainty, kv[0]))
    kept = [s for _, s in ranked[:keep]]
    return majority_vote(kept)


# --- dataset runners ---


@dataclass
class RunSummary:
    n_questions: int
    n_skipped: int
    n_errors: int
    accuracy: float
    accuracy_by_condition: dict[str, float]
    calibration: dict
    trace_path: str | None
    problems: list[str] = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        return 1 if (self.n_skipped or self.n_errors) else 0

    def to_dict(self) -> dict:
        return {
            "schema_version": TRACE_SCHEMA_VERSION,
            "n_questions": self.n_questions,
            "n_skipped": self.n_skipped,
            "n_errors": self.n_errors,
            "accuracy": self.accuracy,
            "accuracy_by_condition": self.accuracy_by_condition,
            "calibration": self.calibration,
            "trace_path": self.trace_path,
            "problems": self.problems,
        }


def _run_all(
    records: Sequence[QuestionRecord],
    config: RunConfig,
    backend: Backend,
    expert_backend: Backend | None,
    work_dir: Path | None,
) -> list[TraceRecord]:
    if config.max_inflight <= 1 or len(records) <= 1:
        return [
            run_question(r, config, backend, expert_backend, work_dir) for r in records
        ]
    with ThreadPoolExecutor(max_workers=config.max_inflight) as pool:
        futures = [
            pool.submit(run_question, r, config, backend, expert_backend, work_dir)
            for r in records
        ]
        return [f.result() for f in futures]


def run_dataset(
    dataset: str | Path | Sequence[QuestionRecord],
    config: RunConfig,
    backend: Backend,
    expert_backend: Backend | None = None,
    out_dir: str | Path | None = None,
) -> RunSummary:
    """Run every question, append traces, and write one summary document."""
    if isinstance(dataset, (str, Path)):
        records, problems = load_dataset(dataset)
    else:
        records, problems = list(dataset), []
    if not records:
        raise DatasetError("no parseable records in dataset")

    out_path = None
    work_dir = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        out_path = out_dir / "traces.jsonl"
        work_dir = out_dir

    traces = _run_all(records, config, backend, expert_backend, work_dir)

    if out_path is not None:
        with open(out_path, "w", encoding="utf-8") as fh:
            for t in traces:
                fh.write(t.to_json_line())
                fh.write("\n")

    ok = [t for t in traces if t.error is None]
    by_condition: dict[str, list[bool]] = {}
    outcome_records = []
    for record, t in zip(records, traces):
        by_condition.setdefault(record.condition, []).append(t.correct)
        if t.error is None and t.mean_certainty is not None:
            outcome_records.append(
                OutcomeRecord(t.mean_certainty, t.correct, record.condition)
            )
    calibration = (
        build_report(outcome_records, bins=config.ece_bins).to_dict()
        if outcome_records
        else {}
    )
    summary = RunSummary(
        n_questions=len(records),
        n_skipped=len(problems),
        n_errors=len(records) - len(ok),
        accuracy=sum(t.correct for t in traces) / len(traces),
        accuracy_by_condition={
            cond: sum(flags) / len(flags) for cond, flags in sorted(by_condition.items())
        },
        calibration=calibration,
        trace_path=str(out_path) if out_path else None,
        problems=problems,
    )
    if out_dir is not None:
        (Path(out_dir) / "summary.json").write_text(
            json.dumps(summary.to_dict(), sort_keys=True, indent=2) + "\n", "utf-8"
        )
    return summary


@dataclass
class ScalingResult:
    rows: list[dict]  # method, n, accuracy (percent)
    fits: dict[str, dict | None]  # method -> {slope, intercept} or None

    def to_csv(self) -> str:
        lines = ["method,n,accuracy"]
        for row in self.rows:
            lines.append(f"{row['method']},{row['n']},{row['accuracy']:.6f}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"rows": self.rows, "fits": self.fits}


SCALING_METHODS = ("catts", "majority", "certainty_filtered")


def run_scaling(
    dataset: str | Path | Sequence[QuestionRecord],
    config: RunConfig,
    backend: Backend,
    expert_backend: Backend | None = None,
    n_list: Sequence[int] | None = None,
    out_dir: str | Path | None = None,
) -> ScalingResult:
    """Accuracy versus sample count for the pipeline and the two baselines.

    Per-index derived seeds make the first n samples of every method
    identical, so methods differ only in how they use them.
    """
    if isinstance(dataset, (str, Path)):
        records, _ = load_dataset(dataset)
    else:
        records = list(dataset)
    if not records:
        raise DatasetError("no parseable records in dataset")
    ns = sorted(set(n_list if n_list is not None else config.scaling_n))
    if not ns or any(n < 1 for n in ns):
        raise ValueError(f"invalid sample counts {ns}")

    rows = []
    for n in ns:
        cfg_n = replace(config, n_samples=n)
        catts_traces = _run_all(records, cfg_n, backend, expert_backend, None)
        catts_acc = sum(t.correct for t in catts_traces) / len(records)

        majority_hits = filtered_hits = 0
        for record in records:
            qseed = derive_seed(config.seed, record.id)
            try:
                samples = _draw_samples(record, cfg_n, backend, qseed, n)
                majority_hits += (
                    r_output(majority_vote(samples), record.ground_truth) == 1.0
                )
                filtered_hits += (
                    r_output(
                        certainty_filtered_vote(samples, config.filter_fraction),
                        record.ground_truth,
                    )
                    == 1.0
                )
            except CattsError:
                pass  # unanswerable question scores as a miss for the baselines
        for method, acc in (
            ("catts", catts_acc),
            ("majority", majority_hits / len(records)),
            ("certainty_filtered", filtered_hits / len(records)),
        ):
            rows.append({"method": method, "n": n, "accuracy": 100.0 * acc})

    fits: dict[str, dict | None] = {}
    for method in SCALING_METHODS:
        points = [
            ScalingPoint(row["n"], row["accuracy"])
            for row in rows
            if row["method"] == method
        ]
        if len({p.n for p in points}) < 2:
            fits[method] = None
        else:
            slope, intercept = scaling_slope(points)
            fits[method] = {"slope": slope, "intercept": intercept}

    result = ScalingResult(rows=rows, fits=fits)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "scaling.csv").write_text(result.to_csv(), "utf-8")
        (out_dir / "scaling_summary.json").write_text(
            json.dumps(result.to_dict(), sort_keys=True, indent=2) + "\n", "utf-8"
        )
    return result


def run_calibration(
    dataset: str | Path | Sequence[QuestionRecord],
    config: RunConfig,
    backend: Backend,
    out_dir: str | Path | None = None,
) -> dict:
    """Per-condition confidence report over condition-tagged records.

    Certainty is the mean sample certainty under the record's own condition;
    correctness is the certainty-weighted vote winner.  Confidence drop is
    measured against the origin condition.
    """
    if isinstance(dataset, (str, Path)):
        records, _ = load_dataset(dataset)
    else:
        records = list(dataset)
    conditions = {r.condition for r in records}
    if "origin" not in conditions:
        raise DatasetError("calibration dataset must include origin-condition records")

    outcomes: dict[str, list[OutcomeRecord]] = {}
    for record in records:
        qseed = derive_seed(config.seed, record.id)
        samples = _draw_samples(
            record,
            config,
            backend,
            qseed,
            config.n_samples,
            condition=_scenario_condition(record.condition),
        )
        voters = [
            WeightedSample(s.answer, s.certainty)
            for s in samples
            if s.answer is not None
        ]
        winner = final_answer(internal_vote(voters))
        certainty = sum(s.certainty for s in samples) / len(samples)
        outcomes.setdefault(record.condition, []).append(
            OutcomeRecord(
                certainty,
                r_output(winner, record.ground_truth) == 1.0,
                record.condition,
            )
        )

    origin_records = outcomes["origin"]
    report: dict = {"schema_version": TRACE_SCHEMA_VERSION, "conditions": {}}
    for condition in sorted(outcomes):
        recs = outcomes[condition]
        try:
            auc = auroc(recs)
        except (CattsError, ValueError):
            auc = None
        if len(outcomes) == 1:
            drop = None
        elif condition == "origin":
            drop = 0.0
        else:
            drop = confidence_drop(origin_records, recs)
        report["conditions"][condition] = {
            "n": len(recs),
            "accuracy": records_accuracy(recs),
            "mean_certainty": sum(r.certainty for r in recs) / len(recs),
            "ece": ece(recs, config.ece_bins),
            "auroc": auc,
            "confidence_drop": drop,
        }
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "calibration.json").write_text(
            json.dumps(report, sort_keys=True, indent=2) + "\n", "utf-8"
        )
    return report
