"""Desk-scale policy-gradient demo of confidence calibration.

A tabular softmax policy answers synthetic bucketed QA tasks whose feature
vectors can be corrupted on their salient coordinate.  Groups of rollouts are
scored with the full reward stack (output + format + confidence reward on
original/corrupted pairs) and the policy follows advantage-weighted
log-likelihood with a KL leash to its frozen initialization.  The policy
starts uniformly overconfident in a fixed wrong answer; training drives
accuracy and calibration up on trained buckets while corrupted inputs land in
untrained bucket space and keep their initial confidence, so the certainty
drop under corruption turns negative.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import rewards
from .errors import NonFiniteGradient
from .metrics import CalibrationReport, OutcomeRecord, build_report, confidence_drop
from .seeding import derive_seed

CLEAN_LEVELS = (1.0, 0.8, 0.6)  # per-bucket probability the canonical label holds


@dataclass(frozen=True)
class SyntheticTask:
    """One QA item: features, corrupted twin, and the correct answer index."""

    features: tuple[float, ...]
    noised_features: tuple[float, ...]
    answer_index: int
    n_answers: int


@dataclass(frozen=True)
class DemoConfig:
    n_buckets: int = 64
    n_used_buckets: int = 24
    n_answers: int = 4
    n_features: int = 4
    n_tasks: int = 160
    n_eval_tasks: int = 240
    corrupt_sigma: float = 18.0
    group_size: int = 8
    steps: int = 500
    learning_rate: float = 0.7
    beta_kl: float = 0.05
    reward_alpha: float = 0.5
    reward_beta: float = 5.0
    temperature: float = 1.0
    init_confidence: float = 0.7
    eval_every: int = 25
    ece_bins: int = 10


def bucket_of(features: tuple[float, ...], n_buckets: int) -> int:
    return int(np.floor(features[0])) % n_buckets


class TabularPolicy:
    """Softmax-over-logits policy per feature bucket.

    The reference distribution is a frozen copy of the initialization logits
    and is never mutated.
    """

    def __init__(
        self,
        logits: np.ndarray,
        temperature: float = 1.0,
        reference: np.ndarray | None = None,
    ):
        if not np.all(np.isfinite(logits)):
            raise ValueError("policy logits must be finite")
        if temperature <= 0.0:
            raise ValueError(f"temperature must be positive, got {temperature}")
        self.logits = np.array(logits, dtype=float)
        self.temperature = temperature
        self._ref_logits = np.array(
            reference if reference is not None else logits, dtype=float
        )
        self._ref_logits.setflags(write=False)

    @classmethod
    def overconfident_init(cls, config: DemoConfig) -> "TabularPolicy":
        """Every bucket confidently prefers answer 0 at ``init_confidence``."""
        c = config.init_confidence
        m = config.n_answers
        delta = float(np.log(c * (m - 1) / (1.0 - c)))
        logits = np.zeros((config.n_buckets, m))
        logits[:, 0] = delta
        return cls(logits, temperature=config.temperature)

    def _softmax(self, row: np.ndarray) -> np.ndarray:
        scaled = row / self.temperature
        scaled = scaled - scaled.max()
        e = np.exp(scaled)
        return e / e.sum()

    def probs(self, bucket: int) -> np.ndarray:
        return self._softmax(self.logits[bucket])

    def reference_probs(self, bucket: int) -> np.ndarray:
        return self._softmax(self._ref_logits[bucket])

    @property
    def n_buckets(self) -> int:
        return self.logits.shape[0]

    @property
    def n_answers(self) -> int:
        return self.logits.shape[1]


def generate_tasks(config: DemoConfig, seed: int) -> list[SyntheticTask]:
    """Draw tasks over the first ``n_used_buckets`` buckets.

    The salient coordinate encodes the bucket; corruption adds wide Gaussian
    noise to it (and only it), scattering the corrupted bucket across the
    whole space, most of which hosts no training tasks.
    """
    rng = np.random.default_rng(seed)
    tasks = []
    for _ in range(config.n_tasks):
        bucket = int(rng.integers(0, config.n_used_buckets))
        canonical = bucket % config.n_answers
        if rng.random() < CLEAN_LEVELS[bucket % len(CLEAN_LEVELS)]:
            answer = canonical
        else:
            others = [a for a in range(config.n_answers) if a != canonical]
            answer = int(rng.choice(others))
        salient = bucket + 0.5 + rng.uniform(-0.3, 0.3)
        distractors = rng.normal(0.0, 1.0, size=config.n_features - 1)
        features = (salient, *distractors.tolist())
        noised = (salient + rng.normal(0.0, config.corrupt_sigma), *distractors.tolist())
        tasks.append(
            SyntheticTask(
                features=features,
                noised_features=noised,
                answer_index=answer,
                n_answers=config.n_answers,
            )
        )
    return tasks


@dataclass(frozen=True)
class Rollout:
    """One sampled answer pair; certainty is the chosen answer's probability."""

    answer: int
    certainty: float
    noised_answer: int
    noised_certainty: float


@dataclass
class GroupRollout:
    task: SyntheticTask
    bucket: int
    rollouts: list[Rollout]
    breakdowns: list[rewards.RewardBreakdown] = field(default_factory=list)

    @property
    def advantages(self) -> list[float]:
        return [b.advantage for b in self.breakdowns]

    @property
    def totals(self) -> list[float]:
        return [b.total for b in self.breakdowns]


def rollout_group(
    policy: TabularPolicy, task: SyntheticTask, k: int, seed: int
) -> GroupRollout:
    """Sample ``k`` original/corrupted answer pairs for one task."""
    if k < 1:
        raise ValueError(f"group size must be >= 1, got {k}")
    rng = np.random.default_rng(seed)
    bucket = bucket_of(task.features, policy.n_buckets)
    noised_bucket = bucket_of(task.noised_features, policy.n_buckets)
    p = policy.probs(bucket)
    pn = policy.probs(noised_bucket)
    rollouts = []
    for _ in range(k):
        a = int(rng.choice(policy.n_answers, p=p))
        an = int(rng.choice(policy.n_answers, p=pn))
        rollouts.append(
            Rollout(
                answer=a,
                certainty=float(p[a]),
                noised_answer=an,
                noised_certainty=float(pn[an]),
            )
        )
    return GroupRollout(task=task, bucket=bucket, rollouts=rollouts)


def score_group(
    group: GroupRollout,
    *,
    alpha: float,
    beta: float,
    output_only: bool = False,
) -> GroupRollout:
    """Attach reward breakdowns and group-relative advantages.

    The tabular policy has no text surface, so the format reward is
    identically 1; ``output_only`` zeroes everything but the output reward
    for ablation runs.
    """
    breakdowns = []
    for r in group.rollouts:
        r_out = 1.0 if r.answer == group.task.answer_index else 0.0
        if output_only:
            breakdowns.append(rewards.RewardBreakdown.build(0.0, r_out, 0.0))
        else:
            r_conf = rewards.r_conf(r.certainty, r.noised_certainty, r_out, alpha, beta)
            breakdowns.append(rewards.RewardBreakdown.build(r_conf, r_out, 1.0))
    advantages = rewards.group_advantage([b.total for b in breakdowns])
    group.breakdowns = [b.with_advantage(a) for b, a in zip(breakdowns, advantages)]
    return group


def surrogate_loss(policy: TabularPolicy, group: GroupRollout, beta_kl: float) -> float:
    """Advantage-weighted negative log-likelihood plus the KL leash.

    Advantages are data here: the loss is a deterministic function of the
    policy parameters for a fixed scored group, which is what the finite-
    difference gradient check differentiates.
    """
    p = policy.probs(group.bucket)
    k = len(group.rollouts)
    ll = -sum(
        b.advantage * np.log(p[r.answer])
        for r, b in zip(group.rollouts, group.breakdowns)
    ) / k
    ref = policy.reference_probs(group.bucket)
    kl = float(np.sum(p * np.log(p / ref)))
    return float(ll + beta_kl * kl)


def surrogate_gradient(
    policy: TabularPolicy, group: GroupRollout, beta_kl: float
) -> np.ndarray:
    """Analytic gradient of :func:`surrogate_loss` w.r.t. the bucket's logits."""
    p = policy.probs(group.bucket)
    k = len(group.rollouts)
    tau = policy.temperature
    grad = np.zeros_like(p)
    for r, b in zip(group.rollouts, group.breakdowns):
        onehot = np.zeros_like(p)
        onehot[r.answer] = 1.0
        grad -= b.advantage * (onehot - p) / (k * tau)
    if beta_kl:
        u = np.log(p / policy.reference_probs(group.bucket))
        kl = float(np.sum(p * u))
        grad += beta_kl * p * (u - kl) / tau
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient(f"gradient for bucket {group.bucket} is not finite")
    return grad


@dataclass(frozen=True)
class StepDiagnostics:
    mean_reward: float
    kl: float
    objective: float


def train_step(
    policy: TabularPolicy,
    group: GroupRollout,
    beta_kl: float,
    learning_rate: float,
) -> StepDiagnostics:
    """One gradient step on the scored group; returns loop diagnostics."""
    if not group.breakdowns or any(b.advantage is None for b in group.breakdowns):
        raise ValueError("group must be scored before training on it")
    grad = surrogate_gradient(policy, group, beta_kl)
    policy.logits[group.bucket] -= learning_rate * grad
    ref = policy.reference_probs(group.bucket)
    p = policy.probs(group.bucket)
    kl = float(np.sum(p * np.log(p / ref)))
    mean_reward = float(np.mean(group.totals))
    return StepDiagnostics(
        mean_reward=mean_reward,
        kl=kl,
        objective=rewards.grpo_objective(mean_reward, kl, beta_kl),
    )


def evaluate(
    policy: TabularPolicy, tasks: list[SyntheticTask]
) -> tuple[list[OutcomeRecord], list[OutcomeRecord]]:
    """Greedy evaluation records under original and corrupted features."""
    origin, noised = [], []
    for task in tasks:
        b = bucket_of(task.features, policy.n_buckets)
        p = policy.probs(b)
        a = int(np.argmax(p))
        origin.append(OutcomeRecord(float(p[a]), a == task.answer_index, "origin"))
        bn = bucket_of(task.noised_features, policy.n_buckets)
        pn = policy.probs(bn)
        an = int(np.argmax(pn))
        noised.append(OutcomeRecord(float(pn[an]), an == task.answer_index, "noised"))
    return origin, noised


@dataclass
class DemoResult:
    before: CalibrationReport
    after: CalibrationReport
    curve: list[dict]
    policy: TabularPolicy


def run_demo(config: DemoConfig, seed: int) -> DemoResult:
    """Train the demo policy and report calibration before and after."""
    train_tasks = generate_tasks(config, derive_seed(seed, "train-tasks"))
    eval_tasks = generate_tasks(
        replace(config, n_tasks=config.n_eval_tasks), derive_seed(seed, "eval-tasks")
    )
    policy = TabularPolicy.overconfident_init(config)

    def report() -> CalibrationReport:
        origin, noised = evaluate(policy, eval_tasks)
        return build_report(origin, noised, bins=config.ece_bins)

    before = report()
    curve: list[dict] = []
    for step in range(config.steps):
        task = train_tasks[step % len(train_tasks)]
        group = rollout_group(
            policy, task, config.group_size, derive_seed(seed, "rollout", step)
        )
        group = score_group(
            group, alpha=config.reward_alpha, beta=config.reward_beta
        )
        diag = train_step(policy, group, config.beta_kl, config.learning_rate)
        if step % config.eval_every == 0 or step == config.steps - 1:
            origin, noised = evaluate(policy, eval_tasks)
            snapshot = build_report(origin, noised, bins=config.ece_bins)
            curve.append(
                {
                    "step": step,
                    "mean_reward": diag.mean_reward,
                    "ece": snapshot.ece,
                    "cd": confidence_drop(origin, noised),
                    "accuracy": snapshot.accuracy,
                }
            )
    return DemoResult(before=before, after=report(), curve=curve, policy=policy)
