"""Confidence-aware test-time scaling over pluggable model backends.

The package splits into a numeric core (confidence, voting, contrast,
rewards, metrics), model access (backends, experts, prompts), the training
demo, and the pipeline/CLI harness.
"""

from .backends import (
    Backend,
    GenerationRequest,
    GenerationResult,
    HttpBackend,
    SimulatedBackend,
    fan_out,
    simulated_load,
)
from .confidence import (
    ConfidenceSummary,
    SequenceTrace,
    TokenTopK,
    aggregate,
    certainty,
    sequence_nmlp,
    token_nmlp,
)
from .config import RunConfig
from .contrast import CandidateScores, contrastive_scores, contrastive_select, plausibility_mask
from .metrics import (
    CalibrationReport,
    OutcomeRecord,
    ScalingPoint,
    auroc,
    confidence_drop,
    ece,
    scaling_slope,
)
from .pipeline import (
    QuestionRecord,
    TraceRecord,
    run_calibration,
    run_dataset,
    run_question,
    run_scaling,
)
from .rewards import (
    RewardBreakdown,
    RolloutPair,
    group_advantage,
    grpo_objective,
    kl_divergence,
    r_conf,
    r_format,
    r_output,
    score_rollout_pair,
    total_reward,
)
from .training import DemoConfig, TabularPolicy, run_demo
from .voting import (
    VoteTally,
    WeightedSample,
    add_weighted,
    final_answer,
    internal_vote,
    merge_expert,
    normalize,
)

__version__ = "0.1.0"
