"""Exception hierarchy shared across the package.

Everything derives from :class:`CattsError` so callers can catch the whole
family; most classes also derive from a matching builtin so they behave
naturally in generic code.
"""

from __future__ import annotations


class CattsError(Exception):
    """Base class for all errors raised by this package."""


# --- confidence kernel ---

class EmptyTopK(CattsError, ValueError):
    """A token's top-k log-probability list was empty."""


class PositiveLogProb(CattsError, ValueError):
    """A log-probability exceeded 0 beyond tolerance."""


class EmptyTrace(CattsError, ValueError):
    """A sequence trace contained no tokens."""


class NegativeNmlp(CattsError, ValueError):
    """A negative value was passed where a non-negative NMLP is required."""


class BadWindow(CattsError, ValueError):
    """Aggregation window parameter out of range."""


# --- vote tally ---

class NoSamples(CattsError, ValueError):
    """Internal voting was asked to tally an empty sample list."""


class ZeroMass(CattsError, ValueError):
    """A tally with zero total score cannot be normalized."""


class BallotMismatch(CattsError, ValueError):
    """Expert ballot candidates do not match the expected candidate set."""


class UnnormalizedBallot(CattsError, ValueError):
    """Expert ballot confidences do not sum to 1 within tolerance."""


class EmptyTally(CattsError, ValueError):
    """No candidates in the tally to select from."""


# --- contrastive self-check ---

class LengthMismatch(CattsError, ValueError):
    """Candidate/score lists have inconsistent lengths."""


class EmptyInput(CattsError, ValueError):
    """An operation requiring at least one element received none."""


# --- reward stack ---

class EmptyGroundTruth(CattsError, ValueError):
    """Ground-truth string empty after canonicalization."""


class BadPattern(CattsError, ValueError):
    """Format-reward pattern failed to compile."""


class BadHyper(CattsError, ValueError):
    """Reward hyperparameter outside its valid range."""


class SupportMismatch(CattsError, ValueError):
    """KL divergence operands are not defined over the same support."""


class AbsoluteContinuityViolation(CattsError, ValueError):
    """KL divergence undefined: q is zero where p has mass."""


# --- training demo ---

class NonFiniteGradient(CattsError, ArithmeticError):
    """A gradient contained NaN or infinity."""


# --- expert roles ---

class CritiqueUnavailable(CattsError):
    """Critic produced no usable critique after retries; reflection skips."""


# --- backends ---

class BackendError(CattsError):
    """Base class for model-backend failures."""


class BackendTimeout(BackendError):
    """Request exceeded the configured timeout after retries."""


class TransportFailure(BackendError):
    """HTTP or connection-level failure."""


class MalformedResponse(BackendError):
    """Backend reply could not be parsed into a generation result."""


class MissingLogprobs(BackendError):
    """Backend reply omitted the requested per-token log-probabilities."""


class SchemaViolation(CattsError, ValueError):
    """Scenario file failed schema validation."""


class MissingScenarioEntry(BackendError):
    """No scripted entry for the requested (question id, condition) key."""


# --- metrics ---

class NoRecords(CattsError, ValueError):
    """A metric over outcome records received an empty list."""


class DegenerateClasses(CattsError, ValueError):
    """AUROC needs at least one correct and one incorrect record."""


class DegenerateDesign(CattsError, ValueError):
    """Scaling fit needs at least two distinct sample counts."""


# --- raster images ---

class DimMismatch(CattsError, ValueError):
    """Image and saliency-map dimensions disagree."""


class MalformedHeader(CattsError, ValueError):
    """Portable-anymap header unreadable or unsupported."""


class TruncatedBody(CattsError, ValueError):
    """Portable-anymap body shorter than the header promises."""


# --- prompt templates ---

class UnboundPlaceholder(CattsError, ValueError):
    """A template placeholder was not bound at render time."""


# --- configuration / datasets ---

class ConfigError(CattsError, ValueError):
    """Run configuration invalid or unreadable."""


class DatasetError(CattsError, ValueError):
    """Dataset file invalid or unreadable."""
