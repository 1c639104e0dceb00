"""Exception hierarchy shared across the pipeline.

Every error raised by proofpipe derives from ``PipelineError`` so callers
(and the CLI exit-code mapping) can catch one base class.
"""

from __future__ import annotations


class PipelineError(Exception):
    """Base class for all proofpipe errors."""


class ValidationError(PipelineError):
    """A value violates a declared invariant. Carries the offending key."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class ParseError(PipelineError):
    """Input file or payload could not be parsed."""


# -- core ---------------------------------------------------------------

class MixedPromptError(PipelineError):
    """Trajectories from different prompts were grouped together."""


class UnscoredError(PipelineError):
    """An operation required a reward that has not been assigned yet."""


# -- curriculum ---------------------------------------------------------

class EmptyTargetError(PipelineError):
    """Perplexity scoring needs at least one target token."""


class EmptyInputError(PipelineError):
    """An aggregate statistic was requested over an empty collection."""


class VocabMismatchError(PipelineError):
    """A token id falls outside the policy vocabulary."""


class PolicyEvalError(PipelineError):
    """The policy failed to evaluate a log-probability."""


# -- objective ----------------------------------------------------------

class LengthMismatchError(PipelineError):
    """Paired per-token sequences have different lengths."""


class EmptySequenceError(PipelineError):
    """A per-token operation received zero tokens."""


class AlignmentError(PipelineError):
    """Ratios/advantages are not aligned with group members."""


class MissingSourceLogprobError(PipelineError):
    """A replayed trajectory lacks its source-policy log-probabilities."""


# -- buffers ------------------------------------------------------------

class NotInBuffer(PipelineError):
    """Requested prompt is not resident in the replay buffer."""


class EmptyFreshQueueError(PipelineError):
    """Batch assembly requires at least one fresh prompt."""


# -- rewards ------------------------------------------------------------

class VerifierUnavailableError(PipelineError):
    """The generative verification layer was required but failed."""


# -- tts / backends -----------------------------------------------------

class BackendError(PipelineError):
    """A generation backend failed; aborts the current run."""


class ScenarioExhaustedError(PipelineError):
    """A scripted scenario ran out of responses. Always fatal: a mock must

    never invent a default reply."""


class AllRunsExhaustedError(PipelineError):
    """Every independent run aborted. Carries per-run abort reasons."""

    def __init__(self, reasons: list[str]):
        self.reasons = reasons
        super().__init__(
            f"all {len(reasons)} runs aborted: " + "; ".join(reasons)
        )


class EmptyTraceError(PipelineError):
    """Trace statistics were requested over an empty trace set."""


# -- simpolicy ----------------------------------------------------------

class ShapeMismatchError(PipelineError):
    """A gradient does not match the policy parameter shape."""
