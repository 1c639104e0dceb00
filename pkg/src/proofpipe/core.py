"""Domain types shared by every pipeline stage, plus group reward statistics.

A ``Trajectory`` is one sampled response: token ids, the per-token
log-probabilities recorded under the policy that generated it, and a binary
reward once scored. A ``RolloutGroup`` is the set of candidate responses
sampled for a single prompt together with its reward statistics, which form
the within-prompt baseline for advantage computation.

All types are immutable after construction; the operations here are pure.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import IO, Iterable, Iterator, Optional, Sequence

from .errors import MixedPromptError, UnscoredError


class PromptKind(str, Enum):
    VERIFIABLE = "verifiable"
    NONVERIFIABLE = "nonverifiable"
    REFINEMENT = "refinement"


@dataclass(frozen=True)
class Prompt:
    """One query in the training pool.

    Verifiable prompts carry a reference answer for rule-based checking;
    non-verifiable and refinement prompts are judged by the generative
    layer only.
    """

    id: str
    text: str
    kind: PromptKind = PromptKind.VERIFIABLE
    reference_answer: Optional[str] = None

    def __post_init__(self):
        if self.kind is PromptKind.VERIFIABLE and self.reference_answer is None:
            raise ValueError(
                f"verifiable prompt {self.id!r} requires a reference answer"
            )


@dataclass(frozen=True)
class PolicySnapshotId:
    """Monotone identifier of a policy version, assigned per optimizer step."""

    step_index: int = 0

    def next(self) -> "PolicySnapshotId":
        return PolicySnapshotId(self.step_index + 1)


@dataclass(frozen=True)
class Trajectory:
    """One sampled response with its sampling-policy log-probabilities.

    ``sampling_logprobs`` are recorded in nats under the policy snapshot that
    generated the tokens (``source_policy``), making importance ratios
    well-defined even for replayed off-policy data. ``reward`` stays ``None``
    until a scoring stage assigns the binary outcome.
    """

    prompt_id: str
    tokens: tuple[int, ...]
    sampling_logprobs: tuple[float, ...]
    source_policy: int = 0
    reward: Optional[float] = None
    truncated: bool = False

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(
            self, "sampling_logprobs", tuple(float(x) for x in self.sampling_logprobs)
        )

    @property
    def scored(self) -> bool:
        return self.reward is not None

    def with_reward(self, reward: float) -> "Trajectory":
        return replace(self, reward=float(reward))

    def to_record(self) -> dict:
        return {
            "prompt_id": self.prompt_id,
            "tokens": list(self.tokens),
            "sampling_logprobs": list(self.sampling_logprobs),
            "source_policy": self.source_policy,
            "reward": self.reward,
            "truncated": self.truncated,
        }

    @classmethod
    def from_record(cls, record: dict) -> "Trajectory":
        return cls(
            prompt_id=record["prompt_id"],
            tokens=tuple(record["tokens"]),
            sampling_logprobs=tuple(record["sampling_logprobs"]),
            source_policy=record["source_policy"],
            reward=record["reward"],
            truncated=record["truncated"],
        )


@dataclass(frozen=True)
class RolloutGroup:
    """The candidate responses for one prompt plus group reward statistics."""

    prompt_id: str
    members: tuple[Trajectory, ...]
    mean_reward: float
    success_count: int

    def __len__(self) -> int:
        return len(self.members)

    @property
    def rewards(self) -> tuple[float, ...]:
        return tuple(t.reward for t in self.members)  # type: ignore[misc]


def group_stats(members: Sequence[Trajectory]) -> RolloutGroup:
    """Build a ``RolloutGroup`` from scored trajectories of one prompt.

    The mean reward is the exact arithmetic mean (integer rewards divide
    exactly whenever representable) and the success count is the number of
    members with reward 1. Member order is preserved.
    """
    if not members:
        raise ValueError("group_stats needs at least one trajectory")
    prompt_ids = {t.prompt_id for t in members}
    if len(prompt_ids) != 1:
        raise MixedPromptError(f"trajectories span prompts {sorted(prompt_ids)}")
    for t in members:
        if not t.scored:
            raise UnscoredError(f"unscored trajectory for prompt {t.prompt_id!r}")
    rewards = [t.reward for t in members]
    return RolloutGroup(
        prompt_id=members[0].prompt_id,
        members=tuple(members),
        mean_reward=sum(rewards) / len(rewards),
        success_count=sum(1 for r in rewards if r == 1),
    )


def validate_trajectory(t: Trajectory) -> list[str]:
    """Return every invariant violation found; an empty list means valid."""
    violations = []
    if len(t.sampling_logprobs) != len(t.tokens):
        violations.append(
            f"length mismatch: {len(t.tokens)} tokens vs "
            f"{len(t.sampling_logprobs)} logprobs"
        )
    for i, lp in enumerate(t.sampling_logprobs):
        if lp > 0:
            violations.append(f"positive logprob {lp} at position {i}")
    for i, tok in enumerate(t.tokens):
        if tok < 0:
            violations.append(f"negative token id {tok} at position {i}")
    if t.reward is not None and t.reward not in (0.0, 1.0):
        violations.append(f"reward {t.reward} outside {{0,1}}")
    return violations


# -- canonical JSONL trace format ----------------------------------------

def write_trajectories(trajectories: Iterable[Trajectory], fp: IO[str]) -> int:
    """Write trajectories as JSONL, one record per line. Returns the count."""
    n = 0
    for t in trajectories:
        fp.write(json.dumps(t.to_record()) + "\n")
        n += 1
    return n


def read_trajectories(fp: IO[str]) -> Iterator[Trajectory]:
    for line in fp:
        line = line.strip()
        if line:
            yield Trajectory.from_record(json.loads(line))
