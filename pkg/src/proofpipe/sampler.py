"""Rollout batch planning: oversampling, dynamic filtering, partial recycling.

Groups whose rewards are all equal carry no gradient signal, so each round
draws more prompts than the training batch needs, filters out the
zero-variance groups, trains on the first ``prompt_batch`` survivors, and
returns surplus survivors to the queue front (their rollout cost is already
paid). Generations cut at a round boundary become partial rollouts whose
prefixes are resumed, bit-exactly, in the next round.

Planning is single-threaded; rollouts across prompts may run concurrently
and are joined before filtering.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Optional, Sequence

from .core import PolicySnapshotId, Prompt, RolloutGroup, Trajectory


@dataclass(frozen=True)
class SamplerConfig:
    prompt_batch: int = 128
    oversample_batch: int = 160
    samples_per_prompt: int = 8
    max_response_tokens: int = 160_000

    def __post_init__(self):
        if self.prompt_batch < 1:
            raise ValueError("prompt_batch must be positive")
        if self.oversample_batch < self.prompt_batch:
            raise ValueError("oversample_batch must be >= prompt_batch")
        if self.samples_per_prompt < 2:
            raise ValueError("samples_per_prompt must be at least 2")
        if self.max_response_tokens < 1:
            raise ValueError("max_response_tokens must be positive")


@dataclass(frozen=True)
class PartialRollout:
    """A generation cut at a round boundary, to be resumed next round.

    The stored prefix log-probabilities keep their original source-policy
    tag so importance ratios over the resumed trajectory stay well-defined.
    """

    prompt_id: str
    prefix_tokens: tuple[int, ...]
    prefix_logprobs: tuple[float, ...]
    source_policy: PolicySnapshotId

    def __post_init__(self):
        if len(self.prefix_tokens) != len(self.prefix_logprobs):
            raise ValueError("prefix tokens and logprobs misaligned")


def dynamic_filter(groups: Sequence[RolloutGroup]) -> list[RolloutGroup]:
    """Keep exactly the groups whose member rewards are not all equal."""
    kept = []
    for g in groups:
        rewards = g.rewards
        if any(r != rewards[0] for r in rewards[1:]):
            kept.append(g)
    return kept


@dataclass(frozen=True)
class DrawResult:
    prompts: tuple[Prompt, ...]
    shortfall: bool


def plan_oversample(queue: deque, cfg: SamplerConfig,
                    draw_size: Optional[int] = None) -> DrawResult:
    """FIFO draw of ``oversample_batch`` prompts (all of them, flagged, when
    the queue is smaller)."""
    want = cfg.oversample_batch if draw_size is None else draw_size
    n = min(want, len(queue))
    prompts = tuple(queue.popleft() for _ in range(n))
    return DrawResult(prompts=prompts, shortfall=n < want)


@dataclass(frozen=True)
class RoundOutcome:
    """Exhaustive accounting of one oversampled rollout round.

    Every drawn prompt lands in exactly one of ``trained``, ``requeued``
    (surplus survivors returned to the queue front), or ``dropped``
    (zero reward variance).
    """

    trained: tuple[tuple[Prompt, RolloutGroup], ...]
    requeued: tuple[Prompt, ...]
    dropped: tuple[tuple[Prompt, RolloutGroup], ...]
    shortfall: bool


def settle_round(rollouts: Sequence[tuple[Prompt, RolloutGroup]], queue: deque,
                 cfg: SamplerConfig, target: Optional[int] = None) -> RoundOutcome:
    """Apply the dynamic filter and settle the round's accounting.

    The first ``target`` surviving groups (draw order) form the training
    batch; surplus survivors return to the queue front in their draw order;
    all-equal-reward groups are dropped. ``shortfall`` flags a round whose
    survivors could not fill the batch.
    """
    want = cfg.prompt_batch if target is None else target
    survivors = []
    dropped = []
    for prompt, group in rollouts:
        rewards = group.rewards
        if any(r != rewards[0] for r in rewards[1:]):
            survivors.append((prompt, group))
        else:
            dropped.append((prompt, group))
    trained = survivors[:want]
    surplus = [prompt for prompt, _ in survivors[want:]]
    for prompt in reversed(surplus):
        queue.appendleft(prompt)
    return RoundOutcome(
        trained=tuple(trained),
        requeued=tuple(surplus),
        dropped=tuple(dropped),
        shortfall=len(trained) < want,
    )


def recycle_partials(in_flight: Sequence[PartialRollout],
                     completed: Sequence[Trajectory],
                     ) -> tuple[list[PartialRollout], list[Trajectory]]:
    """Split a round's output into next-round seeds and finished trajectories.

    Truncated generations become partial rollouts (prefix plus its recorded
    logprobs, verbatim); completed trajectories pass through unchanged.
    """
    seeds = list(in_flight)
    finished = []
    for t in completed:
        if t.truncated:
            seeds.append(PartialRollout(
                prompt_id=t.prompt_id,
                prefix_tokens=t.tokens,
                prefix_logprobs=t.sampling_logprobs,
                source_policy=PolicySnapshotId(t.source_policy),
            ))
        else:
            finished.append(t)
    return seeds, finished


def resume_partial(policy, seed: PartialRollout, max_len: int,
                   temperature: float = 1.0, rng=0,
                   end_token: Optional[int] = None) -> Trajectory:
    """Continue a stored prefix under the given policy.

    The returned trajectory starts with the prefix tokens and logprobs
    bit-exactly; only the continuation is sampled fresh. The source-policy
    tag stays that of the prefix (the older segment) so downstream ratio
    computation treats the trajectory as off-policy.
    """
    remaining = max_len - len(seed.prefix_tokens)
    if remaining <= 0:
        return Trajectory(
            prompt_id=seed.prompt_id,
            tokens=seed.prefix_tokens,
            sampling_logprobs=seed.prefix_logprobs,
            source_policy=seed.source_policy.step_index,
            truncated=False,
        )
    continuation = policy.sample(
        list(seed.prefix_tokens), remaining, temperature=temperature,
        seed=rng, end_token=end_token,
    )
    return Trajectory(
        prompt_id=seed.prompt_id,
        tokens=seed.prefix_tokens + continuation.tokens,
        sampling_logprobs=seed.prefix_logprobs + continuation.sampling_logprobs,
        source_policy=seed.source_policy.step_index,
        truncated=continuation.truncated,
    )
