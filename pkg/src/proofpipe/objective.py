"""Sequence-level policy optimization objective.

Both reward assignment and clipping operate on whole responses: each member
of a rollout group gets a group-relative advantage (reward minus the group
mean, no standard-deviation normalization) and a length-normalized sequence
importance ratio. The surrogate takes the pessimistic min of the raw and
clipped terms; members on the clipped branch contribute exactly zero
gradient. The refined objective mixes fresh rollout groups with replayed
groups at a fixed ratio, the replayed member keeping its source-policy
log-probabilities in the ratio denominator.

Log-probability differences are summed with ``math.fsum`` before the
division and exponentiation; long sequences must not drift.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import RolloutGroup, Trajectory
from .errors import (
    AlignmentError,
    EmptySequenceError,
    LengthMismatchError,
    MissingSourceLogprobError,
    UnscoredError,
)

GroupTerms = tuple[Sequence[float], Sequence[float]]  # (ratios, advantages)


@dataclass(frozen=True)
class ClipConfig:
    """Symmetric clip range for the sequence importance ratio."""

    epsilon: float = 1e-3

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")


@dataclass(frozen=True)
class MixConfig:
    """Weight of the replayed-experience term in the refined objective."""

    replay_ratio: float = 0.25

    def __post_init__(self):
        if not 0 <= self.replay_ratio <= 1:
            raise ValueError("replay_ratio must lie in [0, 1]")


def advantages(group: RolloutGroup) -> np.ndarray:
    """Group-relative advantages: reward minus the group mean reward."""
    rewards = []
    for t in group.members:
        if t.reward is None:
            raise UnscoredError(f"unscored member in group {group.prompt_id!r}")
        rewards.append(t.reward)
    arr = np.asarray(rewards, dtype=np.float64)
    return arr - group.mean_reward


def sequence_ratio(new_logprobs: Sequence[float],
                   old_logprobs: Sequence[float]) -> float:
    """Length-normalized sequence importance ratio.

    ``exp(mean_t(new_t - old_t))`` over response positions; identical inputs
    give exactly 1.0.
    """
    if len(new_logprobs) != len(old_logprobs):
        raise LengthMismatchError(
            f"{len(new_logprobs)} new vs {len(old_logprobs)} old logprobs"
        )
    if len(new_logprobs) == 0:
        raise EmptySequenceError("sequence ratio over zero tokens")
    diff = math.fsum(float(n) - float(o) for n, o in zip(new_logprobs, old_logprobs))
    return math.exp(diff / len(new_logprobs))


def _clipped_term(ratio: float, advantage: float, epsilon: float) -> float:
    clipped = min(max(ratio, 1.0 - epsilon), 1.0 + epsilon)
    return min(ratio * advantage, clipped * advantage)


def _is_clip_active(ratio: float, advantage: float, epsilon: float) -> bool:
    """True when the member sits on the flat (clipped) branch of the min."""
    if advantage > 0:
        return ratio > 1.0 + epsilon
    if advantage < 0:
        return ratio < 1.0 - epsilon
    return False


def gspo_surrogate(groups: Iterable[GroupTerms], clip: ClipConfig) -> float:
    """Clipped sequence-level surrogate, averaged across groups.

    Each group contributes the mean over its members of
    ``min(s_i * A_i, clip(s_i, 1-eps, 1+eps) * A_i)``. The cross-group
    aggregation is an average; the scale is absorbed by the learning rate.
    """
    per_group = []
    for ratios, advs in groups:
        if len(ratios) != len(advs):
            raise AlignmentError(
                f"{len(ratios)} ratios vs {len(advs)} advantages"
            )
        if len(ratios) == 0:
            raise AlignmentError("empty group in surrogate")
        terms = [
            _clipped_term(float(s), float(a), clip.epsilon)
            for s, a in zip(ratios, advs)
        ]
        per_group.append(math.fsum(terms) / len(terms))
    if not per_group:
        raise AlignmentError("surrogate over zero groups")
    return math.fsum(per_group) / len(per_group)


def refined_objective(fresh: Iterable[GroupTerms], replay: Iterable[GroupTerms],
                      mix: MixConfig, clip: ClipConfig) -> float:
    """Convex combination of the fresh and replayed surrogate terms.

    ``(1 - rho) * J(fresh) + rho * J(replay)``; the degenerate ratios 0 and 1
    reduce exactly to the single surviving term. Both terms reuse the same
    clip range.
    """
    rho = mix.replay_ratio
    if rho == 0.0:
        return gspo_surrogate(fresh, clip)
    if rho == 1.0:
        return gspo_surrogate(replay, clip)
    return (1.0 - rho) * gspo_surrogate(fresh, clip) + rho * gspo_surrogate(replay, clip)


# -- gradient through a differentiable policy ------------------------------

@dataclass(frozen=True)
class ObjectiveMember:
    """One trajectory prepared for the surrogate gradient.

    ``old_logprobs`` are frozen at rollout time (the sampling policy for
    fresh data, the source policy for replayed data) and treated as
    constants; so is the advantage.
    """

    prompt_tokens: tuple[int, ...]
    tokens: tuple[int, ...]
    old_logprobs: tuple[float, ...]
    advantage: float

    def __post_init__(self):
        if len(self.old_logprobs) != len(self.tokens):
            raise AlignmentError(
                f"{len(self.tokens)} tokens vs {len(self.old_logprobs)} old logprobs"
            )
        if len(self.tokens) == 0:
            raise EmptySequenceError("objective member with zero tokens")


ObjectiveBatch = Sequence[Sequence[ObjectiveMember]]


def batch_terms(policy, batch: ObjectiveBatch) -> list[GroupTerms]:
    """Evaluate (ratios, advantages) for each group under ``policy``."""
    terms = []
    for group in batch:
        ratios = []
        advs = []
        for m in group:
            new_lp = policy.logprob(m.prompt_tokens, m.tokens)
            ratios.append(sequence_ratio(new_lp, m.old_logprobs))
            advs.append(m.advantage)
        terms.append((ratios, advs))
    return terms


def gspo_surrogate_from_batch(policy, batch: ObjectiveBatch,
                              clip: ClipConfig) -> float:
    return gspo_surrogate(batch_terms(policy, batch), clip)


def gspo_gradient(policy, batch: ObjectiveBatch, clip: ClipConfig) -> np.ndarray:
    """Exact parameter gradient of ``gspo_surrogate_from_batch``.

    For an active member, ``d/dtheta [s_i * A_i]`` is
    ``A_i * s_i * (1/|o_i|) * sum_t grad log pi(o_t)``; members on the
    clipped branch contribute exactly zero. At an exact clip boundary the
    unclipped subgradient is used (gradient checks exclude a neighborhood of
    the boundary, where the min is not differentiable).
    """
    if len(batch) == 0:
        raise AlignmentError("gradient over zero groups")
    grad = np.zeros_like(policy.params)
    n_groups = len(batch)
    for group in batch:
        if len(group) == 0:
            raise AlignmentError("empty group in gradient batch")
        scale_group = 1.0 / (n_groups * len(group))
        for m in group:
            if m.advantage == 0.0:
                continue
            new_lp = policy.logprob(m.prompt_tokens, m.tokens)
            ratio = sequence_ratio(new_lp, m.old_logprobs)
            if _is_clip_active(ratio, m.advantage, clip.epsilon):
                continue
            weight = scale_group * m.advantage * ratio / len(m.tokens)
            grad += weight * policy.grad_logprob(m.prompt_tokens, m.tokens)
    return grad


def refined_gradient(policy, fresh: ObjectiveBatch, replay: ObjectiveBatch,
                     mix: MixConfig, clip: ClipConfig) -> np.ndarray:
    """Gradient of ``refined_objective`` over trajectory batches."""
    rho = mix.replay_ratio
    if rho == 0.0 or not replay:
        return gspo_gradient(policy, fresh, clip)
    if rho == 1.0:
        return gspo_gradient(policy, replay, clip)
    return (1.0 - rho) * gspo_gradient(policy, fresh, clip) \
        + rho * gspo_gradient(policy, replay, clip)


# -- bridging from core rollout groups -------------------------------------

def members_from_group(group: RolloutGroup,
                       prompt_tokens: Sequence[int] = (),
                       advantage_set: Optional[np.ndarray] = None,
                       ) -> list[ObjectiveMember]:
    """Prepare a scored rollout group for the objective.

    Old log-probabilities come from each trajectory's own sampling record,
    which is what makes replayed members (sampled under an earlier snapshot)
    use their source policy in the ratio denominator.
    """
    advs = advantages(group) if advantage_set is None else advantage_set
    members = []
    for t, a in zip(group.members, advs):
        if len(t.sampling_logprobs) != len(t.tokens):
            raise MissingSourceLogprobError(
                f"trajectory for {t.prompt_id!r} lacks aligned source logprobs"
            )
        members.append(
            ObjectiveMember(
                prompt_tokens=tuple(prompt_tokens),
                tokens=t.tokens,
                old_logprobs=t.sampling_logprobs,
                advantage=float(a),
            )
        )
    return members


def _trajectory_has_source(t: Trajectory) -> bool:
    return len(t.sampling_logprobs) == len(t.tokens) and len(t.tokens) > 0
