"""Experience replay and self-refinement buffers, plus batch assembly.

The replay buffer keeps rare successful trajectories for hard queries: a
query is admitted when its rollout group contains some but strictly fewer
than ``admit_success_max`` successes (default: exactly one), stored
successes are deduplicated by token sequence, the lowest-entropy stored
trajectory is selected for injection, and the query is retired once fresh
on-policy rollouts solve it often enough.

The refinement buffer converts recent failures into repair prompts: when a
group's mean proof reward falls below ``tau_ref``, each failed member is
turned into a prompt containing the original problem and the failed answer.
Failed refinement attempts are never re-enqueued.

Buffers are single-writer; ``assemble_batch`` reads both atomically.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, replace
from typing import IO, Callable, Optional, Sequence

from .core import PolicySnapshotId, Prompt, PromptKind, RolloutGroup, Trajectory
from .errors import EmptyFreshQueueError, NotInBuffer

DEFAULT_REFINEMENT_TEMPLATE = (
    "The following problem was attempted earlier and the attempt below did "
    "not hold up.\n\nProblem:\n{problem}\n\nPrevious attempt:\n{response}\n\n"
    "Review the attempt, point out every flaw or missing justification, "
    "repair them, and write a complete corrected solution."
)


@dataclass(frozen=True)
class BufferConfig:
    """Thresholds and ratios for replay and refinement bookkeeping."""

    tau_ref: float = 0.5
    eta_ref: float = 0.2
    replay_ratio: float = 0.25
    admit_success_max: int = 2
    retire_success_min: int = 4
    topk_for_entropy: int = 16

    def __post_init__(self):
        if not 0 < self.tau_ref <= 1:
            raise ValueError("tau_ref must lie in (0, 1]")
        if not 0 <= self.eta_ref < 1:
            raise ValueError("eta_ref must lie in [0, 1)")
        if not 0 <= self.replay_ratio < 1:
            raise ValueError("replay_ratio must lie in [0, 1)")
        if not 0 < self.admit_success_max <= self.retire_success_min:
            raise ValueError(
                "need 0 < admit_success_max <= retire_success_min"
            )
        if self.topk_for_entropy < 1:
            raise ValueError("topk_for_entropy must be positive")


@dataclass(frozen=True)
class ReplayEntry:
    """Stored rare successes for one hard query."""

    prompt_id: str
    trajectories: tuple[Trajectory, ...]
    entropy_estimates: tuple[float, ...]
    admitted_at: PolicySnapshotId

    def __post_init__(self):
        if len(self.entropy_estimates) != len(self.trajectories):
            raise ValueError("entropy estimates misaligned with trajectories")
        for t in self.trajectories:
            if t.reward != 1:
                raise ValueError("replay entries may only store successes")
        seqs = [t.tokens for t in self.trajectories]
        if len(set(seqs)) != len(seqs):
            raise ValueError("replay entries must be pairwise distinct")
        for h in self.entropy_estimates:
            if h < 0:
                raise ValueError("entropy estimates must be non-negative")


@dataclass(frozen=True)
class RefinementPrompt:
    """Inputs for one critique-and-repair prompt."""

    original_prompt_id: str
    original_text: str
    failed_response: str
    created_at: PolicySnapshotId

    def render(self, template: str = DEFAULT_REFINEMENT_TEMPLATE) -> str:
        return template.format(
            problem=self.original_text, response=self.failed_response
        )


def entropy_estimate(trajectory: Trajectory, policy, cfg: BufferConfig,
                     prompt_tokens: Sequence[int] = ()) -> float:
    """Mean per-position entropy of the truncated next-token distribution.

    At each position the top-k probabilities are kept and the residual mass
    ``1 - sum(top-k)`` is lumped into one pseudo-outcome, which upper-bounds
    the discarded contribution by a single term. Result in nats.
    """
    if not trajectory.tokens:
        return 0.0
    k = cfg.topk_for_entropy
    prev: Optional[int] = prompt_tokens[-1] if prompt_tokens else None
    total = 0.0
    for token in trajectory.tokens:
        probs = sorted(policy.next_token_probs(prev), reverse=True)
        top = probs[:k]
        residual = max(0.0, 1.0 - math.fsum(top))
        outcomes = top + ([residual] if residual > 0.0 else [])
        total += -math.fsum(p * math.log(p) for p in outcomes if p > 0.0)
        prev = token
    return total / len(trajectory.tokens)


class ReplayBuffer:
    """Keyed store of rare successful trajectories, FIFO by admission."""

    def __init__(self):
        self._entries: dict[str, ReplayEntry] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, prompt_id: str) -> bool:
        return prompt_id in self._entries

    def resident_ids(self) -> list[str]:
        return list(self._entries.keys())

    def entry(self, prompt_id: str) -> ReplayEntry:
        if prompt_id not in self._entries:
            raise NotInBuffer(f"prompt {prompt_id!r} not in replay buffer")
        return self._entries[prompt_id]

    def admit(self, group: RolloutGroup, cfg: BufferConfig,
              policy=None, prompt_tokens: Sequence[int] = ()) -> bool:
        """Admit the group's successes iff the query is hard but solvable.

        Fires when ``0 < n_+ < admit_success_max``; successful trajectories
        are appended with dedup by token sequence. No-op otherwise.
        """
        if not 0 < group.success_count < cfg.admit_success_max:
            return False
        successes = [t for t in group.members if t.reward == 1]
        existing = self._entries.get(group.prompt_id)
        seen = set(t.tokens for t in existing.trajectories) if existing else set()
        fresh = []
        for t in successes:
            if t.tokens not in seen:
                seen.add(t.tokens)
                fresh.append(t)
        if existing is None:
            estimates = tuple(
                entropy_estimate(t, policy, cfg, prompt_tokens) if policy else 0.0
                for t in fresh
            )
            self._entries[group.prompt_id] = ReplayEntry(
                prompt_id=group.prompt_id,
                trajectories=tuple(fresh),
                entropy_estimates=estimates,
                admitted_at=PolicySnapshotId(fresh[0].source_policy),
            )
        elif fresh:
            estimates = tuple(
                entropy_estimate(t, policy, cfg, prompt_tokens) if policy else 0.0
                for t in fresh
            )
            self._entries[group.prompt_id] = replace(
                existing,
                trajectories=existing.trajectories + tuple(fresh),
                entropy_estimates=existing.entropy_estimates + estimates,
            )
        return True

    def retire(self, prompt_id: str, fresh_success_count: int,
               cfg: BufferConfig) -> bool:
        """Remove the query once on-policy rollouts solve it often enough."""
        if prompt_id not in self._entries:
            return False
        if fresh_success_count >= cfg.retire_success_min:
            del self._entries[prompt_id]
            return True
        return False

    def select(self, prompt_id: str, policy, cfg: BufferConfig,
               prompt_tokens: Sequence[int] = ()) -> Trajectory:
        """Lowest-entropy stored trajectory under the current policy.

        Ties break toward the earliest-admitted trajectory.
        """
        entry = self.entry(prompt_id)
        scored = [
            (entropy_estimate(t, policy, cfg, prompt_tokens), i)
            for i, t in enumerate(entry.trajectories)
        ]
        _, best = min(scored)
        return entry.trajectories[best]

    # -- checkpointing ----------------------------------------------------

    def save(self, fp: IO[str]) -> int:
        n = 0
        for entry in self._entries.values():
            fp.write(json.dumps({
                "prompt_id": entry.prompt_id,
                "admitted_at": entry.admitted_at.step_index,
                "entropy_estimates": list(entry.entropy_estimates),
                "trajectories": [t.to_record() for t in entry.trajectories],
            }) + "\n")
            n += 1
        return n

    @classmethod
    def load(cls, fp: IO[str]) -> "ReplayBuffer":
        buffer = cls()
        for line in fp:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            buffer._entries[record["prompt_id"]] = ReplayEntry(
                prompt_id=record["prompt_id"],
                trajectories=tuple(
                    Trajectory.from_record(r) for r in record["trajectories"]
                ),
                entropy_estimates=tuple(record["entropy_estimates"]),
                admitted_at=PolicySnapshotId(record["admitted_at"]),
            )
        return buffer


class RefinementBuffer:
    """FIFO queue of critique-and-repair prompts."""

    def __init__(self):
        self._queue: deque[RefinementPrompt] = deque()

    def __len__(self) -> int:
        return len(self._queue)

    def peek_all(self) -> list[RefinementPrompt]:
        return list(self._queue)

    def push(self, prompt: RefinementPrompt) -> None:
        self._queue.append(prompt)

    def pop(self, n: int) -> list[RefinementPrompt]:
        return [self._queue.popleft() for _ in range(min(n, len(self._queue)))]

    def save(self, fp: IO[str]) -> int:
        n = 0
        for rp in self._queue:
            fp.write(json.dumps({
                "original_prompt_id": rp.original_prompt_id,
                "original_text": rp.original_text,
                "failed_response": rp.failed_response,
                "created_at": rp.created_at.step_index,
            }) + "\n")
            n += 1
        return n

    @classmethod
    def load(cls, fp: IO[str]) -> "RefinementBuffer":
        buffer = cls()
        for line in fp:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            buffer.push(RefinementPrompt(
                original_prompt_id=record["original_prompt_id"],
                original_text=record["original_text"],
                failed_response=record["failed_response"],
                created_at=PolicySnapshotId(record["created_at"]),
            ))
        return buffer


def default_render(trajectory: Trajectory) -> str:
    return " ".join(str(t) for t in trajectory.tokens)


def refinement_enqueue(buffer: RefinementBuffer, group: RolloutGroup,
                       original_prompt: Prompt, cfg: BufferConfig,
                       render: Callable[[Trajectory], str] = default_render,
                       ) -> int:
    """Enqueue one repair prompt per failed member when the gate fires.

    The gate is ``mean_reward < tau_ref`` with strict inequality. Groups
    that originated from refinement prompts never re-enqueue, so repair
    attempts are not recursively stacked onto queries outside the learnable
    region.
    """
    if original_prompt.kind is PromptKind.REFINEMENT:
        return 0
    if not group.mean_reward < cfg.tau_ref:
        return 0
    snapshot = PolicySnapshotId(
        max((t.source_policy for t in group.members), default=0)
    )
    count = 0
    for t in group.members:
        if t.reward == 0:
            buffer.push(RefinementPrompt(
                original_prompt_id=original_prompt.id,
                original_text=original_prompt.text,
                failed_response=render(t),
                created_at=snapshot,
            ))
            count += 1
    return count


# -- compatibility wrappers (operation-style surface) -----------------------

def replay_admit(buffer: ReplayBuffer, group: RolloutGroup, cfg: BufferConfig,
                 policy=None) -> bool:
    return buffer.admit(group, cfg, policy=policy)


def replay_retire(buffer: ReplayBuffer, prompt_id: str,
                  fresh_success_count: int, cfg: BufferConfig) -> bool:
    return buffer.retire(prompt_id, fresh_success_count, cfg)


def replay_select(buffer: ReplayBuffer, prompt_id: str, policy,
                  cfg: BufferConfig) -> Trajectory:
    return buffer.select(prompt_id, policy, cfg)


# -- batch assembly -----------------------------------------------------------

@dataclass(frozen=True)
class BatchPlan:
    """Slot assignment for one training batch.

    ``displaced`` holds the fresh prompts pushed out by refinement queries;
    the caller keeps them in a holding queue so no fresh data is dropped.
    """

    fresh: tuple[Prompt, ...]
    refinement: tuple[RefinementPrompt, ...]
    replay_ids: tuple[str, ...]
    displaced: tuple[Prompt, ...]

    @property
    def size(self) -> int:
        return len(self.fresh) + len(self.refinement) + len(self.replay_ids)


def assemble_batch(fresh_queue: deque, refinement_buffer: RefinementBuffer,
                   replay_buffer: ReplayBuffer, batch_size: int,
                   cfg: BufferConfig) -> BatchPlan:
    """Fill a batch with refinement, replay, and fresh slots.

    ``floor(eta_ref * B)`` slots go to refinement prompts and, of the
    remainder, ``floor(replay_ratio * (B - n_ref))`` to replay queries in
    FIFO admission order; both take fewer when their buffer is smaller.
    The rest are fresh prompts. Fresh prompts displaced by refinement
    queries move to the plan's holding list, never silently dropped.
    """
    if not fresh_queue:
        raise EmptyFreshQueueError("batch assembly requires fresh prompts")
    n_ref = min(math.floor(cfg.eta_ref * batch_size), len(refinement_buffer))
    n_rep = min(
        math.floor(cfg.replay_ratio * (batch_size - n_ref)), len(replay_buffer)
    )
    refinement = refinement_buffer.pop(n_ref)
    replay_ids = replay_buffer.resident_ids()[:n_rep]
    n_fresh = batch_size - n_ref - n_rep
    fresh = [fresh_queue.popleft() for _ in range(min(n_fresh, len(fresh_queue)))]
    displaced = [fresh_queue.popleft() for _ in range(min(n_ref, len(fresh_queue)))]
    return BatchPlan(
        fresh=tuple(fresh),
        refinement=tuple(refinement),
        replay_ids=tuple(replay_ids),
        displaced=tuple(displaced),
    )
