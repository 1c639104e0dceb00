"""Reverse-perplexity curriculum for supervised fine-tuning.

Examples are scored once, by length-normalized perplexity under the initial
policy, and then presented in descending order within every epoch: the pass
starts from the teacher trajectories most mismatched with the policy and
consolidates on familiar ones. The validation truncation rate serves as the
operational sufficiency indicator for this stage.

Scoring is pure and parallelizable across examples; ``sft_epoch`` mutates
policy state and is single-threaded by contract.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import IO, Iterable, Iterator, Optional, Protocol, Sequence

import numpy as np

from .errors import EmptyInputError, EmptyTargetError, UnscoredError
from .simpolicy import ToyPolicy


class PolicyInterface(Protocol):
    def logprob(self, prompt_tokens: Sequence[int],
                target_tokens: Sequence[int]) -> np.ndarray: ...


@dataclass(frozen=True)
class ScoredExample:
    """One SFT prompt/target pair with its curriculum score.

    ``ppl`` is ``exp`` of the mean per-token negative log-likelihood of the
    target under the scoring policy; ``None`` until scored.
    """

    index: int
    prompt_tokens: tuple[int, ...]
    target_tokens: tuple[int, ...]
    ppl: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "prompt_tokens", tuple(self.prompt_tokens))
        object.__setattr__(self, "target_tokens", tuple(self.target_tokens))
        if len(self.target_tokens) < 1:
            raise ValueError(f"example {self.index}: empty target")
        if self.ppl is not None and not self.ppl > 0:
            raise ValueError(f"example {self.index}: ppl must be positive")

    @property
    def target_length(self) -> int:
        return len(self.target_tokens)

    def to_record(self) -> dict:
        record = {
            "index": self.index,
            "prompt_tokens": list(self.prompt_tokens),
            "target_tokens": list(self.target_tokens),
        }
        if self.ppl is not None:
            record["ppl"] = self.ppl
        return record

    @classmethod
    def from_record(cls, record: dict) -> "ScoredExample":
        return cls(
            index=record["index"],
            prompt_tokens=tuple(record["prompt_tokens"]),
            target_tokens=tuple(record["target_tokens"]),
            ppl=record.get("ppl"),
        )


def score_perplexity(policy: PolicyInterface, prompt_tokens: Sequence[int],
                     target_tokens: Sequence[int]) -> float:
    """Length-normalized perplexity of the target under ``policy``.

    Computed in nats as ``exp(-(1/T) * sum_t log p(y_t | x, y_<t))``; the
    exponentiation makes the log base immaterial. Per-token log-probabilities
    are summed with ``math.fsum`` so long targets do not drift.
    """
    if len(target_tokens) == 0:
        raise EmptyTargetError("perplexity needs at least one target token")
    logprobs = policy.logprob(prompt_tokens, target_tokens)
    return math.exp(-math.fsum(float(x) for x in logprobs) / len(target_tokens))


def score_examples(policy: PolicyInterface,
                   examples: Iterable[ScoredExample]) -> list[ScoredExample]:
    """Score every example; returns new instances with ``ppl`` filled in."""
    return [
        replace(ex, ppl=score_perplexity(policy, ex.prompt_tokens, ex.target_tokens))
        for ex in examples
    ]


def order_curriculum(examples: Sequence[ScoredExample]) -> list[ScoredExample]:
    """Sort examples by descending perplexity, ties by ascending index.

    The output is a permutation of the input; applying the order twice is a
    no-op. The tie-break keeps runs reproducible.
    """
    for ex in examples:
        if ex.ppl is None:
            raise UnscoredError(f"example {ex.index} has no perplexity score")
    return sorted(examples, key=lambda ex: (-ex.ppl, ex.index))


def truncation_rate(generations: Sequence[tuple[int, int]]) -> float:
    """Fraction of generations whose length reached the limit."""
    if not generations:
        raise EmptyInputError("truncation rate over zero generations")
    for _, limit in generations:
        if limit <= 0:
            raise ValueError("generation limits must be positive")
    return sum(1 for length, limit in generations if length >= limit) / len(generations)


def sft_epoch(policy: ToyPolicy, ordered: Sequence[ScoredExample],
              learning_rate: float) -> tuple[ToyPolicy, float]:
    """One pass of per-example cross-entropy steps in the given order.

    Returns the updated policy (snapshot incremented once per pass) and the
    mean per-token negative log-likelihood, each example measured at the
    moment it is visited.
    """
    params = policy.params.copy()
    nlls = []
    for ex in ordered:
        current = ToyPolicy(policy.vocab_size, params, policy.snapshot)
        logprobs = current.logprob(ex.prompt_tokens, ex.target_tokens)
        nlls.append(-math.fsum(float(x) for x in logprobs) / len(ex.target_tokens))
        grad = current.grad_logprob(ex.prompt_tokens, ex.target_tokens)
        params = params + learning_rate * grad
    updated = ToyPolicy(policy.vocab_size, params, policy.snapshot.next())
    mean_nll = sum(nlls) / len(nlls) if nlls else 0.0
    return updated, mean_nll


# -- JSONL example files (curriculum CLI) ---------------------------------

def write_examples(examples: Iterable[ScoredExample], fp: IO[str]) -> int:
    n = 0
    for ex in examples:
        fp.write(json.dumps(ex.to_record()) + "\n")
        n += 1
    return n


def read_examples(fp: IO[str]) -> Iterator[ScoredExample]:
    for line in fp:
        line = line.strip()
        if line:
            yield ScoredExample.from_record(json.loads(line))
