"""Differentiable bigram toy policy plus a finite-difference gradient oracle.

The policy is a table of logits indexed by (previous token, next token),
with one extra row for the start-of-sequence context. Softmax over each row
gives the conditional next-token distribution. The parameterization is rich
enough to make sequence credit assignment nontrivial yet small enough that
every gradient can be checked exhaustively against central differences.

Policy evaluation is pure on an immutable snapshot; updates return a new
policy (copy-on-write), so rollout readers never observe a half-applied step.
"""

from __future__ import annotations

import json
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .core import PolicySnapshotId, Trajectory
from .errors import ShapeMismatchError, VocabMismatchError

RngLike = Union[int, np.random.Generator]


def _log_softmax_rows(rows: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax, numerically stable.

    Per-row results depend only on that row's values, so the single-sample
    and batched sampling paths produce bit-identical log-probabilities.
    """
    shifted = rows - rows.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _as_rng(seed: RngLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


class ToyPolicy:
    """Bigram softmax policy over a small vocabulary.

    ``params`` has shape ``(vocab_size + 1, vocab_size)``; row ``vocab_size``
    is the start-of-sequence context.
    """

    def __init__(self, vocab_size: int, params: np.ndarray,
                 snapshot: PolicySnapshotId = PolicySnapshotId(0)):
        if vocab_size < 2:
            raise ValueError("vocab_size must be at least 2")
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (vocab_size + 1, vocab_size):
            raise ShapeMismatchError(
                f"params shape {params.shape} != {(vocab_size + 1, vocab_size)}"
            )
        self.vocab_size = vocab_size
        self.params = params
        self.snapshot = snapshot
        self.params.setflags(write=False)

    # -- construction ----------------------------------------------------

    @classmethod
    def uniform(cls, vocab_size: int) -> "ToyPolicy":
        return cls(vocab_size, np.zeros((vocab_size + 1, vocab_size)))

    @property
    def start_row(self) -> int:
        return self.vocab_size

    def _check_tokens(self, tokens: Sequence[int]) -> None:
        for tok in tokens:
            if not 0 <= tok < self.vocab_size:
                raise VocabMismatchError(
                    f"token {tok} outside vocabulary of size {self.vocab_size}"
                )

    def _contexts(self, prompt_tokens: Sequence[int],
                  target_tokens: Sequence[int]) -> np.ndarray:
        """Row index conditioning each target position."""
        first = prompt_tokens[-1] if prompt_tokens else self.start_row
        return np.array([first, *target_tokens[:-1]], dtype=np.intp)

    # -- evaluation --------------------------------------------------------

    def next_token_probs(self, prev_token: Optional[int]) -> np.ndarray:
        """Full next-token distribution given the previous token (or start)."""
        row = self.start_row if prev_token is None else prev_token
        if row != self.start_row:
            self._check_tokens([row])
        return np.exp(_log_softmax_rows(self.params[row][None, :])[0])

    def logprob(self, prompt_tokens: Sequence[int],
                target_tokens: Sequence[int]) -> np.ndarray:
        """Per-token log-probabilities of ``target_tokens`` after the prompt."""
        self._check_tokens(prompt_tokens)
        self._check_tokens(target_tokens)
        if not target_tokens:
            return np.zeros(0)
        ctx = self._contexts(prompt_tokens, target_tokens)
        logp = _log_softmax_rows(self.params[ctx])
        return logp[np.arange(len(target_tokens)), np.asarray(target_tokens)]

    def grad_logprob(self, prompt_tokens: Sequence[int],
                     target_tokens: Sequence[int]) -> np.ndarray:
        """Gradient of the summed log-likelihood with respect to ``params``.

        Each position adds 1 on the realized (context, token) cell and
        subtracts the context row's probability vector, so every row of the
        gradient sums to zero.
        """
        self._check_tokens(prompt_tokens)
        self._check_tokens(target_tokens)
        grad = np.zeros_like(self.params)
        if not target_tokens:
            return grad
        ctx = self._contexts(prompt_tokens, target_tokens)
        probs = np.exp(_log_softmax_rows(self.params[ctx]))
        np.subtract.at(grad, ctx, probs)
        np.add.at(grad, (ctx, np.asarray(target_tokens)), 1.0)
        return grad

    # -- sampling ----------------------------------------------------------

    def sample(self, prompt_tokens: Sequence[int], max_len: int,
               temperature: float = 1.0, seed: RngLike = 0,
               end_token: Optional[int] = None) -> Trajectory:
        """Sample one trajectory autoregressively.

        Log-probabilities are recorded at the sampling temperature, so
        importance ratios against a later policy remain well-defined.
        Deterministic for a fixed seed.
        """
        tokens, logprobs, truncated = self._sample_batch_arrays(
            prompt_tokens, 1, max_len, temperature, _as_rng(seed), end_token
        )
        return Trajectory(
            prompt_id="",
            tokens=tuple(int(t) for t in tokens[0]),
            sampling_logprobs=tuple(float(x) for x in logprobs[0]),
            source_policy=self.snapshot.step_index,
            truncated=bool(truncated[0]),
        )

    def sample_batch(self, prompt_tokens: Sequence[int], n: int, max_len: int,
                     temperature: float = 1.0, rng: RngLike = 0,
                     end_token: Optional[int] = None):
        """Vectorized sampling of ``n`` trajectories; see ``sample``."""
        return self._sample_batch_arrays(
            prompt_tokens, n, max_len, temperature, _as_rng(rng), end_token
        )

    def _sample_batch_arrays(self, prompt_tokens, n, max_len, temperature,
                             rng, end_token):
        if max_len < 1:
            raise ValueError("max_len must be at least 1")
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        self._check_tokens(prompt_tokens)
        start = prompt_tokens[-1] if prompt_tokens else self.start_row
        prev = np.full(n, start, dtype=np.intp)
        alive = np.ones(n, dtype=bool)
        out_tokens: list[list[int]] = [[] for _ in range(n)]
        out_logprobs: list[list[float]] = [[] for _ in range(n)]
        for _ in range(max_len):
            logp = _log_softmax_rows(self.params[prev] / temperature)
            u = rng.random(n)
            cdf = np.cumsum(np.exp(logp), axis=1)
            toks = (cdf > (u * cdf[:, -1])[:, None]).argmax(axis=1)
            for i in range(n):
                if alive[i]:
                    out_tokens[i].append(int(toks[i]))
                    out_logprobs[i].append(float(logp[i, toks[i]]))
            prev = toks.astype(np.intp)
            if end_token is not None:
                alive &= toks != end_token
                if not alive.any():
                    break
        truncated = alive if end_token is not None else np.zeros(n, dtype=bool)
        return out_tokens, out_logprobs, truncated

    # -- persistence -------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "params": self.params.ravel().tolist(),
            "snapshot": self.snapshot.step_index,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ToyPolicy":
        vocab = obj["vocab_size"]
        params = np.array(obj["params"], dtype=np.float64).reshape(vocab + 1, vocab)
        return cls(vocab, params, PolicySnapshotId(obj["snapshot"]))

    def save(self, path: str) -> None:
        with open(path, "w") as fp:
            json.dump(self.to_json(), fp)

    @classmethod
    def load(cls, path: str) -> "ToyPolicy":
        with open(path) as fp:
            return cls.from_json(json.load(fp))


def sgd_update(policy: ToyPolicy, gradient: np.ndarray,
               learning_rate: float) -> ToyPolicy:
    """Ascend the objective: ``params + lr * gradient``, new snapshot id."""
    if learning_rate < 0:
        raise ValueError("learning_rate must be non-negative")
    gradient = np.asarray(gradient, dtype=np.float64)
    if gradient.shape != policy.params.shape:
        raise ShapeMismatchError(
            f"gradient shape {gradient.shape} != params {policy.params.shape}"
        )
    return ToyPolicy(
        policy.vocab_size,
        policy.params + learning_rate * gradient,
        policy.snapshot.next(),
    )


def finite_diff(objective: Callable[[np.ndarray], float], params: np.ndarray,
                step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient approximation of a scalar objective.

    The oracle against which every analytic gradient in the pipeline is
    checked; it must stay independent of those implementations.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = np.asarray(params, dtype=np.float64)
    grad = np.zeros_like(params)
    flat = grad.ravel()
    base = params.ravel()
    for j in range(base.size):
        bumped = base.copy()
        bumped[j] = base[j] + step
        up = objective(bumped.reshape(params.shape))
        bumped[j] = base[j] - step
        down = objective(bumped.reshape(params.shape))
        flat[j] = (up - down) / (2.0 * step)
    return grad
