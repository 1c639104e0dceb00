"""End-to-end training simulation on the emit-target-string toy task.

Each step draws an oversampled batch of prompts, rolls out K candidate
responses per prompt under the toy policy, scores them through the layered
reward chain, drops zero-variance groups, books replay admissions and
retirements and refinement enqueues, and ascends the replay-mixed clipped
surrogate. Runs are bit-reproducible: all randomness flows from one master
seed through named substreams.

The task: the policy must emit one fixed token sequence. Responses are
rendered as boxed token strings so the real reward chain (extraction,
canonicalized matching, expression rule, generative fallback) is exercised
on every sample; the generative layer is a deterministic scorer that reads
the target back out of the problem statement.
"""

from __future__ import annotations

import json
import re
from collections import deque
from dataclasses import dataclass, field
from typing import IO, Optional, Sequence

import numpy as np

from .buffers import (
    BufferConfig,
    RefinementBuffer,
    ReplayBuffer,
    assemble_batch,
    refinement_enqueue,
)
from .config import PipelineConfig
from .core import Prompt, PromptKind, RolloutGroup, Trajectory, group_stats
from .objective import (
    ClipConfig,
    ObjectiveMember,
    advantages,
    gspo_gradient,
    gspo_surrogate_from_batch,
)
from .rewards import RewardChainConfig, Verdict, canonicalize, extract_final_answer, score_rollout
from .sampler import plan_oversample, settle_round
from .simpolicy import ToyPolicy, sgd_update

TARGET_MARKER = "Emit exactly this token sequence:"

_TARGET_RE = re.compile(re.escape(TARGET_MARKER) + r"\s*([0-9 ]+)")


def render_response(tokens: Sequence[int]) -> str:
    """Render sampled tokens as the boxed answer text fed to the reward chain."""
    return "\\boxed{" + " ".join(str(t) for t in tokens) + "}"


def make_task_prompt(target_tokens: Sequence[int], index: int) -> Prompt:
    target = " ".join(str(t) for t in target_tokens)
    return Prompt(
        id=f"target-{index:04d}",
        text=f"{TARGET_MARKER} {target}",
        kind=PromptKind.VERIFIABLE,
        reference_answer=target,
    )


class ToyTaskVerifier:
    """Deterministic generative-layer stand-in for the toy task.

    Reads the expected token sequence back out of the problem statement
    (which refinement prompts embed verbatim) and scores the boxed answer
    against it. Being a pure function of its inputs, verdicts may be
    memoized.
    """

    deterministic = True

    def __init__(self):
        self.calls = 0

    def score(self, problem: str, solution: str) -> int:
        self.calls += 1
        match = _TARGET_RE.search(problem)
        if match is None:
            return 0
        target = canonicalize(match.group(1))
        answer = extract_final_answer(solution)
        if answer is None:
            return 0
        return 1 if canonicalize(answer) == target else 0


# -- vectorized surrogate/gradient fast path ---------------------------------

TermGroup = Sequence[tuple[tuple[int, ...], tuple[float, ...], float]]


def _reference_term(policy: ToyPolicy, groups: Sequence[TermGroup],
                    clip: ClipConfig) -> tuple[float, np.ndarray]:
    batch = [
        [ObjectiveMember((), tokens, old_lp, adv) for tokens, old_lp, adv in g]
        for g in groups
    ]
    return gspo_surrogate_from_batch(policy, batch, clip), \
        gspo_gradient(policy, batch, clip)


def surrogate_term(policy: ToyPolicy, groups: Sequence[TermGroup],
                   clip: ClipConfig) -> tuple[float, np.ndarray]:
    """Surrogate value and gradient for one objective term.

    Vectorized over members when all sequences share one length (always the
    case for the fixed-length toy task); otherwise defers to the reference
    member-by-member implementation in :mod:`proofpipe.objective`, against
    which this fast path is tested.
    """
    if not groups:
        raise ValueError("surrogate term over zero groups")
    lengths = {len(m[0]) for g in groups for m in g}
    if len(lengths) != 1:
        return _reference_term(policy, groups, clip)
    length = lengths.pop()
    if length == 0:
        return _reference_term(policy, groups, clip)

    tokens = []
    old_lp = []
    advs = []
    group_index = []
    group_sizes = []
    for gi, g in enumerate(groups):
        group_sizes.append(len(g))
        for toks, lps, adv in g:
            tokens.append(toks)
            old_lp.append(lps)
            advs.append(adv)
            group_index.append(gi)
    tok = np.asarray(tokens, dtype=np.intp)
    old = np.asarray(old_lp, dtype=np.float64)
    adv = np.asarray(advs, dtype=np.float64)
    gidx = np.asarray(group_index, dtype=np.intp)
    sizes = np.asarray(group_sizes, dtype=np.float64)
    n_members, _ = tok.shape
    n_groups = len(groups)

    ctx = np.column_stack([
        np.full(n_members, policy.start_row, dtype=np.intp), tok[:, :-1]
    ])
    rows = policy.params[ctx]
    shifted = rows - rows.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    new = np.take_along_axis(logp, tok[:, :, None], axis=2)[:, :, 0]

    eps = clip.epsilon
    ratio = np.exp((new.sum(axis=1) - old.sum(axis=1)) / length)
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps)
    terms = np.minimum(ratio * adv, clipped * adv)
    sums = np.zeros(n_groups)
    np.add.at(sums, gidx, terms)
    value = float(np.mean(sums / sizes))

    flat_region = ((adv > 0) & (ratio > 1.0 + eps)) \
        | ((adv < 0) & (ratio < 1.0 - eps))
    coef = np.where(flat_region, 0.0, adv * ratio) \
        / (n_groups * sizes[gidx] * length)
    grad = np.zeros_like(policy.params)
    np.add.at(grad, (ctx.ravel(), tok.ravel()), np.repeat(coef, length))
    np.add.at(grad, ctx.ravel(),
              -(np.exp(logp) * coef[:, None, None]).reshape(-1, policy.vocab_size))
    return value, grad


def _term_groups(groups: Sequence[RolloutGroup]) -> list[TermGroup]:
    prepared = []
    for group in groups:
        advs = advantages(group)
        prepared.append([
            (t.tokens, t.sampling_logprobs, float(a))
            for t, a in zip(group.members, advs)
        ])
    return prepared


# -- reporting ----------------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    drawn: int
    trained: int
    requeued: int
    dropped: int
    mean_reward: float
    surrogate: Optional[float]
    replay_size: int
    refinement_size: int
    replay_groups: int
    refinement_groups: int
    accounting_ok: bool

    def to_record(self) -> dict:
        return dict(self.__dict__)


@dataclass
class TrainReport:
    seed: int
    steps: list[StepRecord] = field(default_factory=list)
    final_mean_reward: Optional[float] = None
    final_snapshot: int = 0

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "steps": [s.to_record() for s in self.steps],
            "final_mean_reward": self.final_mean_reward,
            "final_snapshot": self.final_snapshot,
        }


# -- the loop -------------------------------------------------------------------

def _score_group(chain_cfg: RewardChainConfig, prompt: Prompt,
                 trajectories: list[Trajectory], verifier,
                 cache: Optional[dict]) -> RolloutGroup:
    scored = []
    for t in trajectories:
        text = render_response(t.tokens)
        if cache is not None:
            key = (prompt.text, prompt.reference_answer, text)
            verdict = cache.get(key)
            if verdict is None:
                verdict = score_rollout(chain_cfg, prompt, text, verifier)
                cache[key] = verdict
        else:
            verdict = score_rollout(chain_cfg, prompt, text, verifier)
        scored.append(t.with_reward(verdict.reward))
    return group_stats(scored)


def train_sim(cfg: PipelineConfig, seed: Optional[int] = None, verifier=None,
              trace_fp: Optional[IO[str]] = None) -> TrainReport:
    """Run the full rollout-score-filter-book-update loop.

    Coarse mode is ``mix.replay_ratio == 0`` and ``buffers.eta_ref == 0``;
    nonzero ratios activate the replay and refinement machinery. Identical
    seeds produce bit-identical reports.
    """
    master = cfg.seed if seed is None else seed
    children = np.random.SeedSequence(master).spawn(2)
    rng_rollout = np.random.default_rng(children[0])

    train = cfg.train
    sampler_cfg = cfg.sampler
    buffers_cfg = cfg.buffers
    length = len(train.target_tokens)
    k_samples = sampler_cfg.samples_per_prompt

    policy = ToyPolicy.uniform(train.vocab_size)
    verifier = verifier if verifier is not None else ToyTaskVerifier()
    cache: Optional[dict] = {} if getattr(verifier, "deterministic", False) else None

    # Coarse mode (both ratios zero) runs without buffer bookkeeping at all.
    use_refinement = buffers_cfg.eta_ref > 0
    use_replay = buffers_cfg.replay_ratio > 0

    pool_size = train.pool_size or (
        sampler_cfg.oversample_batch + sampler_cfg.prompt_batch
    )
    queue: deque[Prompt] = deque(
        make_task_prompt(train.target_tokens, i) for i in range(pool_size)
    )
    prompt_by_id = {p.id: p for p in queue}
    replay_buf = ReplayBuffer()
    refinement_buf = RefinementBuffer()

    def rollout(prompts: Sequence[Prompt]) -> list[list[Trajectory]]:
        if not prompts:
            return []
        toks, lps, _ = policy.sample_batch(
            (), len(prompts) * k_samples, length, rng=rng_rollout
        )
        out = []
        for i, prompt in enumerate(prompts):
            members = [
                Trajectory(
                    prompt_id=prompt.id,
                    tokens=tuple(toks[i * k_samples + j]),
                    sampling_logprobs=tuple(lps[i * k_samples + j]),
                    source_policy=policy.snapshot.step_index,
                )
                for j in range(k_samples)
            ]
            out.append(members)
        return out

    report = TrainReport(seed=master)
    for step_index in range(train.steps):
        plan = assemble_batch(
            queue, refinement_buf, replay_buf, sampler_cfg.prompt_batch, buffers_cfg
        )
        fresh_target = len(plan.fresh)
        total_draw = (fresh_target * sampler_cfg.oversample_batch) \
            // sampler_cfg.prompt_batch
        extra = plan_oversample(queue, sampler_cfg,
                                draw_size=max(0, total_draw - fresh_target))
        fresh_drawn = list(plan.fresh) + list(extra.prompts)

        refinement_prompts = [
            Prompt(id=f"refine-{step_index}-{i}", text=rp.render(),
                   kind=PromptKind.REFINEMENT)
            for i, rp in enumerate(plan.refinement)
        ]
        originals = list(plan.refinement)
        replay_prompts = [prompt_by_id[pid] for pid in plan.replay_ids]
        replay_stored = [
            replay_buf.select(pid, policy, buffers_cfg) for pid in plan.replay_ids
        ]

        all_prompts = fresh_drawn + refinement_prompts + replay_prompts
        rollouts = rollout(all_prompts)
        n_fresh = len(fresh_drawn)
        n_refine = len(refinement_prompts)

        fresh_groups = [
            (p, _score_group(cfg.rewards, p, members, verifier, cache))
            for p, members in zip(fresh_drawn, rollouts[:n_fresh])
        ]
        refine_groups = [
            _score_group(cfg.rewards, p, members, verifier, cache)
            for p, members in zip(refinement_prompts,
                                  rollouts[n_fresh:n_fresh + n_refine])
        ]
        replay_groups = []
        for (p, stored, members) in zip(replay_prompts, replay_stored,
                                        rollouts[n_fresh + n_refine:]):
            fresh_part = _score_group(cfg.rewards, p, members, verifier, cache)
            replay_groups.append(
                (p, group_stats([stored, *fresh_part.members]), fresh_part)
            )

        outcome = settle_round(fresh_groups, queue, sampler_cfg,
                               target=fresh_target)
        accounting_ok = len(fresh_groups) == (
            len(outcome.trained) + len(outcome.requeued) + len(outcome.dropped)
        )

        # Bookkeeping over every scored fresh group: rollout cost is paid
        # whether or not the group trains this step.
        for prompt, group in fresh_groups:
            if use_replay:
                replay_buf.admit(group, buffers_cfg, policy=policy)
                replay_buf.retire(prompt.id, group.success_count, buffers_cfg)
            if use_refinement:
                refinement_enqueue(
                    refinement_buf, group, prompt, buffers_cfg,
                    render=lambda t: render_response(t.tokens),
                )
        for prompt, _, fresh_part in replay_groups:
            replay_buf.retire(prompt.id, fresh_part.success_count, buffers_cfg)

        fresh_term = _term_groups(
            [g for _, g in outcome.trained] + refine_groups
        )
        replay_term = _term_groups([g for _, g, _ in replay_groups])

        surrogate_value: Optional[float] = None
        lr = train.learning_rate
        for _ in range(train.updates_per_rollout):
            rho = cfg.mix.replay_ratio
            if fresh_term and replay_term and 0.0 < rho < 1.0:
                v_f, g_f = surrogate_term(policy, fresh_term, cfg.clip)
                v_r, g_r = surrogate_term(policy, replay_term, cfg.clip)
                value = (1.0 - rho) * v_f + rho * v_r
                grad = (1.0 - rho) * g_f + rho * g_r
            elif replay_term and (rho == 1.0 or not fresh_term):
                value, grad = surrogate_term(policy, replay_term, cfg.clip)
            elif fresh_term:
                value, grad = surrogate_term(policy, fresh_term, cfg.clip)
            else:
                break
            if surrogate_value is None:
                surrogate_value = value
            policy = sgd_update(policy, grad, lr)

        if trace_fp is not None:
            for _, group in outcome.trained:
                for t in group.members:
                    trace_fp.write(json.dumps(t.to_record()) + "\n")

        mean_reward = (
            sum(g.mean_reward for _, g in fresh_groups) / len(fresh_groups)
            if fresh_groups else 0.0
        )
        report.steps.append(StepRecord(
            step=step_index,
            drawn=len(fresh_groups),
            trained=len(outcome.trained),
            requeued=len(outcome.requeued),
            dropped=len(outcome.dropped),
            mean_reward=mean_reward,
            surrogate=surrogate_value,
            replay_size=len(replay_buf),
            refinement_size=len(refinement_buf),
            replay_groups=len(replay_groups),
            refinement_groups=len(refine_groups),
            accounting_ok=accounting_ok,
        ))

        # Recycle: trained and dropped prompts return to the pool tail, as do
        # fresh prompts displaced by refinement queries (held, never lost).
        queue.extend(p for p, _ in outcome.trained)
        queue.extend(p for p, _ in outcome.dropped)
        queue.extend(plan.displaced)

    report.final_mean_reward = (
        report.steps[-1].mean_reward if report.steps else None
    )
    report.final_snapshot = policy.snapshot.step_index
    return report
