"""Solve-verify-refine inference loop with explicit stopping rules.

One run drafts a candidate, refines it, then alternates verification (a
structured bug report) and a verdict that interprets the report as pass or
fail. A pass re-verifies the unchanged candidate; a fail routes back through
refinement. The candidate is accepted after ``max_true_rounds`` consecutive
passes; a run aborts after ``max_false_rounds`` consecutive fails or
``max_exploration_rounds`` verdicts in total. Up to ``max_runs`` independent
runs are launched per problem and the first accepted candidate wins.

Each run owns its state exclusively; runs may execute concurrently for
distinct problems or run indices. With scripted backends the whole trace is
bit-reproducible.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import IO, Iterable, Optional, Protocol, Sequence

from .errors import (
    AllRunsExhaustedError,
    BackendError,
    EmptyTraceError,
)
from .scenario import MockScenario

DEFAULT_SOLVER_TEMPLATE = (
    "Please solve the following olympiad problem. Show your complete "
    "reasoning and proof.\n"
    "1. Please use LaTeX format to represent the variables and formulas "
    "used in the solution process and results.\n"
    "2. If the problem asks you to find specific values, please put the "
    "final answer(s) in \\boxed{{}}.\n"
    "3. If the problem requires a proof, present a clear and rigorous "
    "argument.\n\n{problem}"
)

DEFAULT_REFINE_TEMPLATE = (
    "Problem:\n{problem}\n\nCurrent candidate solution:\n{candidate}\n\n"
    "Review notes:\n{bug_report}\n\nRework the candidate: repair every "
    "flagged issue, strengthen weak steps, and output a complete final "
    "solution."
)

DEFAULT_VERIFY_TEMPLATE = (
    "Problem:\n{problem}\n\nCandidate solution:\n{candidate}\n\n"
    "Examine the candidate line by line and write a structured bug report "
    "listing every critical error, unjustified claim, or missing case. "
    "If nothing is wrong, say so explicitly."
)

DEFAULT_VERDICT_TEMPLATE = (
    "Bug report:\n{bug_report}\n\nBased on this report, answer with exactly "
    "one token: ACCEPT if the solution is sound, REJECT if it is beyond "
    "repair, or REFINE if it should be revised."
)

VERDICT_PASS = "ACCEPT"
VERDICT_TOKENS = ("ACCEPT", "REJECT", "REFINE")


@dataclass(frozen=True)
class TtsConfig:
    max_true_rounds: int = 5
    max_false_rounds: int = 10
    max_exploration_rounds: int = 30
    max_runs: int = 10
    temperature: float = 1.0
    top_p: float = 0.95
    max_tokens: int = 160_000

    def __post_init__(self):
        for name in ("max_true_rounds", "max_false_rounds",
                     "max_exploration_rounds", "max_runs", "max_tokens"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must lie in (0, 1]")


@dataclass(frozen=True)
class TtsPromptTemplates:
    """Prompt texts for the four backend roles; ``{problem}``,
    ``{candidate}`` and ``{bug_report}`` are substituted."""

    solver: str = DEFAULT_SOLVER_TEMPLATE
    refine: str = DEFAULT_REFINE_TEMPLATE
    verify: str = DEFAULT_VERIFY_TEMPLATE
    verdict: str = DEFAULT_VERDICT_TEMPLATE


class Phase(str, Enum):
    SOLVE = "solve"
    REFINE = "refine"
    VERIFY = "verify"
    VERDICT = "verdict"
    ACCEPTED = "accepted"
    ABORTED = "aborted"


TERMINAL_PHASES = (Phase.ACCEPTED, Phase.ABORTED)


class ActionKind(str, Enum):
    INITIAL_SOLVE = "initial_solve"
    REFINEMENT = "refinement"
    VERIFICATION = "verification"
    VERDICT_PARSE = "verdict_parse"


@dataclass(frozen=True)
class TtsAction:
    kind: ActionKind
    generated_tokens: int
    wall_time: float = 0.0

    def __post_init__(self):
        if self.generated_tokens < 0:
            raise ValueError("generated_tokens must be non-negative")


@dataclass(frozen=True)
class TtsRunState:
    phase: Phase = Phase.SOLVE
    consecutive_true: int = 0
    consecutive_false: int = 0
    rounds_used: int = 0
    current_candidate: str = ""
    bug_report: Optional[str] = None
    abort_reason: Optional[str] = None

    @property
    def terminal(self) -> bool:
        return self.phase in TERMINAL_PHASES


@dataclass(frozen=True)
class BackendRequest:
    prompt: str
    max_tokens: int
    temperature: float
    top_p: float

    def to_json(self) -> dict:
        return {
            "prompt": self.prompt,
            "max_tokens": self.max_tokens,
            "temperature": self.temperature,
            "top_p": self.top_p,
        }


@dataclass(frozen=True)
class BackendResponse:
    text: str
    tokens: Optional[int] = None
    wall_time: float = 0.0

    @property
    def generated_tokens(self) -> int:
        return self.tokens if self.tokens is not None else len(self.text.split())


class Backend(Protocol):
    def complete(self, request: BackendRequest) -> BackendResponse: ...


@dataclass(frozen=True)
class TtsBackends:
    solver: Backend
    verifier: Backend
    verdict: Backend

    @classmethod
    def single(cls, backend: Backend) -> "TtsBackends":
        return cls(solver=backend, verifier=backend, verdict=backend)


class ScriptedBackend:
    """Backend driven by a scenario role.

    Script entries are either plain strings or objects with ``text`` and
    optional ``tokens``/``wall_time``, keeping traces fully deterministic.
    """

    def __init__(self, scenario: MockScenario, role: str):
        self.scenario = scenario
        self.role = role

    def complete(self, request: BackendRequest) -> BackendResponse:
        entry = self.scenario.next(self.role)
        if isinstance(entry, str):
            return BackendResponse(text=entry)
        return BackendResponse(
            text=entry["text"],
            tokens=entry.get("tokens"),
            wall_time=entry.get("wall_time", 0.0),
        )


class HttpBackend:
    """Client for a completion service honoring the wire contract:
    request ``{prompt, max_tokens, temperature, top_p}``, response
    ``{text}``."""

    def __init__(self, base_url: str, role: str, client=None,
                 timeout: float = 120.0):
        import httpx

        self.base_url = base_url.rstrip("/")
        self.role = role
        self._client = client or httpx.Client(timeout=timeout)

    def complete(self, request: BackendRequest) -> BackendResponse:
        start = time.monotonic()
        try:
            resp = self._client.post(
                f"{self.base_url}/backend/{self.role}/complete",
                json=request.to_json(),
            )
            resp.raise_for_status()
        except Exception as exc:
            raise BackendError(f"{self.role} backend failed: {exc}") from exc
        return BackendResponse(
            text=resp.json()["text"], wall_time=time.monotonic() - start
        )


# -- the state machine ---------------------------------------------------------

def _verdict_passes(text: str) -> bool:
    token = text.strip()
    return token == VERDICT_PASS  # any other reply, parseable or not, fails


def step(state: TtsRunState, response: BackendResponse,
         cfg: TtsConfig) -> tuple[TtsRunState, TtsAction]:
    """Advance one phase given the backend's response.

    Deterministic: the first cycle goes solve, refine, verify; each verdict
    resets exactly one of the consecutive counters; a pass re-verifies the
    unchanged candidate while a fail routes back through refinement.
    """
    if state.terminal:
        raise ValueError(f"step on terminal phase {state.phase}")

    if state.phase is Phase.SOLVE:
        action = TtsAction(ActionKind.INITIAL_SOLVE, response.generated_tokens,
                           response.wall_time)
        return replace(state, phase=Phase.REFINE,
                       current_candidate=response.text), action

    if state.phase is Phase.REFINE:
        action = TtsAction(ActionKind.REFINEMENT, response.generated_tokens,
                           response.wall_time)
        return replace(state, phase=Phase.VERIFY,
                       current_candidate=response.text), action

    if state.phase is Phase.VERIFY:
        action = TtsAction(ActionKind.VERIFICATION, response.generated_tokens,
                           response.wall_time)
        return replace(state, phase=Phase.VERDICT,
                       bug_report=response.text), action

    # Phase.VERDICT
    action = TtsAction(ActionKind.VERDICT_PARSE, response.generated_tokens,
                       response.wall_time)
    rounds = state.rounds_used + 1
    if _verdict_passes(response.text):
        trues = state.consecutive_true + 1
        nxt = replace(state, consecutive_true=trues, consecutive_false=0,
                      rounds_used=rounds)
        if trues >= cfg.max_true_rounds:
            return replace(nxt, phase=Phase.ACCEPTED), action
        if rounds >= cfg.max_exploration_rounds:
            return replace(nxt, phase=Phase.ABORTED,
                           abort_reason="exploration budget exhausted"), action
        return replace(nxt, phase=Phase.VERIFY), action

    falses = state.consecutive_false + 1
    nxt = replace(state, consecutive_false=falses, consecutive_true=0,
                  rounds_used=rounds)
    if falses >= cfg.max_false_rounds:
        return replace(nxt, phase=Phase.ABORTED,
                       abort_reason="consecutive verification failures"), action
    if rounds >= cfg.max_exploration_rounds:
        return replace(nxt, phase=Phase.ABORTED,
                       abort_reason="exploration budget exhausted"), action
    return replace(nxt, phase=Phase.REFINE), action


def _request_for(state: TtsRunState, problem: str, cfg: TtsConfig,
                 templates: TtsPromptTemplates) -> tuple[str, BackendRequest]:
    if state.phase is Phase.SOLVE:
        role, prompt = "solver", templates.solver.format(problem=problem)
    elif state.phase is Phase.REFINE:
        role, prompt = "solver", templates.refine.format(
            problem=problem, candidate=state.current_candidate,
            bug_report=state.bug_report or "none yet - inspect the draft independently",
        )
    elif state.phase is Phase.VERIFY:
        role, prompt = "verifier", templates.verify.format(
            problem=problem, candidate=state.current_candidate,
        )
    else:
        role, prompt = "verdict", templates.verdict.format(
            bug_report=state.bug_report or "",
        )
    return role, BackendRequest(
        prompt=prompt, max_tokens=cfg.max_tokens,
        temperature=cfg.temperature, top_p=cfg.top_p,
    )


@dataclass(frozen=True)
class RunTrace:
    run_index: int
    actions: tuple[TtsAction, ...]
    outcome: str  # "accepted" | "aborted"
    abort_reason: Optional[str]
    candidate: Optional[str]


@dataclass(frozen=True)
class TtsResult:
    outcome: str
    candidate: Optional[str]
    accepted_run: Optional[int]
    runs: tuple[RunTrace, ...]

    @property
    def actions(self) -> list[TtsAction]:
        return [a for run in self.runs for a in run.actions]


def run_single(problem: str, backends: TtsBackends, cfg: TtsConfig,
               templates: TtsPromptTemplates, run_index: int) -> RunTrace:
    """Drive one run to a terminal phase, recording every action."""
    state = TtsRunState()
    actions: list[TtsAction] = []
    by_role = {"solver": backends.solver, "verifier": backends.verifier,
               "verdict": backends.verdict}
    # Grammar bound: InitialSolve then at most 3 actions per exploration round.
    for _ in range(1 + 3 * cfg.max_exploration_rounds):
        if state.terminal:
            break
        role, request = _request_for(state, problem, cfg, templates)
        try:
            response = by_role[role].complete(request)
        except BackendError as exc:
            state = replace(state, phase=Phase.ABORTED,
                            abort_reason=f"backend error: {exc}")
            break
        state, action = step(state, response, cfg)
        actions.append(action)
    if not state.terminal:
        state = replace(state, phase=Phase.ABORTED,
                        abort_reason="exploration budget exhausted")
    return RunTrace(
        run_index=run_index,
        actions=tuple(actions),
        outcome="accepted" if state.phase is Phase.ACCEPTED else "aborted",
        abort_reason=state.abort_reason,
        candidate=state.current_candidate if state.phase is Phase.ACCEPTED else None,
    )


def run_problem(problem: str, backends: TtsBackends, cfg: TtsConfig,
                templates: Optional[TtsPromptTemplates] = None) -> TtsResult:
    """Launch up to ``max_runs`` serial runs; first accepted candidate wins.

    Raises ``AllRunsExhaustedError`` (carrying every run's abort reason and
    the full trace) when no run accepts.
    """
    templates = templates or TtsPromptTemplates()
    runs: list[RunTrace] = []
    for run_index in range(cfg.max_runs):
        trace = run_single(problem, backends, cfg, templates, run_index)
        runs.append(trace)
        if trace.outcome == "accepted":
            return TtsResult(
                outcome="accepted", candidate=trace.candidate,
                accepted_run=run_index, runs=tuple(runs),
            )
    error = AllRunsExhaustedError([r.abort_reason or "aborted" for r in runs])
    error.runs = tuple(runs)
    raise error


# -- trace statistics -----------------------------------------------------------

def _percentile(sorted_values: Sequence[float], q: float) -> float:
    """Linear interpolation between closest ranks; q in [0, 1]."""
    n = len(sorted_values)
    if n == 1:
        return float(sorted_values[0])
    h = (n - 1) * q
    lo = int(h)
    hi = min(lo + 1, n - 1)
    frac = h - lo
    return sorted_values[lo] + frac * (sorted_values[hi] - sorted_values[lo])


def trace_stats(actions: Iterable[TtsAction]) -> dict[str, dict[str, float]]:
    """Per-action-kind order statistics of generated token counts.

    Median of an even count is the mean of the two middle values; quartiles
    interpolate linearly between closest ranks.
    """
    by_kind: dict[str, list[int]] = {}
    for action in actions:
        by_kind.setdefault(action.kind.value, []).append(action.generated_tokens)
    if not by_kind:
        raise EmptyTraceError("no actions in trace")
    stats = {}
    for kind, values in by_kind.items():
        ordered = sorted(values)
        stats[kind] = {
            "count": len(ordered),
            "median": _percentile(ordered, 0.5),
            "p25": _percentile(ordered, 0.25),
            "p75": _percentile(ordered, 0.75),
            "max": float(ordered[-1]),
        }
    return stats


# -- trace files ------------------------------------------------------------------

def write_trace(result_runs: Sequence[RunTrace], fp: IO[str],
                outcome: Optional[str] = None,
                candidate: Optional[str] = None) -> None:
    for run in result_runs:
        fp.write(json.dumps({"type": "run_start", "run": run.run_index}) + "\n")
        for action in run.actions:
            fp.write(json.dumps({
                "type": "action",
                "run": run.run_index,
                "kind": action.kind.value,
                "generated_tokens": action.generated_tokens,
                "wall_time": action.wall_time,
            }) + "\n")
        fp.write(json.dumps({
            "type": "run_end",
            "run": run.run_index,
            "outcome": run.outcome,
            "abort_reason": run.abort_reason,
        }) + "\n")
    if outcome is not None:
        fp.write(json.dumps({
            "type": "result", "outcome": outcome, "candidate": candidate,
        }) + "\n")


def read_trace_actions(fp: IO[str]) -> list[TtsAction]:
    actions = []
    for line in fp:
        line = line.strip()
        if not line:
            continue
        record = json.loads(line)
        if record.get("type") == "action":
            actions.append(TtsAction(
                kind=ActionKind(record["kind"]),
                generated_tokens=record["generated_tokens"],
                wall_time=record.get("wall_time", 0.0),
            ))
    return actions
