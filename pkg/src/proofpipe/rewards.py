"""Layered reward verification.

High-precision checks run before expensive model-based judgment: sanitize
the response, extract the final boxed answer, try canonicalized text
matching, then a rule-based arithmetic-equivalence check, and only then fall
back to a generative verifier's binary score. Non-verifiable (proof-style)
prompts skip the rule layers entirely and go straight to the generative
proof reward. The chain is conservative: a response no layer affirms is
incorrect, never undecided.

The rule layers are pure and thread-safe; generative clients may be called
concurrently subject to their own contracts.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Optional, Protocol, Sequence, Union

from .core import Prompt, PromptKind
from .errors import ScenarioExhaustedError, VerifierUnavailableError

DEFAULT_TEMPLATE_TOKENS = ("<|im_start|>", "<|im_end|>", "<|endoftext|>")
DEFAULT_FALLBACK_TEXT = "Response withheld: malformed generation."


class VerdictValue(str, Enum):
    CORRECT = "correct"
    INCORRECT = "incorrect"


class VerdictStage(str, Enum):
    EXACT_MATCH = "exact_match"
    EXPRESSION_RULE = "expression_rule"
    GENERATIVE = "generative"
    ANTI_HACK_FALLBACK = "anti_hack_fallback"


@dataclass(frozen=True)
class Verdict:
    """Binary judgment plus the first chain layer that resolved the sample."""

    value: VerdictValue
    stage: VerdictStage

    @property
    def reward(self) -> float:
        return 1.0 if self.value is VerdictValue.CORRECT else 0.0

    def to_record(self) -> dict:
        return {"value": self.value.value, "stage": self.stage.value}


class SanitizeReason(str, Enum):
    LEAKED_TEMPLATE_TOKEN = "leaked_template_token"
    UNBALANCED_THINK_DELIMITERS = "unbalanced_think_delimiters"
    SEVERE_REPETITION = "severe_repetition"


@dataclass(frozen=True)
class SanitizeReport:
    clean: bool
    reasons: tuple[SanitizeReason, ...]
    output_text: str


@dataclass(frozen=True)
class RewardChainConfig:
    """Settings for the sanitization and matching layers."""

    template_tokens: tuple[str, ...] = DEFAULT_TEMPLATE_TOKENS
    think_open: str = "<think>"
    think_close: str = "</think>"
    repeat_window: int = 32
    repeat_threshold: int = 10
    fallback_text: str = DEFAULT_FALLBACK_TEXT

    def __post_init__(self):
        if not self.template_tokens:
            raise ValueError("template_tokens must be non-empty")
        if self.repeat_window < 1:
            raise ValueError("repeat_window must be positive")
        if self.repeat_threshold < 2:
            raise ValueError("repeat_threshold must be at least 2")


# -- final-answer extraction ------------------------------------------------

_BOXED = "\\boxed"


def _match_braced_group(text: str, open_index: int) -> Optional[str]:
    """Content of the brace group opening at ``open_index``, or ``None``."""
    depth = 0
    i = open_index
    while i < len(text):
        ch = text[i]
        if ch in "{}":
            backslashes = 0
            j = i - 1
            while j >= 0 and text[j] == "\\":
                backslashes += 1
                j -= 1
            if backslashes % 2 == 0:  # structural brace
                depth += 1 if ch == "{" else -1
                if depth == 0:
                    return text[open_index + 1:i]
        i += 1
    return None


def extract_final_answer(response: str) -> Optional[str]:
    """Content of the last balanced ``\\boxed{...}`` group, nested braces
    respected; ``None`` when absent or unbalanced."""
    answer = None
    pos = response.find(_BOXED)
    while pos != -1:
        after = pos + len(_BOXED)
        while after < len(response) and response[after].isspace():
            after += 1
        if after < len(response) and response[after] == "{":
            content = _match_braced_group(response, after)
            if content is not None:
                answer = content.strip()
        pos = response.find(_BOXED, pos + 1)
    return answer


# -- canonicalization --------------------------------------------------------

_LEFT_RE = re.compile(r"\\left\s*(\S)\s*")
_RIGHT_RE = re.compile(r"\s*\\right\s*(\S)")
_BARE_SIZER_RE = re.compile(r"\\(?:left|right)\b\s*")
_WS_RE = re.compile(r"\s+")
_CONSTANT_RES = [
    (re.compile(r"(?<![A-Za-z\\])pi(?![A-Za-z])", re.IGNORECASE), "pi"),
    (re.compile(r"(?<![A-Za-z\\])e(?![A-Za-z])", re.IGNORECASE), "e"),
]


def _canonicalize_pass(s: str) -> str:
    s = s.replace("\u2212", "-")
    s = s.strip()
    while len(s) >= 2 and s.startswith("$") and s.endswith("$"):
        s = s[1:-1].strip()
    s = _LEFT_RE.sub(r"\1", s)
    s = _RIGHT_RE.sub(r"\1", s)
    s = _BARE_SIZER_RE.sub("", s)
    s = _WS_RE.sub(" ", s).strip()
    for pattern, lowered in _CONSTANT_RES:
        s = pattern.sub(lowered, s)
    return s


def canonicalize(answer: str) -> str:
    """Idempotent answer normalization.

    Trims and collapses whitespace, strips outer ``$...$`` and
    ``\\left``/``\\right`` wrappers, maps the unicode minus to ASCII, and
    lowercases standalone constant names. Applied to a fixpoint so a second
    pass never changes the result.
    """
    current = answer
    for _ in range(8):
        nxt = _canonicalize_pass(current)
        if nxt == current:
            return current
        current = nxt
    return current


# -- rule-based expression equivalence ---------------------------------------

class Equivalence(str, Enum):
    EQUAL = "equal"
    UNEQUAL = "unequal"
    UNDECIDED = "undecided"


Number = Union[Fraction, float]

_TOKEN_RE = re.compile(
    r"\s*(?:"
    r"(?P<number>\d+\.\d*|\.\d+|\d+)"
    r"|(?P<command>\\[A-Za-z]+)"
    r"|(?P<name>[A-Za-z]+)"
    r"|(?P<op>[-+*/^(){}\u00d7\u00b7\u2212])"
    r")"
)

_MUL_TOKENS = {"*", "\u00d7", "\u00b7", "\\times", "\\cdot"}
_MINUS_TOKENS = {"-", "\u2212"}
_MAX_EXACT_EXPONENT = 64


class _ExpressionError(Exception):
    """Internal: expression outside the supported subset."""


def _tokenize(text: str) -> list[str]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            if text[pos:].strip() == "":
                break
            raise _ExpressionError(f"unrecognized input at {text[pos:]!r}")
        if m.lastgroup == "name":
            tokens.append(m.group().strip().lower())
        else:
            tokens.append(m.group().strip())
        pos = m.end()
    return tokens


class _Parser:
    """Recursive-descent parser over the declared arithmetic subset:

    integers, decimals, rationals, ``+ - * / ^``, parentheses, ``\\frac``,
    ``\\sqrt``, and the constants pi and e. Implicit multiplication is
    accepted only when the right operand is not a bare number, so juxtaposed
    numerals stay outside the grammar.
    """

    def __init__(self, tokens: list[str]):
        self.tokens = tokens
        self.pos = 0

    def peek(self) -> Optional[str]:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def take(self) -> str:
        tok = self.peek()
        if tok is None:
            raise _ExpressionError("unexpected end of expression")
        self.pos += 1
        return tok

    def expect(self, token: str) -> None:
        tok = self.take()
        if tok != token:
            raise _ExpressionError(f"expected {token!r}, got {tok!r}")

    def parse(self) -> Number:
        value = self.expr()
        if self.peek() is not None:
            raise _ExpressionError(f"trailing input at {self.peek()!r}")
        return value

    def expr(self) -> Number:
        value = self.term()
        while self.peek() in {"+"} | _MINUS_TOKENS:
            op = self.take()
            rhs = self.term()
            value = _add(value, rhs) if op == "+" else _sub(value, rhs)
        return value

    def term(self) -> Number:
        value = self.factor()
        while True:
            tok = self.peek()
            if tok in _MUL_TOKENS:
                self.take()
                value = _mul(value, self.factor())
            elif tok == "/":
                self.take()
                value = _div(value, self.factor())
            elif tok in {"(", "\\frac", "\\sqrt", "pi", "e", "\\pi"}:
                value = _mul(value, self.factor())
            else:
                return value

    def factor(self) -> Number:
        if self.peek() in _MINUS_TOKENS:
            self.take()
            return _neg(self.factor())
        if self.peek() == "+":
            self.take()
            return self.factor()
        return self.power()

    def power(self) -> Number:
        base = self.primary()
        if self.peek() == "^":
            self.take()
            if self.peek() == "{":
                self.take()
                exponent = self.expr()
                self.expect("}")
            else:
                exponent = self.factor()
            return _pow(base, exponent)
        return base

    def braced(self) -> Number:
        self.expect("{")
        value = self.expr()
        self.expect("}")
        return value

    def primary(self) -> Number:
        tok = self.take()
        if tok == "(":
            value = self.expr()
            self.expect(")")
            return value
        if tok == "\\frac":
            return _div(self.braced(), self.braced())
        if tok == "\\sqrt":
            return _sqrt(self.braced())
        if tok in {"pi", "\\pi"}:
            return math.pi
        if tok == "e":
            return math.e
        if re.fullmatch(r"\d+\.\d*|\.\d+|\d+", tok):
            return Fraction(tok if not tok.endswith(".") else tok[:-1])
        raise _ExpressionError(f"unexpected token {tok!r}")


def _both_exact(a: Number, b: Number) -> bool:
    return isinstance(a, Fraction) and isinstance(b, Fraction)


def _add(a: Number, b: Number) -> Number:
    return a + b if _both_exact(a, b) else float(a) + float(b)


def _sub(a: Number, b: Number) -> Number:
    return a - b if _both_exact(a, b) else float(a) - float(b)


def _mul(a: Number, b: Number) -> Number:
    return a * b if _both_exact(a, b) else float(a) * float(b)


def _div(a: Number, b: Number) -> Number:
    if _both_exact(a, b):
        if b == 0:
            raise _ExpressionError("division by zero")
        return a / b
    if float(b) == 0.0:
        raise _ExpressionError("division by zero")
    return float(a) / float(b)


def _neg(a: Number) -> Number:
    return -a


def _sqrt(a: Number) -> Number:
    value = float(a)
    if value < 0:
        raise _ExpressionError("square root of a negative value")
    return math.sqrt(value)


def _pow(base: Number, exponent: Number) -> Number:
    if isinstance(exponent, Fraction) and exponent.denominator == 1 \
            and isinstance(base, Fraction) \
            and abs(exponent.numerator) <= _MAX_EXACT_EXPONENT:
        if base == 0 and exponent < 0:
            raise _ExpressionError("zero to a negative power")
        return base ** exponent.numerator
    try:
        result = float(base) ** float(exponent)
    except (OverflowError, ValueError, ZeroDivisionError) as exc:
        raise _ExpressionError(str(exc)) from exc
    if isinstance(result, complex):
        raise _ExpressionError("complex power")
    return result


def _evaluate(text: str) -> Number:
    tokens = _tokenize(text)
    if not tokens:
        raise _ExpressionError("empty expression")
    return _Parser(tokens).parse()


def expression_equivalent(a: str, b: str) -> Equivalence:
    """Decide equality of two closed-form arithmetic expressions.

    ``equal`` requires both sides to parse within the grammar and evaluate
    to exactly equal rationals, or to reals within relative 1e-9. Anything
    outside the subset (symbols, unsupported syntax) is ``undecided`` and
    defers to the next reward layer.
    """
    try:
        va = _evaluate(a)
        vb = _evaluate(b)
    except _ExpressionError:
        return Equivalence.UNDECIDED
    if _both_exact(va, vb):
        return Equivalence.EQUAL if va == vb else Equivalence.UNEQUAL
    fa, fb = float(va), float(vb)
    if not (math.isfinite(fa) and math.isfinite(fb)):
        return Equivalence.UNDECIDED
    if fa == fb or abs(fa - fb) <= 1e-9 * max(abs(fa), abs(fb)):
        return Equivalence.EQUAL
    return Equivalence.UNEQUAL


# -- anti-hack sanitization ---------------------------------------------------

def anti_hack(response: str, template_tokens: Sequence[str],
              repeat_threshold: int, think_open: str = "<think>",
              think_close: str = "</think>", repeat_window: int = 32,
              fallback_text: str = DEFAULT_FALLBACK_TEXT) -> SanitizeReport:
    """Flag malformed generations and substitute the safe fallback answer.

    Flags literal template-token leaks, unequal counts of the thinking
    open/close delimiters, and any block of at least ``repeat_window``
    characters repeated at least ``repeat_threshold`` times consecutively.
    A flagged response is replaced wholesale so downstream layers can never
    reward formatting pathologies.
    """
    if not template_tokens:
        raise ValueError("template_tokens must be non-empty")
    if repeat_threshold < 2:
        raise ValueError("repeat_threshold must be at least 2")
    reasons = []
    if any(tok in response for tok in template_tokens):
        reasons.append(SanitizeReason.LEAKED_TEMPLATE_TOKEN)
    if response.count(think_open) != response.count(think_close):
        reasons.append(SanitizeReason.UNBALANCED_THINK_DELIMITERS)
    repeat_re = re.compile(
        r"(.{%d,}?)\1{%d,}" % (repeat_window, repeat_threshold - 1), re.DOTALL
    )
    if repeat_re.search(response):
        reasons.append(SanitizeReason.SEVERE_REPETITION)
    clean = not reasons
    return SanitizeReport(
        clean=clean,
        reasons=tuple(reasons),
        output_text=response if clean else fallback_text,
    )


def anti_hack_with(config: RewardChainConfig, response: str) -> SanitizeReport:
    return anti_hack(
        response,
        template_tokens=config.template_tokens,
        repeat_threshold=config.repeat_threshold,
        think_open=config.think_open,
        think_close=config.think_close,
        repeat_window=config.repeat_window,
        fallback_text=config.fallback_text,
    )


# -- generative verifier clients ----------------------------------------------

class GenerativeVerifierClient(Protocol):
    """Black-box binary scorer of a complete solution.

    Wire contract: request ``{problem, solution}``, response ``{score: 0|1}``.
    """

    def score(self, problem: str, solution: str) -> int: ...


class ConstantVerifier:
    """Always returns the configured score. Deterministic stand-in."""

    def __init__(self, score: int = 0):
        if score not in (0, 1):
            raise ValueError("score must be 0 or 1")
        self._score = score
        self.calls = 0

    def score(self, problem: str, solution: str) -> int:
        self.calls += 1
        return self._score


class HttpVerifier:
    """Client for a verifier service honoring the wire contract."""

    def __init__(self, base_url: str, client=None, timeout: float = 30.0):
        import httpx

        self.base_url = base_url.rstrip("/")
        self._client = client or httpx.Client(timeout=timeout)

    def score(self, problem: str, solution: str) -> int:
        resp = self._client.post(
            f"{self.base_url}/verify",
            json={"problem": problem, "solution": solution},
        )
        resp.raise_for_status()
        return int(resp.json()["score"])


# -- the layered chain ---------------------------------------------------------

def score_rollout(config: RewardChainConfig, prompt: Prompt, response: str,
                  verifier: Optional[GenerativeVerifierClient]) -> Verdict:
    """Run the layered reward chain on one response.

    Sanitization short-circuits everything; the configured fallback text
    itself always scores incorrect. Verifiable prompts then try exact
    canonicalized matching and the rule-based expression check before the
    generative layer; non-verifiable and refinement prompts go straight to
    the generative proof reward. A required-but-failing generative client
    raises, never silently scores correct.
    """
    report = anti_hack_with(config, response)
    if not report.clean or response == config.fallback_text:
        return Verdict(VerdictValue.INCORRECT, VerdictStage.ANTI_HACK_FALLBACK)

    if prompt.kind is PromptKind.VERIFIABLE:
        extracted = extract_final_answer(response)
        if extracted is not None:
            answer = canonicalize(extracted)
            reference = canonicalize(prompt.reference_answer or "")
            if answer == reference:
                return Verdict(VerdictValue.CORRECT, VerdictStage.EXACT_MATCH)
            ruled = expression_equivalent(answer, reference)
            if ruled is Equivalence.EQUAL:
                return Verdict(VerdictValue.CORRECT, VerdictStage.EXPRESSION_RULE)
            if ruled is Equivalence.UNEQUAL:
                return Verdict(VerdictValue.INCORRECT, VerdictStage.EXPRESSION_RULE)

    if verifier is None:
        raise VerifierUnavailableError(
            f"generative layer required for prompt {prompt.id!r} but no client configured"
        )
    try:
        score = verifier.score(prompt.text, response)
    except ScenarioExhaustedError:
        raise
    except Exception as exc:
        raise VerifierUnavailableError(str(exc)) from exc
    if score not in (0, 1):
        raise VerifierUnavailableError(f"verifier returned non-binary score {score!r}")
    value = VerdictValue.CORRECT if score == 1 else VerdictValue.INCORRECT
    return Verdict(value, VerdictStage.GENERATIVE)
