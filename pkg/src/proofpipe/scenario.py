"""Scripted mock backends for deterministic simulation.

A scenario holds ordered responses keyed by (backend role, call index),
plus optional injected failures. Consuming past the script raises: a mock
must never invent a default reply.
"""

from __future__ import annotations

import json
from typing import Any, Optional

from .errors import BackendError, ScenarioExhaustedError


class MockScenario:
    """Ordered scripted responses per backend role."""

    def __init__(self, responses: dict[str, list[Any]],
                 failures: Optional[dict[str, dict[int, str]]] = None):
        self.responses = {role: list(items) for role, items in responses.items()}
        self.failures = {
            role: {int(i): msg for i, msg in table.items()}
            for role, table in (failures or {}).items()
        }
        self._cursors: dict[str, int] = {}

    def calls(self, role: str) -> int:
        """Number of calls consumed so far for ``role``."""
        return self._cursors.get(role, 0)

    def next(self, role: str) -> Any:
        index = self._cursors.get(role, 0)
        self._cursors[role] = index + 1
        failure = self.failures.get(role, {}).get(index)
        if failure is not None:
            raise BackendError(f"scripted failure for {role}[{index}]: {failure}")
        script = self.responses.get(role, [])
        if index >= len(script):
            raise ScenarioExhaustedError(
                f"scenario exhausted for role {role!r} at call {index}"
            )
        return script[index]

    @classmethod
    def from_json(cls, obj: dict) -> "MockScenario":
        return cls(obj.get("responses", {}), obj.get("failures", {}))

    @classmethod
    def load(cls, path: str) -> "MockScenario":
        with open(path) as fp:
            return cls.from_json(json.load(fp))


class ScriptedVerifier:
    """Generative-verifier client backed by a scenario role."""

    def __init__(self, scenario: MockScenario, role: str = "verifier"):
        self.scenario = scenario
        self.role = role

    @property
    def calls(self) -> int:
        return self.scenario.calls(self.role)

    def score(self, problem: str, solution: str) -> int:
        return int(self.scenario.next(self.role))
