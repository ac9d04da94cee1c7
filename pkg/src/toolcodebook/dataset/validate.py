"""Format and tool-name checks. Violations are data, never exceptions."""
from __future__ import annotations

from dataclasses import dataclass, field

from .registry import api_names
from .schema import GPT, HUMAN, N_TURNS, Conversation

WRONG_ROUND_COUNT = "WRONG_ROUND_COUNT"
MISSING_KEY = "MISSING_KEY"
UNKNOWN_TOOL = "UNKNOWN_TOOL"
NON_ALTERNATING_ROLES = "NON_ALTERNATING_ROLES"
EMPTY_VALUE = "EMPTY_VALUE"
CODES = (WRONG_ROUND_COUNT, MISSING_KEY, UNKNOWN_TOOL, NON_ALTERNATING_ROLES, EMPTY_VALUE)


@dataclass(frozen=True)
class Violation:
    code: str
    turn: int | None = None
    detail: str | None = None

    def __str__(self):
        s = self.code if self.detail is None else f"{self.code}({self.detail})"
        return s if self.turn is None else f"{s}@turn{self.turn}"

    def to_json(self) -> dict:
        return {"code": self.code, "turn": self.turn, "detail": self.detail}


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def valid(self) -> bool:
        return not self.violations

    @property
    def codes(self) -> list[str]:
        return [v.code for v in self.violations]


def validate(conv: Conversation, registry) -> ValidationReport:
    known = api_names(registry)
    out: list[Violation] = []
    if len(conv.turns) != N_TURNS:
        out.append(Violation(WRONG_ROUND_COUNT, detail=str(len(conv.turns))))
    for i, t in enumerate(conv.turns):
        expected = HUMAN if i % 2 == 0 else GPT
        if t.role != expected:
            out.append(Violation(NON_ALTERNATING_ROLES, turn=i, detail=t.role))
        if t.value is None:
            out.append(Violation(MISSING_KEY, turn=i, detail="value"))
        elif not t.value.strip():
            out.append(Violation(EMPTY_VALUE, turn=i))
        if t.role == GPT:
            if t.thought is None:
                out.append(Violation(MISSING_KEY, turn=i, detail="thought"))
            if t.actions is None:
                out.append(Violation(MISSING_KEY, turn=i, detail="actions"))
            for a in t.actions or ():
                if a.api_name not in known:
                    out.append(Violation(UNKNOWN_TOOL, turn=i, detail=a.api_name))
    return ValidationReport(out)
