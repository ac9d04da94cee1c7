"""Two-round thought/action/value conversation records (one JSON object per line)."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

HUMAN, GPT = "human", "gpt"
ROLES = (HUMAN, GPT)
N_TURNS = 4

# serialized key -> in-memory name; the file format says "thoughts"
K_FROM, K_VALUE, K_THOUGHT, K_ACTIONS = "from", "value", "thoughts", "actions"
K_API_NAME, K_API_PARAMS = "API_name", "API_params"
TURN_KEYS = (K_FROM, K_THOUGHT, K_ACTIONS, K_VALUE)
RECORD_KEYS = ("id", "video", "conversations")


class ParseError(ValueError):
    def __init__(self, msg, offset=None):
        super().__init__(msg if offset is None else f"{msg} at byte {offset}")
        self.offset = offset


class SchemaError(ValueError):
    def __init__(self, msg, field=None, turn=None):
        where = "" if turn is None else f" (turn {turn})"
        super().__init__(f"{msg}{where}")
        self.field = field
        self.turn = turn


@dataclass
class ToolCall:
    api_name: str
    api_params: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.api_name:
            raise SchemaError("api_name must be non-empty", field=K_API_NAME)

    def to_json(self) -> dict:
        return {K_API_NAME: self.api_name, K_API_PARAMS: dict(self.api_params)}

    @classmethod
    def from_json(cls, obj, turn=None) -> "ToolCall":
        if not isinstance(obj, dict):
            raise SchemaError("action entry must be an object", field=K_ACTIONS, turn=turn)
        if K_API_NAME not in obj:
            raise SchemaError(f"missing field '{K_API_NAME}'", field=K_API_NAME, turn=turn)
        params = obj.get(K_API_PARAMS, {})
        if not isinstance(params, dict):
            raise SchemaError(f"'{K_API_PARAMS}' must be an object", field=K_API_PARAMS, turn=turn)
        name = obj[K_API_NAME]
        if not isinstance(name, str) or not name:
            raise SchemaError("api_name must be a non-empty string", field=K_API_NAME, turn=turn)
        return cls(name, {str(k): str(v) for k, v in params.items()})


@dataclass
class Turn:
    role: str
    value: str | None
    thought: str | None = None
    actions: list[ToolCall] | None = None
    extras: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> dict:
        out: dict[str, Any] = {K_FROM: self.role}
        if self.thought is not None:
            out[K_THOUGHT] = self.thought
        if self.actions is not None:
            out[K_ACTIONS] = [a.to_json() for a in self.actions]
        if self.value is not None:
            out[K_VALUE] = self.value
        out.update(self.extras)
        return out


@dataclass
class Conversation:
    turns: list[Turn]
    id: str | None = None
    video: str | None = None
    extras: dict[str, Any] = field(default_factory=dict)

    @property
    def round_one_actions(self) -> list[ToolCall]:
        if len(self.turns) > 1 and self.turns[1].actions:
            return list(self.turns[1].actions)
        return []

    @property
    def tool_labels(self) -> frozenset[str]:
        return frozenset(a.api_name for a in self.round_one_actions)

    @property
    def tool_key(self) -> str:
        """Stratification key; composite calls join sorted member names with '+'."""
        return "+".join(sorted(self.tool_labels))

    @property
    def instruction(self) -> str:
        return self.turns[0].value or ""

    def to_json(self) -> dict:
        out: dict[str, Any] = {}
        if self.id is not None:
            out["id"] = self.id
        if self.video is not None:
            out["video"] = self.video
        out["conversations"] = [t.to_json() for t in self.turns]
        out.update(self.extras)
        return out


def serialize_conversation(conv: Conversation) -> str:
    return json.dumps(conv.to_json(), ensure_ascii=False)


def _parse_turn(obj, i: int, strict: bool) -> Turn:
    if not isinstance(obj, dict):
        raise SchemaError("turn must be an object", turn=i)
    if K_FROM not in obj:
        raise SchemaError(f"missing field '{K_FROM}'", field=K_FROM, turn=i)
    role = obj[K_FROM]
    if role not in ROLES:
        raise SchemaError(f"unknown role {role!r}", field=K_FROM, turn=i)
    value = obj.get(K_VALUE)
    if value is not None and not isinstance(value, str):
        raise SchemaError("value must be a string", field=K_VALUE, turn=i)
    if strict and value is None:
        raise SchemaError(f"missing field '{K_VALUE}'", field=K_VALUE, turn=i)

    thought = actions = None
    if role == GPT:
        extras = {k: v for k, v in obj.items() if k not in TURN_KEYS}
        thought = obj.get(K_THOUGHT)
        if strict and thought is None:
            raise SchemaError(f"missing field '{K_THOUGHT}'", field=K_THOUGHT, turn=i)
        raw = obj.get(K_ACTIONS)
        if strict and raw is None:
            raise SchemaError(f"missing field '{K_ACTIONS}'", field=K_ACTIONS, turn=i)
        if raw is not None:
            if not isinstance(raw, list):
                raise SchemaError("actions must be a list", field=K_ACTIONS, turn=i)
            actions = [ToolCall.from_json(a, turn=i) for a in raw]
    else:
        # human turns carry no thought/actions; anything else rides along for round-tripping
        extras = {k: v for k, v in obj.items() if k not in (K_FROM, K_VALUE)}
    return Turn(role, value, thought, actions, extras)


def parse_conversation(record: str | bytes, strict: bool = True) -> Conversation:
    """Parse one corpus line.

    ``strict=False`` tolerates structural defects (turn count, missing gpt
    keys, missing values) so the validator can report them as violations.
    """
    if isinstance(record, bytes):
        text = record.decode("utf-8")
    else:
        text = record
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(e.msg, offset=len(text[: e.pos].encode("utf-8"))) from None
    if not isinstance(obj, dict):
        raise ParseError("record is not a JSON object", offset=0)
    if "conversations" not in obj:
        raise SchemaError("missing field 'conversations'", field="conversations")
    raw_turns = obj["conversations"]
    if not isinstance(raw_turns, list):
        raise SchemaError("'conversations' must be a list", field="conversations")
    if strict and len(raw_turns) != N_TURNS:
        raise SchemaError(f"expected {N_TURNS} turns, got {len(raw_turns)}", field="conversations")
    turns = [_parse_turn(t, i, strict) for i, t in enumerate(raw_turns)]
    extras = {k: v for k, v in obj.items() if k not in RECORD_KEYS}
    return Conversation(turns, id=obj.get("id"), video=obj.get("video"), extras=extras)


def read_jsonl(path, strict: bool = True) -> list[Conversation]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if line.strip():
                out.append(parse_conversation(line, strict=strict))
    return out


def write_jsonl(path, convs) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for c in convs:
            f.write(serialize_conversation(c) + "\n")
