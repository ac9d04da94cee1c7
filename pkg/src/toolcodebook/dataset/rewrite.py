"""LLM rephrasing of corpus records with a guard on 'from' and 'actions'.

Transports are pluggable: the deterministic mock (default), a JSON-over-HTTP
client, and a fixture replayer for tests.
"""
from __future__ import annotations

import json
import logging
import re
import time
import urllib.error
import urllib.request
from typing import Protocol

from .schema import Conversation, parse_conversation

log = logging.getLogger(__name__)

REWRITE_SYSTEM_PROMPT = (
    "Input: one training record as a JSON object with a 'conversations' list. "
    "Output: the same record as JSON, with new wording for every 'value' and 'thoughts' string. "
    "Keep each turn's 'from' and 'actions' fields byte-for-byte as given, "
    "and keep the number and order of turns."
)

REWRITE_VIOLATION = "REWRITE_VIOLATION"


class RewriteViolation(ValueError):
    code = REWRITE_VIOLATION

    def __init__(self, detail):
        super().__init__(f"{REWRITE_VIOLATION}: {detail}")
        self.detail = detail


class RewriteServiceError(RuntimeError):
    def __init__(self, msg, retries):
        super().__init__(f"{msg} (after {retries} retries)")
        self.retries = retries


class RewriteUnavailable(RuntimeError):
    pass


class RewriteClient(Protocol):
    def rewrite(self, system_prompt: str, record: dict) -> dict: ...


SYNONYMS = {
    "please": "kindly",
    "wait": "hold on",
    "sure": "absolutely",
    "certainly": "of course",
    "video": "clip",
    "model": "tool",
    "now": "right away",
    "results": "outputs",
    "need": "have",
    "user": "requester",
    "update": "inform",
    "process": "procedure",
}
_WORD = re.compile(r"[A-Za-z]+")


def _substitute(text: str) -> str:
    def repl(m):
        w = m.group(0)
        s = SYNONYMS.get(w.lower())
        if s is None:
            return w
        return s[0].upper() + s[1:] if w[0].isupper() else s

    return _WORD.sub(repl, text)


class MockRewriteClient:
    """Deterministic synonym swap on value/thoughts only."""

    def rewrite(self, system_prompt: str, record: dict) -> dict:
        out = json.loads(json.dumps(record))
        for turn in out.get("conversations", []):
            for k in ("value", "thoughts"):
                if isinstance(turn.get(k), str):
                    turn[k] = _substitute(turn[k])
        return out


class FixtureRewriteClient:
    """Replays canned responses keyed by record id (or in order when ids are absent)."""

    def __init__(self, responses):
        if isinstance(responses, dict):
            self.by_id, self.queue = dict(responses), []
        else:
            self.by_id, self.queue = {}, list(responses)

    def rewrite(self, system_prompt: str, record: dict) -> dict:
        rid = record.get("id")
        if rid in self.by_id:
            return json.loads(json.dumps(self.by_id[rid]))
        if self.queue:
            return self.queue.pop(0)
        raise RewriteServiceError(f"no recorded response for {rid!r}", retries=0)


class HttpRewriteClient:
    """POSTs {system_prompt, example_record} and expects {record} back."""

    def __init__(self, url, timeout=30.0, max_retries=3, backoff=0.5):
        self.url = url
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff

    def rewrite(self, system_prompt: str, record: dict) -> dict:
        body = json.dumps({"system_prompt": system_prompt, "example_record": record}).encode()
        last = None
        for attempt in range(self.max_retries + 1):
            req = urllib.request.Request(self.url, data=body, headers={"Content-Type": "application/json"})
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    payload = json.loads(resp.read().decode("utf-8"))
                return payload["record"]
            except (urllib.error.URLError, OSError, ValueError, KeyError) as e:
                last = e
                log.warning("rewrite request failed (attempt %d): %s", attempt + 1, e)
                if attempt < self.max_retries:
                    time.sleep(self.backoff * 2**attempt)
        raise RewriteServiceError(f"rewrite service failed: {last}", retries=self.max_retries)


_DEFAULT = object()


def _guarded_view(conv: Conversation):
    return [(t.role, None if t.actions is None else [a.to_json() for a in t.actions]) for t in conv.turns]


def llm_rewrite(conv: Conversation, client=_DEFAULT) -> Conversation:
    """Rephrase one conversation. Pass ``client=None`` for offline mode (raises RewriteUnavailable)."""
    if client is _DEFAULT:
        client = MockRewriteClient()
    if client is None:
        raise RewriteUnavailable("no rewrite client configured")
    response = client.rewrite(REWRITE_SYSTEM_PROMPT, conv.to_json())
    try:
        new = parse_conversation(json.dumps(response, ensure_ascii=False))
    except ValueError as e:
        raise RewriteViolation(f"response is not a valid record: {e}") from None
    if _guarded_view(new) != _guarded_view(conv):
        raise RewriteViolation("'from' or 'actions' changed")
    return new


def rewrite_corpus(convs, client=_DEFAULT) -> tuple[list[Conversation], list[tuple[int, str]]]:
    """Best-effort pass over a corpus.

    Records whose rewrite is rejected keep their original text and are listed
    in the returned issues. Without a client the corpus passes through unchanged.
    """
    out, issues = [], []
    for i, c in enumerate(convs):
        try:
            out.append(llm_rewrite(c, client))
        except RewriteUnavailable:
            log.info("rewrite unavailable; continuing without rewriting")
            return list(convs), [(-1, "UNAVAILABLE")]
        except RewriteViolation as e:
            out.append(c)
            issues.append((i, e.code))
    return out, issues
