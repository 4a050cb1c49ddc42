"""Canonical data model for intercepted client <-> LLM-server traffic.

Every request or reply that passes through the firewall is normalized into an
:class:`LlmExchange` before any rule or detector looks at it.  The exchange is
immutable; enrichment happens by building a new one.  Text canonicalization
(case folding + whitespace collapse) lives here because both the rule engine
and the detectors must agree on exactly one definition of "normalized text".
"""

from __future__ import annotations

import json
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum


class Direction(str, Enum):
    PROMPT = "prompt"
    RESPONSE = "response"


class Endpoint(str, Enum):
    OLLAMA_GENERATE = "ollama_generate"
    OLLAMA_CHAT = "ollama_chat"
    OLLAMA_TAGS = "ollama_tags"
    OPENAI_CHAT = "openai_chat_completions"
    OTHER = "other"


#: Maps URL paths the proxy listens on to endpoint classifications.
ENDPOINT_PATHS = {
    "/api/generate": Endpoint.OLLAMA_GENERATE,
    "/api/chat": Endpoint.OLLAMA_CHAT,
    "/api/tags": Endpoint.OLLAMA_TAGS,
    "/v1/chat/completions": Endpoint.OPENAI_CHAT,
}


class MalformedBody(ValueError):
    """Raised when a structured endpoint receives a body it cannot interpret."""


def fold_text(text: str) -> tuple[str, list[int]]:
    """Case-fold and whitespace-collapse *text*, keeping an offset map.

    Returns ``(canonical, offsets)`` where ``offsets[i]`` is the index in the
    original string that produced canonical character ``i``.  Detectors match
    against the canonical form but report evidence spans in original
    coordinates via this map.
    """
    out: list[str] = []
    offsets: list[int] = []
    pending_space = False
    for idx, ch in enumerate(text):
        if ch.isspace():
            if out:
                pending_space = True
            continue
        if pending_space:
            out.append(" ")
            offsets.append(idx - 1 if idx > 0 else idx)
            pending_space = False
        folded = ch.casefold()
        for fch in folded:
            out.append(fch)
            offsets.append(idx)
    return "".join(out), offsets


def canonicalize_text(text: str) -> str:
    """Lower-case (casefold) and collapse all whitespace runs to single spaces."""
    return fold_text(text)[0]


def map_span(offsets: list[int], start: int, end: int, raw_len: int) -> tuple[int, int]:
    """Translate a span over canonical text back into original-text offsets."""
    if not offsets or start >= len(offsets) or end <= start:
        return (0, 0)
    end = min(end, len(offsets))
    return (offsets[start], min(offsets[end - 1] + 1, raw_len))


def now_utc() -> datetime:
    """Current UTC time truncated to millisecond precision."""
    dt = datetime.now(timezone.utc)
    return dt.replace(microsecond=(dt.microsecond // 1000) * 1000)


def format_timestamp(dt: datetime) -> str:
    """RFC 3339 with millisecond precision, always UTC ("Z" suffix)."""
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    dt = dt.astimezone(timezone.utc)
    return f"{dt.year:04d}-{dt.month:02d}-{dt.day:02d}T{dt.hour:02d}:{dt.minute:02d}:{dt.second:02d}.{dt.microsecond // 1000:03d}Z"


def parse_timestamp(value: str) -> datetime:
    """Inverse of :func:`format_timestamp`.  Accepts a ``+00:00`` offset too."""
    text = value.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    dt = dt.astimezone(timezone.utc)
    return dt.replace(microsecond=(dt.microsecond // 1000) * 1000)


def new_event_id() -> str:
    return uuid.uuid4().hex


@dataclass(frozen=True)
class SessionMeta:
    """Identity attached to a conversation: who is talking, from where."""

    user_id: str = "anonymous"
    session_id: str = ""
    client_address: str = ""
    started_at: datetime = field(default_factory=now_utc)


@dataclass(frozen=True)
class LlmExchange:
    """One normalized prompt or response event.

    ``text`` is the flattened conversational content (for chat bodies, every
    message rendered as ``role: content`` on its own line).  ``raw_size_bytes``
    is the size of the wire body the text came from.
    """

    event_id: str
    direction: Direction
    user_id: str
    session_id: str
    timestamp: datetime
    endpoint: Endpoint
    model_name: str
    text: str
    raw_size_bytes: int
    stream: bool = False

    def canonical_text(self) -> str:
        return canonicalize_text(self.text)


def canonicalize(exchange: LlmExchange) -> str:
    """Canonical (casefolded, whitespace-collapsed, stripped) exchange text."""
    return canonicalize_text(exchange.text)


def _decode_json(raw: bytes) -> object:
    try:
        return json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedBody(f"invalid json body: {exc}") from None


def _require_str(value: object, what: str) -> str:
    if not isinstance(value, str):
        raise MalformedBody(f"{what} must be a string, got {type(value).__name__}")
    return value


def flatten_messages(messages: object) -> str:
    """Render a chat ``messages`` list as one ``role: content`` line per turn."""
    if not isinstance(messages, list):
        raise MalformedBody("messages must be a list")
    lines = []
    for i, msg in enumerate(messages):
        if not isinstance(msg, dict):
            raise MalformedBody(f"messages[{i}] must be an object")
        role = _require_str(msg.get("role", ""), f"messages[{i}].role")
        content = msg.get("content", "")
        if content is None:
            content = ""
        content = _require_str(content, f"messages[{i}].content")
        lines.append(f"{role}: {content}")
    return "\n".join(lines)


def parse_request(
    raw_body: bytes,
    endpoint: Endpoint,
    *,
    user_id: str = "anonymous",
    session_id: str = "",
    event_id: str | None = None,
    timestamp: datetime | None = None,
) -> LlmExchange:
    """Build a Prompt-direction exchange from a raw request body.

    Structured endpoints must carry valid JSON of the expected shape, else
    :class:`MalformedBody` is raised.  Unknown endpoints fall back to treating
    the body as opaque text so the firewall can still inspect it.
    """
    model_name = ""
    stream = False
    if endpoint is Endpoint.OLLAMA_TAGS:
        text = ""
    elif endpoint is Endpoint.OTHER:
        text = raw_body.decode("utf-8", errors="replace")
    else:
        body = _decode_json(raw_body)
        if not isinstance(body, dict):
            raise MalformedBody("request body must be a JSON object")
        model_name = _require_str(body.get("model", ""), "model")
        stream = bool(body.get("stream", False))
        if endpoint is Endpoint.OLLAMA_GENERATE:
            text = _require_str(body.get("prompt", ""), "prompt")
        else:  # OLLAMA_CHAT / OPENAI_CHAT share the messages shape
            text = flatten_messages(body.get("messages", []))
    return LlmExchange(
        event_id=event_id or new_event_id(),
        direction=Direction.PROMPT,
        user_id=user_id,
        session_id=session_id,
        timestamp=timestamp or now_utc(),
        endpoint=endpoint,
        model_name=model_name,
        text=text,
        raw_size_bytes=len(raw_body),
        stream=stream,
    )


def extract_tool_names(raw_body: bytes, endpoint: Endpoint) -> tuple[str, ...]:
    """Names of tools/functions a chat request asks the model to use."""
    if endpoint not in (Endpoint.OLLAMA_CHAT, Endpoint.OPENAI_CHAT):
        return ()
    try:
        body = _decode_json(raw_body)
    except MalformedBody:
        return ()
    if not isinstance(body, dict):
        return ()
    names = []
    tools = body.get("tools")
    if isinstance(tools, list):
        for tool in tools:
            if not isinstance(tool, dict):
                continue
            fn = tool.get("function")
            if isinstance(fn, dict) and isinstance(fn.get("name"), str):
                names.append(fn["name"])
            elif isinstance(tool.get("name"), str):
                names.append(tool["name"])
    return tuple(names)


def parse_response_text(raw_body: bytes, endpoint: Endpoint) -> tuple[str, str]:
    """Extract generated text (and model name) from an upstream reply body.

    Responses are parsed fail-open: a body that does not match the expected
    shape is inspected as opaque text rather than dropped, so inspection
    coverage never shrinks because an upstream changed its framing.
    """
    fallback = raw_body.decode("utf-8", errors="replace")
    try:
        body = json.loads(fallback)
    except json.JSONDecodeError:
        return fallback, ""
    if not isinstance(body, dict):
        return fallback, ""
    model = body.get("model", "")
    model = model if isinstance(model, str) else ""
    if endpoint is Endpoint.OLLAMA_GENERATE:
        text = body.get("response")
        return (text, model) if isinstance(text, str) else (fallback, model)
    if endpoint is Endpoint.OLLAMA_CHAT:
        msg = body.get("message")
        if isinstance(msg, dict) and isinstance(msg.get("content"), str):
            return msg["content"], model
        return fallback, model
    if endpoint is Endpoint.OPENAI_CHAT:
        parts = []
        for choice in body.get("choices", []) if isinstance(body.get("choices"), list) else []:
            if isinstance(choice, dict):
                msg = choice.get("message")
                if isinstance(msg, dict) and isinstance(msg.get("content"), str):
                    parts.append(msg["content"])
        if parts:
            return "\n".join(parts), model
        return fallback, model
    return fallback, model


def extract_stream_delta(line: str, endpoint: Endpoint) -> str:
    """Text delta carried by one streamed NDJSON line (empty if none)."""
    try:
        body = json.loads(line)
    except json.JSONDecodeError:
        return line
    if not isinstance(body, dict):
        return line
    if endpoint is Endpoint.OLLAMA_GENERATE and isinstance(body.get("response"), str):
        return body["response"]
    if endpoint in (Endpoint.OLLAMA_CHAT, Endpoint.OPENAI_CHAT):
        msg = body.get("message")
        if isinstance(msg, dict) and isinstance(msg.get("content"), str):
            return msg["content"]
        choices = body.get("choices")
        if isinstance(choices, list) and choices and isinstance(choices[0], dict):
            delta = choices[0].get("delta")
            if isinstance(delta, dict) and isinstance(delta.get("content"), str):
                return delta["content"]
    return ""
