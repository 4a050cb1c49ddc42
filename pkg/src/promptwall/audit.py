"""Append-only JSONL audit log.

One line per exchange, carrying both the normalized event and the verdict the
firewall reached, with enough fidelity that `promptwall replay` can re-score
the log and diff verdicts byte-for-byte.  Audit failures never break traffic
flow: a write error increments a dropped-records counter and the exchange
proceeds.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass
from typing import IO, TYPE_CHECKING, Iterator

from .exchange import (
    Direction,
    Endpoint,
    LlmExchange,
    format_timestamp,
    parse_timestamp,
)

if TYPE_CHECKING:  # pragma: no cover - typing only
    from .gateway import Verdict

log = logging.getLogger(__name__)

AUDIT_FIELDS = (
    "event_id", "direction", "user_id", "session_id", "timestamp",
    "endpoint", "model_name", "text", "action", "matched_rule_ids",
    "detector_scores", "anomaly_alerts",
)


def build_audit_record(exchange: LlmExchange, verdict: "Verdict") -> dict:
    """Schema-stable dict for one exchange + verdict (field order fixed)."""
    return {
        "event_id": exchange.event_id,
        "direction": exchange.direction.value,
        "user_id": exchange.user_id,
        "session_id": exchange.session_id,
        "timestamp": format_timestamp(exchange.timestamp),
        "endpoint": exchange.endpoint.value,
        "model_name": exchange.model_name,
        "text": exchange.text,
        "action": verdict.action.label,
        "matched_rule_ids": sorted(verdict.matched_rule_ids),
        "detector_scores": {k: verdict.detector_scores[k] for k in sorted(verdict.detector_scores)},
        "anomaly_alerts": [
            {
                "kind": a.kind.value,
                "severity": a.severity.label,
                "evidence": list(a.evidence),
            }
            for a in verdict.anomaly_alerts
        ],
    }


def render_audit_line(exchange: LlmExchange, verdict: "Verdict") -> str:
    return json.dumps(build_audit_record(exchange, verdict),
                      ensure_ascii=False, separators=(",", ":"))


def render_verdict_fields(record: dict) -> str:
    """The verdict-only projection used for byte-level replay comparison."""
    return json.dumps(
        {
            "action": record["action"],
            "matched_rule_ids": record["matched_rule_ids"],
            "detector_scores": record["detector_scores"],
            "anomaly_alerts": record["anomaly_alerts"],
        },
        ensure_ascii=False,
        separators=(",", ":"),
    )


class AuditWriter:
    """Thread-safe line appender over any text sink (usually a file)."""

    def __init__(self, sink: IO[str]):
        self._sink = sink
        self._lock = threading.Lock()
        self.records_written = 0
        self.dropped_records = 0

    def write(self, exchange: LlmExchange, verdict: "Verdict") -> bool:
        try:
            line = render_audit_line(exchange, verdict)
        except Exception:
            log.exception("could not serialize audit record %s", exchange.event_id)
            with self._lock:
                self.dropped_records += 1
            return False
        with self._lock:
            try:
                self._sink.write(line + "\n")
                self._sink.flush()
            except OSError:
                log.exception("audit write failed for %s", exchange.event_id)
                self.dropped_records += 1
                return False
            self.records_written += 1
            return True

    def close(self) -> None:
        with self._lock:
            try:
                self._sink.close()
            except OSError:  # pragma: no cover - closing is best effort
                pass


def open_audit_writer(path: str) -> AuditWriter:
    return AuditWriter(open(path, "a", encoding="utf-8"))


def write_audit_record(writer: AuditWriter, exchange: LlmExchange, verdict: "Verdict") -> bool:
    """Append one record; returns False (and counts a drop) on failure."""
    return writer.write(exchange, verdict)


@dataclass(frozen=True)
class AuditRecord:
    """A parsed audit line, reconstructable into the original exchange."""

    event_id: str
    direction: Direction
    user_id: str
    session_id: str
    timestamp: str
    endpoint: Endpoint
    model_name: str
    text: str
    action: str
    matched_rule_ids: tuple[int, ...]
    detector_scores: dict
    anomaly_alerts: tuple
    raw: dict

    def to_exchange(self) -> LlmExchange:
        return LlmExchange(
            event_id=self.event_id,
            direction=self.direction,
            user_id=self.user_id,
            session_id=self.session_id,
            timestamp=parse_timestamp(self.timestamp),
            endpoint=self.endpoint,
            model_name=self.model_name,
            text=self.text,
            raw_size_bytes=len(self.text.encode("utf-8")),
        )


class AuditLogError(ValueError):
    def __init__(self, lineno: int, reason: str):
        super().__init__(f"audit log line {lineno}: {reason}")
        self.lineno = lineno


def parse_audit_line(line: str, lineno: int = 0) -> AuditRecord:
    try:
        data = json.loads(line)
    except json.JSONDecodeError as exc:
        raise AuditLogError(lineno, f"invalid json: {exc}") from None
    if not isinstance(data, dict):
        raise AuditLogError(lineno, "record must be a json object")
    missing = [f for f in AUDIT_FIELDS if f not in data]
    if missing:
        raise AuditLogError(lineno, f"missing fields: {', '.join(missing)}")
    try:
        direction = Direction(data["direction"])
        endpoint = Endpoint(data["endpoint"])
    except ValueError as exc:
        raise AuditLogError(lineno, str(exc)) from None
    return AuditRecord(
        event_id=str(data["event_id"]),
        direction=direction,
        user_id=str(data["user_id"]),
        session_id=str(data["session_id"]),
        timestamp=str(data["timestamp"]),
        endpoint=endpoint,
        model_name=str(data["model_name"]),
        text=str(data["text"]),
        action=str(data["action"]),
        matched_rule_ids=tuple(data["matched_rule_ids"]),
        detector_scores=dict(data["detector_scores"]),
        anomaly_alerts=tuple(data["anomaly_alerts"]),
        raw=data,
    )


def read_audit_log(path: str) -> Iterator[AuditRecord]:
    """Yield parsed records; blank lines are skipped, bad lines raise."""
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            yield parse_audit_line(line, lineno)
