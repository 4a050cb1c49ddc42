"""Inline firewall pipeline and reverse-proxy gateway.

The :class:`FirewallPipeline` is the policy brain: detectors -> rule engine ->
policy escalation -> anomaly tracking -> audit, returning a :class:`Verdict`
per exchange.  :class:`GatewayServer` wraps it in an HTTP reverse proxy that
sits between clients and a local LLM server (Ollama-style and OpenAI-style
endpoints), refusing blocked traffic with a structured 403 body and scanning
streamed responses incrementally so flagged content is truncated mid-flight.

Fail-closed by default: upstream failures and malformed bodies turn into
Block verdicts unless the policy says otherwise.
"""

from __future__ import annotations

import http.client
import json
import logging
import os
import threading
from collections import deque
from dataclasses import dataclass, field, replace
from datetime import datetime
from enum import Enum
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from importlib import resources
from urllib.parse import urlsplit

from . import audit as audit_mod
from .anomaly import AnomalyAlert, AnomalyConfig, SessionTracker
from .detectors import (
    DEFAULT_B64_MAX_DEPTH,
    DEFAULT_B64_MIN_LEN,
    CueLexicon,
    DetectorReport,
    default_lexicon,
    find_code_blocks,
    is_code_request,
    run_all,
)
from .exchange import (
    ENDPOINT_PATHS,
    Direction,
    Endpoint,
    LlmExchange,
    MalformedBody,
    extract_stream_delta,
    extract_tool_names,
    new_event_id,
    now_utc,
    parse_request,
    parse_response_text,
)
from .rules import Action, RuleSet, aggregate_action, evaluate, parse_ruleset

log = logging.getLogger(__name__)

REFUSAL_ERROR = "blocked_by_policy"
UPSTREAM_UNAVAILABLE_REASON = "upstream unavailable"
METRICS_PATH = "/_firewall/metrics"


class FailMode(str, Enum):
    OPEN = "fail_open"
    CLOSED = "fail_closed"


@dataclass(frozen=True)
class Policy:
    """Usage policy applied on top of the rule verdict (escalate-only)."""

    code_gen_allowed: bool = True
    code_gen_overrides: dict[str, bool] = field(default_factory=dict)
    blocked_detector_threshold: dict[str, float] = field(default_factory=dict)
    tool_allowlist: tuple[str, ...] | None = None  # None = unrestricted
    rate_limit: float | None = 120.0  # prompt events per minute per principal
    fail_mode: FailMode = FailMode.CLOSED

    def allows_code_gen(self, user_id: str) -> bool:
        return self.code_gen_overrides.get(user_id, self.code_gen_allowed)

    @classmethod
    def from_dict(cls, data: dict) -> "Policy":
        cg = data.get("code_gen_allowed", True)
        if isinstance(cg, dict):
            default = bool(cg.get("default", True))
            overrides = {k: bool(v) for k, v in cg.items() if k != "default"}
        else:
            default, overrides = bool(cg), {}
        allowlist = data.get("tool_allowlist")
        return cls(
            code_gen_allowed=default,
            code_gen_overrides=overrides,
            blocked_detector_threshold={
                str(k): float(v) for k, v in data.get("blocked_detector_threshold", {}).items()
            },
            tool_allowlist=tuple(allowlist) if allowlist is not None else None,
            rate_limit=float(data["rate_limit"]) if data.get("rate_limit") is not None else None,
            fail_mode=FailMode(data.get("fail_mode", FailMode.CLOSED.value)),
        )


@dataclass(frozen=True)
class Verdict:
    """What the firewall decided about one exchange, and why."""

    action: Action
    matched_rule_ids: tuple[int, ...] = ()
    detector_scores: dict[str, float] = field(default_factory=dict)
    anomaly_alerts: tuple[AnomalyAlert, ...] = ()
    reason: str = ""


def load_default_ruleset() -> RuleSet:
    text = resources.files("promptwall.data").joinpath("default.lrule").read_text("utf-8")
    return parse_ruleset(text)


@dataclass
class GatewayConfig:
    listen_host: str = "127.0.0.1"
    listen_port: int = 8899
    upstream: str = "http://127.0.0.1:11434"
    rules_path: str | None = None     # None -> packaged default pack
    lexicon_path: str | None = None   # None -> packaged default lexicon
    audit_log_path: str = "promptwall_audit.jsonl"
    policy: Policy = field(default_factory=Policy)
    anomaly: AnomalyConfig = field(default_factory=AnomalyConfig)
    b64_max_depth: int = DEFAULT_B64_MAX_DEPTH
    b64_min_len: int = DEFAULT_B64_MIN_LEN
    stream_tail_chars: int = 4096
    stream_rescan_interval: int = 1024
    stream_retain_cap: int = 262144
    upstream_timeout: float = 60.0

    @classmethod
    def from_dict(cls, data: dict, env: dict | None = None) -> "GatewayConfig":
        env = os.environ if env is None else env
        listen = data.get("listen", {})
        detectors_cfg = data.get("detectors", {})
        streaming = data.get("streaming", {})
        cfg = cls(
            listen_host=listen.get("host", "127.0.0.1"),
            listen_port=int(listen.get("port", 8899)),
            upstream=data.get("upstream", "http://127.0.0.1:11434"),
            rules_path=data.get("rules_path"),
            lexicon_path=data.get("lexicon_path"),
            audit_log_path=data.get("audit_log", "promptwall_audit.jsonl"),
            policy=Policy.from_dict(data.get("policy", {})),
            anomaly=AnomalyConfig.from_dict(data.get("anomaly", {})),
            b64_max_depth=int(detectors_cfg.get("b64_max_depth", DEFAULT_B64_MAX_DEPTH)),
            b64_min_len=int(detectors_cfg.get("b64_min_len", DEFAULT_B64_MIN_LEN)),
            stream_tail_chars=int(streaming.get("tail_chars", 4096)),
            stream_rescan_interval=int(streaming.get("rescan_interval", 1024)),
            stream_retain_cap=int(streaming.get("retain_cap", 262144)),
            upstream_timeout=float(data.get("upstream_timeout", 60.0)),
        )
        listen_env = env.get("PROMPTWALL_LISTEN")
        if listen_env:
            host, _, port = listen_env.rpartition(":")
            cfg.listen_host = host or cfg.listen_host
            cfg.listen_port = int(port)
        upstream_env = env.get("PROMPTWALL_UPSTREAM")
        if upstream_env:
            cfg.upstream = upstream_env
        return cfg

    @classmethod
    def load(cls, path: str, env: dict | None = None) -> "GatewayConfig":
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ValueError("gateway config must be a JSON object")
        return cls.from_dict(data, env)


class _RateWindow:
    """Per-principal sliding 60s counter driven by exchange timestamps."""

    def __init__(self) -> None:
        self._events: dict[str, deque[datetime]] = {}
        self._lock = threading.Lock()

    def count(self, user_id: str, ts: datetime) -> int:
        with self._lock:
            dq = self._events.setdefault(user_id, deque())
            while dq and (ts - dq[0]).total_seconds() > 60.0:
                dq.popleft()
            dq.append(ts)
            return len(dq)


class FirewallPipeline:
    """Detector + rule + policy + anomaly + audit pipeline over exchanges."""

    def __init__(
        self,
        ruleset: RuleSet,
        lexicon: CueLexicon | None = None,
        policy: Policy | None = None,
        anomaly_config: AnomalyConfig | None = None,
        audit_writer: audit_mod.AuditWriter | None = None,
        *,
        b64_max_depth: int = DEFAULT_B64_MAX_DEPTH,
        b64_min_len: int = DEFAULT_B64_MIN_LEN,
    ):
        self.ruleset = ruleset
        self.lexicon = lexicon if lexicon is not None else default_lexicon()
        self.policy = policy or Policy()
        self.tracker = SessionTracker(anomaly_config)
        self.audit_writer = audit_writer
        self.b64_max_depth = b64_max_depth
        self.b64_min_len = b64_min_len
        self._rate = _RateWindow()

    @classmethod
    def from_config(cls, config: GatewayConfig,
                    audit_writer: audit_mod.AuditWriter | None = None) -> "FirewallPipeline":
        if config.rules_path:
            from .rules import parse_ruleset_file
            ruleset = parse_ruleset_file(config.rules_path)
        else:
            ruleset = load_default_ruleset()
        lexicon = (CueLexicon.from_file(config.lexicon_path)
                   if config.lexicon_path else default_lexicon())
        if audit_writer is None:
            audit_writer = audit_mod.open_audit_writer(config.audit_log_path)
        return cls(ruleset, lexicon, config.policy, config.anomaly, audit_writer,
                   b64_max_depth=config.b64_max_depth, b64_min_len=config.b64_min_len)

    def swap_ruleset(self, ruleset: RuleSet) -> None:
        """Hot-reload: atomically replace the whole rule pack between events."""
        self.ruleset = ruleset

    # -- scoring ------------------------------------------------------------

    def _score(self, exchange: LlmExchange) -> tuple[dict[str, DetectorReport], dict[str, float], list]:
        reports = run_all(exchange.text, self.lexicon,
                          b64_max_depth=self.b64_max_depth, b64_min_len=self.b64_min_len)
        scores = {name: rep.score for name, rep in reports.items()}
        matches = evaluate(self.ruleset, exchange, scores, b64_max_depth=self.b64_max_depth)
        return reports, scores, matches

    @staticmethod
    def _rule_reason(matches: list) -> str:
        if not matches:
            return ""
        top = max(matches, key=lambda m: (m.action != m.action.LOG, m.severity, -m.rule_id))
        return f"rule {top.rule_id}: {top.message}"

    def assess_prompt(
        self, exchange: LlmExchange, tool_names: tuple[str, ...] = ()
    ) -> tuple[Verdict, dict[str, DetectorReport]]:
        """Rule + policy decision for a prompt; no anomaly/audit side effects
        except the rate-limit window, which must see every prompt exactly once."""
        reports, scores, matches = self._score(exchange)
        floor = Action.ALLOW
        reason = ""

        if not self.policy.allows_code_gen(exchange.user_id) and is_code_request(exchange.text):
            floor, reason = Action.BLOCK, (
                f"code generation disabled for principal {exchange.user_id!r}"
            )
        if floor is not Action.BLOCK and self.policy.tool_allowlist is not None:
            banned = [t for t in tool_names if t not in self.policy.tool_allowlist]
            if banned:
                floor, reason = Action.BLOCK, f"tool {banned[0]!r} not in allowlist"
        if floor is not Action.BLOCK and self.policy.rate_limit is not None:
            count = self._rate.count(exchange.user_id, exchange.timestamp)
            if count > self.policy.rate_limit:
                floor, reason = Action.BLOCK, (
                    f"rate limit exceeded ({count} prompts/min > {self.policy.rate_limit:g})"
                )
        if floor is not Action.BLOCK:
            for name, threshold in sorted(self.policy.blocked_detector_threshold.items()):
                if scores.get(name, 0.0) > threshold:
                    floor, reason = Action.BLOCK, (
                        f"detector {name} score {scores[name]:.2f} exceeds policy threshold {threshold:g}"
                    )
                    break

        action = aggregate_action(matches, floor=floor)
        if action is not Action.ALLOW and not reason:
            reason = self._rule_reason(matches)
        verdict = Verdict(
            action=action,
            matched_rule_ids=tuple(sorted(m.rule_id for m in matches)),
            detector_scores=scores,
            reason=reason,
        )
        return verdict, reports

    def assess_response(self, exchange: LlmExchange) -> tuple[Verdict, dict[str, DetectorReport]]:
        reports, scores, matches = self._score(exchange)
        floor = Action.ALLOW
        reason = ""
        for name, threshold in sorted(self.policy.blocked_detector_threshold.items()):
            if scores.get(name, 0.0) > threshold:
                floor, reason = Action.BLOCK, (
                    f"detector {name} score {scores[name]:.2f} exceeds policy threshold {threshold:g}"
                )
                break
        action = aggregate_action(matches, floor=floor)
        if action is Action.ALERT:
            flagged = [f for f in reports["code_output"].features]
            if flagged and find_code_blocks(exchange.text):
                action = Action.REDACT
                reason = reason or "flagged code block redacted from response"
        if action is not Action.ALLOW and not reason:
            reason = self._rule_reason(matches)
        verdict = Verdict(
            action=action,
            matched_rule_ids=tuple(sorted(m.rule_id for m in matches)),
            detector_scores=scores,
            reason=reason,
        )
        return verdict, reports

    def commit(
        self,
        exchange: LlmExchange,
        verdict: Verdict,
        reports: dict[str, DetectorReport],
    ) -> Verdict:
        """Record the final verdict: anomaly fold, then exactly one audit line."""
        alerts = self.tracker.observe(exchange, reports, verdict.action)
        final = replace(verdict, anomaly_alerts=tuple(alerts))
        if self.audit_writer is not None:
            audit_mod.write_audit_record(self.audit_writer, exchange, final)
        return final

    # -- public single-shot operations ---------------------------------------

    def process_prompt(self, exchange: LlmExchange,
                       tool_names: tuple[str, ...] = ()) -> Verdict:
        """Full prompt pipeline: detectors, rules, policy, anomaly, audit."""
        verdict, reports = self.assess_prompt(exchange, tool_names)
        return self.commit(exchange, verdict, reports)

    def process_response(self, exchange: LlmExchange) -> Verdict:
        """Full response pipeline; may yield REDACT for flagged code blocks."""
        verdict, reports = self.assess_response(exchange)
        return self.commit(exchange, verdict, reports)

    def process(self, exchange: LlmExchange, tool_names: tuple[str, ...] = ()) -> Verdict:
        if exchange.direction is Direction.PROMPT:
            return self.process_prompt(exchange, tool_names)
        return self.process_response(exchange)

    def metrics(self) -> dict:
        dropped = self.audit_writer.dropped_records if self.audit_writer else 0
        return self.tracker.snapshot(dropped)


def redact_flagged_code(text: str, code_report: DetectorReport) -> str:
    """Replace code blocks containing flagged capabilities with a marker."""
    blocks = find_code_blocks(text)
    if not blocks:
        return text
    spans = [(f.start, f.end, f.name) for f in code_report.features]
    out = []
    cursor = 0
    for block in blocks:
        hits = sorted({name for s, e, name in spans if s >= block.start and e <= block.end})
        if not hits:
            continue
        out.append(text[cursor:block.start])
        out.append(f"[redacted by policy: {', '.join(hits)}]")
        cursor = block.end
    out.append(text[cursor:])
    return "".join(out) if out else text


# ---------------------------------------------------------------------------
# streaming inspection
# ---------------------------------------------------------------------------


class StreamScanner:
    """Incremental response scanner with bounded buffers.

    Keeps a sliding tail (default 4096 chars) that is re-scanned as chunks
    arrive, plus a capped retained prefix used for the end-of-stream full
    rescan.  Once a Block decision is reached no further chunk may pass.
    """

    def __init__(self, pipeline: FirewallPipeline, proto: LlmExchange,
                 *, tail_chars: int = 4096, rescan_interval: int = 1024,
                 retain_cap: int = 262144):
        self.pipeline = pipeline
        self.proto = proto
        self.tail_chars = tail_chars
        self.rescan_interval = max(1, rescan_interval)
        self.retain_cap = retain_cap
        self._tail = ""
        self._retained: list[str] = []
        self._retained_len = 0
        self.total_chars = 0
        self._pending = 0
        self.blocked = False
        self.block_reason = ""
        self.block_rule_ids: tuple[int, ...] = ()

    @property
    def tail_len(self) -> int:
        return len(self._tail)

    @property
    def retained_len(self) -> int:
        return self._retained_len

    def feed(self, chunk: str) -> Action:
        """Scan *chunk* in context; returns BLOCK if the stream must stop."""
        if self.blocked:
            return Action.BLOCK
        self.total_chars += len(chunk)
        if self._retained_len < self.retain_cap:
            room = self.retain_cap - self._retained_len
            kept = chunk[:room]
            self._retained.append(kept)
            self._retained_len += len(kept)
        self._tail = (self._tail + chunk)[-self.tail_chars:]
        self._pending += len(chunk)
        if self._pending >= self.rescan_interval:
            self._pending = 0
            self._scan_tail()
        return Action.BLOCK if self.blocked else Action.ALLOW

    def _scan_tail(self) -> None:
        probe = replace(self.proto, text=self._tail,
                        raw_size_bytes=len(self._tail.encode("utf-8")))
        verdict, _ = self.pipeline.assess_response(probe)
        if verdict.action is Action.BLOCK:
            self.blocked = True
            self.block_reason = verdict.reason
            self.block_rule_ids = verdict.matched_rule_ids

    def finalize(self) -> Verdict:
        """End-of-stream full rescan over the retained text; audits once."""
        full_text = "".join(self._retained)
        final_exchange = replace(
            self.proto, text=full_text,
            raw_size_bytes=len(full_text.encode("utf-8")),
        )
        verdict, reports = self.pipeline.assess_response(final_exchange)
        if self.blocked and verdict.action is not Action.BLOCK:
            verdict = replace(verdict, action=Action.BLOCK,
                              reason=verdict.reason or self.block_reason)
        return self.pipeline.commit(final_exchange, verdict, reports)


@dataclass(frozen=True)
class StreamResult:
    emitted: tuple[str, ...]
    truncated: bool
    truncated_at: int | None
    verdict: Verdict
    delivered_text: str


def proxy_stream(chunks, scanner: StreamScanner) -> StreamResult:
    """Drive *scanner* over an iterable of text chunks.

    A chunk is emitted only after it passes inspection, so flagged content is
    cut off at (or before) the chunk that completed the match and the
    remainder of the stream is dropped.
    """
    emitted: list[str] = []
    truncated_at: int | None = None
    for index, chunk in enumerate(chunks):
        if scanner.feed(chunk) is Action.BLOCK:
            truncated_at = index
            break
        emitted.append(chunk)
    verdict = scanner.finalize()
    return StreamResult(
        emitted=tuple(emitted),
        truncated=truncated_at is not None,
        truncated_at=truncated_at,
        verdict=verdict,
        delivered_text="".join(emitted),
    )


# ---------------------------------------------------------------------------
# HTTP reverse proxy
# ---------------------------------------------------------------------------

_HOP_BY_HOP = {
    "connection", "keep-alive", "proxy-authenticate", "proxy-authorization",
    "te", "trailers", "transfer-encoding", "upgrade", "content-length",
}


def refusal_body(rule_ids, reason: str) -> bytes:
    return json.dumps(
        {"error": REFUSAL_ERROR, "rule_ids": sorted(rule_ids), "reason": reason},
        ensure_ascii=False,
    ).encode("utf-8")


class _UpstreamError(Exception):
    pass


class _GatewayHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server: "GatewayServer"

    def log_message(self, fmt, *args):  # route through logging, not stderr
        log.debug("gateway http: " + fmt, *args)

    # -- plumbing -----------------------------------------------------------

    def _send_json(self, status: int, body: bytes, action: str | None = None,
                   close: bool = False) -> None:
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        if action:
            self.send_header("X-Firewall-Action", action)
        if close:
            self.send_header("Connection", "close")
        self.end_headers()
        self.wfile.write(body)

    def _identity(self) -> tuple[str, str]:
        user = self.headers.get("X-User-Id", "anonymous").strip() or "anonymous"
        session = self.headers.get("X-Session-Id", "").strip()
        if not session:
            session = f"{user}@{self.client_address[0]}"
        return user, session

    def _read_body(self) -> bytes:
        length = int(self.headers.get("Content-Length", 0) or 0)
        return self.rfile.read(length) if length > 0 else b""

    # -- routes ---------------------------------------------------------------

    def do_GET(self):
        if self.path == METRICS_PATH:
            body = json.dumps(self.server.gateway.pipeline.metrics()).encode("utf-8")
            self._send_json(200, body)
            return
        endpoint = ENDPOINT_PATHS.get(self.path.split("?")[0], Endpoint.OTHER)
        self._handle_exchange("GET", endpoint, b"")

    def do_POST(self):
        endpoint = ENDPOINT_PATHS.get(self.path.split("?")[0], Endpoint.OTHER)
        self._handle_exchange("POST", endpoint, self._read_body())

    # -- core flow ------------------------------------------------------------

    def _handle_exchange(self, method: str, endpoint: Endpoint, body: bytes) -> None:
        gw = self.server.gateway
        pipeline = gw.pipeline
        user, session = self._identity()
        try:
            exchange = parse_request(body, endpoint, user_id=user, session_id=session)
        except MalformedBody as exc:
            exchange = LlmExchange(
                event_id=new_event_id(), direction=Direction.PROMPT, user_id=user,
                session_id=session, timestamp=now_utc(), endpoint=endpoint,
                model_name="", text=body.decode("utf-8", errors="replace"),
                raw_size_bytes=len(body),
            )
            if pipeline.policy.fail_mode is FailMode.CLOSED:
                verdict, reports = pipeline.assess_prompt(exchange)
                verdict = replace(verdict, action=Action.BLOCK,
                                  reason=f"malformed body: {exc}")
                final = pipeline.commit(exchange, verdict, reports)
                self._send_json(400, refusal_body(final.matched_rule_ids, final.reason),
                                action=final.action.label)
                return
            # fail-open: inspect the raw text and continue as endpoint Other

        tools = extract_tool_names(body, endpoint)
        verdict, reports = pipeline.assess_prompt(exchange, tools)
        if verdict.action is Action.BLOCK:
            final = pipeline.commit(exchange, verdict, reports)
            self._send_json(403, refusal_body(final.matched_rule_ids, final.reason),
                            action=final.action.label)
            return

        try:
            upstream, resp = gw.fetch_upstream(method, self.path, body, self.headers)
        except _UpstreamError as exc:
            if pipeline.policy.fail_mode is FailMode.CLOSED:
                blocked = replace(verdict, action=Action.BLOCK,
                                  reason=UPSTREAM_UNAVAILABLE_REASON)
                final = pipeline.commit(exchange, blocked, reports)
                self._send_json(403, refusal_body(final.matched_rule_ids, final.reason),
                                action=final.action.label)
            else:
                pipeline.commit(exchange, verdict, reports)
                err = json.dumps({"error": "upstream_unreachable", "reason": str(exc)}).encode()
                self._send_json(502, err)
            return

        pipeline.commit(exchange, verdict, reports)

        try:
            streaming = exchange.stream and resp.getheader("Content-Length") is None
            if streaming:
                self._relay_stream(resp, exchange)
            else:
                self._relay_body(resp, exchange)
        finally:
            upstream.close()

    def _response_proto(self, exchange: LlmExchange, text: str, size: int) -> LlmExchange:
        return LlmExchange(
            event_id=new_event_id(), direction=Direction.RESPONSE,
            user_id=exchange.user_id, session_id=exchange.session_id,
            timestamp=now_utc(), endpoint=exchange.endpoint,
            model_name=exchange.model_name, text=text, raw_size_bytes=size,
            stream=exchange.stream,
        )

    def _relay_body(self, resp, exchange: LlmExchange) -> None:
        pipeline = self.server.gateway.pipeline
        raw = resp.read()
        text, model = parse_response_text(raw, exchange.endpoint)
        resp_exchange = self._response_proto(exchange, text, len(raw))
        if model and not resp_exchange.model_name:
            resp_exchange = replace(resp_exchange, model_name=model)
        verdict, reports = pipeline.assess_response(resp_exchange)
        final = pipeline.commit(resp_exchange, verdict, reports)

        if final.action is Action.BLOCK:
            self._send_json(403, refusal_body(final.matched_rule_ids, final.reason),
                            action=final.action.label)
            return
        if final.action is Action.REDACT:
            redacted = redact_flagged_code(text, reports["code_output"])
            body = _rebuild_body(raw, redacted, exchange.endpoint)
            self._send_json(resp.status, body, action=final.action.label)
            return

        # Allow / LogOnly / Alert: forward the upstream bytes untouched.
        self.send_response(resp.status)
        for key, value in resp.getheaders():
            if key.lower() not in _HOP_BY_HOP:
                self.send_header(key, value)
        self.send_header("Content-Length", str(len(raw)))
        self.send_header("X-Firewall-Action", final.action.label)
        self.end_headers()
        self.wfile.write(raw)

    def _relay_stream(self, resp, exchange: LlmExchange) -> None:
        gw = self.server.gateway
        pipeline = gw.pipeline
        proto = self._response_proto(exchange, "", 0)
        scanner = StreamScanner(
            pipeline, proto,
            tail_chars=gw.config.stream_tail_chars,
            rescan_interval=gw.config.stream_rescan_interval,
            retain_cap=gw.config.stream_retain_cap,
        )
        self.send_response(resp.status)
        self.send_header("Content-Type", resp.getheader("Content-Type", "application/x-ndjson"))
        self.send_header("Connection", "close")
        self.end_headers()
        self.close_connection = True
        truncated = False
        while True:
            line = resp.readline()
            if not line:
                break
            delta = extract_stream_delta(line.decode("utf-8", errors="replace"),
                                         exchange.endpoint)
            if scanner.feed(delta) is Action.BLOCK:
                truncated = True
                break
            self.wfile.write(line)
        final = scanner.finalize()
        if truncated or final.action is Action.BLOCK:
            # Tell the client the stream was cut (or, if everything was
            # already delivered before the end-of-stream rescan fired,
            # that the content it just received is policy-blocked).
            marker = json.dumps({
                "error": REFUSAL_ERROR,
                "rule_ids": sorted(final.matched_rule_ids or scanner.block_rule_ids),
                "reason": final.reason or scanner.block_reason,
                "done": True,
            }).encode("utf-8")
            self.wfile.write(marker + b"\n")


def _rebuild_body(raw: bytes, redacted_text: str, endpoint: Endpoint) -> bytes:
    """Re-serialize an upstream body with its generated text replaced."""
    try:
        body = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        return redacted_text.encode("utf-8")
    if not isinstance(body, dict):
        return redacted_text.encode("utf-8")
    if endpoint is Endpoint.OLLAMA_GENERATE and "response" in body:
        body["response"] = redacted_text
    elif endpoint is Endpoint.OLLAMA_CHAT and isinstance(body.get("message"), dict):
        body["message"]["content"] = redacted_text
    elif endpoint is Endpoint.OPENAI_CHAT and isinstance(body.get("choices"), list):
        for choice in body["choices"]:
            if isinstance(choice, dict) and isinstance(choice.get("message"), dict):
                choice["message"]["content"] = redacted_text
    else:
        return redacted_text.encode("utf-8")
    return json.dumps(body, ensure_ascii=False).encode("utf-8")


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True
    gateway: "GatewayServer"


class GatewayServer:
    """Reverse proxy bound to one upstream LLM server."""

    def __init__(self, config: GatewayConfig, pipeline: FirewallPipeline | None = None):
        self.config = config
        self.pipeline = pipeline or FirewallPipeline.from_config(config)
        self._httpd = _Server((config.listen_host, config.listen_port), _GatewayHandler)
        self._httpd.gateway = self
        self._thread: threading.Thread | None = None
        parts = urlsplit(config.upstream)
        self._upstream_host = parts.hostname or "127.0.0.1"
        self._upstream_port = parts.port or (443 if parts.scheme == "https" else 80)

    @property
    def port(self) -> int:
        return self._httpd.server_address[1]

    @property
    def address(self) -> str:
        return f"http://{self.config.listen_host}:{self.port}"

    def fetch_upstream(self, method: str, path: str, body: bytes, headers):
        """Send the request upstream; returns (connection, live response).

        Any socket-level failure surfaces as :class:`_UpstreamError` so the
        handler can apply the configured fail mode.
        """
        conn = http.client.HTTPConnection(self._upstream_host, self._upstream_port,
                                          timeout=self.config.upstream_timeout)
        fwd = {"Content-Type": headers.get("Content-Type", "application/json")}
        try:
            conn.request(method, path, body=body if body else None, headers=fwd)
            return conn, conn.getresponse()
        except OSError as exc:
            conn.close()
            raise _UpstreamError(str(exc)) from None

    def start(self) -> None:
        self._thread = threading.Thread(target=self._httpd.serve_forever,
                                        name="promptwall-gateway", daemon=True)
        self._thread.start()
        log.info("gateway listening on %s -> upstream %s", self.address, self.config.upstream)

    def serve_forever(self) -> None:
        log.info("gateway listening on %s -> upstream %s", self.address, self.config.upstream)
        self._httpd.serve_forever()

    def shutdown(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
        if self.pipeline.audit_writer is not None:
            self.pipeline.audit_writer.close()
