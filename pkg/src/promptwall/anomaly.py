"""Per-session sliding-window behavior tracking.

Counts code-generation requests, reconnaissance prompts, jailbreak cues, and
request volume per (user, session) over a bounded window; alerts on threshold
crossings, on retried jailbreaks after a block, on off-hours bursts above an
EWMA baseline, and on multi-stage attack-chain progression.  Alerts latch:
while a condition stays true inside the window it is reported once, and it can
only fire again after the window slides past the evidence.
"""

from __future__ import annotations

import logging
import threading
from collections import Counter, deque
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum

from .detectors import DetectorReport, find_code_blocks, is_code_request, requests_persistence
from .exchange import Direction, Endpoint, LlmExchange
from .rules import Action, Severity

log = logging.getLogger(__name__)

#: Canonical attack-chain order used for progression detection.
CHAIN_STAGES = ("recon", "jailbreak", "code_gen", "persistence_request")

JAILBREAK_FLAG_THRESHOLD = 0.4
RECON_FLAG_THRESHOLD = 0.3


class AlertKind(str, Enum):
    EXCESSIVE_CODE_GEN = "excessive_code_gen"
    RECON_BURST = "recon_burst"
    OFF_HOURS_VOLUME = "off_hours_volume"
    JAILBREAK_RETRY = "jailbreak_retry"
    CHAIN_PROGRESSION = "chain_progression"


ALERT_SEVERITY = {
    AlertKind.EXCESSIVE_CODE_GEN: Severity.MEDIUM,
    AlertKind.RECON_BURST: Severity.MEDIUM,
    AlertKind.OFF_HOURS_VOLUME: Severity.MEDIUM,
    AlertKind.JAILBREAK_RETRY: Severity.HIGH,
    AlertKind.CHAIN_PROGRESSION: Severity.CRITICAL,
}


@dataclass(frozen=True)
class AnomalyConfig:
    window_seconds: float = 600.0
    window_events: int = 512
    code_gen_limit: int = 5          # alerts strictly above this count
    recon_limit: int = 3
    jailbreak_retry_limit: int = 2   # jailbreak prompts after a block
    off_hours_start: int = 22        # hour of day, inclusive
    off_hours_end: int = 6           # hour of day, exclusive
    rate_multiplier: float = 4.0     # k in rate > k * ewma baseline
    min_rate_floor: float = 3.0      # events/min; guards the empty baseline
    ewma_half_life_seconds: float = 1800.0
    chain_min_stages: int = 3

    @classmethod
    def from_dict(cls, data: dict) -> "AnomalyConfig":
        known = {f for f in cls.__dataclass_fields__}  # type: ignore[attr-defined]
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown anomaly config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class EventSummary:
    event_id: str
    timestamp: datetime
    direction: Direction
    code_gen: bool
    recon: bool
    jailbreak: bool
    blocked: bool
    stages: tuple[str, ...]


@dataclass(frozen=True)
class AnomalyAlert:
    kind: AlertKind
    user_id: str
    session_id: str
    severity: Severity
    evidence: tuple[str, ...]  # event ids, all inside the current window
    detail: str = ""


@dataclass
class SessionProfile:
    """Mutable per-(user, session) window state."""

    user_id: str
    session_id: str
    window: deque[EventSummary] = field(default_factory=deque)
    ewma_rate: float = 0.0           # events per minute
    last_timestamp: datetime | None = None
    stage_state: list[str] = field(default_factory=list)  # first-seen order
    late_events: int = 0
    active_alerts: set[AlertKind] = field(default_factory=set)
    chain_alerted: bool = False

    @property
    def key(self) -> tuple[str, str]:
        return (self.user_id, self.session_id)


def derive_stage_flags(
    exchange: LlmExchange, reports: dict[str, DetectorReport]
) -> tuple[bool, bool, bool, tuple[str, ...]]:
    """(code_gen, recon, jailbreak, chain stages) flags for one exchange."""
    jb_score = reports.get("jailbreak_cues", DetectorReport("jailbreak_cues", 0.0, ())).score
    rc_score = reports.get("recon_prompt", DetectorReport("recon_prompt", 0.0, ())).score
    code_rep = reports.get("code_output", DetectorReport("code_output", 0.0, ()))

    jailbreak = exchange.direction is Direction.PROMPT and jb_score >= JAILBREAK_FLAG_THRESHOLD
    recon = rc_score >= RECON_FLAG_THRESHOLD or exchange.endpoint is Endpoint.OLLAMA_TAGS
    if exchange.direction is Direction.PROMPT:
        code_gen = is_code_request(exchange.text)
        persistence = requests_persistence(exchange.text)
    else:
        code_gen = bool(find_code_blocks(exchange.text))
        persistence = any(f.name == "persistence" for f in code_rep.features)

    stages = []
    if recon:
        stages.append("recon")
    if jailbreak:
        stages.append("jailbreak")
    if code_gen:
        stages.append("code_gen")
    if persistence:
        stages.append("persistence_request")
    return code_gen, recon, jailbreak, tuple(stages)


def _ordered_chain_length(first_seen: list[str]) -> int:
    """Longest subsequence of *first_seen* that follows CHAIN_STAGES order."""
    best = [0] * len(first_seen)
    order = {s: i for i, s in enumerate(CHAIN_STAGES)}
    for i, stage in enumerate(first_seen):
        best[i] = 1
        for j in range(i):
            if order[first_seen[j]] < order[stage]:
                best[i] = max(best[i], best[j] + 1)
    return max(best, default=0)


def _in_off_hours(ts: datetime, cfg: AnomalyConfig) -> bool:
    start, end = cfg.off_hours_start, cfg.off_hours_end
    if start == end:
        return False
    if start < end:
        return start <= ts.hour < end
    return ts.hour >= start or ts.hour < end


def update_profile(
    profile: SessionProfile,
    exchange: LlmExchange,
    reports: dict[str, DetectorReport],
    verdict_action: Action,
    config: AnomalyConfig = AnomalyConfig(),
) -> tuple[SessionProfile, list[AnomalyAlert]]:
    """Fold one exchange into *profile*; returns newly raised alerts.

    Timestamps earlier than the newest seen are clamped forward (and counted
    in ``late_events``) so the window can only ever move forward.
    """
    ts = exchange.timestamp
    if profile.last_timestamp is not None and ts < profile.last_timestamp:
        profile.late_events += 1
        ts = profile.last_timestamp

    code_gen, recon, jailbreak, stages = derive_stage_flags(exchange, reports)
    summary = EventSummary(
        event_id=exchange.event_id,
        timestamp=ts,
        direction=exchange.direction,
        code_gen=code_gen,
        recon=recon,
        jailbreak=jailbreak,
        blocked=verdict_action is Action.BLOCK,
        stages=stages,
    )

    # EWMA baseline update uses the state *before* this event so a burst is
    # compared against its own past, not against itself.
    baseline = profile.ewma_rate
    if profile.last_timestamp is not None:
        dt_min = max((ts - profile.last_timestamp).total_seconds(), 0.0) / 60.0
        inst = 1.0 / dt_min if dt_min > 0 else 60.0
        decay = 0.5 ** (dt_min / (config.ewma_half_life_seconds / 60.0)) if dt_min > 0 else 0.5
        profile.ewma_rate = decay * profile.ewma_rate + (1.0 - decay) * inst
    profile.last_timestamp = ts

    profile.window.append(summary)
    cutoff_seconds = config.window_seconds
    while profile.window and (ts - profile.window[0].timestamp).total_seconds() > cutoff_seconds:
        profile.window.popleft()
    while len(profile.window) > config.window_events:
        profile.window.popleft()

    for stage in stages:
        if stage not in profile.stage_state:
            profile.stage_state.append(stage)

    alerts: list[AnomalyAlert] = []

    def raise_alert(kind: AlertKind, evidence: list[str], detail: str) -> None:
        alerts.append(AnomalyAlert(
            kind=kind, user_id=profile.user_id, session_id=profile.session_id,
            severity=ALERT_SEVERITY[kind], evidence=tuple(evidence), detail=detail,
        ))

    window = list(profile.window)

    cg_events = [e for e in window if e.code_gen]
    _latch(profile, alerts, raise_alert, AlertKind.EXCESSIVE_CODE_GEN,
           len(cg_events) > config.code_gen_limit,
           [e.event_id for e in cg_events],
           f"{len(cg_events)} code-generation events in window (limit {config.code_gen_limit})")

    rc_events = [e for e in window if e.recon]
    _latch(profile, alerts, raise_alert, AlertKind.RECON_BURST,
           len(rc_events) > config.recon_limit,
           [e.event_id for e in rc_events],
           f"{len(rc_events)} reconnaissance events in window (limit {config.recon_limit})")

    if _in_off_hours(ts, config):
        span_min = max((ts - window[0].timestamp).total_seconds() / 60.0, 1.0 / 60.0)
        window_rate = len(window) / span_min
        threshold = max(config.rate_multiplier * baseline, config.min_rate_floor)
        hot = len(window) >= 3 and window_rate > threshold
        _latch(profile, alerts, raise_alert, AlertKind.OFF_HOURS_VOLUME, hot,
               [e.event_id for e in window],
               f"{window_rate:.1f} events/min off-hours vs baseline {baseline:.2f}")
    else:
        profile.active_alerts.discard(AlertKind.OFF_HOURS_VOLUME)

    first_block = next((i for i, e in enumerate(window) if e.blocked), None)
    if first_block is not None:
        retries = [e for e in window[first_block + 1:]
                   if e.jailbreak and e.direction is Direction.PROMPT]
        _latch(profile, alerts, raise_alert, AlertKind.JAILBREAK_RETRY,
               len(retries) >= config.jailbreak_retry_limit,
               [window[first_block].event_id] + [e.event_id for e in retries],
               f"{len(retries)} jailbreak prompts after a blocked event")
    else:
        profile.active_alerts.discard(AlertKind.JAILBREAK_RETRY)

    if (not profile.chain_alerted
            and _ordered_chain_length(profile.stage_state) >= config.chain_min_stages):
        evidence = [e.event_id for e in window if e.stages] or [summary.event_id]
        profile.chain_alerted = True
        raise_alert(AlertKind.CHAIN_PROGRESSION, evidence,
                    "stages observed in order: " + " -> ".join(profile.stage_state))

    return profile, alerts


def _latch(profile, alerts, raise_alert, kind: AlertKind, condition: bool,
           evidence: list[str], detail: str) -> None:
    if condition and kind not in profile.active_alerts:
        profile.active_alerts.add(kind)
        raise_alert(kind, evidence, detail)
    elif not condition:
        profile.active_alerts.discard(kind)


class SessionTracker:
    """Routes exchanges to per-key profiles and aggregates fleet metrics.

    Thread-safe: updates for the same key serialize on a tracker lock; the
    lock is held only for the (cheap) fold so distinct sessions contend
    minimally.
    """

    def __init__(self, config: AnomalyConfig | None = None):
        self.config = config or AnomalyConfig()
        self._profiles: dict[tuple[str, str], SessionProfile] = {}
        self._lock = threading.Lock()
        self.alerts_by_kind: Counter[str] = Counter()
        self.blocked_events = 0

    def profile(self, user_id: str, session_id: str) -> SessionProfile:
        key = (user_id, session_id)
        with self._lock:
            prof = self._profiles.get(key)
            if prof is None:
                prof = SessionProfile(user_id=user_id, session_id=session_id)
                self._profiles[key] = prof
            return prof

    def observe(
        self,
        exchange: LlmExchange,
        reports: dict[str, DetectorReport],
        verdict_action: Action,
    ) -> list[AnomalyAlert]:
        with self._lock:
            key = (exchange.user_id, exchange.session_id)
            prof = self._profiles.get(key)
            if prof is None:
                prof = SessionProfile(user_id=exchange.user_id, session_id=exchange.session_id)
                self._profiles[key] = prof
            _, alerts = update_profile(prof, exchange, reports, verdict_action, self.config)
            if verdict_action is Action.BLOCK:
                self.blocked_events += 1
            for alert in alerts:
                self.alerts_by_kind[alert.kind.value] += 1
                log.info("anomaly alert %s for %s/%s: %s",
                         alert.kind.value, alert.user_id, alert.session_id, alert.detail)
            return alerts

    def snapshot(self, dropped_audit_records: int = 0) -> dict:
        with self._lock:
            return {
                "active_sessions": len(self._profiles),
                "alerts_by_kind": dict(sorted(self.alerts_by_kind.items())),
                "blocked_events": self.blocked_events,
                "dropped_audit_records": dropped_audit_records,
            }


def snapshot_metrics(tracker: SessionTracker, dropped_audit_records: int = 0) -> dict:
    """Operational counters: sessions, alerts by kind, blocks, dropped audit."""
    return tracker.snapshot(dropped_audit_records)
