"""promptwall: an inline firewall for locally hosted LLM servers.

Intercepts client<->model traffic, scores it with deterministic content
detectors, applies a Snort-style rule pack, tracks per-session anomaly
signals, and writes a replayable audit trail.  A bundled mock backend and
attack-playbook simulator exercise the whole stack without touching a real
model or producing harmful output.
"""

from .anomaly import AlertKind, AnomalyAlert, AnomalyConfig, SessionTracker
from .audit import AuditWriter, build_audit_record, open_audit_writer, read_audit_log
from .detectors import CueLexicon, DetectorReport, default_lexicon, run_all
from .exchange import Direction, Endpoint, LlmExchange, canonicalize_text
from .gateway import (
    FailMode,
    FirewallPipeline,
    GatewayConfig,
    GatewayServer,
    Policy,
    StreamScanner,
    Verdict,
    load_default_ruleset,
    proxy_stream,
)
from .mockllm import AlignmentTier, MockLlmServer, generate_reply
from .redteam import (
    AttackScenario,
    DirectTarget,
    HttpTarget,
    ScenarioTrace,
    load_scenario,
    run_scenario,
    score_detection,
)
from .rules import Action, Rule, RuleSet, aggregate_action, evaluate, parse_ruleset

__version__ = "0.1.0"

__all__ = [
    "Action",
    "AlertKind",
    "AlignmentTier",
    "AnomalyAlert",
    "AnomalyConfig",
    "AttackScenario",
    "AuditWriter",
    "CueLexicon",
    "DetectorReport",
    "Direction",
    "DirectTarget",
    "Endpoint",
    "FailMode",
    "FirewallPipeline",
    "GatewayConfig",
    "GatewayServer",
    "HttpTarget",
    "LlmExchange",
    "MockLlmServer",
    "Policy",
    "Rule",
    "RuleSet",
    "ScenarioTrace",
    "SessionTracker",
    "StreamScanner",
    "Verdict",
    "aggregate_action",
    "build_audit_record",
    "canonicalize_text",
    "default_lexicon",
    "evaluate",
    "generate_reply",
    "load_default_ruleset",
    "load_scenario",
    "open_audit_writer",
    "parse_ruleset",
    "proxy_stream",
    "read_audit_log",
    "run_all",
    "run_scenario",
    "score_detection",
    "__version__",
]
