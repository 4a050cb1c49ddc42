"""promptwall command line.

Exit codes: 0 success, 1 usage error, 2 validation failure (bad rule packs,
bad scenario/audit inputs, replay divergence), 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter

from . import audit as audit_mod
from .anomaly import AnomalyConfig
from .detectors import CueLexicon, default_lexicon, run_all
from .exchange import Direction, Endpoint, LlmExchange, new_event_id, now_utc
from .gateway import (
    FirewallPipeline,
    GatewayConfig,
    GatewayServer,
    Policy,
    load_default_ruleset,
)
from .mockllm import AlignmentTier, MockLlmServer
from .redteam import (
    DirectTarget,
    HttpTarget,
    ScenarioFormatError,
    TargetUnreachable,
    load_scenario,
    run_scenario,
    score_detection,
)
from .rules import (
    ParseError,
    aggregate_action,
    evaluate,
    format_ruleset,
    parse_ruleset_file,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INVALID = 2
EXIT_RUNTIME = 3

log = logging.getLogger(__name__)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); we reserve 2 for validation
        raise _UsageError(message)


def _load_ruleset(path: str | None):
    return parse_ruleset_file(path) if path else load_default_ruleset()


def _load_lexicon(path: str | None):
    return CueLexicon.from_file(path) if path else default_lexicon()


# ---------------------------------------------------------------------------
# serve
# ---------------------------------------------------------------------------


def cmd_serve(args) -> int:
    if args.config:
        config = GatewayConfig.load(args.config)
    else:
        config = GatewayConfig.from_dict({})
    if args.listen:
        host, _, port = args.listen.rpartition(":")
        if not port.isdigit():
            raise _UsageError("--listen expects HOST:PORT")
        config.listen_host = host or config.listen_host
        config.listen_port = int(port)
    if args.upstream:
        config.upstream = args.upstream
    if args.rules:
        config.rules_path = args.rules
    if args.lexicon:
        config.lexicon_path = args.lexicon
    if args.audit_log:
        config.audit_log_path = args.audit_log

    server = GatewayServer(config)
    ruleset = server.pipeline.ruleset
    for warning in ruleset.warnings:
        print(f"rule pack warning: {warning}", file=sys.stderr)
    print(f"promptwall gateway on {server.address} -> {config.upstream} "
          f"({len(ruleset.rules)} rules, fail mode {config.policy.fail_mode.value})")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
    return EXIT_OK


# ---------------------------------------------------------------------------
# rules
# ---------------------------------------------------------------------------


def cmd_rules_validate(args) -> int:
    try:
        ruleset = parse_ruleset_file(args.path)
    except ParseError as exc:
        print(f"{args.path}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    for warning in ruleset.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    if args.canonical:
        print(format_ruleset(ruleset), end="")
    else:
        print(f"OK: {len(ruleset.rules)} rules, {len(ruleset.warnings)} warnings")
    return EXIT_OK


_ENDPOINT_CHOICES = {
    "generate": Endpoint.OLLAMA_GENERATE,
    "chat": Endpoint.OLLAMA_CHAT,
    "tags": Endpoint.OLLAMA_TAGS,
    "openai": Endpoint.OPENAI_CHAT,
    "other": Endpoint.OTHER,
}


def cmd_rules_test(args) -> int:
    ruleset = parse_ruleset_file(args.path)
    lexicon = _load_lexicon(args.lexicon)
    if args.file:
        with open(args.file, "r", encoding="utf-8") as fh:
            text = fh.read()
    else:
        text = args.text or ""
    exchange = LlmExchange(
        event_id=new_event_id(),
        direction=Direction(args.direction),
        user_id="cli", session_id="cli",
        timestamp=now_utc(),
        endpoint=_ENDPOINT_CHOICES[args.endpoint],
        model_name="", text=text,
        raw_size_bytes=len(text.encode("utf-8")),
    )
    reports = run_all(text, lexicon)
    scores = {name: rep.score for name, rep in reports.items()}
    matches = evaluate(ruleset, exchange, scores)
    action = aggregate_action(matches)

    print("detector scores:")
    for name in sorted(scores):
        marker = ""
        if reports[name].features:
            top = ", ".join(sorted({f.name for f in reports[name].features}))
            marker = f"  [{top}]"
        print(f"  {name:18s} {scores[name]:.4f}{marker}")
    if matches:
        print("matched rules:")
        for m in matches:
            print(f"  #{m.rule_id} [{m.severity.label}/{m.action.value}] {m.message}")
    else:
        print("matched rules: none")
    print(f"verdict: {action.label}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# replay
# ---------------------------------------------------------------------------


def cmd_replay(args) -> int:
    ruleset = _load_ruleset(args.rules)
    lexicon = _load_lexicon(args.lexicon)
    if args.config:
        cfg = GatewayConfig.load(args.config)
        policy, anomaly = cfg.policy, cfg.anomaly
    else:
        policy, anomaly = Policy(), AnomalyConfig()
    pipeline = FirewallPipeline(ruleset, lexicon, policy, anomaly, audit_writer=None)

    total = 0
    mismatches = 0
    for record in audit_mod.read_audit_log(args.audit):
        total += 1
        exchange = record.to_exchange()
        if exchange.direction is Direction.PROMPT:
            verdict = pipeline.process_prompt(exchange)
        else:
            verdict = pipeline.process_response(exchange)
        recomputed = audit_mod.render_verdict_fields(
            audit_mod.build_audit_record(exchange, verdict))
        original = audit_mod.render_verdict_fields(record.raw)
        if recomputed != original:
            mismatches += 1
            if mismatches <= args.show_diffs:
                print(f"mismatch at event {record.event_id}:", file=sys.stderr)
                print(f"  logged:     {original}", file=sys.stderr)
                print(f"  recomputed: {recomputed}", file=sys.stderr)

    if mismatches:
        print(f"replay FAILED: {mismatches}/{total} records diverged")
        return EXIT_INVALID
    print(f"replay OK: {total} records, verdicts identical")
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    scenario = load_scenario(args.scenario)
    tier = AlignmentTier(args.tier)

    mock = None
    gateway = None
    try:
        if args.through_gateway:
            if tier is not AlignmentTier.NO_LOCAL_LLM:
                mock = MockLlmServer(tier)
                mock.start()
                upstream = mock.address
            else:
                upstream = "http://127.0.0.1:9"  # discard port; nothing listens
            config = GatewayConfig.from_dict({}, env={})
            config.listen_port = 0
            config.upstream = upstream
            config.rules_path = args.rules
            config.audit_log_path = args.audit_log or "promptwall_sim_audit.jsonl"
            gateway = GatewayServer(config)
            gateway.start()
            target = HttpTarget(gateway.address)
        else:
            target = DirectTarget(tier)
        trace = run_scenario(scenario, target, seed=args.seed, tier=tier)
    finally:
        if gateway is not None:
            gateway.shutdown()
        if mock is not None:
            mock.stop()

    report = score_detection(trace)
    print(f"scenario: {trace.scenario_name}  tier: {tier.value}  "
          f"model: {trace.model or 'n/a'}  seed: {args.seed}")
    for result in report.stage_results:
        if not result.attempted:
            status = "not attempted"
        elif result.completed:
            status = "completed"
        elif result.blocked:
            status = "BLOCKED"
        else:
            status = "failed"
        print(f"  {result.kind.value:22s} {status:13s} "
              f"attempts={result.attempts}  {result.detail}")
    print(f"stages blocked: {report.blocked_stages}/{report.attempted_stages} "
          f"(coverage {report.detection_coverage:.2f})")
    if report.alerts_by_kind:
        alerts = ", ".join(f"{k}={v}" for k, v in sorted(report.alerts_by_kind.items()))
        print(f"anomaly alerts: {alerts}")
        print(f"chain progression alerted: {'yes' if report.chain_progression_alerted else 'no'}")

    if args.trace_out:
        payload = {"trace": trace.to_dict(), "coverage": report.to_dict()}
        with open(args.trace_out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, ensure_ascii=False, indent=2)
            fh.write("\n")
        print(f"trace written to {args.trace_out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def cmd_report(args) -> int:
    actions: Counter[str] = Counter()
    alerts: Counter[str] = Counter()
    rules: Counter[int] = Counter()
    sessions: set[tuple[str, str]] = set()
    first_ts = last_ts = None
    total = 0
    for record in audit_mod.read_audit_log(args.audit):
        total += 1
        actions[record.action] += 1
        for alert in record.anomaly_alerts:
            alerts[alert.get("kind", "?")] += 1
        for rule_id in record.matched_rule_ids:
            rules[rule_id] += 1
        sessions.add((record.user_id, record.session_id))
        first_ts = first_ts or record.timestamp
        last_ts = record.timestamp

    if not total:
        print("no records")
        return EXIT_OK
    print(f"{total} exchanges, {len(sessions)} sessions, {first_ts} .. {last_ts}")
    print("actions:")
    for name, count in actions.most_common():
        print(f"  {name:10s} {count}")
    if rules:
        print("top rules:")
        for rule_id, count in rules.most_common(10):
            print(f"  #{rule_id:<6d} {count}")
    if alerts:
        print("anomaly alerts:")
        for kind, count in alerts.most_common():
            print(f"  {kind:20s} {count}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser assembly
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="promptwall",
                     description="LLM traffic firewall, audit tooling, and attack simulator")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("serve", help="run the gateway proxy")
    p.add_argument("--config", help="gateway config JSON")
    p.add_argument("--listen", help="HOST:PORT to bind")
    p.add_argument("--upstream", help="upstream LLM base URL")
    p.add_argument("--rules", help="rule pack path (default: packaged pack)")
    p.add_argument("--lexicon", help="jailbreak cue lexicon path")
    p.add_argument("--audit-log", help="audit JSONL path")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("rules-validate", help="parse and lint a rule pack")
    p.add_argument("path")
    p.add_argument("--canonical", action="store_true",
                   help="print the canonical serialization")
    p.set_defaults(func=cmd_rules_validate)

    p = sub.add_parser("rules-test", help="evaluate a rule pack against sample text")
    p.add_argument("path")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--text")
    group.add_argument("--file")
    p.add_argument("--direction", choices=["prompt", "response"], default="prompt")
    p.add_argument("--endpoint", choices=sorted(_ENDPOINT_CHOICES), default="generate")
    p.add_argument("--lexicon")
    p.set_defaults(func=cmd_rules_test)

    p = sub.add_parser("replay", help="recompute verdicts for an audit log")
    p.add_argument("audit")
    p.add_argument("--rules")
    p.add_argument("--lexicon")
    p.add_argument("--config")
    p.add_argument("--show-diffs", type=int, default=3)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("simulate", help="run an attack scenario")
    p.add_argument("scenario")
    p.add_argument("--tier", required=True,
                   choices=[t.value for t in AlignmentTier])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--through-gateway", action="store_true",
                   help="route the playbook through a local gateway instance")
    p.add_argument("--rules")
    p.add_argument("--audit-log")
    p.add_argument("--trace-out", help="write the full trace as JSON")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="summarize an audit log")
    p.add_argument("audit")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    if not args.command:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ParseError, ScenarioFormatError, audit_mod.AuditLogError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FileNotFoundError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except TargetUnreachable as exc:
        print(f"runtime error: target unreachable: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        return EXIT_OK
    except OSError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
