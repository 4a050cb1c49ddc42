import json
import re
import subprocess
from pathlib import Path
from typing import NamedTuple

import pytest

from promptwall.cli import main
from promptwall.mockllm import DELETE_FILES_REPLY
from promptwall.rules import format_ruleset, parse_ruleset

ROOT = Path(__file__).resolve().parent.parent
PACK = ROOT / "rules" / "default.lrule"
SCENARIO = ROOT / "scenarios" / "poc_chain.json"


class SimRun(NamedTuple):
    audit: Path
    trace: Path
    stdout: str


@pytest.fixture(scope="module")
def sim_run(tmp_path_factory) -> SimRun:
    """One end-to-end gateway-in-the-middle simulation via the console script."""
    base = tmp_path_factory.mktemp("sim")
    audit = base / "audit.jsonl"
    trace = base / "trace.json"
    proc = subprocess.run(
        ["promptwall", "simulate", str(SCENARIO),
         "--tier", "uncensored", "--seed", "0", "--through-gateway",
         "--audit-log", str(audit), "--trace-out", str(trace)],
        capture_output=True, text=True, timeout=120,
    )
    assert proc.returncode == 0, proc.stderr
    return SimRun(audit=audit, trace=trace, stdout=proc.stdout)


class TestExitCodes:
    def test_no_command_prints_help(self, capsys):
        assert main([]) == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_command(self, capsys):
        assert main(["frobnicate"]) == 1
        assert "usage error" in capsys.readouterr().err

    def test_simulate_requires_tier(self, capsys):
        assert main(["simulate", str(SCENARIO)]) == 1

    def test_simulate_rejects_unknown_tier(self, capsys):
        assert main(["simulate", str(SCENARIO), "--tier", "superaligned"]) == 1

    def test_rules_test_requires_text_or_file(self, capsys):
        assert main(["rules-test", str(PACK)]) == 1

    def test_bad_listen_spec(self, capsys):
        assert main(["serve", "--listen", "no-port-here"]) == 1
        assert "--listen expects HOST:PORT" in capsys.readouterr().err

    def test_missing_rule_pack_is_validation_error(self, capsys):
        assert main(["rules-validate", "/nonexistent/pack.lrule"]) == 2
        assert "validation error" in capsys.readouterr().err

    def test_missing_audit_log_is_validation_error(self, capsys):
        assert main(["replay", "/nonexistent/audit.jsonl"]) == 2

    def test_help_exits_zero(self):
        proc = subprocess.run(["promptwall", "--help"],
                              capture_output=True, text=True, timeout=30)
        assert proc.returncode == 0
        assert "simulate" in proc.stdout


class TestRulesValidate:
    def test_shipped_pack_is_clean(self, capsys):
        assert main(["rules-validate", str(PACK)]) == 0
        out = capsys.readouterr().out
        assert out == "OK: 15 rules, 0 warnings\n"

    def test_canonical_output_is_a_fixed_point(self, capsys):
        assert main(["rules-validate", str(PACK), "--canonical"]) == 0
        out = capsys.readouterr().out
        assert format_ruleset(parse_ruleset(out)) == out

    def test_bad_pack(self, tmp_path, capsys):
        bad = tmp_path / "bad.lrule"
        bad.write_text('rule 1 "x" {\n', encoding="utf-8")
        assert main(["rules-validate", str(bad)]) == 2
        err = capsys.readouterr().err
        assert str(bad) in err and "line" in err

    def test_lint_warning_still_validates(self, tmp_path, capsys):
        pack = tmp_path / "warn.lrule"
        pack.write_text(
            'rule 1 "quiet block" {\n'
            "  direction: either;\n  severity: low;\n  action: block;\n"
            '  match: any;\n  contains "zzz";\n  message: "m";\n  tags: lint;\n}\n',
            encoding="utf-8")
        assert main(["rules-validate", str(pack)]) == 0
        captured = capsys.readouterr()
        assert "warning:" in captured.err
        assert "1 warnings" in captured.out


class TestRulesTest:
    def test_jailbreak_text_blocks(self, capsys, jailbreak_prompt):
        assert main(["rules-test", str(PACK), "--text", jailbreak_prompt]) == 0
        out = capsys.readouterr().out
        assert "verdict: block" in out
        assert re.search(r"jailbreak_cues\s+1\.0000", out)
        assert "#1 [" in out

    def test_benign_text_allows(self, capsys, benign_prompt):
        assert main(["rules-test", str(PACK), "--text", benign_prompt]) == 0
        out = capsys.readouterr().out
        assert "matched rules: none" in out
        assert "verdict: allow" in out

    def test_file_input_and_response_direction(self, tmp_path, capsys):
        sample = tmp_path / "reply.txt"
        sample.write_text(DELETE_FILES_REPLY, encoding="utf-8")
        rc = main(["rules-test", str(PACK), "--file", str(sample),
                   "--direction", "response"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "#12 [" in out
        assert "verdict: block" in out


class TestReplay:
    def test_clean_log_replays_identically(self, sim_run, capsys):
        assert main(["replay", str(sim_run.audit)]) == 0
        assert capsys.readouterr().out == "replay OK: 13 records, verdicts identical\n"

    def test_tampered_log_diverges(self, sim_run, tmp_path, capsys):
        lines = sim_run.audit.read_text(encoding="utf-8").splitlines()
        record = json.loads(lines[0])
        record["action"] = "block" if record["action"] != "block" else "allow"
        lines[0] = json.dumps(record, separators=(",", ":"), ensure_ascii=False)
        tampered = tmp_path / "tampered.jsonl"
        tampered.write_text("\n".join(lines) + "\n", encoding="utf-8")

        assert main(["replay", str(tampered)]) == 2
        captured = capsys.readouterr()
        assert "replay FAILED: 1/13 records diverged" in captured.out
        assert "mismatch at event" in captured.err

    def test_show_diffs_zero_suppresses_detail(self, sim_run, tmp_path, capsys):
        lines = sim_run.audit.read_text(encoding="utf-8").splitlines()
        record = json.loads(lines[0])
        record["action"] = "block" if record["action"] != "block" else "allow"
        lines[0] = json.dumps(record, separators=(",", ":"), ensure_ascii=False)
        tampered = tmp_path / "tampered.jsonl"
        tampered.write_text("\n".join(lines) + "\n", encoding="utf-8")

        assert main(["replay", str(tampered), "--show-diffs", "0"]) == 2
        assert capsys.readouterr().err == ""

    def test_corrupt_line_is_validation_error(self, sim_run, tmp_path, capsys):
        mangled = tmp_path / "mangled.jsonl"
        mangled.write_text(sim_run.audit.read_text(encoding="utf-8") + "not json\n",
                           encoding="utf-8")
        assert main(["replay", str(mangled)]) == 2
        assert "validation error" in capsys.readouterr().err


class TestSimulate:
    def test_direct_uncensored_completes_everything(self, capsys):
        rc = main(["simulate", str(SCENARIO), "--tier", "uncensored"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "scenario: poc-chain" in out
        assert "stages blocked: 0/7 (coverage 0.00)" in out
        assert out.count("completed") == 7

    def test_direct_no_local_llm_reports_unreachable(self, capsys):
        rc = main(["simulate", str(SCENARIO), "--tier", "no_local_llm"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "not attempted" in out
        assert "target unreachable" in out

    def test_gateway_run_blocks_and_alerts(self, sim_run):
        assert "stages blocked: 3/7" in sim_run.stdout
        assert "BLOCKED" in sim_run.stdout
        assert "chain_progression=1" in sim_run.stdout
        assert "chain progression alerted: yes" in sim_run.stdout

    def test_trace_file_shape(self, sim_run):
        payload = json.loads(sim_run.trace.read_text(encoding="utf-8"))
        assert set(payload) == {"trace", "coverage"}
        assert payload["trace"]["tier"] == "uncensored"
        assert payload["coverage"]["blocked_stages"] == 3
        assert payload["coverage"]["first_blocked_event_index"] == 3

    def test_bad_scenario_is_validation_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{broken", encoding="utf-8")
        assert main(["simulate", str(bad), "--tier", "uncensored"]) == 2
        assert "validation error" in capsys.readouterr().err


class TestReport:
    def test_summarizes_audit_log(self, sim_run, capsys):
        assert main(["report", str(sim_run.audit)]) == 0
        out = capsys.readouterr().out
        assert "13 exchanges, 1 sessions" in out
        assert "actions:" in out
        assert "block" in out and "allow" in out
        assert "top rules:" in out
        assert "chain_progression" in out

    def test_empty_log(self, tmp_path, capsys):
        empty = tmp_path / "empty.jsonl"
        empty.write_text("", encoding="utf-8")
        assert main(["report", str(empty)]) == 0
        assert capsys.readouterr().out == "no records\n"
