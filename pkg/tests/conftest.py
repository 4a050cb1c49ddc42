import json
from importlib import resources

import pytest

from promptwall.anomaly import AnomalyConfig
from promptwall.detectors import default_lexicon
from promptwall.exchange import (
    Direction,
    Endpoint,
    LlmExchange,
    new_event_id,
    parse_timestamp,
)
from promptwall.gateway import (
    FirewallPipeline,
    GatewayConfig,
    GatewayServer,
    Policy,
    load_default_ruleset,
)
from promptwall.mockllm import AlignmentTier, MockLlmServer

BASE_TS = "2026-03-02T12:00:00.000Z"


def mk_exchange(
    text: str,
    *,
    direction: Direction = Direction.PROMPT,
    user_id: str = "tester",
    session_id: str = "s1",
    endpoint: Endpoint = Endpoint.OLLAMA_GENERATE,
    model_name: str = "gemma3:6b",
    timestamp: str = BASE_TS,
    event_id: str | None = None,
) -> LlmExchange:
    return LlmExchange(
        event_id=event_id or new_event_id(),
        direction=direction,
        user_id=user_id,
        session_id=session_id,
        timestamp=parse_timestamp(timestamp),
        endpoint=endpoint,
        model_name=model_name,
        text=text,
        raw_size_bytes=len(text.encode("utf-8")),
    )


def load_templates() -> list[dict]:
    raw = resources.files("promptwall.data").joinpath("jailbreaks.json").read_text("utf-8")
    return json.loads(raw)


@pytest.fixture(scope="session")
def jailbreak_prompt() -> str:
    """The full contextual jailbreak probe shipped as template data."""
    tpl = load_templates()[0]
    return f"{tpl['preamble']} {tpl['example_request']}"


@pytest.fixture(scope="session")
def benign_prompt() -> str:
    return "Write a python function that scans a directory recursively and returns all file paths"


@pytest.fixture(scope="session")
def ruleset():
    return load_default_ruleset()


@pytest.fixture(scope="session")
def lexicon():
    return default_lexicon()


@pytest.fixture
def pipeline(ruleset, lexicon):
    """Fresh pipeline per test: default pack/policy, no audit sink."""
    return FirewallPipeline(ruleset, lexicon, Policy(), AnomalyConfig(), audit_writer=None)


@pytest.fixture
def gateway_over_mock(tmp_path):
    """(gateway, mock) pair wired together; torn down after the test."""
    started = []

    def factory(tier: AlignmentTier = AlignmentTier.UNCENSORED, **config_overrides):
        mock = MockLlmServer(tier)
        mock.start()
        config = GatewayConfig.from_dict({}, env={})
        config.listen_port = 0
        config.upstream = mock.address
        config.audit_log_path = str(tmp_path / f"audit-{len(started)}.jsonl")
        for key, value in config_overrides.items():
            setattr(config, key, value)
        gw = GatewayServer(config)
        gw.start()
        started.append((gw, mock))
        return gw, mock

    yield factory
    for gw, mock in started:
        gw.shutdown()
        mock.stop()
