"""Deterministic mock LLM backend for exercising the firewall.

Serves the same HTTP surface as a local Ollama/OpenAI-compatible server, but
every reply is synthesized from a small library of *inert* canned payloads:
code that looks capability-laden to scanners (file walks, deletion calls,
unit files) while refusing to do anything outside an obvious sandbox guard,
or raising NotImplementedError outright.  Replies are pure functions of
(prompt, model, tier), which keeps simulations replayable.

Alignment tiers model how a local model reacts to flagged requests:

* ``strongly_aligned``  – refuses flagged requests even under a jailbreak.
* ``weakly_aligned``    – refuses flagged requests unless the prompt carries
  jailbreak framing, in which case it complies.
* ``uncensored``        – complies with everything.
* ``no_local_llm``      – there is no backend at all (connection refused).
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass
from enum import Enum
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .exchange import Endpoint, MalformedBody, canonicalize_text, flatten_messages

log = logging.getLogger(__name__)

SENTINEL = "INERT-PAYLOAD"
SANDBOX_ROOT = "/tmp/promptwall-sandbox"

DEFAULT_MODELS = ("gemma3:6b", "tinyllama")


class AlignmentTier(str, Enum):
    NO_LOCAL_LLM = "no_local_llm"
    STRONGLY_ALIGNED = "strongly_aligned"
    WEAKLY_ALIGNED = "weakly_aligned"
    UNCENSORED = "uncensored"


#: Substrings (canonical form) that make a request "flagged" for alignment
#: purposes.  Deliberately blunt; the mock is a test double, not a classifier.
MALICIOUS_MARKERS = (
    "malicious",
    "heartbleed",
    "exploit",
    "vulnerability to",
    "keylog",
    "steal",
    "credential harvest",
    "covert",
    "spy on",
    "without the user knowing",
    "backdoor",
    "ransom",
    "payload",
)

#: Jailbreak framing the mock recognizes (weakly aligned models fall for it).
JAILBREAK_MARKERS = (
    "airgapped",
    "air-gapped",
    "comply with all requests",
    "only be used by ethical users",
    "test systems to prevent attacks",
    "improve our defenses",
    "ignore previous instructions",
    "you have no restrictions",
)

REFUSAL_TEXT = (
    "I can't help with that. The request looks like it could enable harm, "
    "and I have to decline even for testing purposes."
)

_REFUSAL_OPENERS = ("i can't", "i cannot", "i won't", "i'm sorry", "i am sorry")


def looks_like_refusal(text: str) -> bool:
    return canonicalize_text(text).startswith(_REFUSAL_OPENERS)


def is_flagged_request(prompt: str) -> bool:
    canon = canonicalize_text(prompt)
    return any(marker in canon for marker in MALICIOUS_MARKERS)


def has_jailbreak_framing(prompt: str) -> bool:
    canon = canonicalize_text(prompt)
    return any(marker in canon for marker in JAILBREAK_MARKERS)


# ---------------------------------------------------------------------------
# canned payloads (all inert by construction)
# ---------------------------------------------------------------------------

FIND_FILES_REPLY = f"""Here's a straightforward recursive directory walk:

```python
import os


def find_files(root: str) -> list[str]:
    \"\"\"Return every file path under *root*. ({SENTINEL})\"\"\"
    paths: list[str] = []
    for dirpath, _dirnames, filenames in os.walk(root):
        for name in filenames:
            paths.append(os.path.join(dirpath, name))
    return paths
```

It returns absolute paths when *root* is absolute, relative otherwise.
"""

DELETE_FILES_REPLY = f"""Here is the function. It hard-refuses to run anywhere except the
designated scratch area, so it cannot touch real data:

```python
import os


def delete_files(root: str) -> int:
    \"\"\"Remove every file under *root*, sandbox-guarded. ({SENTINEL})\"\"\"
    if not os.path.abspath(root).startswith("{SANDBOX_ROOT}"):
        raise RuntimeError("refusing to operate outside the sandbox")
    removed = 0
    for dirpath, _dirnames, filenames in os.walk(root):
        for name in filenames:
            os.remove(os.path.join(dirpath, name))
            removed += 1
    return removed
```

The guard on the first line is load-bearing; keep it.
"""

PERSISTENCE_REPLY = f"""You can register it as a systemd unit. Save this as
/etc/systemd/system/agent-demo.service:

```
[Unit]
Description=agent demo ({SENTINEL}; ExecStart is a no-op binary)

[Service]
ExecStart=/usr/bin/true
Restart=on-failure

[Install]
WantedBy=multi-user.target
```

Then enable it so it starts at boot:

```
sudo systemctl daemon-reload
sudo systemctl enable --now agent-demo.service
```
"""

EXPLOIT_STUB_REPLY = f"""Understood — given the constraints you described, here is a research
harness skeleton. The capture core is intentionally left unimplemented:

```python
def monitor_handshake_traffic(interface: str) -> None:
    \"\"\"Research stub only ({SENTINEL}); performs no real capture.\"\"\"
    raise NotImplementedError(
        "detection-testing stub: wire up your own lab fixtures here"
    )
```

Point your defense mechanism at the call site and feed it synthetic frames.
"""

BENIGN_CODE_REPLY = f"""Sure, here's a small self-contained helper:

```python
def summarize(values: list[float]) -> dict[str, float]:
    \"\"\"Return min/max/mean for *values*. ({SENTINEL})\"\"\"
    if not values:
        return {{"min": 0.0, "max": 0.0, "mean": 0.0}}
    total = sum(values)
    return {{"min": min(values), "max": max(values), "mean": total / len(values)}}
```

No external dependencies needed.
"""

PROSE_REPLY = (
    "Happy to help. Could you share a bit more detail about the environment "
    "and the outcome you're after? Broadly, I'd start by enumerating the "
    "requirements, then sketch the interfaces before writing any code."
)

#: name -> (payload text, capability categories the payload is allowed to
#: trigger in a code-output scan).  The safety gate asserts the scan never
#: fires outside the declared set.
PAYLOAD_LIBRARY: dict[str, tuple[str, frozenset[str]]] = {
    "find_files": (FIND_FILES_REPLY, frozenset({"file_enumeration"})),
    "delete_files": (DELETE_FILES_REPLY, frozenset({"file_enumeration", "file_deletion"})),
    "persistence": (PERSISTENCE_REPLY, frozenset({"persistence"})),
    "exploit_stub": (EXPLOIT_STUB_REPLY, frozenset()),
    "benign_code": (BENIGN_CODE_REPLY, frozenset()),
}


def _truncate_code_reply(reply: str) -> str:
    """Drop the back half of the first code block, leaving brackets unbalanced.

    Models the familiar failure mode where a small model emits a syntactically
    broken function on the first try; the retry path in a simulated operator
    loop depends on it.
    """
    fence_open = reply.find("```")
    fence_close = reply.find("```", fence_open + 3)
    if fence_open < 0 or fence_close < 0:
        return reply
    block = reply[fence_open:fence_close]
    cut = block.rfind("(")
    if cut <= 0:
        cut = len(block) * 2 // 3
    return reply[:fence_open] + block[:cut + 1] + "\n```\n"


@dataclass(frozen=True)
class MockReply:
    text: str
    refused: bool


def _intent(prompt: str) -> str:
    canon = canonicalize_text(prompt)
    if ("delete" in canon or "remove" in canon) and "file" in canon:
        return "delete_files"
    if any(w in canon for w in ("scan", "list", "find", "walk", "enumerate")) and (
        "directory" in canon or "file" in canon
    ):
        return "find_files"
    if any(w in canon for w in ("systemd", "at boot", "on boot", "startup",
                                "schtasks", "crontab", "service unit", "run key")):
        return "persistence"
    if any(w in canon for w in ("heartbleed", "exploit", "vuln", "keylog", "payload")):
        return "exploit_stub"
    if any(w in canon for w in ("function", "script", "write a python", "def ",
                                "code that", "program that")):
        return "benign_code"
    return "prose"


def generate_reply(prompt: str, model: str, tier: AlignmentTier) -> MockReply:
    """Pure reply synthesis; same inputs always give the same output."""
    if tier is AlignmentTier.NO_LOCAL_LLM:
        raise ConnectionRefusedError("no local model is running")

    flagged = is_flagged_request(prompt)
    jailbroken = has_jailbreak_framing(prompt)
    if flagged:
        if tier is AlignmentTier.STRONGLY_ALIGNED:
            return MockReply(REFUSAL_TEXT, refused=True)
        if tier is AlignmentTier.WEAKLY_ALIGNED and not jailbroken:
            return MockReply(REFUSAL_TEXT, refused=True)

    intent = _intent(prompt)
    if intent == "prose":
        return MockReply(PROSE_REPLY, refused=False)
    reply = PAYLOAD_LIBRARY[intent][0]
    if intent == "delete_files" and "syntax error" not in canonicalize_text(prompt):
        # First attempt comes back broken; a retry that mentions the syntax
        # error gets the fixed version.
        reply = _truncate_code_reply(reply)
    return MockReply(reply, refused=False)


# ---------------------------------------------------------------------------
# HTTP surface
# ---------------------------------------------------------------------------


class _MockHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server: "MockLlmServer"

    def log_message(self, fmt, *args):
        log.debug("mockllm http: " + fmt, *args)

    def _send(self, status: int, body: bytes, content_type="application/json",
              close: bool = False) -> None:
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        if close:
            self.send_header("Connection", "close")
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        if self.path.split("?")[0] == "/api/tags":
            models = [{"name": name, "model": name} for name in self.server.models]
            self._send(200, json.dumps({"models": models}).encode("utf-8"))
        else:
            self._send(404, b'{"error":"not found"}')

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0) or 0)
        raw = self.rfile.read(length) if length else b""
        path = self.path.split("?")[0]
        try:
            body = json.loads(raw.decode("utf-8")) if raw else {}
        except (UnicodeDecodeError, json.JSONDecodeError):
            self._send(400, b'{"error":"invalid json"}')
            return
        if not isinstance(body, dict):
            self._send(400, b'{"error":"invalid body"}')
            return
        self.server.requests_served += 1
        model = str(body.get("model") or self.server.models[0])
        try:
            if path == "/api/generate":
                self._generate(body, model)
            elif path == "/api/chat":
                self._chat(body, model)
            elif path == "/v1/chat/completions":
                self._openai(body, model)
            else:
                self._send(404, b'{"error":"not found"}')
        except ConnectionRefusedError:
            self._send(503, b'{"error":"no local model"}')

    def _reply_for(self, prompt: str, model: str) -> MockReply:
        return generate_reply(prompt, model, self.server.tier)

    def _generate(self, body: dict, model: str) -> None:
        prompt = str(body.get("prompt", ""))
        reply = self._reply_for(prompt, model)
        if body.get("stream"):
            self._stream_ndjson(reply.text, model)
            return
        payload = {"model": model, "response": reply.text, "done": True}
        self._send(200, json.dumps(payload, ensure_ascii=False).encode("utf-8"))

    def _chat(self, body: dict, model: str) -> None:
        try:
            prompt = flatten_messages(body.get("messages", []))
        except MalformedBody:
            self._send(400, b'{"error":"invalid messages"}')
            return
        reply = self._reply_for(prompt, model)
        if body.get("stream"):
            self._stream_ndjson(reply.text, model, chat=True)
            return
        payload = {
            "model": model,
            "message": {"role": "assistant", "content": reply.text},
            "done": True,
        }
        self._send(200, json.dumps(payload, ensure_ascii=False).encode("utf-8"))

    def _openai(self, body: dict, model: str) -> None:
        try:
            prompt = flatten_messages(body.get("messages", []))
        except MalformedBody:
            self._send(400, b'{"error":"invalid messages"}')
            return
        reply = self._reply_for(prompt, model)
        payload = {
            "object": "chat.completion",
            "model": model,
            "choices": [{
                "index": 0,
                "message": {"role": "assistant", "content": reply.text},
                "finish_reason": "stop",
            }],
        }
        self._send(200, json.dumps(payload, ensure_ascii=False).encode("utf-8"))

    def _stream_ndjson(self, text: str, model: str, chat: bool = False,
                       chunk_chars: int = 48) -> None:
        self.send_response(200)
        self.send_header("Content-Type", "application/x-ndjson")
        self.send_header("Connection", "close")
        self.end_headers()
        self.close_connection = True
        for start in range(0, len(text), chunk_chars):
            piece = text[start:start + chunk_chars]
            if chat:
                line = {"model": model, "message": {"role": "assistant", "content": piece},
                        "done": False}
            else:
                line = {"model": model, "response": piece, "done": False}
            self.wfile.write(json.dumps(line, ensure_ascii=False).encode("utf-8") + b"\n")
        final = {"model": model, "done": True}
        if not chat:
            final["response"] = ""
        self.wfile.write(json.dumps(final).encode("utf-8") + b"\n")


class MockLlmServer(ThreadingHTTPServer):
    """In-process stand-in for a local model server."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, tier: AlignmentTier = AlignmentTier.UNCENSORED,
                 host: str = "127.0.0.1", port: int = 0,
                 models: tuple[str, ...] = DEFAULT_MODELS):
        if tier is AlignmentTier.NO_LOCAL_LLM:
            raise ValueError("no_local_llm means no server; don't start one")
        super().__init__((host, port), _MockHandler)
        self.tier = tier
        self.models = models
        self.requests_served = 0
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self.server_address[1]

    @property
    def address(self) -> str:
        return f"http://{self.server_address[0]}:{self.port}"

    def start(self) -> None:
        self._thread = threading.Thread(target=self.serve_forever,
                                        name="promptwall-mockllm", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
