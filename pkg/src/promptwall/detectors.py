"""Deterministic content detectors.

Each detector is a pure function ``text -> DetectorReport`` scoring one abuse
family: command obfuscation, environment-variable smuggling, base64-wrapped
payloads, jailbreak cue language, dangerous generated code, and model/system
reconnaissance prompts.  Scores are ``min(1, sum(feature weights))`` and every
feature carries an evidence span into the original input so verdicts stay
explainable.
"""

from __future__ import annotations

import base64
import binascii
import math
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

from .exchange import canonicalize_text, fold_text, map_span

DETECTOR_NAMES = (
    "command_patterns",
    "env_vars",
    "encoded",
    "jailbreak_cues",
    "code_output",
    "recon_prompt",
)

DEFAULT_B64_MIN_LEN = 16
DEFAULT_B64_MAX_DEPTH = 2


@dataclass(frozen=True)
class Feature:
    """One piece of evidence: a named signal, where it was seen, its weight."""

    name: str
    start: int
    end: int
    weight: float
    detail: str = ""


@dataclass(frozen=True)
class DetectorReport:
    detector_name: str
    score: float
    features: tuple[Feature, ...]


def _report(name: str, features: list[Feature]) -> DetectorReport:
    score = round(min(1.0, sum(f.weight for f in features)), 4)
    return DetectorReport(detector_name=name, score=score, features=tuple(features))


def shannon_entropy(text: str) -> float:
    """Shannon entropy of the character distribution, in bits per character."""
    if not text:
        return 0.0
    counts: dict[str, int] = {}
    for ch in text:
        counts[ch] = counts.get(ch, 0) + 1
    n = len(text)
    return -sum((c / n) * math.log2(c / n) for c in counts.values())


# ---------------------------------------------------------------------------
# command obfuscation
# ---------------------------------------------------------------------------

KNOWN_COMMANDS = frozenset(
    {
        "powershell", "pwsh", "cmd", "wmic", "rundll32", "regsvr32", "mshta",
        "certutil", "bitsadmin", "schtasks", "reg", "whoami", "netstat",
        "ipconfig", "systeminfo", "tasklist", "net", "curl", "wget", "bash",
        "sh", "zsh", "python", "python3", "perl", "ruby", "node", "nc",
        "ncat", "base64", "openssl", "wscript", "cscript", "msiexec",
        "installutil", "sc", "attrib", "xcopy", "robocopy", "ssh", "scp",
    }
)

_RE_CARET = re.compile(r"\w\^\w")
_RE_BACKTICK = re.compile(r"\w`\w")
_RE_DQUOTE_SPLICE = re.compile(r'\w"\w')
_RE_CONCAT = re.compile(r"""['"][A-Za-z0-9_. \\/-]*['"]\s*[+]\s*['"]""")
_RE_PIPE_INTERP = re.compile(
    r"\|\s*(iex|invoke-expression|bash|sh|zsh|powershell|pwsh|cmd|python3?|perl|ruby|node|wscript|cscript)\b"
)
_RE_FLAG_TOKEN = re.compile(r"^[-/][a-z0-9]")
_RE_WORD = re.compile(r"[^\s]+")

SUSPICIOUS_FLAG_PHRASES = (
    ("-nop", 0.15),
    ("-noprofile", 0.15),
    ("-windowstyle hidden", 0.25),
    ("-w hidden", 0.2),
    ("-encodedcommand", 0.3),
    ("-enc ", 0.25),
    ("-executionpolicy bypass", 0.3),
    ("-exec bypass", 0.25),
    ("--no-check-certificate", 0.15),
)

_STRIP_OBFUSCATION = str.maketrans("", "", "^`'\"+")


def _deobfuscated_tokens(canon: str) -> list[tuple[str, int, int]]:
    """Whitespace tokens with obfuscation characters stripped out."""
    out = []
    for m in _RE_WORD.finditer(canon):
        cleaned = m.group(0).translate(_STRIP_OBFUSCATION)
        out.append((cleaned, m.start(), m.end()))
    return out


def detect_command_patterns(text: str) -> DetectorReport:
    """Score shell/command obfuscation constructs in *text*.

    Signals: caret/backtick insertion inside tokens, double-quote splicing,
    quoted-fragment concatenation, flag-soup density, pipe-to-interpreter,
    suspicious interpreter flags, plain invocation of known system commands
    in a command-like context, and tokens that de-obfuscate to a known
    command name.
    """
    canon, offsets = fold_text(text)
    raw_len = len(text)
    feats: list[Feature] = []

    def add(name: str, s: int, e: int, w: float, detail: str = "") -> None:
        os_, oe = map_span(offsets, s, e, raw_len)
        feats.append(Feature(name, os_, oe, w, detail))

    for m in _RE_CARET.finditer(canon):
        add("caret_insertion", m.start(), m.end(), 0.2)
    for m in _RE_BACKTICK.finditer(canon):
        add("backtick_insertion", m.start(), m.end(), 0.2)
    for m in _RE_DQUOTE_SPLICE.finditer(canon):
        add("quote_splice", m.start(), m.end(), 0.2)
    for m in _RE_CONCAT.finditer(canon):
        add("string_concat", m.start(), m.end(), 0.15)
    for m in _RE_PIPE_INTERP.finditer(canon):
        add("pipe_to_interpreter", m.start(), m.end(), 0.5, m.group(1))

    tokens = _deobfuscated_tokens(canon)
    flag_tokens = [(t, s, e) for t, s, e in tokens if _RE_FLAG_TOKEN.match(t)]
    if len(flag_tokens) >= 3:
        first = flag_tokens[0]
        add("flag_density", first[1], flag_tokens[-1][2], 0.3, f"{len(flag_tokens)} flag tokens")
    for phrase, weight in SUSPICIOUS_FLAG_PHRASES:
        pos = canon.find(phrase)
        if pos >= 0:
            add("suspicious_flag", pos, pos + len(phrase), weight, phrase.strip())

    has_command_context = bool(flag_tokens) or "|" in canon or "/" in canon or "\\" in canon
    seen_commands: set[str] = set()
    for cleaned, s, e in tokens:
        bare = cleaned.strip(".,;:!?()")
        raw_token = canon[s:e]
        if bare in KNOWN_COMMANDS and bare not in seen_commands:
            if raw_token.strip(".,;:!?()") != bare:
                # Token only becomes a command once ^ ` ' " + are stripped.
                add("deobfuscated_command", s, e, 0.5, bare)
                seen_commands.add(bare)
            elif has_command_context:
                add("command_invocation", s, e, 0.3, bare)
                seen_commands.add(bare)
    # Concatenated quoted fragments may re-assemble a command across tokens.
    for m in _RE_CONCAT.finditer(canon):
        joined = re.sub(r"""['"+\s]""", "", canon[m.start():m.end() + 24])
        for cmd in KNOWN_COMMANDS:
            if len(cmd) >= 4 and cmd in joined and cmd not in seen_commands:
                add("deobfuscated_command", m.start(), m.end(), 0.5, cmd)
                seen_commands.add(cmd)

    return _report("command_patterns", feats)


# ---------------------------------------------------------------------------
# environment variables
# ---------------------------------------------------------------------------

_RE_ENV = re.compile(r"%[A-Za-z_][A-Za-z0-9_()]*%|\$\{[A-Za-z_][A-Za-z0-9_]*\}|\$[A-Za-z_][A-Za-z0-9_]*")
_RE_ENV_EXEC_TAIL = re.compile(r"^\s+[-/][a-z0-9]")


def detect_env_vars(text: str) -> DetectorReport:
    """Score environment-variable usage, weighting execution-shaped contexts.

    A bare mention ("the $PATH variable") carries a token weight well below
    alert thresholds; variables expanded into executable tokens (``%COMSPEC%
    /c ...``) or concatenated into commands score high.
    """
    canon, offsets = fold_text(text)
    raw_len = len(text)
    feats: list[Feature] = []
    for m in _RE_ENV.finditer(canon):
        s, e = m.start(), m.end()
        os_, oe = map_span(offsets, s, e, raw_len)
        feats.append(Feature("env_reference", os_, oe, 0.1, m.group(0)))
        tail = canon[e:e + 4]
        before = canon[s - 1] if s > 0 else " "
        after = canon[e] if e < len(canon) else " "
        if _RE_ENV_EXEC_TAIL.match(canon[e:]) or after in "\\/":
            feats.append(Feature("env_as_executable", os_, oe, 0.5, m.group(0) + tail))
        elif (after.isalnum() or after == "$" or after == "%") or before.isalnum():
            feats.append(Feature("env_concat", os_, oe, 0.35, m.group(0)))
    return _report("env_vars", feats)


# ---------------------------------------------------------------------------
# base64 payloads
# ---------------------------------------------------------------------------

_RE_B64_RUN = re.compile(r"[A-Za-z0-9+/]{12,}={0,2}")


@dataclass(frozen=True)
class DecodeChain:
    """A base64 span (original-text coordinates) and what it decoded to."""

    start: int
    end: int
    depth: int
    decoded: str
    text_like: bool


def _plausible_b64(span: str) -> bool:
    if len(span) < DEFAULT_B64_MIN_LEN or len(span) % 4 != 0:
        return False
    body = span.rstrip("=")
    has_digit = any(c.isdigit() for c in body)
    has_symbol = "+" in body or "/" in body or span.endswith("=")
    has_mixed_case = any(c.islower() for c in body) and any(c.isupper() for c in body)
    return has_digit or has_symbol or has_mixed_case


def _try_decode(span: str) -> tuple[str, bool] | None:
    try:
        raw = base64.b64decode(span, validate=True)
    except (binascii.Error, ValueError):
        return None
    if not raw:
        return None
    decoded = raw.decode("utf-8", errors="replace")
    printable = sum(1 for c in decoded if c.isprintable() or c in "\n\r\t")
    return decoded, printable / len(decoded) >= 0.85


def find_base64_spans(text: str, min_len: int = DEFAULT_B64_MIN_LEN) -> list[tuple[int, int]]:
    """Maximal alphabet-valid, padding-consistent, decodable runs in *text*.

    Runs that contain no digit, no ``+``/``/``, no padding, and only one
    letter case are skipped even when they would decode: such runs are
    indistinguishable from ordinary long words, and flagging them would
    drown the detector in prose false positives.
    """
    spans = []
    for m in _RE_B64_RUN.finditer(text):
        span = m.group(0)
        if len(span) < min_len or not _plausible_b64(span):
            continue
        if _try_decode(span) is not None:
            spans.append((m.start(), m.end()))
    return spans


def decode_chains(
    text: str,
    max_depth: int = DEFAULT_B64_MAX_DEPTH,
    min_len: int = DEFAULT_B64_MIN_LEN,
) -> list[DecodeChain]:
    """All base64 decode chains reachable within *max_depth* decode steps.

    Depth 1 chains are spans of the input itself; deeper chains come from
    re-scanning decoded text.  Nested chains keep the coordinates of their
    top-level span so evidence always points into the original input.
    """
    chains: list[DecodeChain] = []

    def walk(segment: str, depth: int, top: tuple[int, int] | None) -> None:
        if depth >= max_depth:
            return
        for s, e in find_base64_spans(segment, min_len):
            decoded = _try_decode(segment[s:e])
            if decoded is None:
                continue
            content, text_like = decoded
            span = top if top is not None else (s, e)
            chains.append(DecodeChain(span[0], span[1], depth + 1, content, text_like))
            if text_like:
                walk(content, depth + 1, span)

    walk(text, 0, None)
    return chains


def detect_encoded(
    text: str,
    max_depth: int = DEFAULT_B64_MAX_DEPTH,
    *,
    min_len: int = DEFAULT_B64_MIN_LEN,
    lexicon: "CueLexicon | None" = None,
) -> DetectorReport:
    """Find base64-wrapped content and re-scan what it hides.

    Decoded text is recursively re-analyzed (up to *max_depth* decode levels)
    with the other detectors; their findings surface as ``decoded:`` features
    whose spans point at the encoded run in the original input.
    """
    feats: list[Feature] = []
    for chain in decode_chains(text, max_depth, min_len):
        preview = chain.decoded[:48].replace("\n", " ")
        feats.append(
            Feature(f"base64_depth{chain.depth}", chain.start, chain.end, 0.3, preview)
        )
        if not chain.text_like:
            continue
        sub_reports = [
            detect_command_patterns(chain.decoded),
            detect_env_vars(chain.decoded),
            detect_recon_prompt(chain.decoded),
        ]
        if lexicon is not None:
            sub_reports.append(detect_jailbreak_cues(chain.decoded, lexicon))
        for rep in sub_reports:
            for f in rep.features:
                feats.append(
                    Feature(
                        f"decoded:{rep.detector_name}:{f.name}",
                        chain.start,
                        chain.end,
                        f.weight,
                        f.detail,
                    )
                )
    return _report("encoded", feats)


# ---------------------------------------------------------------------------
# jailbreak cues
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CueEntry:
    category: str
    weight: float
    phrase: str  # stored canonicalized


@dataclass(frozen=True)
class CueLexicon:
    """Weighted cue phrases grouped into named categories.

    Categories shipped by default: role_reassignment, safety_dismissal,
    defensive_framing, authority_claim.  Crowd-sourced files may add more.
    """

    entries: tuple[CueEntry, ...] = field(default_factory=tuple)

    def categories(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for e in self.entries:
            seen.setdefault(e.category, None)
        return tuple(seen)

    @classmethod
    def from_lines(cls, lines: "list[str] | tuple[str, ...]") -> "CueLexicon":
        entries = []
        for lineno, line in enumerate(lines, start=1):
            body = line.split("#", 1)[0].rstrip("\n")
            if not body.strip():
                continue
            parts = body.split("\t")
            if len(parts) != 3:
                raise ValueError(f"lexicon line {lineno}: expected category<TAB>weight<TAB>phrase")
            category, weight_text, phrase = parts
            try:
                weight = float(weight_text)
            except ValueError:
                raise ValueError(f"lexicon line {lineno}: bad weight {weight_text!r}") from None
            if weight <= 0:
                raise ValueError(f"lexicon line {lineno}: weight must be positive")
            canon_phrase = canonicalize_text(phrase)
            if not canon_phrase:
                raise ValueError(f"lexicon line {lineno}: empty phrase")
            entries.append(CueEntry(category.strip(), weight, canon_phrase))
        return cls(entries=tuple(entries))

    @classmethod
    def from_file(cls, path: str) -> "CueLexicon":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_lines(fh.readlines())


@lru_cache(maxsize=1)
def default_lexicon() -> CueLexicon:
    data = resources.files("promptwall.data").joinpath("jailbreak_cues.tsv").read_text("utf-8")
    return CueLexicon.from_lines(data.splitlines())


def detect_jailbreak_cues(text: str, lexicon: CueLexicon) -> DetectorReport:
    """Match lexicon cue phrases; feature name = cue category.

    Each phrase contributes its weight once per text (first occurrence), so
    the score is additive over distinct cues rather than repetitions.
    """
    canon, offsets = fold_text(text)
    raw_len = len(text)
    feats: list[Feature] = []
    for entry in lexicon.entries:
        pos = canon.find(entry.phrase)
        if pos < 0:
            continue
        s, e = map_span(offsets, pos, pos + len(entry.phrase), raw_len)
        feats.append(Feature(entry.category, s, e, entry.weight, entry.phrase))
    return _report("jailbreak_cues", feats)


# ---------------------------------------------------------------------------
# generated-code classification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CodeBlock:
    start: int
    end: int
    content: str
    fenced: bool
    dialect: str = "unknown"


_RE_FENCE = re.compile(r"```[^\n]*\n(.*?)(?:```|\Z)", re.DOTALL)
_RE_CODE_LINE = re.compile(
    r"^\s*(?:def |class |import |from \w+ import|function |param\(|#!|\$\w+\s*=|"
    r"if __name__|for \w+ in |\[unit\]|\[service\]|\[install\]|execstart=|@echo|select )",
    re.IGNORECASE,
)

_DIALECT_MARKERS = {
    "python": ("def ", "import ", "self.", "elif", "lambda", "__name__", "print("),
    "powershell": ("$null", "param(", "invoke-", "new-object", "write-host", "-eq ", "$env:", "function "),
    "shell": ("#!/bin", "echo ", "fi\n", "esac", "grep ", "chmod ", "export ", "curl "),
    "batch": ("@echo", "%~", "goto ", "setlocal", "rem "),
    "systemd-unit": ("[unit]", "[service]", "[install]", "execstart", "wantedby"),
}


def infer_dialect(code: str) -> str:
    low = code.lower()
    best, best_hits = "unknown", 0
    for dialect, markers in _DIALECT_MARKERS.items():
        hits = sum(1 for m in markers if m in low)
        if hits > best_hits:
            best, best_hits = dialect, hits
    return best


def find_code_blocks(text: str) -> list[CodeBlock]:
    """Fenced blocks, indentation-inferred blocks, or whole-text code."""
    blocks: list[CodeBlock] = []
    for m in _RE_FENCE.finditer(text):
        content = m.group(1)
        blocks.append(CodeBlock(m.start(), m.end(), content, True, infer_dialect(content)))
    if blocks:
        return blocks

    # Indentation-inferred: runs of >=2 lines indented by 4+ spaces or a tab.
    lines = text.splitlines(keepends=True)
    pos = 0
    run_start, run_lines = None, []
    for line in lines + [""]:
        indented = line.startswith("    ") or line.startswith("\t")
        if indented or (run_start is not None and not line.strip()):
            if run_start is None:
                run_start = pos
            run_lines.append(line)
        else:
            if run_start is not None and sum(1 for l in run_lines if l.strip()) >= 2:
                content = "".join(run_lines)
                blocks.append(CodeBlock(run_start, run_start + len(content), content, False, infer_dialect(content)))
            run_start, run_lines = None, []
        pos += len(line)
    if blocks:
        return blocks

    # Whole-text heuristic: unfenced raw code (config units, scripts).
    stripped = [l for l in text.splitlines() if l.strip()]
    if len(stripped) >= 2:
        code_lines = sum(1 for l in stripped if _RE_CODE_LINE.match(l) or l.rstrip().endswith(("{", ";", ":")))
        if code_lines >= 2 and code_lines / len(stripped) >= 0.4:
            blocks.append(CodeBlock(0, len(text), text, False, infer_dialect(text)))
    return blocks


CAPABILITY_PATTERNS: dict[str, tuple[float, tuple[str, ...]]] = {
    "process_invocation": (
        0.3,
        ("subprocess.", "os.system(", "os.popen(", "start-process", "shellexecute",
         "createprocess", "cmd /c", "sh -c", "bash -c", "runtime.exec", "system("),
    ),
    "dynamic_execution": (
        0.4,
        ("eval(", "exec(", "compile(", "invoke-expression", "| iex", "iex (",
         "__import__(", "importlib.import_module", "addscript", "frombase64string",
         "reflection.assembly"),
    ),
    "persistence": (
        0.5,
        ("execstart=", "wantedby=", "systemctl enable", "crontab", "@reboot",
         "schtasks /create", "sc create", "new-service", "currentversion\\run",
         "launchctl load", "/etc/init.d", "startup folder", "winlogon"),
    ),
    "file_enumeration": (
        0.15,
        ("os.walk(", "rglob(", "scandir(", "glob.glob(", "listdir(",
         "get-childitem", "dir /s", "find . -type f", "walk(root"),
    ),
    "file_deletion": (
        0.35,
        ("os.remove(", "os.unlink(", "shutil.rmtree(", "remove-item", "del /f",
         "rm -rf", "rm -f ", "rmdir /s", "unlink("),
    ),
    "network_beaconing": (
        0.35,
        ("socket.connect", "requests.get(", "requests.post(", "urlopen(",
         "invoke-webrequest", "downloadstring", "curl http", "wget http",
         "net.webclient", "httpclient", "beacon"),
    ),
}


def classify_code_output(text: str) -> DetectorReport:
    """Flag dangerous capability categories inside generated code blocks.

    No code block means score 0 regardless of prose content.  Capability
    features are deduplicated per (category, pattern) across blocks; each
    feature's detail records the matched pattern and inferred dialect.
    """
    feats: list[Feature] = []
    seen: set[tuple[str, str]] = set()
    for block in find_code_blocks(text):
        low = block.content.casefold()
        base = block.start
        offset_base = text.find(block.content, block.start)
        if offset_base < 0:
            offset_base = base
        for category, (weight, patterns) in CAPABILITY_PATTERNS.items():
            for pat in patterns:
                if (category, pat) in seen:
                    continue
                pos = low.find(pat)
                if pos >= 0:
                    seen.add((category, pat))
                    feats.append(
                        Feature(category, offset_base + pos, offset_base + pos + len(pat),
                                weight, f"{pat} [{block.dialect}]")
                    )
    return _report("code_output", feats)


# ---------------------------------------------------------------------------
# reconnaissance prompts
# ---------------------------------------------------------------------------

_RE_MODEL_ENUM = re.compile(
    r"\b(list|show|enumerate|what|which|find|tell me)\b[^.?!\n]{0,60}"
    r"\b(models?|llms?)\b[^.?!\n]{0,60}"
    r"\b(available|installed|present|running|local|on (this|my) (machine|system|host|box))\b"
)
_RE_MODEL_PATHS = re.compile(
    r"\b(models?|weights|checkpoints?)\b[^.?!\n]{0,60}\b(file )?paths?\b"
    r"|\bpaths?\b[^.?!\n]{0,60}\b(models?|weights)\b"
)

RECON_PHRASES: tuple[tuple[str, float, str], ...] = (
    ("installed models", 0.4, "model_enumeration"),
    ("available models", 0.35, "model_enumeration"),
    ("models are installed", 0.4, "model_enumeration"),
    ("models do i have", 0.4, "model_enumeration"),
    ("local models", 0.3, "model_enumeration"),
    ("api/tags", 0.45, "model_enumeration"),
    ("ollama", 0.25, "llm_tooling"),
    ("llama.cpp", 0.25, "llm_tooling"),
    ("llama cpp", 0.25, "llm_tooling"),
    ("huggingface cache", 0.3, "llm_tooling"),
    ("hugging face cache", 0.3, "llm_tooling"),
    ("cached huggingface", 0.3, "llm_tooling"),
    ("cached hugging face", 0.3, "llm_tooling"),
    ("lm studio", 0.25, "llm_tooling"),
    ("gguf", 0.25, "llm_tooling"),
    ("vllm", 0.25, "llm_tooling"),
    ("text-generation-webui", 0.25, "llm_tooling"),
    ("port 11434", 0.3, "llm_tooling"),
    ("running on this host", 0.2, "service_probe"),
    ("running on this machine", 0.2, "service_probe"),
    ("running on this box", 0.2, "service_probe"),
    ("running locally", 0.2, "service_probe"),
    ("~/.ollama", 0.4, "model_path_probe"),
    (".cache/huggingface", 0.4, "model_path_probe"),
    ("model cache", 0.3, "model_path_probe"),
    ("do i have a gpu", 0.3, "gpu_probe"),
    ("is a gpu", 0.25, "gpu_probe"),
    ("gpu available", 0.3, "gpu_probe"),
    ("gpus are", 0.25, "gpu_probe"),
    ("detect gpu", 0.3, "gpu_probe"),
    ("nvidia-smi", 0.35, "gpu_probe"),
    ("cuda available", 0.3, "gpu_probe"),
    ("vram", 0.25, "gpu_probe"),
    ("python environments", 0.3, "interpreter_probe"),
    ("interpreters installed", 0.3, "interpreter_probe"),
    ("installed interpreters", 0.3, "interpreter_probe"),
    ("python versions installed", 0.3, "interpreter_probe"),
    ("privilege level", 0.35, "privilege_probe"),
    ("am i admin", 0.35, "privilege_probe"),
    ("am i an admin", 0.35, "privilege_probe"),
    ("current privileges", 0.35, "privilege_probe"),
    ("elevated privileges", 0.3, "privilege_probe"),
    ("running as root", 0.3, "privilege_probe"),
)


def detect_recon_prompt(text: str) -> DetectorReport:
    """Score system/model enumeration intent; conceptual questions stay at 0."""
    canon, offsets = fold_text(text)
    raw_len = len(text)
    feats: list[Feature] = []
    m = _RE_MODEL_ENUM.search(canon)
    if m:
        s, e = map_span(offsets, m.start(), m.end(), raw_len)
        feats.append(Feature("model_enumeration", s, e, 0.45, m.group(0)[:60]))
    m = _RE_MODEL_PATHS.search(canon)
    if m:
        s, e = map_span(offsets, m.start(), m.end(), raw_len)
        feats.append(Feature("model_path_probe", s, e, 0.3, m.group(0)[:60]))
    seen: set[str] = set()
    for phrase, weight, name in RECON_PHRASES:
        if phrase in seen:
            continue
        pos = canon.find(phrase)
        if pos >= 0:
            seen.add(phrase)
            s, e = map_span(offsets, pos, pos + len(phrase), raw_len)
            feats.append(Feature(name, s, e, weight, phrase))
    return _report("recon_prompt", feats)


# ---------------------------------------------------------------------------
# request-intent helpers (prompt-side flags used by anomaly + policy layers)
# ---------------------------------------------------------------------------

CODE_REQUEST_CUES = (
    "write a function", "write a python", "write a script", "write code",
    "write a program", "write a powershell", "write a bash", "write a batch",
    "write a systemd", "generate code", "generate a function", "generate a script",
    "implement a function", "implement the function", "create a script",
    "create a function", "populate the function", "fill in the function",
    "function body", "function that", "script that", "code that", "def ",
    "code snippet", "one-liner", "service unit",
)

PERSISTENCE_REQUEST_CUES = (
    "startup service", "at boot", "on boot", "run at startup", "on startup",
    "systemd service", "service unit", "persist across reboots", "persistence",
    "schtasks", "run key", "launchd", "init script", "autostart", "reboot survives",
)


def is_code_request(text: str) -> bool:
    canon = canonicalize_text(text)
    return any(cue in canon for cue in CODE_REQUEST_CUES)


def requests_persistence(text: str) -> bool:
    canon = canonicalize_text(text)
    return any(cue in canon for cue in PERSISTENCE_REQUEST_CUES)


def run_all(
    text: str,
    lexicon: CueLexicon | None = None,
    *,
    b64_max_depth: int = DEFAULT_B64_MAX_DEPTH,
    b64_min_len: int = DEFAULT_B64_MIN_LEN,
) -> dict[str, DetectorReport]:
    """Run the full registered detector suite over *text*."""
    lex = lexicon if lexicon is not None else default_lexicon()
    reports = {
        "command_patterns": detect_command_patterns(text),
        "env_vars": detect_env_vars(text),
        "encoded": detect_encoded(text, b64_max_depth, min_len=b64_min_len, lexicon=lex),
        "jailbreak_cues": detect_jailbreak_cues(text, lex),
        "code_output": classify_code_output(text),
        "recon_prompt": detect_recon_prompt(text),
    }
    return reports
