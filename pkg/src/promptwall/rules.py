"""Signature rule engine with a small line-oriented rule language.

Rule files (``.lrule``) hold zero or more rules of the form::

    rule <id> "<name>" {
      direction: prompt|response|either;
      severity: low|medium|high|critical;
      action: log|alert|block;
      match: all|any;
      <condition>; ...
      message: "<text>";
      tags: <comma-separated words>;
    }

Conditions (one or more, between ``match:`` and ``message:``)::

    contains "<substring>" [nocase]
    regex "<pattern>"
    decoded_contains "<substring>"
    entropy > <float 0..8>
    length > <int>
    detector <name> > <float 0..1>

``#`` starts a comment.  Statements are ``;``-terminated and must appear in
the order shown; a whole rule may sit on one line.  Strings use double quotes
with ``\\"`` and ``\\\\`` escapes.

Matching semantics: ``contains``/``regex``/``length`` run against the
canonicalized (casefolded, whitespace-collapsed) exchange text, so regex
patterns should be written lowercase; ``decoded_contains`` and ``entropy``
run against the raw text.  The regex dialect is a conservative subset:
no backreferences, no lookaround, only ``(?:`` of the ``(?``-constructs.

``parse_ruleset`` is total: any input yields either a :class:`RuleSet` or a
:class:`ParseError` carrying a line number.  Evaluation is pure.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum, IntEnum

from . import detectors
from .exchange import Direction, LlmExchange, canonicalize_text


class Severity(IntEnum):
    LOW = 0
    MEDIUM = 1
    HIGH = 2
    CRITICAL = 3

    @property
    def label(self) -> str:
        return self.name.lower()


class RuleAction(str, Enum):
    LOG = "log"
    ALERT = "alert"
    BLOCK = "block"


class Action(IntEnum):
    """Aggregate verdict actions, ordered weakest to strongest.

    Rules themselves only produce LOG_ONLY/ALERT/BLOCK; REDACT is applied by
    the gateway to responses and is mutually exclusive with BLOCK by ordering.
    """

    ALLOW = 0
    LOG_ONLY = 1
    ALERT = 2
    REDACT = 3
    BLOCK = 4

    @property
    def label(self) -> str:
        return self.name.lower()


class RuleDirection(str, Enum):
    PROMPT = "prompt"
    RESPONSE = "response"
    EITHER = "either"


class MatchMode(str, Enum):
    ALL = "all"
    ANY = "any"


class CondKind(str, Enum):
    CONTAINS = "contains"
    REGEX = "regex"
    DECODED_CONTAINS = "decoded_contains"
    ENTROPY_ABOVE = "entropy"
    LENGTH_ABOVE = "length"
    DETECTOR_ABOVE = "detector"


@dataclass(frozen=True)
class Condition:
    kind: CondKind
    pattern: str = ""
    nocase: bool = False
    threshold: float = 0.0
    detector: str = ""


@dataclass(frozen=True)
class Rule:
    rule_id: int
    name: str
    direction: RuleDirection
    severity: Severity
    action: RuleAction
    match_mode: MatchMode
    conditions: tuple[Condition, ...]
    message: str
    tags: tuple[str, ...]


@dataclass(frozen=True)
class RuleSet:
    rules: tuple[Rule, ...] = ()
    warnings: tuple[str, ...] = ()

    def by_id(self, rule_id: int) -> Rule | None:
        for r in self.rules:
            if r.rule_id == rule_id:
                return r
        return None

    def referenced_detectors(self) -> frozenset[str]:
        names = set()
        for r in self.rules:
            for c in r.conditions:
                if c.kind is CondKind.DETECTOR_ABOVE:
                    names.add(c.detector)
        return frozenset(names)


@dataclass(frozen=True)
class RuleMatch:
    rule_id: int
    matched_condition_indices: tuple[int, ...]
    severity: Severity
    action: RuleAction
    message: str


class ParseError(ValueError):
    """Rule-file syntax or validation error, anchored to a source line."""

    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class DuplicateId(ParseError):
    def __init__(self, line: int, rule_id: int):
        super().__init__(line, f"duplicate rule id {rule_id}")
        self.rule_id = rule_id


class MissingDetectorScore(KeyError):
    """A rule references a detector absent from the provided score map."""


# ---------------------------------------------------------------------------
# tokenizer
# ---------------------------------------------------------------------------

_SYMBOLS = "{};:>,"


@dataclass(frozen=True)
class _Token:
    kind: str  # "word" | "string" | "symbol"
    value: str
    line: int


def _tokenize(source: str) -> list[_Token]:
    tokens: list[_Token] = []
    line = 1
    i, n = 0, len(source)
    while i < n:
        ch = source[i]
        if ch == "\n":
            line += 1
            i += 1
            continue
        if ch.isspace():
            i += 1
            continue
        if ch == "#":
            while i < n and source[i] != "\n":
                i += 1
            continue
        if ch in _SYMBOLS:
            tokens.append(_Token("symbol", ch, line))
            i += 1
            continue
        if ch == '"':
            start_line = line
            i += 1
            buf = []
            while True:
                if i >= n:
                    raise ParseError(start_line, "unterminated string literal")
                c = source[i]
                if c == "\n":
                    raise ParseError(start_line, "unterminated string literal")
                if c == "\\":
                    if i + 1 >= n:
                        raise ParseError(start_line, "dangling escape in string")
                    nxt = source[i + 1]
                    if nxt == '"':
                        buf.append('"')
                    elif nxt == "\\":
                        buf.append("\\")
                    else:
                        raise ParseError(start_line, f"unknown escape \\{nxt} in string")
                    i += 2
                    continue
                if c == '"':
                    i += 1
                    break
                buf.append(c)
                i += 1
            tokens.append(_Token("string", "".join(buf), start_line))
            continue
        # bare word: identifiers, keywords, numbers
        j = i
        while j < n and not source[j].isspace() and source[j] not in _SYMBOLS and source[j] not in '"#':
            j += 1
        tokens.append(_Token("word", source[i:j], line))
        i = j
    return tokens


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

_RE_TAG = re.compile(r"^[A-Za-z0-9_.-]+$")
_RE_BANNED_REGEX = re.compile(r"\\[1-9]|\\g<|\(\?(?!:)")


def validate_regex(pattern: str, line: int) -> None:
    """Enforce the conservative regex subset, then ensure it compiles."""
    if _RE_BANNED_REGEX.search(pattern):
        raise ParseError(line, "regex uses a construct outside the supported subset "
                               "(backreferences and (?...) groups other than (?: are rejected)")
    try:
        re.compile(pattern)
    except re.error as exc:
        raise ParseError(line, f"regex does not compile: {exc}") from None


class _Parser:
    def __init__(self, tokens: list[_Token], known_detectors: frozenset[str]):
        self.tokens = tokens
        self.pos = 0
        self.known = known_detectors
        self.warnings: list[str] = []

    def _peek(self) -> _Token | None:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def _next(self, expect: str | None = None) -> _Token:
        tok = self._peek()
        if tok is None:
            last_line = self.tokens[-1].line if self.tokens else 1
            raise ParseError(last_line, "unexpected end of input")
        self.pos += 1
        if expect is not None and tok.value != expect:
            raise ParseError(tok.line, f"expected {expect!r}, found {tok.value!r}")
        return tok

    def _expect_symbol(self, sym: str) -> _Token:
        tok = self._next()
        if tok.kind != "symbol" or tok.value != sym:
            raise ParseError(tok.line, f"expected {sym!r}, found {tok.value!r}")
        return tok

    def _keyword_stmt(self, keyword: str, choices: dict[str, object], line_hint: int) -> object:
        self._expect_symbol(":")
        tok = self._next()
        if tok.kind != "word" or tok.value not in choices:
            raise ParseError(tok.line, f"{keyword} must be one of {sorted(choices)}, found {tok.value!r}")
        self._expect_symbol(";")
        return choices[tok.value]

    def _string(self, what: str) -> str:
        tok = self._next()
        if tok.kind != "string":
            raise ParseError(tok.line, f"expected quoted string for {what}, found {tok.value!r}")
        return tok.value

    def _number(self, what: str) -> tuple[float, int]:
        tok = self._next()
        try:
            return float(tok.value), tok.line
        except ValueError:
            raise ParseError(tok.line, f"expected number for {what}, found {tok.value!r}") from None

    def parse_ruleset(self) -> RuleSet:
        rules: list[Rule] = []
        seen_ids: dict[int, int] = {}
        while self._peek() is not None:
            tok = self._next()
            if tok.kind != "word" or tok.value != "rule":
                raise ParseError(tok.line, f"expected 'rule', found {tok.value!r}")
            rule = self._parse_rule(tok.line)
            if rule.rule_id in seen_ids:
                raise DuplicateId(tok.line, rule.rule_id)
            seen_ids[rule.rule_id] = tok.line
            rules.append(rule)
        return RuleSet(rules=tuple(rules), warnings=tuple(self.warnings))

    def _parse_rule(self, rule_line: int) -> Rule:
        id_tok = self._next()
        if id_tok.kind != "word" or not id_tok.value.isdigit():
            raise ParseError(id_tok.line, f"expected numeric rule id, found {id_tok.value!r}")
        rule_id = int(id_tok.value)
        if rule_id <= 0:
            raise ParseError(id_tok.line, "rule id must be a positive integer")
        name = self._string("rule name")
        self._expect_symbol("{")

        direction = self._stmt_header("direction", {
            "prompt": RuleDirection.PROMPT,
            "response": RuleDirection.RESPONSE,
            "either": RuleDirection.EITHER,
        })
        severity = self._stmt_header("severity", {
            "low": Severity.LOW, "medium": Severity.MEDIUM,
            "high": Severity.HIGH, "critical": Severity.CRITICAL,
        })
        action = self._stmt_header("action", {
            "log": RuleAction.LOG, "alert": RuleAction.ALERT, "block": RuleAction.BLOCK,
        })
        match_mode = self._stmt_header("match", {"all": MatchMode.ALL, "any": MatchMode.ANY})

        conditions: list[Condition] = []
        while True:
            tok = self._peek()
            if tok is None:
                raise ParseError(rule_line, "unterminated rule (missing '}')")
            if tok.kind == "word" and tok.value == "message":
                break
            conditions.append(self._parse_condition())
        if not conditions:
            raise ParseError(rule_line, f"rule {rule_id} has no conditions")

        self._next("message")
        self._expect_symbol(":")
        message = self._string("message")
        if not message.strip():
            raise ParseError(rule_line, f"rule {rule_id} has an empty message")
        self._expect_symbol(";")

        self._next("tags")
        self._expect_symbol(":")
        tags = self._parse_tags()
        self._expect_symbol("}")

        if action is RuleAction.BLOCK and severity < Severity.MEDIUM:
            self.warnings.append(
                f"rule {rule_id}: action block with severity {severity.label} "
                "(block rules should be at least medium)"
            )
        return Rule(rule_id, name, direction, severity, action, match_mode,
                    tuple(conditions), message, tuple(tags))

    def _stmt_header(self, keyword: str, choices: dict[str, object]):
        tok = self._next()
        if tok.kind != "word" or tok.value != keyword:
            raise ParseError(tok.line, f"expected '{keyword}:' statement, found {tok.value!r}")
        return self._keyword_stmt(keyword, choices, tok.line)

    def _parse_condition(self) -> Condition:
        tok = self._next()
        if tok.kind != "word":
            raise ParseError(tok.line, f"expected a condition keyword, found {tok.value!r}")
        kw = tok.value
        if kw == "contains":
            pattern = self._string("contains pattern")
            if not pattern:
                raise ParseError(tok.line, "contains pattern must be non-empty")
            nocase = False
            nxt = self._peek()
            if nxt is not None and nxt.kind == "word" and nxt.value == "nocase":
                self._next()
                nocase = True
            self._expect_symbol(";")
            return Condition(CondKind.CONTAINS, pattern=pattern, nocase=nocase)
        if kw == "regex":
            pattern = self._string("regex pattern")
            if not pattern:
                raise ParseError(tok.line, "regex pattern must be non-empty")
            validate_regex(pattern, tok.line)
            self._expect_symbol(";")
            return Condition(CondKind.REGEX, pattern=pattern)
        if kw == "decoded_contains":
            pattern = self._string("decoded_contains pattern")
            if not pattern:
                raise ParseError(tok.line, "decoded_contains pattern must be non-empty")
            self._expect_symbol(";")
            return Condition(CondKind.DECODED_CONTAINS, pattern=pattern)
        if kw == "entropy":
            self._expect_symbol(">")
            value, line = self._number("entropy threshold")
            if not 0.0 <= value <= 8.0:
                raise ParseError(line, f"entropy threshold {value} outside [0, 8]")
            self._expect_symbol(";")
            return Condition(CondKind.ENTROPY_ABOVE, threshold=value)
        if kw == "length":
            self._expect_symbol(">")
            value, line = self._number("length threshold")
            if value < 0 or value != int(value):
                raise ParseError(line, f"length threshold must be a non-negative integer, got {value}")
            self._expect_symbol(";")
            return Condition(CondKind.LENGTH_ABOVE, threshold=float(int(value)))
        if kw == "detector":
            name_tok = self._next()
            if name_tok.kind != "word":
                raise ParseError(name_tok.line, f"expected detector name, found {name_tok.value!r}")
            if name_tok.value not in self.known:
                raise ParseError(name_tok.line,
                                 f"unknown detector {name_tok.value!r} (registered: {', '.join(sorted(self.known))})")
            self._expect_symbol(">")
            value, line = self._number("detector threshold")
            if not 0.0 <= value <= 1.0:
                raise ParseError(line, f"detector threshold {value} outside [0, 1]")
            self._expect_symbol(";")
            return Condition(CondKind.DETECTOR_ABOVE, detector=name_tok.value, threshold=value)
        raise ParseError(tok.line, f"unknown condition keyword {kw!r}")

    def _parse_tags(self) -> list[str]:
        tags = []
        while True:
            tok = self._next()
            if tok.kind != "word" or not _RE_TAG.match(tok.value):
                raise ParseError(tok.line, f"expected tag word, found {tok.value!r}")
            tags.append(tok.value)
            nxt = self._next()
            if nxt.kind == "symbol" and nxt.value == ",":
                continue
            if nxt.kind == "symbol" and nxt.value == ";":
                return tags
            raise ParseError(nxt.line, f"expected ',' or ';' after tag, found {nxt.value!r}")


def parse_ruleset(source: str, known_detectors: frozenset[str] | None = None) -> RuleSet:
    """Parse rule text into a :class:`RuleSet`; raises :class:`ParseError`."""
    known = known_detectors if known_detectors is not None else frozenset(detectors.DETECTOR_NAMES)
    tokens = _tokenize(source)
    return _Parser(tokens, known).parse_ruleset()


def parse_ruleset_file(path: str, known_detectors: frozenset[str] | None = None) -> RuleSet:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_ruleset(fh.read(), known_detectors)


# ---------------------------------------------------------------------------
# serialization (print/parse round-trips structurally)
# ---------------------------------------------------------------------------


def _quote(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'


def format_condition(cond: Condition) -> str:
    if cond.kind is CondKind.CONTAINS:
        suffix = " nocase" if cond.nocase else ""
        return f"contains {_quote(cond.pattern)}{suffix};"
    if cond.kind is CondKind.REGEX:
        return f"regex {_quote(cond.pattern)};"
    if cond.kind is CondKind.DECODED_CONTAINS:
        return f"decoded_contains {_quote(cond.pattern)};"
    if cond.kind is CondKind.ENTROPY_ABOVE:
        return f"entropy > {cond.threshold:g};"
    if cond.kind is CondKind.LENGTH_ABOVE:
        return f"length > {int(cond.threshold)};"
    return f"detector {cond.detector} > {cond.threshold:g};"


def format_rule(rule: Rule) -> str:
    lines = [
        f"rule {rule.rule_id} {_quote(rule.name)} {{",
        f"  direction: {rule.direction.value};",
        f"  severity: {rule.severity.label};",
        f"  action: {rule.action.value};",
        f"  match: {rule.match_mode.value};",
    ]
    for cond in rule.conditions:
        lines.append(f"  {format_condition(cond)}")
    lines.append(f"  message: {_quote(rule.message)};")
    lines.append(f"  tags: {', '.join(rule.tags)};")
    lines.append("}")
    return "\n".join(lines)


def format_ruleset(ruleset: RuleSet) -> str:
    return "\n\n".join(format_rule(r) for r in ruleset.rules) + ("\n" if ruleset.rules else "")


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

_COMPILED: dict[str, re.Pattern[str]] = {}


def _compiled(pattern: str) -> re.Pattern[str]:
    pat = _COMPILED.get(pattern)
    if pat is None:
        pat = re.compile(pattern)
        _COMPILED[pattern] = pat
    return pat


def _direction_compatible(rule: Rule, direction: Direction) -> bool:
    if rule.direction is RuleDirection.EITHER:
        return True
    return rule.direction.value == direction.value


class _EvalContext:
    """Per-call lazy caches so expensive derivations run at most once."""

    def __init__(self, exchange: LlmExchange, b64_max_depth: int):
        self.raw = exchange.text
        self.canon = canonicalize_text(exchange.text)
        self.b64_max_depth = b64_max_depth
        self._entropy: float | None = None
        self._decoded: list[str] | None = None

    @property
    def entropy(self) -> float:
        if self._entropy is None:
            self._entropy = detectors.shannon_entropy(self.raw)
        return self._entropy

    @property
    def decoded_texts(self) -> list[str]:
        if self._decoded is None:
            chains = detectors.decode_chains(self.raw, self.b64_max_depth)
            self._decoded = [canonicalize_text(c.decoded) for c in chains if c.text_like]
        return self._decoded


def _condition_matches(cond: Condition, ctx: _EvalContext, scores: dict[str, float]) -> bool:
    if cond.kind is CondKind.CONTAINS:
        needle = canonicalize_text(cond.pattern) if cond.nocase else cond.pattern
        return needle in ctx.canon
    if cond.kind is CondKind.REGEX:
        return _compiled(cond.pattern).search(ctx.canon) is not None
    if cond.kind is CondKind.DECODED_CONTAINS:
        needle = canonicalize_text(cond.pattern)
        return any(needle in decoded for decoded in ctx.decoded_texts)
    if cond.kind is CondKind.ENTROPY_ABOVE:
        return ctx.entropy > cond.threshold
    if cond.kind is CondKind.LENGTH_ABOVE:
        return len(ctx.canon) > cond.threshold
    if cond.detector not in scores:
        raise MissingDetectorScore(cond.detector)
    return scores[cond.detector] > cond.threshold


def evaluate(
    ruleset: RuleSet,
    exchange: LlmExchange,
    detector_scores: dict[str, float],
    *,
    b64_max_depth: int = detectors.DEFAULT_B64_MAX_DEPTH,
) -> list[RuleMatch]:
    """Evaluate every direction-compatible rule; matches sorted by rule id.

    Pure: no I/O, no clock, no mutation of inputs.  ``detector_scores`` must
    contain every detector referenced by a direction-compatible rule.
    """
    ctx = _EvalContext(exchange, b64_max_depth)
    matches: list[RuleMatch] = []
    for rule in sorted(ruleset.rules, key=lambda r: r.rule_id):
        if not _direction_compatible(rule, exchange.direction):
            continue
        hit_indices = [
            i for i, cond in enumerate(rule.conditions)
            if _condition_matches(cond, ctx, detector_scores)
        ]
        if rule.match_mode is MatchMode.ALL:
            matched = len(hit_indices) == len(rule.conditions)
        else:
            matched = bool(hit_indices)
        if matched:
            matches.append(RuleMatch(rule.rule_id, tuple(hit_indices),
                                     rule.severity, rule.action, rule.message))
    return matches


_RULE_ACTION_TO_ACTION = {
    RuleAction.LOG: Action.LOG_ONLY,
    RuleAction.ALERT: Action.ALERT,
    RuleAction.BLOCK: Action.BLOCK,
}


def aggregate_action(matches: list[RuleMatch], floor: Action = Action.ALLOW) -> Action:
    """Strongest action among matches (BLOCK > ALERT > LOG_ONLY > ALLOW).

    ``floor`` lets policy escalate the result; because the combination is a
    max, the floor can never downgrade what the rules decided.
    """
    strongest = floor
    for m in matches:
        strongest = max(strongest, _RULE_ACTION_TO_ACTION[m.action])
    return strongest
