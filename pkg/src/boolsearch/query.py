"""PubMed-dialect Boolean queries: lexer, rule checker, parser and serializer."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Sequence, Union

__all__ = [
    "FieldTag",
    "LexError",
    "Op",
    "ParseError",
    "ParseMode",
    "QueryError",
    "QueryNode",
    "Term",
    "Token",
    "ValidityReport",
    "Violation",
    "canonical_tag",
    "check_rules",
    "combine_or",
    "iter_terms",
    "parse",
    "serialize",
    "tokenize",
]

OPERATORS = ("AND", "OR", "NOT")

_QUOTES = str.maketrans({"“": '"', "”": '"', "„": '"', "‟": '"', "″": '"'})

# Operator-looking tokens that PubMed does not accept.  Word forms are only
# recognised in upper case so ordinary words like "near" stay terms.
_BAD_OPERATOR = re.compile(
    r"^(?:&&?|\|\|?|!|AND/OR|ANDNOT|XOR|NEAR(?:/?\d+)?|ADJ\d*|W/\d+|PRE/\d+|SAME|WITH)$"
)

_TAG_CANON = {
    "mesh": "mesh",
    "mh": "mesh",
    "mesh terms": "mesh",
    "mesh term": "mesh",
    "majr": "mesh",
    "mesh major topic": "mesh",
    "mesh:noexp": "mesh_noexp",
    "mh:noexp": "mesh_noexp",
    "mesh terms:noexp": "mesh_noexp",
    "majr:noexp": "mesh_noexp",
    "tiab": "title_abstract",
    "title/abstract": "title_abstract",
    "all fields": "all_fields",
    "all": "all_fields",
    "sh": "subheading",
    "subheading": "subheading",
    "mesh subheading": "subheading",
    "pt": "pub_type",
    "ptyp": "pub_type",
    "publication type": "pub_type",
    "sb": "filter",
    "filter": "filter",
    "subset": "filter",
}


class QueryError(ValueError):
    def __init__(self, message: str, position: int = 0):
        super().__init__(f"{message} (at offset {position})")
        self.position = position


class LexError(QueryError):
    pass


class ParseError(QueryError):
    pass


class ParseMode(str, Enum):
    LEFT_TO_RIGHT = "left_to_right"
    PRECEDENCE = "precedence"


def canonical_tag(raw: str) -> str:
    key = " ".join(raw.strip().lower().split())
    key = re.sub(r"\s*:\s*", ":", key)
    return _TAG_CANON.get(key, "unknown")


@dataclass(frozen=True)
class FieldTag:
    raw: str

    @property
    def canonical(self) -> str:
        return canonical_tag(self.raw)

    def __str__(self) -> str:
        return self.raw


@dataclass(frozen=True)
class Term:
    text: str
    phrase: bool = False
    wildcard: bool = False
    field: FieldTag | None = None

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError("term text must be non-empty")
        if self.wildcard and self.text.endswith("*"):
            raise ValueError("wildcard star must be stripped from term text")

    @property
    def scope(self) -> str:
        """Canonical field the term is matched against; untagged means all fields."""
        return self.field.canonical if self.field else "all_fields"


@dataclass(frozen=True)
class Op:
    operator: str
    left: "QueryNode"
    right: "QueryNode"

    def __post_init__(self) -> None:
        if self.operator not in OPERATORS:
            raise ValueError(f"unsupported operator {self.operator!r}")


QueryNode = Union[Term, Op]


@dataclass(frozen=True)
class Token:
    kind: str  # LPAREN, RPAREN, OP, BADOP, TERM
    value: str
    pos: int
    phrase: bool = False
    wildcard: bool = False
    field: str | None = None

    def term(self) -> Term:
        return Term(
            self.value,
            phrase=self.phrase,
            wildcard=self.wildcard,
            field=FieldTag(self.field) if self.field is not None else None,
        )


@dataclass(frozen=True)
class Violation:
    rule: str  # UnbalancedBrackets, InvalidOperator, ConsecutiveOperators, DanglingOperator
    position: int
    detail: str


@dataclass(frozen=True)
class ValidityReport:
    violations: tuple[Violation, ...] = ()

    @property
    def valid(self) -> bool:
        return not self.violations

    @property
    def rules(self) -> set[str]:
        return {v.rule for v in self.violations}

    def to_json(self) -> dict:
        return {
            "valid": self.valid,
            "violations": [
                {"rule": v.rule, "position": v.position, "detail": v.detail} for v in self.violations
            ],
        }

    @classmethod
    def from_json(cls, data: dict) -> "ValidityReport":
        return cls(tuple(Violation(v["rule"], v["position"], v["detail"]) for v in data["violations"]))


def _lex(text: str, strict: bool) -> tuple[list[Token], list[Violation]]:
    """Shared scanner.  In lenient mode problems become bracket violations."""
    text = text.translate(_QUOTES)
    tokens: list[Token] = []
    problems: list[Violation] = []
    words: list[tuple[str, int]] = []
    n = len(text)
    i = 0

    def read_tag(j: int) -> tuple[str | None, int]:
        k = j
        while k < n and text[k].isspace():
            k += 1
        if k >= n or text[k] != "[":
            return None, j
        end = text.find("]", k + 1)
        if end < 0:
            if strict:
                raise LexError("unterminated field tag", k)
            problems.append(Violation("UnbalancedBrackets", k, "'[' is never closed"))
            return text[k + 1 :].strip(), n
        return text[k + 1 : end].strip(), end + 1

    def emit_term(value: str, pos: int, phrase: bool, tag: str | None) -> None:
        wildcard = value.endswith("*")
        if wildcard:
            value = value.rstrip("*").rstrip()
        if not value:
            if strict:
                raise LexError("empty term", pos)
            value = "*"
            wildcard = False
        tokens.append(Token("TERM", value, pos, phrase=phrase, wildcard=wildcard, field=tag))

    def flush_words(tag: str | None = None) -> None:
        if not words:
            return
        value = " ".join(w for w, _ in words)
        emit_term(value, words[0][1], len(words) > 1, tag)
        words.clear()

    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
        elif ch in "()":
            flush_words()
            tokens.append(Token("LPAREN" if ch == "(" else "RPAREN", ch, i))
            i += 1
        elif ch == '"':
            flush_words()
            end = text.find('"', i + 1)
            if end < 0:
                if strict:
                    raise LexError("unterminated quote", i)
                end = n
            start = i
            value = " ".join(text[i + 1 : end].split())
            tag, i = read_tag(end + 1)
            emit_term(value, start, True, tag)
        elif ch == "[":
            if words:
                tag, i = read_tag(i)
                flush_words(tag)
            else:
                end = text.find("]", i + 1)
                if strict:
                    raise LexError("field tag without a term", i)
                if end < 0:
                    problems.append(Violation("UnbalancedBrackets", i, "'[' is never closed"))
                    i = n
                else:
                    i = end + 1
        elif ch == "]":
            if strict:
                raise LexError("unmatched ']'", i)
            problems.append(Violation("UnbalancedBrackets", i, "']' has no matching '['"))
            i += 1
        else:
            j = i
            while j < n and not text[j].isspace() and text[j] not in '()[]"':
                j += 1
            word = text[i:j]
            if word.upper() in OPERATORS:
                flush_words()
                tokens.append(Token("OP", word.upper(), i))
            elif _BAD_OPERATOR.match(word):
                flush_words()
                tokens.append(Token("BADOP", word, i))
            else:
                words.append((word, i))
            i = j
            if words:
                # a tag may follow after whitespace; peek for it
                k = i
                while k < n and text[k].isspace():
                    k += 1
                if k < n and text[k] == "[":
                    tag, i = read_tag(i)
                    flush_words(tag)
    flush_words()
    return tokens, problems


def tokenize(query_text: str) -> list[Token]:
    """Split query text into LPAREN, RPAREN, OP, BADOP and TERM tokens.

    Raises :class:`LexError` with the offending offset on an unterminated
    quote or field tag.
    """
    tokens, _ = _lex(query_text, strict=True)
    return tokens


def check_rules(query_text: str) -> ValidityReport:
    """Apply the four syntax rules and nothing else.

    1. every bracket is closed;
    2. only AND, OR and NOT are operators;
    3. operators never follow each other directly;
    4. an operator follows a term or a closed group, never the start of the
       query or an opening bracket.
    """
    tokens, violations = _lex(query_text, strict=False)
    depth: list[int] = []
    prev: Token | None = None
    for tok in tokens:
        if tok.kind == "LPAREN":
            depth.append(tok.pos)
        elif tok.kind == "RPAREN":
            if depth:
                depth.pop()
            else:
                violations.append(Violation("UnbalancedBrackets", tok.pos, "')' has no matching '('"))
        elif tok.kind in ("OP", "BADOP"):
            if tok.kind == "BADOP":
                violations.append(
                    Violation("InvalidOperator", tok.pos, f"{tok.value!r} is not one of AND, OR, NOT")
                )
            if prev is not None and prev.kind in ("OP", "BADOP"):
                violations.append(
                    Violation("ConsecutiveOperators", tok.pos, f"{prev.value} directly followed by {tok.value}")
                )
            elif prev is None or prev.kind == "LPAREN":
                violations.append(
                    Violation("DanglingOperator", tok.pos, f"{tok.value} is not preceded by a term")
                )
        prev = tok
    for pos in depth:
        violations.append(Violation("UnbalancedBrackets", pos, "'(' is never closed"))
    violations.sort(key=lambda v: v.position)
    return ValidityReport(tuple(violations))


class _Parser:
    def __init__(self, tokens: list[Token], mode: ParseMode, end: int):
        self.tokens = tokens
        self.mode = mode
        self.i = 0
        self.end = end

    def peek(self) -> Token | None:
        return self.tokens[self.i] if self.i < len(self.tokens) else None

    def expect_operand(self) -> QueryNode:
        tok = self.peek()
        if tok is None:
            raise ParseError("expected a term or '(' but the query ended", self.end)
        if tok.kind == "TERM":
            self.i += 1
            return tok.term()
        if tok.kind == "LPAREN":
            self.i += 1
            node = self.expression()
            close = self.peek()
            if close is None or close.kind != "RPAREN":
                raise ParseError("expected ')'", close.pos if close else self.end)
            self.i += 1
            return node
        raise ParseError(f"expected a term or '(' but found {tok.value!r}", tok.pos)

    def take_op(self, allowed: Sequence[str]) -> str | None:
        tok = self.peek()
        if tok is None or tok.kind == "RPAREN":
            return None
        if tok.kind == "OP" and tok.value in allowed:
            self.i += 1
            return tok.value
        if tok.kind == "OP":
            return None
        raise ParseError(f"expected an operator but found {tok.value!r}", tok.pos)

    def chain(self, operand, allowed: Sequence[str]) -> QueryNode:
        node = operand()
        while (op := self.take_op(allowed)) is not None:
            node = Op(op, node, operand())
        return node

    def expression(self) -> QueryNode:
        if self.mode is ParseMode.LEFT_TO_RIGHT:
            return self.chain(self.expect_operand, OPERATORS)
        return self.chain(self._and_level, ("OR",))

    def _and_level(self) -> QueryNode:
        return self.chain(self._not_level, ("AND",))

    def _not_level(self) -> QueryNode:
        return self.chain(self.expect_operand, ("NOT",))


def parse(query_text: str, mode: ParseMode | str = ParseMode.LEFT_TO_RIGHT) -> QueryNode:
    """Parse query text into a binary AST.

    The default mode folds operators strictly left to right as PubMed does;
    ``"precedence"`` binds NOT tighter than AND and AND tighter than OR.
    """
    mode = ParseMode(mode)
    report = check_rules(query_text)
    if not report.valid:
        first = report.violations[0]
        raise ParseError(f"{first.rule}: {first.detail}", first.position)
    tokens = tokenize(query_text)
    if not tokens:
        raise ParseError("empty query", 0)
    parser = _Parser(tokens, mode, len(query_text))
    node = parser.expression()
    if parser.i != len(tokens):
        tok = tokens[parser.i]
        raise ParseError(f"unexpected {tok.value!r}", tok.pos)
    return node


def _needs_quotes(text: str) -> bool:
    return bool(re.search(r'[\s()\[\]"]', text)) or text.upper() in OPERATORS or bool(
        _BAD_OPERATOR.match(text)
    )


def serialize(node: QueryNode) -> str:
    """Render an AST as fully parenthesised query text with ASCII quotes."""
    if isinstance(node, Op):
        return f"({serialize(node.left)} {node.operator} {serialize(node.right)})"
    body = node.text + ("*" if node.wildcard else "")
    if node.phrase or _needs_quotes(node.text):
        body = f'"{body}"'
    if node.field is not None:
        body += f"[{node.field.raw}]"
    return body


def combine_or(queries: Sequence[QueryNode]) -> QueryNode:
    if not queries:
        raise ValueError("combine_or needs at least one query")
    node = queries[0]
    for q in queries[1:]:
        node = Op("OR", node, q)
    return node


def iter_terms(node: QueryNode) -> Iterator[Term]:
    if isinstance(node, Term):
        yield node
    else:
        yield from iter_terms(node.left)
        yield from iter_terms(node.right)


def depth(node: QueryNode) -> int:
    if isinstance(node, Term):
        return 1
    return 1 + max(depth(node.left), depth(node.right))
