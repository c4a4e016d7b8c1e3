"""Tokenizer for the equation DSL.

The token stream is the unit the policy samples and the unit term spans are
expressed in, so tokenization is deliberately small and rigid: identifiers,
numbers, five infix operators and parentheses. Whitespace never reaches the
token list.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

FUNCTIONS = ("exp", "log", "sin", "cos", "tanh", "sqrt", "abs")

OPERATORS = ("+", "-", "*", "/", "^")

_PLACEHOLDER_RE = re.compile(r"^c(\d+)$")
_NUMBER_RE = re.compile(r"\d+(\.\d+)?([eE][+-]?\d+)?")
_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z_0-9]*")

KIND_VAR = "var"
KIND_COEFF = "coeff"
KIND_OP = "op"
KIND_FUNC = "func"
KIND_NUM = "num"
KIND_LPAREN = "lparen"
KIND_RPAREN = "rparen"


class ExprSyntaxError(ValueError):
    """Raised on any lexical or grammatical error; carries the byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    offset: int

    @property
    def ordinal(self) -> int:
        """Placeholder ordinal; only meaningful for coeff tokens."""
        m = _PLACEHOLDER_RE.match(self.text)
        if m is None:
            raise ValueError(f"token {self.text!r} is not a placeholder")
        return int(m.group(1))


def placeholder_ordinal(name: str) -> int | None:
    """Return the ordinal if ``name`` is a placeholder identifier, else None."""
    m = _PLACEHOLDER_RE.match(name)
    return int(m.group(1)) if m else None


def tokenize(text: str) -> list[Token]:
    """Split ``text`` into DSL tokens.

    Raises ExprSyntaxError (with byte offset) on characters outside the
    vocabulary. Identifier classification: ``c<digits>`` is a coefficient
    placeholder, known function names are functions, anything else is a
    variable reference.
    """
    tokens: list[Token] = []
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
            continue
        if ch in "+-*/^":
            tokens.append(Token(KIND_OP, ch, i))
            i += 1
            continue
        if ch == "(":
            tokens.append(Token(KIND_LPAREN, ch, i))
            i += 1
            continue
        if ch == ")":
            tokens.append(Token(KIND_RPAREN, ch, i))
            i += 1
            continue
        if ch.isdigit():
            m = _NUMBER_RE.match(text, i)
            tokens.append(Token(KIND_NUM, m.group(0), i))
            i = m.end()
            continue
        if ch.isalpha() or ch == "_":
            m = _IDENT_RE.match(text, i)
            name = m.group(0)
            if placeholder_ordinal(name) is not None:
                kind = KIND_COEFF
            elif name in FUNCTIONS:
                kind = KIND_FUNC
            else:
                kind = KIND_VAR
            tokens.append(Token(kind, name, i))
            i = m.end()
            continue
        raise ExprSyntaxError(f"unexpected character {ch!r}", i)
    return tokens


def render(tokens: list[Token] | list[str]) -> str:
    """Join token texts back into canonical source text.

    '+' and '-' used as binary joiners get surrounding spaces in canonical
    printing; here we cannot tell binary from unary, so we space '+'/'-'
    except when the previous token is an operator or an opening paren (the
    unary position). The printer in nodes.py produces the same convention.
    """
    texts = [t.text if isinstance(t, Token) else t for t in tokens]
    out: list[str] = []
    prev: str | None = None
    for t in texts:
        if t in ("+", "-") and prev is not None and prev not in ("+", "-", "*", "/", "^", "("):
            out.append(f" {t} ")
        else:
            out.append(t)
        prev = t
    return "".join(out)
