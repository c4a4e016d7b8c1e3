"""Recursive-descent parser, skeleton container and term decomposition.

Grammar (EBNF, also in GRAMMAR.md at the repo root):

    expr     = term , { ("+" | "-") , term } ;
    term     = unary , { ("*" | "/") , unary } ;
    unary    = "-" , unary | power ;
    power    = atom , [ "^" , [ "-" ] , integer ] ;
    atom     = number | variable | placeholder | function , "(" , expr , ")"
             | "(" , expr , ")" ;

'+', '-', '*', '/' are left-associative. Power exponents are integer
literals restricted to -3..3. Placeholders are ``c0..cK`` and their ordinals
must be gap-free within one expression.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tokens import (
    KIND_COEFF,
    KIND_FUNC,
    KIND_LPAREN,
    KIND_NUM,
    KIND_OP,
    KIND_RPAREN,
    KIND_VAR,
    ExprSyntaxError,
    Token,
    tokenize,
)
from .nodes import Bin, Call, Coeff, Neg, Node, Num, Pow, Var, eval_node, node_count, to_text

POW_MIN, POW_MAX = -3, 3


@dataclass(frozen=True)
class Term:
    """One top-level additive summand.

    ``phi`` is the summand with its leading support coefficient removed and
    the joining sign folded in, so the full expression equals
    sum_j coeff_j * phi_j with coeff_j = 1 for implicit-unit terms.
    """

    phi: Node
    coeff_ordinal: int | None
    token_span: frozenset[int]

    @property
    def implicit_unit(self) -> bool:
        return self.coeff_ordinal is None


@dataclass(frozen=True)
class EquationSkeleton:
    """Immutable parse result: AST plus token-level bookkeeping."""

    ast: Node
    text: str
    tokens: tuple[Token, ...]
    variables: tuple[str, ...]
    coeff_count: int
    terms: tuple[Term, ...]

    @property
    def term_spans(self) -> tuple[frozenset[int], ...]:
        return tuple(t.token_span for t in self.terms)

    def canonical_text(self) -> str:
        return to_text(self.ast)


class _Parser:
    def __init__(self, tokens: list[Token], source: str, known_vars: set[str] | None):
        self.tokens = tokens
        self.source = source
        self.known_vars = known_vars
        self.pos = 0
        self.depth = 0
        self.top_level_splits: list[int] = []
        self.seen_vars: list[str] = []
        self.seen_ordinals: set[int] = set()

    def _offset(self) -> int:
        if self.pos < len(self.tokens):
            return self.tokens[self.pos].offset
        return len(self.source)

    def _peek(self) -> Token | None:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def _take(self) -> Token:
        tok = self._peek()
        if tok is None:
            raise ExprSyntaxError("unexpected end of input", self._offset())
        self.pos += 1
        return tok

    def parse(self) -> Node:
        node = self.expr()
        if self.pos != len(self.tokens):
            raise ExprSyntaxError(f"trailing input {self.tokens[self.pos].text!r}", self._offset())
        return node

    def expr(self) -> Node:
        node = self.term()
        while True:
            tok = self._peek()
            if tok is None or tok.kind != KIND_OP or tok.text not in "+-":
                return node
            if self.depth == 0:
                self.top_level_splits.append(self.pos)
            self.pos += 1
            node = Bin(tok.text, node, self.term())

    def term(self) -> Node:
        node = self.unary()
        while True:
            tok = self._peek()
            if tok is None or tok.kind != KIND_OP or tok.text not in "*/":
                return node
            self.pos += 1
            node = Bin(tok.text, node, self.unary())

    def unary(self) -> Node:
        tok = self._peek()
        if tok is not None and tok.kind == KIND_OP and tok.text == "-":
            self.pos += 1
            return Neg(self.unary())
        return self.power()

    def power(self) -> Node:
        node = self.atom()
        tok = self._peek()
        if tok is not None and tok.kind == KIND_OP and tok.text == "^":
            self.pos += 1
            node = Pow(node, self._exponent())
        return node

    def _exponent(self) -> int:
        tok = self._take()
        sign = 1
        if tok.kind == KIND_OP and tok.text == "-":
            sign = -1
            tok = self._take()
        if tok.kind != KIND_NUM or "." in tok.text or "e" in tok.text or "E" in tok.text:
            raise ExprSyntaxError("power exponent must be an integer literal", tok.offset)
        value = sign * int(tok.text)
        if not POW_MIN <= value <= POW_MAX:
            raise ExprSyntaxError(
                f"power exponent {value} outside [{POW_MIN}, {POW_MAX}]", tok.offset
            )
        return value

    def atom(self) -> Node:
        tok = self._take()
        if tok.kind == KIND_NUM:
            return Num(float(tok.text))
        if tok.kind == KIND_COEFF:
            self.seen_ordinals.add(tok.ordinal)
            return Coeff(tok.ordinal)
        if tok.kind == KIND_VAR:
            if self.known_vars is not None and tok.text not in self.known_vars:
                raise ExprSyntaxError(f"unknown identifier {tok.text!r}", tok.offset)
            if tok.text not in self.seen_vars:
                self.seen_vars.append(tok.text)
            return Var(tok.text)
        if tok.kind == KIND_FUNC:
            lp = self._take()
            if lp.kind != KIND_LPAREN:
                raise ExprSyntaxError(f"expected '(' after {tok.text}", lp.offset)
            self.depth += 1
            arg = self.expr()
            self.depth -= 1
            rp = self._take()
            if rp.kind != KIND_RPAREN:
                raise ExprSyntaxError("expected ')'", rp.offset)
            return Call(tok.text, arg)
        if tok.kind == KIND_LPAREN:
            self.depth += 1
            inner = self.expr()
            self.depth -= 1
            rp = self._take()
            if rp.kind != KIND_RPAREN:
                raise ExprSyntaxError("expected ')'", rp.offset)
            return inner
        raise ExprSyntaxError(f"unexpected token {tok.text!r}", tok.offset)


def _summands(node: Node, budget: int) -> list[tuple[int, Node]]:
    """Flatten the left spine of top-level '+'/'-' into (sign, node) pairs.

    ``budget`` is the number of joining operators recorded at paren depth 0.
    Flattening is capped by it: a parenthesized sum like "(x + y)" is an Add
    node in the AST but a single term in the source, and must stay one.
    """
    if budget > 0 and isinstance(node, Bin) and node.op in "+-":
        left = _summands(node.left, budget - 1)
        sign = 1 if node.op == "+" else -1
        return left + [(sign, node.right)]
    return [(1, node)]


def _negate(node: Node) -> Node:
    if isinstance(node, Neg):
        return node.child
    return Neg(node)


def _peel_negs(node: Node) -> tuple[int, Node]:
    sign = 1
    while isinstance(node, Neg):
        sign = -sign
        node = node.child
    return sign, node


def _extract_coeff(node: Node) -> tuple[int | None, Node, int]:
    """Factor a summand as coefficient * remainder.

    Walks the top-level '*'/'/' chain of the summand. A placeholder that is
    a bare multiplicative factor (leading like "c0*x" or trailing like
    "x*c0"; multiplication commutes) is the support coefficient; the
    leftmost wins when several are bare. Returns (ordinal, remainder, sign)
    with unary-minus wrappers on the summand and on the extracted factor
    folded into the sign. Placeholders inside divisors, exponents, or
    function arguments are shape parameters and stay inside the remainder;
    then the result is (None, node-with-outer-sign-stripped, sign).
    """
    outer_sign, node = _peel_negs(node)
    chain: list[tuple[str, Node]] = []
    spine_sign = 1
    cur: Node = node
    while True:
        if isinstance(cur, Neg):
            # "-c0*x" parses as (-c0)*x; the sign travels with the chain.
            spine_sign = -spine_sign
            cur = cur.child
        elif isinstance(cur, Bin) and cur.op in "*/":
            chain.append((cur.op, cur.right))
            cur = cur.left
        else:
            break
    factors = [("*", cur)] + list(reversed(chain))

    found: int | None = None
    ordinal = None
    coeff_sign = 1
    for idx, (op, factor) in enumerate(factors):
        factor_sign, core = _peel_negs(factor)
        if op == "*" and isinstance(core, Coeff):
            found, ordinal, coeff_sign = idx, core.ordinal, factor_sign
            break
    if found is None:
        # Inner sign flips stay part of the term; only top-level wrappers
        # were stripped from ``node``.
        return None, node, outer_sign

    remainder: Node | None = None
    for op, factor in factors[:found] + factors[found + 1 :]:
        if remainder is None:
            remainder = factor if op == "*" else Bin("/", Num(1.0), factor)
        else:
            remainder = Bin(op, remainder, factor)
    if remainder is None:
        remainder = Num(1.0)
    return ordinal, remainder, outer_sign * spine_sign * coeff_sign


def _build_terms(ast: Node, n_tokens: int, splits: list[int]) -> tuple[Term, ...]:
    """Pair each flattened summand with its contiguous token range.

    ``splits`` holds the token positions of the top-level joining operators
    recorded during the parse; a joining operator opens the span of the term
    it introduces, so spans are [0, s1), [s1, s2), ..., [sk, n_tokens).
    """
    parts = _summands(ast, len(splits))
    bounds = [0] + splits + [n_tokens]
    terms = []
    for k, (sign, node) in enumerate(parts):
        ordinal, remainder, inner_sign = _extract_coeff(node)
        phi = remainder if sign * inner_sign > 0 else _negate(remainder)
        span = frozenset(range(bounds[k], bounds[k + 1]))
        terms.append(Term(phi=phi, coeff_ordinal=ordinal, token_span=span))
    return tuple(terms)


def parse(text: str, variables: list[str] | tuple[str, ...] | None = None) -> EquationSkeleton:
    """Parse DSL text into an EquationSkeleton.

    When ``variables`` is given, any other identifier raises ExprSyntaxError
    ("unknown identifier"); when omitted, variables are inferred in order of
    first appearance. Placeholder ordinals must form a gap-free range
    starting at c0.
    """
    tokens = tokenize(text)
    if not tokens:
        raise ExprSyntaxError("empty expression", 0)
    parser = _Parser(tokens, text, set(variables) if variables is not None else None)
    ast = parser.parse()

    ordinals = parser.seen_ordinals
    coeff_count = len(ordinals)
    if ordinals and sorted(ordinals) != list(range(max(ordinals) + 1)):
        missing = min(set(range(max(ordinals) + 1)) - ordinals)
        raise ExprSyntaxError(f"placeholder ordinal gap: c{missing} missing", 0)

    if variables is not None:
        var_order = tuple(variables)
    else:
        var_order = tuple(parser.seen_vars)

    terms = _build_terms(ast, len(tokens), parser.top_level_splits)

    return EquationSkeleton(
        ast=ast,
        text=text,
        tokens=tuple(tokens),
        variables=var_order,
        coeff_count=coeff_count,
        terms=terms,
    )


def complexity(skeleton: EquationSkeleton) -> int:
    """AST node count used by the length penalty."""
    return node_count(skeleton.ast)


def evaluate(
    skeleton: EquationSkeleton, coeffs: np.ndarray | list[float], X: np.ndarray
) -> np.ndarray:
    """Evaluate a skeleton on an (N, n_vars) matrix, columns ordered like
    ``skeleton.variables``. Returns shape (N,); non-finite values propagate."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape[0] != skeleton.coeff_count:
        raise ValueError(
            f"expected {skeleton.coeff_count} coefficients, got {coeffs.shape[0]}"
        )
    if X.shape[1] != len(skeleton.variables):
        raise ValueError(
            f"expected {len(skeleton.variables)} input columns, got {X.shape[1]}"
        )
    env = {name: X[:, i] for i, name in enumerate(skeleton.variables)}
    out = eval_node(skeleton.ast, env, coeffs)
    return np.broadcast_to(out, (X.shape[0],)).astype(float)


def decompose_terms(skeleton: EquationSkeleton) -> tuple[Term, ...]:
    """Top-level additive terms with leading support coefficients factored
    out. Parenthesized sums used as a single operand stay one term."""
    return skeleton.terms
