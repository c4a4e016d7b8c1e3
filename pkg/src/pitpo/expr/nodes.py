"""AST node types, canonical printing, node counting and evaluation.

Nodes are frozen dataclasses so structural equality and hashing come for
free. Evaluation is vectorized over numpy columns and deliberately lets
non-finite values propagate (no masking, no clipping); downstream code is
responsible for deciding what a NaN prediction means.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tokens import FUNCTIONS


class Node:
    """Base class; all concrete nodes are frozen dataclasses."""

    __slots__ = ()


@dataclass(frozen=True)
class Num(Node):
    value: float


@dataclass(frozen=True)
class Var(Node):
    name: str


@dataclass(frozen=True)
class Coeff(Node):
    ordinal: int


@dataclass(frozen=True)
class Neg(Node):
    child: Node


@dataclass(frozen=True)
class Bin(Node):
    op: str  # one of + - * /
    left: Node
    right: Node


@dataclass(frozen=True)
class Pow(Node):
    base: Node
    exponent: int  # integer literal, restricted to -3..3 by the parser


@dataclass(frozen=True)
class Call(Node):
    fn: str  # member of FUNCTIONS
    arg: Node


# Precedence levels for printing: additive < multiplicative < unary < power.
_PREC_ADD = 1
_PREC_MUL = 2
_PREC_NEG = 3
_PREC_POW = 4
_PREC_ATOM = 5


def _precedence(node: Node) -> int:
    if isinstance(node, Bin):
        return _PREC_ADD if node.op in "+-" else _PREC_MUL
    if isinstance(node, Neg):
        return _PREC_NEG
    if isinstance(node, Pow):
        return _PREC_POW
    if isinstance(node, Num) and node.value < 0:
        return _PREC_NEG
    return _PREC_ATOM


def _format_number(value: float) -> str:
    if float(value).is_integer() and abs(value) < 1e16:
        return str(int(value))
    return repr(float(value))


def to_text(node: Node) -> str:
    """Canonical infix printing with minimal parentheses.

    Parentheses are inserted exactly where re-parsing would otherwise change
    the tree: right operands of equal precedence under left-associative
    operators, and any lower-precedence subtree under a tighter operator.
    """
    if isinstance(node, Num):
        return _format_number(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Coeff):
        return f"c{node.ordinal}"
    if isinstance(node, Call):
        return f"{node.fn}({to_text(node.arg)})"
    if isinstance(node, Neg):
        inner = to_text(node.child)
        if _precedence(node.child) < _PREC_NEG:
            return f"-({inner})"
        return f"-{inner}"
    if isinstance(node, Pow):
        base = to_text(node.base)
        if _precedence(node.base) < _PREC_ATOM:
            base = f"({base})"
        return f"{base}^{node.exponent}"
    if isinstance(node, Bin):
        prec = _precedence(node)
        left = to_text(node.left)
        right = to_text(node.right)
        if _precedence(node.left) < prec:
            left = f"({left})"
        # Left-associative grammar: an equal-precedence right child must keep
        # its parentheses or the reparse would rebind it to the left.
        if _precedence(node.right) <= prec:
            right = f"({right})"
        if node.op in "+-":
            return f"{left} {node.op} {right}"
        return f"{left}{node.op}{right}"
    raise TypeError(f"unknown node {node!r}")


def node_count(node: Node) -> int:
    """Number of AST nodes: every operator, function, variable, placeholder
    and literal counts one. The integer exponent of a power counts as a
    literal node of its own."""
    if isinstance(node, (Num, Var, Coeff)):
        return 1
    if isinstance(node, Neg):
        return 1 + node_count(node.child)
    if isinstance(node, Call):
        return 1 + node_count(node.arg)
    if isinstance(node, Pow):
        return 2 + node_count(node.base)
    if isinstance(node, Bin):
        return 1 + node_count(node.left) + node_count(node.right)
    raise TypeError(f"unknown node {node!r}")


def collect(node: Node, kind: type) -> list[Node]:
    """All descendants (including ``node``) of the given class, preorder."""
    found: list[Node] = []
    stack = [node]
    while stack:
        cur = stack.pop()
        if isinstance(cur, kind):
            found.append(cur)
        if isinstance(cur, Neg):
            stack.append(cur.child)
        elif isinstance(cur, Call):
            stack.append(cur.arg)
        elif isinstance(cur, Pow):
            stack.append(cur.base)
        elif isinstance(cur, Bin):
            stack.append(cur.right)
            stack.append(cur.left)
    return found


_UNARY_NP = {
    "exp": np.exp,
    "log": np.log,
    "sin": np.sin,
    "cos": np.cos,
    "tanh": np.tanh,
    "sqrt": np.sqrt,
    "abs": np.abs,
}

assert set(_UNARY_NP) == set(FUNCTIONS)


def eval_node(node: Node, env: dict[str, np.ndarray], coeffs: np.ndarray) -> np.ndarray:
    """Evaluate ``node`` over column arrays. Non-finite values propagate."""
    with np.errstate(all="ignore"):
        return np.asarray(_eval(node, env, coeffs), dtype=float)


def _eval(node: Node, env, coeffs):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        return env[node.name]
    if isinstance(node, Coeff):
        return float(coeffs[node.ordinal])
    if isinstance(node, Neg):
        return -_eval(node.child, env, coeffs)
    if isinstance(node, Call):
        return _UNARY_NP[node.fn](_eval(node.arg, env, coeffs))
    if isinstance(node, Pow):
        base = _eval(node.base, env, coeffs)
        return np.power(np.asarray(base, dtype=float), node.exponent)
    if isinstance(node, Bin):
        a = _eval(node.left, env, coeffs)
        b = _eval(node.right, env, coeffs)
        if node.op == "+":
            return a + b
        if node.op == "-":
            return a - b
        if node.op == "*":
            return a * b
        # np.divide also covers scalar/scalar: Python floats would raise
        # ZeroDivisionError where an array would quietly carry inf/nan.
        return np.divide(a, b)
    raise TypeError(f"unknown node {node!r}")


def eval_with_coeff_grad(
    node: Node, env: dict[str, np.ndarray], coeffs: np.ndarray, n_coeffs: int
) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate and differentiate with respect to the coefficient vector.

    Reverse-mode sweep over the tree. Returns (value, jac) where value has
    shape (N,) and jac has shape (N, n_coeffs). abs() uses sign() as its
    derivative (zero at the kink).
    """
    n = 1
    for arr in env.values():
        n = max(n, np.size(arr))
    values: dict[int, np.ndarray] = {}

    with np.errstate(all="ignore"):

        def forward(nd: Node) -> np.ndarray:
            out = np.asarray(_eval_memo(nd), dtype=float)
            values[id(nd)] = out
            return out

        def _eval_memo(nd: Node):
            if isinstance(nd, Num):
                return np.full(n, nd.value)
            if isinstance(nd, Var):
                return np.broadcast_to(np.asarray(env[nd.name], dtype=float), (n,)).copy()
            if isinstance(nd, Coeff):
                return np.full(n, float(coeffs[nd.ordinal]))
            if isinstance(nd, Neg):
                return -forward(nd.child)
            if isinstance(nd, Call):
                return _UNARY_NP[nd.fn](forward(nd.arg))
            if isinstance(nd, Pow):
                return np.power(forward(nd.base), nd.exponent)
            if isinstance(nd, Bin):
                a = forward(nd.left)
                b = forward(nd.right)
                if nd.op == "+":
                    return a + b
                if nd.op == "-":
                    return a - b
                if nd.op == "*":
                    return a * b
                return a / b
            raise TypeError(f"unknown node {nd!r}")

        value = forward(node)
        jac = np.zeros((n, n_coeffs))

        def backward(nd: Node, adj: np.ndarray) -> None:
            if isinstance(nd, Num) or isinstance(nd, Var):
                return
            if isinstance(nd, Coeff):
                jac[:, nd.ordinal] += adj
                return
            if isinstance(nd, Neg):
                backward(nd.child, -adj)
                return
            if isinstance(nd, Call):
                a = values[id(nd.arg)]
                if nd.fn == "exp":
                    d = values[id(nd)]
                elif nd.fn == "log":
                    d = 1.0 / a
                elif nd.fn == "sin":
                    d = np.cos(a)
                elif nd.fn == "cos":
                    d = -np.sin(a)
                elif nd.fn == "tanh":
                    d = 1.0 - values[id(nd)] ** 2
                elif nd.fn == "sqrt":
                    d = 0.5 / values[id(nd)]
                else:  # abs
                    d = np.sign(a)
                backward(nd.arg, adj * d)
                return
            if isinstance(nd, Pow):
                b = values[id(nd.base)]
                backward(nd.base, adj * nd.exponent * np.power(b, nd.exponent - 1))
                return
            if isinstance(nd, Bin):
                a = values[id(nd.left)]
                b = values[id(nd.right)]
                if nd.op == "+":
                    backward(nd.left, adj)
                    backward(nd.right, adj)
                elif nd.op == "-":
                    backward(nd.left, adj)
                    backward(nd.right, -adj)
                elif nd.op == "*":
                    backward(nd.left, adj * b)
                    backward(nd.right, adj * a)
                else:
                    backward(nd.left, adj / b)
                    backward(nd.right, -adj * a / (b * b))
                return
            raise TypeError(f"unknown node {nd!r}")

        backward(node, np.ones(n))
    return value, jac
