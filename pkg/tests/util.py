"""Shared helpers for the test suite: random AST generation."""

from __future__ import annotations

import numpy as np

from pitpo.expr import Bin, Call, Coeff, Neg, Node, Num, Pow, Var
from pitpo.expr.tokens import FUNCTIONS


def random_ast(
    rng: np.random.Generator,
    variables: tuple[str, ...] = ("x", "y"),
    max_depth: int = 4,
    _next_coeff: list[int] | None = None,
) -> Node:
    """Random well-formed AST. Placeholder ordinals are allocated
    sequentially so the result always parses back without ordinal gaps."""
    if _next_coeff is None:
        _next_coeff = [0]
    leaf_kinds = ["var", "coeff", "num"]
    inner_kinds = ["bin", "bin", "neg", "call", "pow"]
    if max_depth <= 0:
        kind = leaf_kinds[rng.integers(len(leaf_kinds))]
    else:
        pool = leaf_kinds + inner_kinds
        kind = pool[rng.integers(len(pool))]
    if kind == "var":
        return Var(variables[rng.integers(len(variables))])
    if kind == "coeff":
        node = Coeff(_next_coeff[0])
        _next_coeff[0] += 1
        return node
    if kind == "num":
        return Num(float(rng.integers(1, 5)))
    if kind == "neg":
        return Neg(random_ast(rng, variables, max_depth - 1, _next_coeff))
    if kind == "call":
        fn = FUNCTIONS[rng.integers(len(FUNCTIONS))]
        return Call(fn, random_ast(rng, variables, max_depth - 1, _next_coeff))
    if kind == "pow":
        exponent = int(rng.choice([-3, -2, -1, 2, 3]))
        return Pow(random_ast(rng, variables, max_depth - 1, _next_coeff), exponent)
    op = "+-*/"[rng.integers(4)]
    left = random_ast(rng, variables, max_depth - 1, _next_coeff)
    right = random_ast(rng, variables, max_depth - 1, _next_coeff)
    return Bin(op, left, right)
