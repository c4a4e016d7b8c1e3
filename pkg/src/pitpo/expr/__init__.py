"""Expression DSL: tokens, grammar, ASTs, evaluation, units."""

from .nodes import (
    Bin,
    Call,
    Coeff,
    Neg,
    Node,
    Num,
    Pow,
    Var,
    eval_node,
    eval_with_coeff_grad,
    node_count,
    to_text,
)
from .parser import (
    EquationSkeleton,
    Term,
    complexity,
    decompose_terms,
    evaluate,
    parse,
)
from .tokens import FUNCTIONS, ExprSyntaxError, Token, render, tokenize
from .units import (
    DIMENSIONS,
    UnitVector,
    check_dimensions,
    check_dimensions_with_assignment,
    propagate_with_assignment,
)

__all__ = [
    "Bin",
    "Call",
    "Coeff",
    "DIMENSIONS",
    "EquationSkeleton",
    "ExprSyntaxError",
    "FUNCTIONS",
    "Neg",
    "Node",
    "Num",
    "Pow",
    "Term",
    "Token",
    "UnitVector",
    "Var",
    "check_dimensions",
    "check_dimensions_with_assignment",
    "complexity",
    "decompose_terms",
    "eval_node",
    "eval_with_coeff_grad",
    "evaluate",
    "node_count",
    "parse",
    "propagate_with_assignment",
    "render",
    "tokenize",
    "to_text",
]
