"""Dimensional analysis over the expression tree.

Units are rational exponent vectors over the seven SI base dimensions.
Coefficient placeholders carry free unit vectors; propagation collects
linear constraints on them (additive operands must match, transcendental
arguments must be dimensionless, the root must match the target) and counts
a violation only when a constraint is inconsistent with everything accepted
before it. Inconsistent constraints are skipped so one bad node cannot
cascade into a violation count for the whole tree.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .nodes import Bin, Call, Coeff, Neg, Node, Num, Pow, Var
from .parser import EquationSkeleton

DIMENSIONS = ("m", "kg", "s", "A", "K", "mol", "cd")
_NDIM = len(DIMENSIONS)

_TRANSCENDENTAL = {"exp", "log", "sin", "cos", "tanh"}


@dataclass(frozen=True)
class UnitVector:
    """Exponents over the SI base dimensions, as exact rationals."""

    exps: tuple[Fraction, ...]

    @staticmethod
    def dimensionless() -> "UnitVector":
        return UnitVector(tuple(Fraction(0) for _ in range(_NDIM)))

    @staticmethod
    def of(**dims: int | Fraction) -> "UnitVector":
        exps = [Fraction(0)] * _NDIM
        for name, value in dims.items():
            exps[DIMENSIONS.index(name)] = Fraction(value)
        return UnitVector(tuple(exps))

    def __add__(self, other: "UnitVector") -> "UnitVector":
        return UnitVector(tuple(a + b for a, b in zip(self.exps, other.exps)))

    def __sub__(self, other: "UnitVector") -> "UnitVector":
        return UnitVector(tuple(a - b for a, b in zip(self.exps, other.exps)))

    def scale(self, k: int | Fraction) -> "UnitVector":
        k = Fraction(k)
        return UnitVector(tuple(a * k for a in self.exps))

    def is_zero(self) -> bool:
        return all(a == 0 for a in self.exps)


_ZERO = UnitVector.dimensionless()


class _SymUnit:
    """A unit that is an affine combination of placeholder unit variables:
    const + sum_p alpha[p] * u_p."""

    __slots__ = ("alpha", "const")

    def __init__(self, alpha: dict[int, Fraction] | None = None, const: UnitVector = _ZERO):
        self.alpha = {p: a for p, a in (alpha or {}).items() if a != 0}
        self.const = const

    def __add__(self, other: "_SymUnit") -> "_SymUnit":
        alpha = dict(self.alpha)
        for p, a in other.alpha.items():
            alpha[p] = alpha.get(p, Fraction(0)) + a
        return _SymUnit(alpha, self.const + other.const)

    def __sub__(self, other: "_SymUnit") -> "_SymUnit":
        alpha = dict(self.alpha)
        for p, a in other.alpha.items():
            alpha[p] = alpha.get(p, Fraction(0)) - a
        return _SymUnit(alpha, self.const - other.const)

    def scale(self, k: int | Fraction) -> "_SymUnit":
        k = Fraction(k)
        return _SymUnit({p: a * k for p, a in self.alpha.items()}, self.const.scale(k))


class _LinearSystem:
    """Incremental rational Gaussian elimination.

    Rows are (coeffs over placeholder ordinals, rhs UnitVector) with the
    pivot at the smallest ordinal; new rows are reduced against all stored
    pivots before insertion, so inconsistency shows up as an empty
    coefficient set with a nonzero rhs.
    """

    def __init__(self) -> None:
        self.rows: dict[int, tuple[dict[int, Fraction], UnitVector]] = {}

    def try_add(self, coeffs: dict[int, Fraction], rhs: UnitVector) -> bool:
        coeffs = {p: a for p, a in coeffs.items() if a != 0}
        # Eliminate to fixpoint: substitution against one pivot can surface
        # ordinals owned by later pivots.
        while True:
            pivot = next((p for p in sorted(coeffs) if p in self.rows), None)
            if pivot is None:
                break
            factor = coeffs[pivot]
            row_coeffs, row_rhs = self.rows[pivot]
            for q, a in row_coeffs.items():
                coeffs[q] = coeffs.get(q, Fraction(0)) - factor * a
            rhs = rhs - row_rhs.scale(factor)
            coeffs = {p: a for p, a in coeffs.items() if a != 0}
        if not coeffs:
            return rhs.is_zero()
        pivot = min(coeffs)
        inv = 1 / coeffs[pivot]
        normalized = {p: a * inv for p, a in coeffs.items()}
        self.rows[pivot] = (normalized, rhs.scale(inv))
        return True

    def solve(self, ordinals: set[int]) -> dict[int, UnitVector]:
        """Particular solution: free placeholders get dimensionless units."""
        assignment: dict[int, UnitVector] = {p: _ZERO for p in ordinals}
        for pivot in sorted(self.rows, reverse=True):
            coeffs, rhs = self.rows[pivot]
            acc = rhs
            for q, a in coeffs.items():
                if q != pivot:
                    acc = acc - assignment.get(q, _ZERO).scale(a)
            assignment[pivot] = acc  # pivot coefficient is normalized to 1
        return assignment


class _Propagator:
    def __init__(self, var_units: dict[str, UnitVector]):
        self.var_units = var_units
        self.system = _LinearSystem()
        self.violations = 0
        self.ordinals: set[int] = set()

    def constrain_equal(self, a: _SymUnit, b: _SymUnit) -> None:
        diff = a - b
        if not self.system.try_add(dict(diff.alpha), _ZERO - diff.const):
            self.violations += 1

    def visit(self, node: Node) -> _SymUnit:
        if isinstance(node, Num):
            return _SymUnit()
        if isinstance(node, Var):
            try:
                return _SymUnit(const=self.var_units[node.name])
            except KeyError:
                raise ValueError(f"variable {node.name!r} has no unit annotation") from None
        if isinstance(node, Coeff):
            self.ordinals.add(node.ordinal)
            return _SymUnit({node.ordinal: Fraction(1)})
        if isinstance(node, Neg):
            return self.visit(node.child)
        if isinstance(node, Bin):
            left = self.visit(node.left)
            right = self.visit(node.right)
            if node.op in "+-":
                self.constrain_equal(left, right)
                return left
            if node.op == "*":
                return left + right
            return left - right
        if isinstance(node, Pow):
            return self.visit(node.base).scale(node.exponent)
        if isinstance(node, Call):
            arg = self.visit(node.arg)
            if node.fn in _TRANSCENDENTAL:
                self.constrain_equal(arg, _SymUnit())
                return _SymUnit()
            if node.fn == "sqrt":
                return arg.scale(Fraction(1, 2))
            return arg  # abs preserves units
        raise TypeError(f"unknown node {node!r}")


def check_dimensions(
    skeleton: EquationSkeleton,
    var_units: dict[str, UnitVector],
    target: UnitVector,
) -> int:
    """Count dimensional violations; 0 means a consistent assignment of
    placeholder units exists (see solve_placeholder_units)."""
    violations, _ = check_dimensions_with_assignment(skeleton, var_units, target)
    return violations


def check_dimensions_with_assignment(
    skeleton: EquationSkeleton,
    var_units: dict[str, UnitVector],
    target: UnitVector,
) -> tuple[int, dict[int, UnitVector] | None]:
    """As check_dimensions, also returning a witness assignment of
    placeholder units when the accepted constraint system is consistent
    (always, by construction) and no violation occurred."""
    prop = _Propagator(var_units)
    root = prop.visit(skeleton.ast)
    prop.constrain_equal(root, _SymUnit(const=target))
    if prop.violations:
        return prop.violations, None
    return 0, prop.system.solve(prop.ordinals)


def propagate_with_assignment(
    node: Node,
    var_units: dict[str, UnitVector],
    assignment: dict[int, UnitVector],
) -> UnitVector | None:
    """Forward unit evaluation with concrete placeholder units; returns None
    where a constraint fails. Used by tests to re-verify solver output."""
    if isinstance(node, Num):
        return _ZERO
    if isinstance(node, Var):
        return var_units[node.name]
    if isinstance(node, Coeff):
        return assignment.get(node.ordinal, _ZERO)
    if isinstance(node, Neg):
        return propagate_with_assignment(node.child, var_units, assignment)
    if isinstance(node, Bin):
        left = propagate_with_assignment(node.left, var_units, assignment)
        right = propagate_with_assignment(node.right, var_units, assignment)
        if left is None or right is None:
            return None
        if node.op in "+-":
            return left if left == right else None
        if node.op == "*":
            return left + right
        return left - right
    if isinstance(node, Pow):
        base = propagate_with_assignment(node.base, var_units, assignment)
        return None if base is None else base.scale(node.exponent)
    if isinstance(node, Call):
        arg = propagate_with_assignment(node.arg, var_units, assignment)
        if arg is None:
            return None
        if node.fn in _TRANSCENDENTAL:
            return _ZERO if arg.is_zero() else None
        if node.fn == "sqrt":
            return arg.scale(Fraction(1, 2))
        return arg
    raise TypeError(f"unknown node {node!r}")
