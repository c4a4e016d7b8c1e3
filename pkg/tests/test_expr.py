"""Tokenizer, parser, term decomposition, evaluation and unit checks."""

import numpy as np
import pytest

from pitpo.expr import (
    ExprSyntaxError,
    UnitVector,
    check_dimensions,
    check_dimensions_with_assignment,
    complexity,
    eval_node,
    evaluate,
    node_count,
    parse,
    propagate_with_assignment,
    to_text,
    tokenize,
)
from util import random_ast


class TestTokenizer:
    def test_kinds(self):
        toks = tokenize("c0*sin(x) + 2.5")
        assert [t.kind for t in toks] == [
            "coeff", "op", "func", "lparen", "var", "rparen", "op", "num",
        ]

    def test_offsets_skip_whitespace(self):
        toks = tokenize("x  + y")
        assert [(t.text, t.offset) for t in toks] == [("x", 0), ("+", 3), ("y", 5)]

    def test_unknown_character(self):
        with pytest.raises(ExprSyntaxError) as err:
            tokenize("x @ y")
        assert err.value.offset == 2

    def test_placeholder_classification(self):
        toks = tokenize("c12 + cos(ca)")
        assert toks[0].kind == "coeff" and toks[0].ordinal == 12
        assert toks[2].kind == "func"
        assert toks[4].kind == "var"  # "ca" is not c<digits>


class TestParse:
    def test_single_term(self):
        s = parse("c0*x")
        assert len(s.terms) == 1
        assert complexity(s) == 3
        assert s.coeff_count == 1

    def test_two_term_spans_partition(self):
        s = parse("c0*x + c1*sin(x)")
        assert len(s.terms) == 2
        spans = s.term_spans
        assert sorted(spans[0]) == [0, 1, 2]
        # the joining '+' (index 3) opens the second term's span
        assert sorted(spans[1]) == [3, 4, 5, 6, 7, 8, 9]
        all_indices = sorted(i for sp in spans for i in sp)
        assert all_indices == list(range(len(s.tokens)))

    def test_ordinal_gap_rejected(self):
        with pytest.raises(ExprSyntaxError, match="ordinal gap"):
            parse("c0*x + c2*y")

    def test_unknown_identifier_with_declared_vars(self):
        with pytest.raises(ExprSyntaxError, match="unknown identifier"):
            parse("c0*q", variables=["x"])

    def test_syntax_error_offset(self):
        with pytest.raises(ExprSyntaxError) as err:
            parse("c0*(x +")
        assert err.value.offset == 7

    def test_pow_exponent_range(self):
        parse("x^3")
        parse("x^-3")
        with pytest.raises(ExprSyntaxError):
            parse("x^4")
        with pytest.raises(ExprSyntaxError):
            parse("x^0.5")

    def test_parenthesized_sum_is_one_term(self):
        s = parse("a - (b + c)")
        assert len(s.terms) == 2

    def test_complexity_values(self):
        assert complexity(parse("c0*x + c1")) == 5
        assert complexity(parse("c0*sin(x)")) == 4
        assert complexity(parse("x")) == 1
        assert complexity(parse("x^2")) == 3


class TestTermDecomposition:
    def test_leading_coefficient_factored(self):
        s = parse("c0*x + c1*exp(x) - c2*x")
        phis = [to_text(t.phi) for t in s.terms]
        assert phis == ["x", "exp(x)", "-x"]
        assert [t.coeff_ordinal for t in s.terms] == [0, 1, 2]

    def test_implicit_unit_term(self):
        s = parse("x + c0")
        assert [to_text(t.phi) for t in s.terms] == ["x", "1"]
        assert s.terms[0].implicit_unit
        assert s.terms[1].coeff_ordinal == 0

    def test_inner_placeholder_is_shape_parameter(self):
        s = parse("c0*x*sin(c1*x)")
        assert len(s.terms) == 1
        assert s.terms[0].coeff_ordinal == 0
        assert "c1" in to_text(s.terms[0].phi)

    def test_division_leading_coefficient(self):
        s = parse("c0/x")
        assert to_text(s.terms[0].phi) == "1/x"
        assert s.terms[0].coeff_ordinal == 0

    def test_decomposition_identity(self):
        # f(X) == sum_j b_j * phi_j(X) for random data, many shapes
        rng = np.random.default_rng(7)
        texts = [
            "c0*x + c1*sin(x) + c2",
            "-c0*x + x*y - c1/x",
            "c0*tanh(x) - (x + y) + c1*x^2",
            "x - -c0*y",
        ]
        for text in texts:
            s = parse(text)
            X = rng.uniform(0.5, 2.0, size=(20, len(s.variables)))
            b = rng.normal(size=s.coeff_count)
            env = {n: X[:, i] for i, n in enumerate(s.variables)}
            total = np.zeros(20)
            for t in s.terms:
                w = 1.0 if t.coeff_ordinal is None else b[t.coeff_ordinal]
                total = total + w * eval_node(t.phi, env, b)
            assert np.allclose(total, evaluate(s, b, X), equal_nan=True)


class TestRoundTrip:
    def test_structural_round_trip_random(self):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            ast = random_ast(rng)
            text = to_text(ast)
            reparsed = parse(text)
            assert reparsed.ast == ast, text

    def test_token_round_trip_random(self):
        rng = np.random.default_rng(43)
        for _ in range(300):
            ast = random_ast(rng)
            text = to_text(ast)
            toks = [t.text for t in tokenize(text)]
            again = [t.text for t in tokenize(to_text(parse(text).ast))]
            assert toks == again

    def test_spans_partition_random(self):
        rng = np.random.default_rng(44)
        for _ in range(300):
            ast = random_ast(rng)
            s = parse(to_text(ast))
            seen: set[int] = set()
            for span in s.term_spans:
                assert not (span & seen)
                seen |= span
            assert seen == set(range(len(s.tokens)))


class TestEvaluate:
    def test_division_by_zero_propagates(self):
        s = parse("c0/x")
        out = evaluate(s, [1.0], np.array([[0.0], [2.0]]))
        assert np.isinf(out[0]) and out[1] == 0.5

    def test_log_negative_is_nan(self):
        out = evaluate(parse("log(x)"), [], np.array([[-1.0]]))
        assert np.isnan(out[0])

    def test_wrong_coeff_count(self):
        with pytest.raises(ValueError):
            evaluate(parse("c0*x"), [], np.array([[1.0]]))

    def test_tanh_value(self):
        out = evaluate(parse("tanh(x)"), [], np.array([[1.0]]))
        assert abs(out[0] - 0.7615941559557649) < 1e-12


_M = UnitVector.of(m=1)
_V = UnitVector.of(m=1, s=-1)
_S = UnitVector.of(s=1)
_DIMLESS = UnitVector.dimensionless()


class TestUnits:
    def test_mixed_sum_violates(self):
        s = parse("x + v")
        n = check_dimensions(s, {"x": _M, "v": _V}, _M)
        assert n >= 1

    def test_consistent_sum(self):
        s = parse("x + v*t")
        assert check_dimensions(s, {"x": _M, "v": _V, "t": _S}, _M) == 0

    def test_placeholder_absorbs_units(self):
        s = parse("sin(c0*x)")
        assert check_dimensions(s, {"x": _M}, _DIMLESS) == 0

    def test_bare_dimensional_argument_violates(self):
        s = parse("sin(x)")
        assert check_dimensions(s, {"x": _M}, _DIMLESS) == 1

    def test_root_unit_mismatch(self):
        s = parse("x")
        assert check_dimensions(s, {"x": _M}, _V) == 1

    def test_sqrt_and_pow(self):
        s = parse("sqrt(x*x)")
        assert check_dimensions(s, {"x": _M}, _M) == 0
        s2 = parse("x^2")
        assert check_dimensions(s2, {"x": _M}, UnitVector.of(m=2)) == 0

    def test_solver_soundness_random(self):
        # whenever the checker reports zero violations, the returned
        # assignment must satisfy every constraint under direct propagation
        rng = np.random.default_rng(45)
        var_units = {"x": _M, "y": _V}
        targets = [_DIMLESS, _M, _V]
        checked = 0
        for _ in range(500):
            ast = random_ast(rng, max_depth=3)
            s = parse(to_text(ast))
            units = {name: var_units.get(name, _DIMLESS) for name in s.variables}
            target = targets[rng.integers(len(targets))]
            violations, assignment = check_dimensions_with_assignment(s, units, target)
            if violations == 0:
                assert assignment is not None
                result = propagate_with_assignment(s.ast, units, assignment)
                assert result is not None and result == target
                checked += 1
        assert checked > 20  # the property must actually fire
