"""Tests for the bundled integer linear solver."""

import io
import subprocess
import sys

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advflow.smt import smtlite
from advflow.smt.smtlite import SolverError, run


def solve_text(text, **kw):
    out = io.StringIO()
    run(text, out, **kw)
    return out.getvalue()


def parse_model(output):
    model = {}
    for line in output.splitlines():
        line = line.strip()
        if not line.startswith("(define-fun"):
            continue
        parts = line.replace(")", " ").split()
        name = parts[1]
        if parts[-1] == "":
            parts.pop()
        if "(-" in line:
            value = -int(line.rsplit("(- ", 1)[1].split(")")[0])
        else:
            value = int(parts[-1])
        model[name] = value
    return model


def test_sat_with_model():
    out = solve_text(
        "(declare-const x Int) (declare-const y Int)"
        "(assert (= (+ x y) 10)) (assert (>= x 3)) (assert (>= y 4))"
        "(check-sat) (get-model)"
    )
    assert out.splitlines()[0] == "sat"
    m = parse_model(out)
    assert m["x"] + m["y"] == 10
    assert m["x"] >= 3 and m["y"] >= 4


def test_unsat():
    out = solve_text(
        "(declare-const x Int) (assert (>= x 5)) (assert (<= x 4)) (check-sat)"
    )
    assert out.strip() == "unsat"


def test_get_model_after_unsat_is_an_error():
    out = solve_text(
        "(declare-const x Int) (assert (>= x 1)) (assert (<= x 0))"
        "(check-sat) (get-model)"
    )
    lines = out.splitlines()
    assert lines[0] == "unsat"
    assert lines[1] == '(error "model is not available")'


def test_get_model_before_any_check_is_an_error():
    out = solve_text("(declare-const x Int) (get-model)")
    assert out.strip() == '(error "model is not available")'


def test_products_distribute_over_sums():
    out = solve_text(
        "(declare-const x Int)"
        "(assert (= (* 2 (+ x 3)) 16))"
        "(check-sat) (get-model)"
    )
    assert parse_model(out)["x"] == 5
    out = solve_text(
        "(declare-const x Int)"
        "(assert (= (+ (* 3 x) (* x 2)) 25))"
        "(check-sat) (get-model)"
    )
    assert parse_model(out)["x"] == 5


def test_negative_literals_round_trip():
    out = solve_text(
        "(declare-const x Int) (assert (= x (- 7))) (check-sat) (get-model)"
    )
    assert parse_model(out)["x"] == -7
    assert "(- 7)" in out


def test_nonlinear_product_rejected():
    with pytest.raises(SolverError, match="nonlinear"):
        solve_text(
            "(declare-const x Int) (declare-const y Int)"
            "(assert (= (* x y) 6)) (check-sat)"
        )


def test_undeclared_symbol_rejected():
    with pytest.raises(SolverError, match="undeclared"):
        solve_text("(assert (= x 1)) (check-sat)")


def test_unbalanced_input_rejected():
    with pytest.raises(SolverError, match="unbalanced"):
        solve_text("(declare-const x Int) (assert (= x 1)")


def test_declaration_forms():
    out = solve_text("(declare-fun x () Int) (assert (= x 2)) (check-sat)")
    assert out.strip() == "sat"
    with pytest.raises(SolverError):
        solve_text("(declare-fun f (Int) Int) (check-sat)")
    with pytest.raises(SolverError):
        solve_text("(declare-const x Real) (check-sat)")


def test_implication():
    out = solve_text(
        "(declare-const x Int) (declare-const y Int)"
        "(assert (=> (>= x 5) (>= y 50))) (assert (= x 6))"
        "(assert (<= y 100)) (check-sat) (get-model)"
    )
    m = parse_model(out)
    assert m["x"] == 6 and m["y"] >= 50


def test_strict_comparisons_pin_integers():
    out = solve_text(
        "(declare-const x Int) (assert (> x 3)) (assert (< x 5))"
        "(check-sat) (get-model)"
    )
    assert parse_model(out)["x"] == 4


def test_negation_flips_polarity():
    out = solve_text(
        "(declare-const x Int) (assert (not (<= x 3))) (assert (<= x 4))"
        "(check-sat) (get-model)"
    )
    assert parse_model(out)["x"] == 4


def test_disjunction_picks_a_feasible_arm():
    out = solve_text(
        "(declare-const x Int)"
        "(assert (or (and (>= x 10) (<= x 4)) (= x 2)))"
        "(check-sat) (get-model)"
    )
    assert parse_model(out)["x"] == 2


def test_leaf_cap_reports_unknown():
    out = solve_text(
        "(declare-const x Int) (assert (= x 1)) (check-sat)", leaf_cap=0
    )
    assert out.strip() == "unknown"


def test_node_cap_reports_unknown():
    out = solve_text(
        "(declare-const x Int) (assert (= x 1)) (check-sat)", node_cap=1
    )
    assert out.strip() == "unknown"


def test_exit_stops_the_script():
    out = solve_text("(declare-const x Int) (exit) (check-sat)")
    assert out == ""


def test_frontmatter_commands_ignored():
    out = solve_text(
        '(set-logic QF_LIA) (set-info :status unknown) (set-option :x y)'
        "(declare-const x Int) (assert (= x 1)) (check-sat)"
    )
    assert out.strip() == "sat"


@st.composite
def feasible_system(draw):
    n_vars = draw(st.integers(2, 4))
    names = [f"v{i}" for i in range(n_vars)]
    point = {v: draw(st.integers(-50, 50)) for v in names}
    rows = []
    for _ in range(draw(st.integers(1, 6))):
        coeffs = {v: draw(st.integers(-3, 3)) for v in names}
        lhs = sum(c * point[v] for v, c in coeffs.items())
        slack = draw(st.integers(0, 20))
        rows.append((coeffs, lhs + slack))
    return names, point, rows


def render_le(coeffs, bound):
    terms = " ".join(f"(* {c} {v})" for v, c in coeffs.items())
    return f"(assert (<= (+ {terms} 0) {bound}))"


@given(feasible_system())
@settings(max_examples=40, deadline=None)
def test_feasible_systems_solve_and_models_verify(sys_):
    names, point, rows = sys_
    text = " ".join(f"(declare-const {v} Int)" for v in names)
    # keep the search box finite so every instance terminates quickly
    for v in names:
        text += f" (assert (>= {v} (- 200))) (assert (<= {v} 200))"
    for coeffs, bound in rows:
        text += " " + render_le(coeffs, bound)
    out = solve_text(text + " (check-sat) (get-model)")
    assert out.splitlines()[0] == "sat"
    m = parse_model(out)
    for coeffs, bound in rows:
        assert sum(c * m[v] for v, c in coeffs.items()) <= bound


@given(st.integers(-1000, 1000))
@settings(max_examples=25, deadline=None)
def test_empty_integer_interval_is_unsat(c):
    out = solve_text(
        f"(declare-const x Int) (assert (<= x {c})) (assert (>= x {c + 1}))"
        "(check-sat)"
    )
    assert out.strip() == "unsat"


def run_cli(stdin_text, *args):
    return subprocess.run(
        [sys.executable, smtlite.__file__, *args],
        input=stdin_text,
        capture_output=True,
        text=True,
        timeout=60,
    )


def test_cli_reads_stdin_and_exits_zero():
    got = run_cli("(declare-const x Int) (assert (= x 3)) (check-sat)", "-")
    assert got.returncode == 0
    assert got.stdout.strip() == "sat"


def test_cli_solver_error_exits_two():
    got = run_cli(
        "(declare-const x Int) (declare-const y Int)"
        "(assert (= (* x y) 1)) (check-sat)",
        "-",
    )
    assert got.returncode == 2
    assert got.stderr.startswith("smtlite:")


def test_cli_cap_flags():
    got = run_cli(
        "(declare-const x Int) (assert (= x 1)) (check-sat)",
        "--leaf-cap", "0", "-",
    )
    assert got.returncode == 0
    assert got.stdout.strip() == "unknown"
