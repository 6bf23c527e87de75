#!/usr/bin/env python3
"""Self-contained SMT-LIB v2.6 subset solver for quantifier-free integer
linear arithmetic.

Runs standalone with only the standard library (safe under ``python -S``)
so a fresh subprocess starts in milliseconds.  Supported grammar:

* ``(set-logic ...)``, ``(set-info ...)``, ``(set-option ...)`` - ignored
* ``(declare-const x Int)`` / ``(declare-fun x () Int)``
* ``(assert <term>)`` where terms combine ``and``/``or``/``not`` over
  linear atoms ``=``, ``<=``, ``<``, ``>=``, ``>`` of integer polynomials
  built from ``+``, ``-``, ``*`` (multiplication by constants only)
* ``(check-sat)``, ``(get-model)``, ``(exit)``

Decision procedure: disjunctions are branched depth-first in script
order; each conjunctive leaf goes through exact integer interval
propagation, then a float phase-1 simplex whose vertex guides a
backtracking search over integer assignments with interval splitting.
Verdicts are ``sat`` (model exactly verified against every atom),
``unsat`` (finite search exhausted or propagation contradiction), or
``unknown`` (branch or node caps hit).  Everything is deterministic:
no randomness, no wall-clock dependence.
"""

import sys

NEG_INF = None  # bound sentinels: None means unbounded
POS_INF = None

LEAF_CAP_DEFAULT = 256
NODE_CAP_DEFAULT = 6_000
PROP_ROUNDS = 100
CLAMP = 10**12


class SolverError(Exception):
    pass


class Caps(Exception):
    """Raised internally when a search budget runs out."""


# ---------------------------------------------------------------------------
# s-expression reader


def tokenize(text):
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c in " \t\r\n":
            i += 1
        elif c == ";":
            while i < n and text[i] != "\n":
                i += 1
        elif c in "()":
            yield c
            i += 1
        elif c == '"':
            j = i + 1
            while j < n and text[j] != '"':
                j += 1
            yield text[i : j + 1]
            i = j + 1
        elif c == "|":
            j = i + 1
            while j < n and text[j] != "|":
                j += 1
            yield text[i + 1 : j]
            i = j + 1
        else:
            j = i
            while j < n and text[j] not in " \t\r\n();\"|":
                j += 1
            yield text[i:j]
            i = j


def parse_sexprs(text):
    stack = [[]]
    for tok in tokenize(text):
        if tok == "(":
            stack.append([])
        elif tok == ")":
            if len(stack) < 2:
                raise SolverError("unbalanced ')'")
            done = stack.pop()
            stack[-1].append(done)
        else:
            stack[-1].append(tok)
    if len(stack) != 1:
        raise SolverError("unbalanced '('")
    return stack[0]


# ---------------------------------------------------------------------------
# terms: linear expressions {var: coeff} + constant, all integers


def _is_int(tok):
    if isinstance(tok, str):
        if tok and (tok[0] in "-+" and tok[1:].isdigit() or tok.isdigit()):
            return True
    return False


def linear(term, decls):
    """Evaluate a term to (coeffs dict, constant)."""
    if isinstance(term, str):
        if _is_int(term):
            return {}, int(term)
        if term in decls:
            return {term: 1}, 0
        raise SolverError("undeclared symbol %r" % term)
    if not term:
        raise SolverError("empty term")
    op = term[0]
    args = term[1:]
    if op == "+":
        coeffs, const = {}, 0
        for a in args:
            c2, k2 = linear(a, decls)
            _accumulate(coeffs, c2, 1)
            const += k2
        return coeffs, const
    if op == "-":
        if len(args) == 1:
            c, k = linear(args[0], decls)
            return {v: -a for v, a in c.items()}, -k
        coeffs, const = linear(args[0], decls)
        coeffs = dict(coeffs)
        for a in args[1:]:
            c2, k2 = linear(a, decls)
            _accumulate(coeffs, c2, -1)
            const -= k2
        return coeffs, const
    if op == "*":
        coeffs, const = {}, 1
        for a in args:
            c2, k2 = linear(a, decls)
            if c2 and coeffs:
                raise SolverError("nonlinear product")
            # (coeffs + const) * (c2 + k2) with at most one side linear
            merged = {v: a2 * k2 for v, a2 in coeffs.items()}
            for v, a2 in c2.items():
                merged[v] = merged.get(v, 0) + a2 * const
            coeffs = {v: a2 for v, a2 in merged.items() if a2 != 0}
            const *= k2
        return coeffs, const
    raise SolverError("unsupported arithmetic op %r" % op)


def _accumulate(target, other, sign):
    for v, a in other.items():
        target[v] = target.get(v, 0) + sign * a
        if target[v] == 0:
            del target[v]


# ---------------------------------------------------------------------------
# formulas: ('le', coeffs, ub) atoms, ('and', [...]), ('or', [...]),
# True / False constants.  Equality becomes a pair of 'le' atoms inside
# an 'and'; negation is exact because everything is integral.


def atom_le(coeffs, ub):
    coeffs = {v: a for v, a in coeffs.items() if a != 0}
    if not coeffs:
        return 0 <= ub
    return ("le", coeffs, ub)


def build_formula(term, decls, positive=True):
    if isinstance(term, str):
        if term == "true":
            return positive
        if term == "false":
            return not positive
        raise SolverError("unsupported boolean symbol %r" % term)
    op = term[0]
    args = term[1:]
    if op == "not":
        if len(args) != 1:
            raise SolverError("'not' takes one argument")
        return build_formula(args[0], decls, not positive)
    if op in ("and", "or"):
        flip = (op == "and") != positive
        kids = [build_formula(a, decls, positive) for a in args]
        kind = "or" if flip else "and"
        kept = []
        for k in kids:
            if k is True:
                if kind == "or":
                    return True
                continue
            if k is False:
                if kind == "and":
                    return False
                continue
            kept.append(k)
        if not kept:
            return kind == "and"
        if len(kept) == 1:
            return kept[0]
        return (kind, kept)
    if op == "=>":
        if len(args) != 2:
            raise SolverError("'=>' takes two arguments")
        return build_formula(["or", ["not", args[0]], args[1]], decls, positive)
    if op in ("<=", "<", ">=", ">", "="):
        ca, ka = linear(args[0], decls)
        cb, kb = linear(args[1], decls)
        diff = dict(ca)
        _accumulate(diff, cb, -1)
        k = ka - kb  # atom is: diff + k  OP  0
        if op == ">=" or op == ">":
            diff = {v: -a for v, a in diff.items()}
            k = -k
            op = "<=" if op == ">=" else "<"
        # now op is <=, < or =
        if op == "<":
            pos = atom_le(diff, -k - 1)
            neg = atom_le({v: -a for v, a in diff.items()}, k)
        elif op == "<=":
            pos = atom_le(diff, -k)
            neg = atom_le({v: -a for v, a in diff.items()}, k - 1)
        else:  # =
            le = atom_le(dict(diff), -k)
            ge = atom_le({v: -a for v, a in diff.items()}, k)
            if le is True and ge is True:
                pos = True
            elif le is False or ge is False:
                pos = False
            else:
                pos = ("and", [le, ge])
            lt = atom_le(dict(diff), -k - 1)
            gt = atom_le({v: -a for v, a in diff.items()}, k - 1)
            if lt is True or gt is True:
                neg = True
            elif lt is False and gt is False:
                neg = False
            else:
                neg = ("or", [x for x in (lt, gt) if x is not False])
        return pos if positive else neg
    raise SolverError("unsupported operator %r" % op)


# ---------------------------------------------------------------------------
# conjunctive-leaf decision: propagation + guided integer search


def propagate(rows, bounds):
    """Tighten integer intervals until fixpoint.  Returns False on an
    empty interval (a sound unsat proof for the conjunction)."""
    for _ in range(PROP_ROUNDS):
        changed = False
        for coeffs, ub in rows:
            total_min = 0
            unbounded = []
            for v, a in coeffs.items():
                lo, hi = bounds[v]
                m = None
                if a > 0:
                    m = None if lo is NEG_INF else a * lo
                else:
                    m = None if hi is POS_INF else a * hi
                if m is None:
                    unbounded.append(v)
                    if len(unbounded) > 1:
                        break
                else:
                    total_min += m
            if len(unbounded) > 1:
                continue
            for v, a in coeffs.items():
                lo, hi = bounds[v]
                if unbounded and unbounded[0] != v:
                    continue
                if unbounded:
                    rest = total_min
                else:
                    own = a * lo if a > 0 else a * hi
                    rest = total_min - own
                limit = ub - rest
                if a > 0:
                    new_hi = _floor_div(limit, a)
                    if hi is POS_INF or new_hi < hi:
                        bounds[v] = (lo, new_hi)
                        changed = True
                        lo, hi = bounds[v]
                else:
                    new_lo = _ceil_div(limit, a)
                    if lo is NEG_INF or new_lo > lo:
                        bounds[v] = (new_lo, hi)
                        changed = True
                        lo, hi = bounds[v]
                if lo is not NEG_INF and hi is not POS_INF and lo > hi:
                    return False
        if not changed:
            return True
    return True


def _ceil_div(p, q):
    return -((-p) // q) if q > 0 else -(p // -q)


def _floor_div(p, q):
    return p // q if q > 0 else (-p) // (-q)


def rows_satisfied(rows, assignment):
    for coeffs, ub in rows:
        total = 0
        for v, a in coeffs.items():
            total += a * assignment[v]
        if total > ub:
            return False
    return True


def _repair(rows, bounds, point, passes=12):
    """Nudge a rounded LP vertex back inside violated rows.  Greedy and
    deterministic; the result may still violate, the caller re-tests.
    The starting variable rotates between passes so two coupled rows
    cannot ping-pong the same variable forever."""
    point = dict(point)
    for p in range(passes):
        clean = True
        for coeffs, ub in rows:
            excess = sum(a * point[v] for v, a in coeffs.items()) - ub
            if excess <= 0:
                continue
            clean = False
            items = list(coeffs.items())
            start = p % len(items)
            for v, a in items[start:] + items[:start]:
                lo, hi = bounds[v]
                if a > 0:
                    lo_eff = lo if lo is not NEG_INF else -CLAMP
                    room = point[v] - lo_eff
                    if room <= 0:
                        continue
                    step = min(room, _ceil_div(excess, a))
                    point[v] -= step
                    excess -= step * a
                else:
                    hi_eff = hi if hi is not POS_INF else CLAMP
                    room = hi_eff - point[v]
                    if room <= 0:
                        continue
                    step = min(room, _ceil_div(excess, -a))
                    point[v] += step
                    excess += step * a
                if excess <= 0:
                    break
        if clean:
            return point
    return point


# float phase-1 simplex, used only to steer the integer search


def lp_guide(rows, bounds, order):
    lo_shift = {}
    for v in order:
        lo, hi = bounds[v]
        lo_shift[v] = lo if lo is not NEG_INF else -CLAMP
    n = len(order)
    index = {v: i for i, v in enumerate(order)}
    mat = []
    rhs = []
    for coeffs, ub in rows:
        row = [0.0] * n
        shift = 0
        for v, a in coeffs.items():
            row[index[v]] = float(a)
            shift += a * lo_shift[v]
        mat.append(row)
        rhs.append(float(ub - shift))
    for v in order:
        lo, hi = bounds[v]
        if hi is not POS_INF:
            row = [0.0] * n
            row[index[v]] = 1.0
            mat.append(row)
            rhs.append(float(hi - lo_shift[v]))
    m = len(mat)
    if m == 0:
        return {v: lo_shift[v] for v in order}
    # tableau with slack and artificial columns where rhs < 0
    width = n + m
    art = []
    tab = []
    for i in range(m):
        row = mat[i] + [0.0] * m + [rhs[i]]
        row[n + i] = 1.0
        if rhs[i] < 0.0:
            for j in range(len(row)):
                row[j] = -row[j]
            art.append(i)
        tab.append(row)
    basis = list(range(n, n + m))
    if art:
        extra = len(art)
        for i in range(m):
            tab[i] = tab[i][:-1] + [0.0] * extra + [tab[i][-1]]
        for k, i in enumerate(art):
            tab[i][width + k] = 1.0
            basis[i] = width + k
        width += extra
        obj = [0.0] * (width + 1)
        for i in art:
            for j in range(width + 1):
                obj[j] += tab[i][j]
        for _ in range(4 * (m + width)):
            pivot_col = -1
            for j in range(n + m):  # artificial columns never re-enter
                if obj[j] > 1e-9:
                    pivot_col = j
                    break
            if pivot_col < 0:
                break
            pivot_row, best = -1, None
            for i in range(m):
                a = tab[i][pivot_col]
                if a > 1e-9:
                    ratio = tab[i][-1] / a
                    if best is None or ratio < best - 1e-12 or (
                        abs(ratio - best) <= 1e-12 and basis[i] < basis[pivot_row]
                    ):
                        best, pivot_row = ratio, i
            if pivot_row < 0:
                break
            _pivot(tab, obj, basis, pivot_row, pivot_col, width)
        scale = max(1.0, max(abs(r) for r in rhs))
        if obj[-1] < -1e-9 * scale:
            return None  # phase-1 says infeasible (hint only)
    point = {}
    for v in order:
        point[v] = lo_shift[v]
    for i in range(m):
        if basis[i] < n:
            point[order[basis[i]]] = lo_shift[order[basis[i]]] + tab[i][-1]
    return point


def _pivot(tab, obj, basis, pr, pc, width):
    prow = tab[pr]
    inv = 1.0 / prow[pc]
    for j in range(width + 1):
        prow[j] *= inv
    for i in range(len(tab)):
        if i == pr:
            continue
        factor = tab[i][pc]
        if factor != 0.0:
            row = tab[i]
            for j in range(width + 1):
                row[j] -= factor * prow[j]
    factor = obj[pc]
    if factor != 0.0:
        for j in range(width + 1):
            obj[j] -= factor * prow[j]
    basis[pr] = pc


class LeafSolver:
    def __init__(self, order, budget):
        self.order = order
        self.budget = budget

    def solve(self, rows, bounds):
        guide = lp_guide(rows, bounds, self.order)
        return self._search(rows, bounds, guide)

    def _trial_points(self, rows, bounds, guide):
        if guide is not None:
            point = {}
            for v in self.order:
                lo, hi = bounds[v]
                lo_eff = lo if lo is not NEG_INF else -CLAMP
                hi_eff = hi if hi is not POS_INF else CLAMP
                point[v] = min(max(round(guide[v]), lo_eff), hi_eff)
            yield point
            yield _repair(rows, bounds, point)
        corner = {}
        for v in self.order:
            lo, hi = bounds[v]
            corner[v] = lo if lo is not NEG_INF else -CLAMP
        yield corner

    def _search(self, rows, bounds, guide):
        self.budget[0] -= 1
        if self.budget[0] <= 0:
            raise Caps()
        if not propagate(rows, bounds):
            return None
        target = None
        for v in self.order:
            lo, hi = bounds[v]
            if lo is NEG_INF or hi is POS_INF or lo < hi:
                target = v
                break
        if target is None:
            assignment = {v: bounds[v][0] for v in self.order}
            if rows_satisfied(rows, assignment):
                return assignment
            return None
        # cheap whole-box probes before any splitting: the rounded LP
        # vertex clamped into the current box, a violation-repaired copy
        # of it, then the low corner
        for trial in self._trial_points(rows, bounds, guide):
            if rows_satisfied(rows, trial):
                return trial
        lo, hi = bounds[target]
        lo_eff = lo if lo is not NEG_INF else -CLAMP
        hi_eff = hi if hi is not POS_INF else CLAMP
        candidates = []
        if guide is not None and target in guide:
            g = guide[target]
            for c in (round(g), int(g), int(g) + 1):
                c = min(max(int(c), lo_eff), hi_eff)
                if c not in candidates:
                    candidates.append(c)
        for c in (lo_eff, hi_eff):
            if c not in candidates:
                candidates.append(c)
        for c in candidates:
            nb = dict(bounds)
            nb[target] = (c, c)
            got = self._search(rows, nb, guide)
            if got is not None:
                return got
        if hi_eff - lo_eff + 1 <= len(candidates):
            remaining = [c for c in range(lo_eff, hi_eff + 1) if c not in candidates]
            for c in remaining:
                nb = dict(bounds)
                nb[target] = (c, c)
                got = self._search(rows, nb, guide)
                if got is not None:
                    return got
            return None
        mid = (lo_eff + hi_eff) // 2
        for new in ((lo_eff, mid), (mid + 1, hi_eff)):
            nb = dict(bounds)
            nb[target] = new
            got = self._search(rows, nb, guide)
            if got is not None:
                return got
        return None


# ---------------------------------------------------------------------------
# disjunction branching


def solve(assertions, decls, leaf_cap, node_cap):
    """Returns ('sat', model) / ('unsat', None) / ('unknown', None)."""
    conj = []
    for node in assertions:
        if node is False:
            return "unsat", None
        if node is True:
            continue
        if isinstance(node, tuple) and node[0] == "and":
            conj.extend(node[1])
        else:
            conj.append(node)
    order = list(decls)
    budget = [node_cap]
    leaves = [leaf_cap]
    solver = LeafSolver(order, budget)
    incomplete = [False]

    def flatten(nodes):
        flat = []
        queue = list(nodes)
        while queue:
            node = queue.pop(0)
            if isinstance(node, tuple) and node[0] == "and":
                queue = list(node[1]) + queue
            else:
                flat.append(node)
        return flat

    def branch(nodes):
        nodes = flatten(nodes)
        for i, node in enumerate(nodes):
            if isinstance(node, tuple) and node[0] == "or":
                for child in node[1]:
                    expanded = nodes[:i] + nodes[i + 1 :]
                    if child is True:
                        kid = expanded
                    elif child is False:
                        continue
                    elif isinstance(child, tuple) and child[0] == "and":
                        kid = expanded + list(child[1])
                    else:
                        kid = expanded + [child]
                    got = branch(kid)
                    if got is not None:
                        return got
                return None
        # conjunctive leaf
        leaves[0] -= 1
        if leaves[0] < 0:
            incomplete[0] = True
            return None
        rows = []
        for node in nodes:
            if node is True:
                continue
            if node is False:
                return None
            rows.append((node[1], node[2]))
        bounds = {v: (NEG_INF, POS_INF) for v in order}
        try:
            return solver.solve(rows, bounds)
        except Caps:
            incomplete[0] = True
            return None

    model = branch(conj)
    if model is not None:
        return "sat", model
    if incomplete[0]:
        return "unknown", None
    return "unsat", None


# ---------------------------------------------------------------------------
# script driver


def run(text, out, leaf_cap=LEAF_CAP_DEFAULT, node_cap=NODE_CAP_DEFAULT):
    decls = {}
    assertions = []
    last = (None, None)
    for cmd in parse_sexprs(text):
        if not isinstance(cmd, list) or not cmd:
            raise SolverError("top-level junk: %r" % (cmd,))
        head = cmd[0]
        if head in ("set-logic", "set-info", "set-option"):
            continue
        if head == "declare-const":
            name, sort = cmd[1], cmd[2]
            if sort != "Int":
                raise SolverError("only Int constants are supported")
            decls[name] = True
        elif head == "declare-fun":
            if len(cmd) != 4 or cmd[2] != []:
                raise SolverError("only nullary Int declarations are supported")
            if cmd[3] != "Int":
                raise SolverError("only Int constants are supported")
            decls[cmd[1]] = True
        elif head == "assert":
            if len(cmd) != 2:
                raise SolverError("'assert' takes one argument")
            assertions.append(build_formula(cmd[1], decls))
        elif head == "check-sat":
            verdict, model = solve(assertions, decls, leaf_cap, node_cap)
            last = (verdict, model)
            out.write(verdict + "\n")
        elif head == "get-model":
            verdict, model = last
            if verdict != "sat":
                out.write('(error "model is not available")\n')
                continue
            out.write("(\n")
            for name in decls:
                value = model.get(name, 0)
                lit = str(value) if value >= 0 else "(- %d)" % -value
                out.write("  (define-fun %s () Int %s)\n" % (name, lit))
            out.write(")\n")
        elif head == "exit":
            break
        else:
            raise SolverError("unsupported command %r" % head)
    out.flush()


def main(argv):
    leaf_cap = LEAF_CAP_DEFAULT
    node_cap = NODE_CAP_DEFAULT
    path = None
    i = 1
    while i < len(argv):
        arg = argv[i]
        if arg == "--leaf-cap":
            i += 1
            leaf_cap = int(argv[i])
        elif arg == "--node-cap":
            i += 1
            node_cap = int(argv[i])
        elif path is None:
            path = arg
        else:
            sys.stderr.write("usage: smtlite.py [--leaf-cap N] [--node-cap N] FILE\n")
            return 2
        i += 1
    if path is None or path == "-":
        text = sys.stdin.read()
    else:
        with open(path, "r") as fh:
            text = fh.read()
    try:
        run(text, sys.stdout, leaf_cap, node_cap)
    except SolverError as exc:
        sys.stderr.write("smtlite: %s\n" % exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv))
