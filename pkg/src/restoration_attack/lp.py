"""Embedded LP (bounded-variable primal simplex) and MILP (branch and bound).

Problems are built incrementally::

    prob = MilpProblem(sense="max")
    x = prob.add_var("x", 0, 1, binary=True)
    y = prob.add_var("y", 0, 1, binary=True)
    prob.set_objective({x: 3, y: 2})
    prob.add_constraint({x: 1, y: 1}, "<=", 1)
    out = solve_milp(prob)

The embedded path is a dense tableau and is meant for the small instances used
by the tests and the validator.  ``backend="highs"`` routes the same problem
object through :func:`scipy.optimize.milp`; ``backend="auto"`` picks HiGHS once
the dense tableau would be large.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import MalformedProblem, NodeLimitReached

FEAS_TOL = 1e-7
OPT_TOL = 1e-7
_PIVOT_TOL = 1e-9
# above this many tableau cells the "auto" backend hands off to HiGHS
AUTO_DENSE_LIMIT = 400_000

RELATIONS = ("<=", "=", ">=")


@dataclass
class Variable:
    name: str
    lower: float = 0.0
    upper: float = math.inf


@dataclass
class Constraint:
    coeffs: dict
    relation: str
    rhs: float
    name: str


class LpProblem:
    """Linear program with sparse rows and named variables."""

    def __init__(self, sense: str = "min"):
        if sense not in ("min", "max"):
            raise MalformedProblem(f"unknown sense {sense!r}")
        self.sense = sense
        self.variables: list[Variable] = []
        self.constraints: list[Constraint] = []
        self.objective: dict[int, float] = {}
        self._index: dict[str, int] = {}

    # -- construction -----------------------------------------------------
    def add_var(self, name, lower=0.0, upper=math.inf, binary=False) -> int:
        if name in self._index:
            raise MalformedProblem(f"duplicate variable {name!r}")
        if binary:
            lower, upper = max(lower, 0.0), min(upper, 1.0)
        if lower > upper:
            raise MalformedProblem(f"variable {name!r} has lower > upper")
        self._index[name] = len(self.variables)
        self.variables.append(Variable(name, float(lower), float(upper)))
        if binary:
            self._mark_binary(len(self.variables) - 1)
        return len(self.variables) - 1

    def _mark_binary(self, idx):
        raise MalformedProblem("binary variables need a MilpProblem")

    def index(self, name) -> int:
        return self._index[name]

    def _resolve(self, key) -> int:
        if isinstance(key, str):
            if key not in self._index:
                raise MalformedProblem(f"unknown variable {key!r}")
            return self._index[key]
        key = int(key)
        if not 0 <= key < len(self.variables):
            raise MalformedProblem(f"variable index {key} out of range")
        return key

    def set_objective(self, coeffs: dict):
        self.objective = {}
        for k, v in coeffs.items():
            i = self._resolve(k)
            self.objective[i] = self.objective.get(i, 0.0) + float(v)

    def add_constraint(self, coeffs: dict, relation: str, rhs: float, name=None) -> int:
        if relation not in RELATIONS:
            raise MalformedProblem(f"unknown relation {relation!r}")
        row = {}
        for k, v in coeffs.items():
            i = self._resolve(k)
            row[i] = row.get(i, 0.0) + float(v)
        if not math.isfinite(rhs):
            raise MalformedProblem("constraint rhs must be finite")
        name = name if name is not None else f"c{len(self.constraints)}"
        self.constraints.append(Constraint(row, relation, float(rhs), name))
        return len(self.constraints) - 1

    # -- views ------------------------------------------------------------
    @property
    def n_vars(self):
        return len(self.variables)

    def bounds(self):
        lo = np.array([v.lower for v in self.variables], dtype=float)
        hi = np.array([v.upper for v in self.variables], dtype=float)
        return lo, hi

    def objective_vector(self):
        c = np.zeros(self.n_vars)
        for i, v in self.objective.items():
            c[i] = v
        return c

    def dense_rows(self):
        A = np.zeros((len(self.constraints), self.n_vars))
        for r, con in enumerate(self.constraints):
            for i, v in con.coeffs.items():
                A[r, i] = v
        rel = [con.relation for con in self.constraints]
        b = np.array([con.rhs for con in self.constraints], dtype=float)
        return A, rel, b

    def evaluate(self, x) -> float:
        return float(sum(v * x[i] for i, v in self.objective.items()))

    def max_violation(self, x) -> float:
        """Largest bound or row violation of ``x`` (independent re-check)."""
        worst = 0.0
        for var, xi in zip(self.variables, x):
            worst = max(worst, var.lower - xi, xi - var.upper)
        for con in self.constraints:
            lhs = sum(v * x[i] for i, v in con.coeffs.items())
            if con.relation == "<=":
                worst = max(worst, lhs - con.rhs)
            elif con.relation == ">=":
                worst = max(worst, con.rhs - lhs)
            else:
                worst = max(worst, abs(lhs - con.rhs))
        return worst

    def copy(self):
        other = self.__class__.__new__(self.__class__)
        other.__dict__.update(self.__dict__)
        other.variables = [Variable(v.name, v.lower, v.upper) for v in self.variables]
        other.constraints = list(self.constraints)
        other.objective = dict(self.objective)
        other._index = dict(self._index)
        return other


class MilpProblem(LpProblem):
    """LP plus a set of variables restricted to {0, 1}."""

    def __init__(self, sense: str = "min"):
        super().__init__(sense)
        self.binaries: list[int] = []

    def _mark_binary(self, idx):
        self.binaries.append(idx)

    def copy(self):
        other = super().copy()
        other.binaries = list(self.binaries)
        return other


@dataclass
class LpOutcome:
    status: str  # optimal | infeasible | unbounded
    values: np.ndarray | None = None
    objective: float = math.nan
    infeasible_hint: list = field(default_factory=list)
    node_limit_reached: bool = False
    nodes: int = 0
    backend: str = "embedded"

    @property
    def optimal(self):
        return self.status == "optimal"

    def value(self, problem: LpProblem, name) -> float:
        return float(self.values[problem.index(name)])


# ---------------------------------------------------------------------------
# bounded-variable simplex on a dense tableau


class _Tableau:
    """Standard-form LP ``min c x, A x = b, 0 <= x <= u`` with b >= 0."""

    def __init__(self, A, b, c, u, n_art):
        m, n = A.shape
        self.m, self.n = m, n
        self.T = A.copy()
        self.beta = b.astype(float).copy()
        self.u = u.astype(float).copy()
        self.at_upper = np.zeros(n, dtype=bool)
        # artificial columns occupy the last n_art slots and start basic
        self.basis = np.arange(n - n_art, n)
        self.c = c

    def reduced_costs(self, c):
        return c - c[self.basis] @ self.T

    def run(self, c, max_iter):
        """Minimise ``c x`` from the current basis. Returns 'optimal'|'unbounded'."""
        d = self.reduced_costs(c)
        bland = False
        stall = 0
        for _ in range(max_iter):
            nonbasic = np.ones(self.n, dtype=bool)
            nonbasic[self.basis] = False
            fixed = self.u <= 0.0
            up_ok = nonbasic & ~self.at_upper & ~fixed & (d < -OPT_TOL * 1e-2)
            dn_ok = nonbasic & self.at_upper & (d > OPT_TOL * 1e-2)
            cand = np.flatnonzero(up_ok | dn_ok)
            if cand.size == 0:
                return "optimal"
            if bland:
                j = int(cand[0])
            else:
                j = int(cand[np.argmax(np.abs(d[cand]))])
            sigma = -1.0 if self.at_upper[j] else 1.0
            col = self.T[:, j]
            step, r, to_upper = self._ratio(col, sigma, j, bland)
            if step == math.inf:
                return "unbounded"
            if step <= 1e-12:
                stall += 1
                if stall > 20:
                    bland = True
            else:
                stall = 0
                bland = False
            self.beta -= sigma * step * col
            if r < 0:
                # entering variable hits its own opposite bound
                self.at_upper[j] = not self.at_upper[j]
                continue
            leaving = self.basis[r]
            entering_val = step if sigma > 0 else self.u[j] - step
            self._pivot(r, j)
            self.beta[r] = entering_val
            self.at_upper[leaving] = to_upper
            self.at_upper[j] = False
            d = d - d[j] * self.T[r]
        raise MalformedProblem("simplex iteration limit reached")

    def _ratio(self, col, sigma, j, bland):
        rows = np.flatnonzero(np.abs(col) > _PIVOT_TOL)
        a = sigma * col[rows]
        beta = self.beta[rows]
        ub = self.u[self.basis[rows]]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(a > 0, beta / a, np.where(np.isfinite(ub), (ub - beta) / -a, np.inf))
        t = np.maximum(t, 0.0)
        if t.size == 0 or not np.isfinite(t.min()):
            return self.u[j], -1, False
        tmin = t.min()
        if self.u[j] <= tmin:
            return self.u[j], -1, False
        ties = np.flatnonzero(t <= tmin + 1e-12)
        if bland:
            pick = ties[np.argmin(self.basis[rows[ties]])]
        else:
            # largest pivot magnitude, then lowest variable index
            mags = np.abs(col[rows[ties]])
            best = ties[mags >= mags.max() - 1e-12]
            pick = best[np.argmin(self.basis[rows[best]])]
        return float(t[pick]), int(rows[pick]), bool(a[pick] < 0)

    def _pivot(self, r, j):
        T = self.T
        piv = T[r, j]
        T[r] /= piv
        col = T[:, j].copy()
        col[r] = 0.0
        nz = np.flatnonzero(np.abs(col) > 0.0)
        if nz.size:
            T[nz] -= np.outer(col[nz], T[r])
        self.basis[r] = j

    def primal(self):
        x = np.where(self.at_upper, self.u, 0.0)
        x[self.basis] = self.beta
        return x


def _standardize(problem: LpProblem, lo, hi):
    """Map bounds/rows to ``A x = b, 0 <= x <= u`` plus recovery info."""
    A0, rel, b0 = problem.dense_rows()
    c0 = problem.objective_vector()
    if problem.sense == "max":
        c0 = -c0
    n0 = problem.n_vars
    cols, costs, uppers = [], [], []
    recover = []  # (orig index, column, sign, offset)
    offset_rhs = np.zeros(len(b0))
    const = 0.0
    for i in range(n0):
        l, u = lo[i], hi[i]
        a = A0[:, i]
        if math.isfinite(l):
            # x = l + x'
            offset_rhs += a * l
            const += c0[i] * l
            recover.append((i, len(cols), 1.0, l))
            cols.append(a)
            costs.append(c0[i])
            uppers.append(u - l)
        elif math.isfinite(u):
            # x = u - x'
            offset_rhs += a * u
            const += c0[i] * u
            recover.append((i, len(cols), -1.0, u))
            cols.append(-a)
            costs.append(-c0[i])
            uppers.append(math.inf)
        else:
            recover.append((i, len(cols), 1.0, 0.0))
            cols.append(a)
            costs.append(c0[i])
            uppers.append(math.inf)
            recover.append((i, len(cols), -1.0, 0.0))
            cols.append(-a)
            costs.append(-c0[i])
            uppers.append(math.inf)
    m = len(b0)
    b = b0 - offset_rhs
    for r, relation in enumerate(rel):
        if relation == "=":
            continue
        s = np.zeros(m)
        s[r] = 1.0 if relation == "<=" else -1.0
        cols.append(s)
        costs.append(0.0)
        uppers.append(math.inf)
    n_struct = len(cols)
    A = np.column_stack(cols) if cols else np.zeros((m, 0))
    neg = b < 0
    A[neg] *= -1
    b = np.abs(b)
    A = np.hstack([A, np.eye(m)])
    c = np.concatenate([np.asarray(costs, dtype=float), np.zeros(m)])
    u = np.concatenate([np.asarray(uppers, dtype=float), np.full(m, math.inf)])
    return A, b, c, u, n_struct, recover, const


def _solve_embedded(problem: LpProblem, lo, hi) -> LpOutcome:
    n0 = problem.n_vars
    if np.any(lo > hi + FEAS_TOL):
        return LpOutcome("infeasible", infeasible_hint=[])
    if not problem.constraints:
        # bounds only: pick the better bound per coordinate
        c = problem.objective_vector() * (-1 if problem.sense == "max" else 1)
        x = np.zeros(n0)
        for i in range(n0):
            if c[i] > 0:
                x[i] = lo[i]
            elif c[i] < 0:
                x[i] = hi[i]
            else:
                x[i] = lo[i] if math.isfinite(lo[i]) else (hi[i] if math.isfinite(hi[i]) else 0.0)
            if not math.isfinite(x[i]):
                return LpOutcome("unbounded")
        return LpOutcome("optimal", x, problem.evaluate(x))
    A, b, c, u, n_struct, recover, const = _standardize(problem, lo, hi)
    m = A.shape[0]
    tab = _Tableau(A, b, c, u, m)
    max_iter = 50 * (A.shape[0] + A.shape[1]) + 1000
    phase1 = np.concatenate([np.zeros(n_struct), np.ones(m)])
    tab.run(phase1, max_iter)
    art_val = tab.primal()[n_struct:]
    if art_val.sum() > FEAS_TOL:
        hint = [problem.constraints[r].name for r in np.flatnonzero(art_val > FEAS_TOL)]
        return LpOutcome("infeasible", infeasible_hint=hint)
    # pin artificials at zero for phase 2
    tab.u[n_struct:] = 0.0
    tab.at_upper[n_struct:] = False
    status = tab.run(c, max_iter)
    if status == "unbounded":
        return LpOutcome("unbounded")
    x = _recover(recover, tab.primal(), n0)
    return LpOutcome("optimal", x, problem.evaluate(x))


def _recover(recover, xs, n0):
    x = np.zeros(n0)
    seen = set()
    for i, col, sign, off in recover:
        if i not in seen:
            x[i] = off
            seen.add(i)
        x[i] += sign * xs[col]
    return x


def _solve_highs_lp(problem: LpProblem, lo, hi, integrality=None) -> LpOutcome:
    from scipy.optimize import Bounds, LinearConstraint, milp
    from scipy.sparse import csr_matrix

    n = problem.n_vars
    c = problem.objective_vector() * (-1 if problem.sense == "max" else 1)
    rows, cols, vals = [], [], []
    lb, ub = [], []
    for r, con in enumerate(problem.constraints):
        for i, v in con.coeffs.items():
            rows.append(r)
            cols.append(i)
            vals.append(v)
        lb.append(con.rhs if con.relation in ("=", ">=") else -np.inf)
        ub.append(con.rhs if con.relation in ("=", "<=") else np.inf)
    constraints = []
    if problem.constraints:
        A = csr_matrix((vals, (rows, cols)), shape=(len(problem.constraints), n))
        constraints.append(LinearConstraint(A, np.array(lb), np.array(ub)))
    integ = np.zeros(n)
    if integrality is not None:
        integ[list(integrality)] = 1
    res = milp(
        c,
        constraints=constraints,
        integrality=integ,
        bounds=Bounds(lo, hi),
        options={"mip_rel_gap": 1e-9, "presolve": True},
    )
    if res.status == 2:
        return LpOutcome("infeasible", backend="highs")
    if res.status == 3:
        return LpOutcome("unbounded", backend="highs")
    if res.x is None:
        raise MalformedProblem(f"HiGHS failed: {res.message}")
    x = np.asarray(res.x, dtype=float)
    if integrality is not None:
        x[list(integrality)] = np.round(x[list(integrality)])
    return LpOutcome("optimal", x, problem.evaluate(x), backend="highs")


def _pick_backend(problem, backend):
    if backend not in ("auto", "embedded", "highs"):
        raise MalformedProblem(f"unknown backend {backend!r}")
    if backend != "auto":
        return backend
    m = len(problem.constraints)
    n = problem.n_vars + 2 * m
    return "embedded" if m * n <= AUTO_DENSE_LIMIT else "highs"


def _check(problem):
    for con in problem.constraints:
        for i in con.coeffs:
            if not 0 <= i < problem.n_vars:
                raise MalformedProblem(f"constraint {con.name} references unknown variable")
    for v in problem.variables:
        if v.lower > v.upper:
            raise MalformedProblem(f"variable {v.name} has lower > upper")


def solve_lp(problem: LpProblem, backend: str = "embedded") -> LpOutcome:
    """Solve the continuous relaxation of ``problem``.

    Integrality declared on a :class:`MilpProblem` is ignored here.
    """
    _check(problem)
    lo, hi = problem.bounds()
    which = _pick_backend(problem, backend)
    if which == "highs":
        return _solve_highs_lp(problem, lo, hi)
    return _solve_embedded(problem, lo, hi)


def solve_milp(
    problem: MilpProblem,
    gap_tol: float = 1e-6,
    node_limit: int = 20_000,
    backend: str = "embedded",
    raise_on_limit: bool = False,
) -> LpOutcome:
    """Best-first branch and bound over LP relaxations.

    Branches on the most fractional binary (ties go to the lowest index).
    When ``node_limit`` is hit the best incumbent is returned with
    ``node_limit_reached`` set, or :class:`NodeLimitReached` is raised if
    ``raise_on_limit``.
    """
    _check(problem)
    binaries = list(getattr(problem, "binaries", []))
    for i in binaries:
        v = problem.variables[i]
        if v.lower < 0 or v.upper > 1:
            raise MalformedProblem(f"binary {v.name} has bounds outside [0, 1]")
    which = _pick_backend(problem, backend)
    if which == "highs":
        lo, hi = problem.bounds()
        return _solve_highs_lp(problem, lo, hi, integrality=binaries)

    sign = -1.0 if problem.sense == "max" else 1.0  # internal minimisation
    lo0, hi0 = problem.bounds()
    for i in binaries:
        lo0[i], hi0[i] = math.ceil(lo0[i] - 1e-9), math.floor(hi0[i] + 1e-9)

    root = _solve_embedded(problem, lo0, hi0)
    if root.status != "optimal":
        root.nodes = 1
        return root
    counter = 0
    heap = [(sign * root.objective, counter, lo0, hi0, root)]
    incumbent = None
    inc_val = math.inf
    nodes = 0
    while heap:
        bound, _, lo, hi, out = heapq.heappop(heap)
        if incumbent is not None and bound >= inc_val - _gap(inc_val, gap_tol):
            continue
        nodes += 1
        if nodes > node_limit:
            result = _finish(problem, incumbent, nodes, limit=True)
            if raise_on_limit:
                raise NodeLimitReached("branch and bound node limit reached", result)
            return result
        x = out.values
        frac = np.array([abs(x[i] - round(x[i])) for i in binaries])
        if frac.size == 0 or frac.max() <= 1e-6:
            val = sign * out.objective
            if val < inc_val:
                xi = x.copy()
                for i in binaries:
                    xi[i] = round(xi[i])
                incumbent, inc_val = xi, val
            continue
        pick = binaries[int(np.argmax(frac >= frac.max() - 1e-12))]
        for fix in (0.0, 1.0):
            lo2, hi2 = lo.copy(), hi.copy()
            lo2[pick] = hi2[pick] = fix
            child = _solve_embedded(problem, lo2, hi2)
            if child.status == "unbounded":
                return LpOutcome("unbounded", nodes=nodes)
            if child.status != "optimal":
                continue
            cval = sign * child.objective
            if incumbent is not None and cval >= inc_val - _gap(inc_val, gap_tol):
                continue
            counter += 1
            heapq.heappush(heap, (cval, counter, lo2, hi2, child))
    return _finish(problem, incumbent, nodes, limit=False)


def _gap(val, tol):
    return tol * max(1.0, abs(val))


def _finish(problem, incumbent, nodes, limit):
    if incumbent is None:
        return LpOutcome("infeasible", nodes=nodes, node_limit_reached=limit)
    return LpOutcome(
        "optimal", incumbent, problem.evaluate(incumbent), nodes=nodes, node_limit_reached=limit
    )


def dump_problem(problem: LpProblem) -> str:
    """Line-oriented text dump for cross-checking against external solvers."""
    names = [v.name for v in problem.variables]
    lines = [f"sense {problem.sense}"]
    obj = " ".join(f"{v:+.17g}*{names[i]}" for i, v in sorted(problem.objective.items()))
    lines.append(f"objective {obj}")
    binaries = set(getattr(problem, "binaries", []))
    for i, v in enumerate(problem.variables):
        kind = "bin" if i in binaries else "var"
        lines.append(f"{kind} {v.name} {v.lower:.17g} {v.upper:.17g}")
    for con in problem.constraints:
        row = " ".join(f"{v:+.17g}*{names[i]}" for i, v in sorted(con.coeffs.items()))
        lines.append(f"con {con.name} {row} {con.relation} {con.rhs:.17g}")
    return "\n".join(lines) + "\n"
