"""Constrained minimization of the cosine distance between the final and
joint ideal distributions.

Three variants share one engine:

* fixed       - the joint ideal is a constant vector; variables are the
                per-stratum fractions F (simplex + capacity bounds).
* range       - per-characteristic targets I are additional variables inside
                interval bounds, each characteristic's targets summing to 1;
                the joint ideal is rebuilt from I inside the objective.
* generalized - range plus arbitrary linear constraints over the I
                variables.

The smooth solves run sequential least-squares programming (SLSQP) with the
analytic gradient below; a projected-gradient / augmented-Lagrangian loop
picks up the rare starts SLSQP abandons.  Because the range variants couple
F with products of I the landscape is multimodal, so every solve is a
multistart: one deterministic start plus ``multistart`` seeded random
feasible starts, merged by a deterministic argmin.

Packed variable layout for the range variants: x = [F (D entries), then the
I variables of each range characteristic in schema order].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import reduce
from itertools import product
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linprog, minimize

from .errors import InfeasibleProblem, ValidationFailure
from .ideal import (
    FixedMarginal,
    IdealSpec,
    LinearConstraint,
    RangeMarginal,
    enumerate_range_grid,
    joint_ideal,
    joint_ideal_from_vectors,
    validate_spec,
)
from .metrics import cosine_distance
from .population import StratificationIndex

__all__ = [
    "SolverTolerances",
    "SolveProblem",
    "SolveResult",
    "OracleResult",
    "build_problem",
    "solve",
    "solve_fixed",
    "solve_range",
    "solve_generalized",
    "objective_gradient",
    "RangeCosineObjective",
    "project_capped_simplex",
    "project_box_simplex",
    "brute_force_oracle",
]

_TIE = 1e-12


@dataclass(frozen=True)
class SolverTolerances:
    constraint_tol: float = 1e-8
    kkt_tol: float = 1e-6
    max_iters: int = 500


@dataclass(frozen=True)
class SolveProblem:
    """Immutable description of one solve.

    ``marginals`` are aligned to the stratification's characteristic order;
    fixed ones are constants, range ones become variables.  ``caps`` is the
    vector init_h / n.
    """

    variant: str
    caps: np.ndarray
    n: int
    joint_ideal: np.ndarray | None = None
    marginals: tuple | None = None
    group_counts: tuple[int, ...] | None = None
    characteristics: tuple[str, ...] | None = None
    group_names: tuple[tuple[str, ...], ...] | None = None
    extra_constraints: tuple[LinearConstraint, ...] = ()
    multistart: int = 16
    seed: int = 0
    tolerances: SolverTolerances = field(default_factory=SolverTolerances)
    extra_objective: Callable[[np.ndarray], tuple[float, np.ndarray]] | None = None
    extra_objective_weight: float = 0.0


@dataclass(frozen=True)
class SolveResult:
    fractions: np.ndarray
    objective: float
    converged: bool
    max_constraint_violation: float
    starts_used: int
    chosen_marginals: tuple[FixedMarginal, ...] | None = None

    def to_dict(self) -> dict:
        return {
            "fractions": [float(x) for x in self.fractions],
            "objective": float(self.objective),
            "converged": bool(self.converged),
            "max_constraint_violation": float(self.max_constraint_violation),
            "starts_used": int(self.starts_used),
            "chosen_marginals": None
            if self.chosen_marginals is None
            else {
                m.characteristic: [float(p) for p in m.percents]
                for m in self.chosen_marginals
            },
        }


def build_problem(
    index: StratificationIndex,
    spec: IdealSpec,
    *,
    multistart: int = 16,
    seed: int = 0,
    tolerances: SolverTolerances | None = None,
) -> SolveProblem:
    """Translate an ideal spec into a solver problem (validating it first)."""
    report = validate_spec(spec, index)
    if not report.ok:
        raise ValidationFailure("; ".join(report.violations))

    aligned = []
    for schema in index.schemas:
        marginal = spec.marginal_for(schema.name)
        if isinstance(marginal, RangeMarginal) and marginal.is_degenerate:
            marginal = marginal.as_fixed()
        aligned.append(marginal)

    caps = index.caps(spec.sample_size)
    tol = tolerances or SolverTolerances()
    common = dict(
        caps=caps,
        n=spec.sample_size,
        group_counts=index.group_counts,
        characteristics=tuple(s.name for s in index.schemas),
        group_names=tuple(s.group_names for s in index.schemas),
        extra_constraints=spec.constraints,
        multistart=multistart,
        seed=seed,
        tolerances=tol,
    )
    if spec.variant == "fixed" and not spec.constraints:
        return SolveProblem(
            variant="fixed",
            joint_ideal=joint_ideal(spec, index).values,
            marginals=tuple(aligned),
            **common,
        )
    return SolveProblem(
        variant=spec.variant, marginals=tuple(aligned), **common
    )


# ---------------------------------------------------------------------------
# Objective and gradient
# ---------------------------------------------------------------------------

def _cosine_value_grad(f: np.ndarray, j: np.ndarray):
    """Distance 1 - cos(f, j) with its partials w.r.t. both arguments."""
    nf = float(np.linalg.norm(f))
    nj = float(np.linalg.norm(j))
    nf = max(nf, 1e-300)
    nj = max(nj, 1e-300)
    dot = float(np.dot(f, j))
    value = 1.0 - dot / (nf * nj)
    grad_f = -(j - (dot / (nf * nf)) * f) / (nf * nj)
    grad_j = -(f - (dot / (nj * nj)) * j) / (nf * nj)
    return value, grad_f, grad_j


def objective_gradient(fractions, joint_ideal_values) -> np.ndarray:
    """Exact gradient of the cosine distance w.r.t. the fraction vector."""
    f = np.asarray(fractions, dtype=np.float64)
    j = np.asarray(joint_ideal_values, dtype=np.float64)
    if np.linalg.norm(f) == 0.0 or np.linalg.norm(j) == 0.0:
        raise ValidationFailure("gradient undefined at a zero-norm point")
    _, grad_f, _ = _cosine_value_grad(f, j)
    return grad_f


class RangeCosineObjective:
    """Cosine distance as a function of the packed [F, I...] vector.

    Holds, per characteristic, either a constant marginal vector or a slice
    of the variable block.  The joint ideal is the flattened outer product
    of all marginal vectors; its I-partials follow from the product rule:
    each I variable multiplies exactly the strata containing its group.
    """

    def __init__(
        self,
        d: int,
        group_counts: Sequence[int],
        entries: Sequence[tuple[str, object]],
    ):
        # entries: per characteristic ("const", vector) or ("var", offset)
        self.d = d
        self.group_counts = tuple(group_counts)
        self.entries = list(entries)
        self.n_vars = d + sum(
            group_counts[c]
            for c, (kind, _) in enumerate(self.entries)
            if kind == "var"
        )

    def split(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        f = x[: self.d]
        vectors = []
        for c, (kind, payload) in enumerate(self.entries):
            if kind == "const":
                vectors.append(payload)
            else:
                off = self.d + payload
                vectors.append(x[off : off + self.group_counts[c]])
        return f, vectors

    def joint(self, x: np.ndarray) -> np.ndarray:
        _, vectors = self.split(x)
        return joint_ideal_from_vectors(vectors)

    def value(self, x: np.ndarray) -> float:
        f, vectors = self.split(x)
        j = joint_ideal_from_vectors(vectors)
        value, _, _ = _cosine_value_grad(f, j)
        return value

    def gradient(self, x: np.ndarray) -> np.ndarray:
        f, vectors = self.split(x)
        j = joint_ideal_from_vectors(vectors)
        _, grad_f, grad_j = _cosine_value_grad(f, j)

        out = np.zeros_like(x)
        out[: self.d] = grad_f
        shape = self.group_counts
        for c, (kind, payload) in enumerate(self.entries):
            if kind != "var":
                continue
            # d(joint)/d(I_g^c) is the outer product with this characteristic
            # replaced by an indicator, i.e. the product of the other
            # characteristics' values on every stratum containing group g.
            others = [
                vec if cc != c else np.ones(shape[c])
                for cc, vec in enumerate(vectors)
            ]
            partial = joint_ideal_from_vectors(others)
            contrib = (grad_j * partial).reshape(shape)
            axes = tuple(i for i in range(len(shape)) if i != c)
            out[self.d + payload : self.d + payload + shape[c]] = contrib.sum(
                axis=axes
            )
        return out

    def value_and_grad(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        return self.value(x), self.gradient(x)


# ---------------------------------------------------------------------------
# Feasible-set projections
# ---------------------------------------------------------------------------

def project_capped_simplex(v, caps) -> np.ndarray:
    """Euclidean projection onto {0 <= x <= caps, sum x = 1}.

    Bisection on the shift of the clipped vector; the mass function is
    monotone in the shift.  Infeasible caps (summing below 1) are an error.
    """
    v = np.asarray(v, dtype=np.float64)
    caps = np.asarray(caps, dtype=np.float64)
    if float(caps.sum()) < 1.0 - 1e-12:
        raise InfeasibleProblem("stratum capacities sum to less than 1")
    if np.all(v >= 0) and np.all(v <= caps) and abs(float(v.sum()) - 1.0) < 1e-15:
        return v.copy()
    return _clip_shift_project(v, np.zeros_like(caps), caps)


def project_box_simplex(v, lo, hi) -> np.ndarray:
    """Euclidean projection onto {lo <= x <= hi, sum x = 1}."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if float(lo.sum()) > 1.0 + 1e-12 or float(hi.sum()) < 1.0 - 1e-12:
        raise InfeasibleProblem("box bounds admit no unit-sum point")
    return _clip_shift_project(np.asarray(v, dtype=np.float64), lo, hi)


def _clip_shift_project(v, lo, hi) -> np.ndarray:
    def mass(tau: float) -> float:
        return float(np.clip(v - tau, lo, hi).sum())

    t_lo = float(np.min(v - hi)) - 1.0
    t_hi = float(np.max(v - lo)) + 1.0
    for _ in range(200):
        mid = 0.5 * (t_lo + t_hi)
        if mass(mid) > 1.0:
            t_lo = mid
        else:
            t_hi = mid
    x = np.clip(v - 0.5 * (t_lo + t_hi), lo, hi)
    # Absorb the bisection residue in the freest coordinate.
    residue = 1.0 - float(x.sum())
    if residue != 0.0:
        room = np.where(residue > 0, hi - x, x - lo)
        k = int(np.argmax(room))
        x[k] += residue
        x[k] = min(max(x[k], lo[k]), hi[k])
    return x


# ---------------------------------------------------------------------------
# Fixed variant
# ---------------------------------------------------------------------------

def solve_fixed(problem: SolveProblem) -> SolveResult:
    """Minimize the distance to a constant joint ideal over the capped simplex."""
    j = problem.joint_ideal
    if j is None:
        raise ValidationFailure("fixed solve requires a joint ideal vector")
    j = np.asarray(j, dtype=np.float64)
    if float(np.linalg.norm(j)) == 0.0:
        raise ValidationFailure("joint ideal vector has zero norm")
    caps = np.asarray(problem.caps, dtype=np.float64)
    if np.any(caps < 0):
        raise ValidationFailure("negative stratum capacity")
    if float(caps.sum()) < 1.0 - 1e-12:
        raise InfeasibleProblem(
            f"stratum capacities sum to {float(caps.sum()):.6g} < 1: "
            f"the sample size exceeds what the strata can supply"
        )
    hi = np.minimum(caps, 1.0)
    tol = problem.tolerances

    def fun(x):
        v, _, _ = _cosine_value_grad(x, j)
        return v

    def jac(x):
        _, g, _ = _cosine_value_grad(x, j)
        return g

    starts = [project_capped_simplex(j, hi)]
    rng = np.random.default_rng(problem.seed)
    for _ in range(problem.multistart):
        starts.append(project_capped_simplex(rng.dirichlet(np.ones(len(j))), hi))

    best_x = None
    best_obj = math.inf
    constraints = [
        {
            "type": "eq",
            "fun": lambda x: float(x.sum()) - 1.0,
            "jac": lambda x: np.ones_like(x),
        }
    ]
    bounds = [(0.0, float(h)) for h in hi]
    for x0 in starts:
        res = minimize(
            fun,
            x0,
            jac=jac,
            method="SLSQP",
            bounds=bounds,
            constraints=constraints,
            options={"maxiter": tol.max_iters, "ftol": 1e-12},
        )
        x = np.clip(res.x, 0.0, hi)
        if not res.success or abs(float(x.sum()) - 1.0) > tol.constraint_tol:
            x = _pg_capped_simplex(fun, jac, x, hi, tol)
        cand_obj = cosine_distance(x, j)
        if cand_obj < best_obj - _TIE or (
            abs(cand_obj - best_obj) <= _TIE
            and best_x is not None
            and tuple(x) < tuple(best_x)
        ):
            best_obj = cand_obj
            best_x = x

    violation = abs(float(best_x.sum()) - 1.0)
    pg = project_capped_simplex(best_x - jac(best_x), hi) - best_x
    converged = violation <= tol.constraint_tol and float(
        np.max(np.abs(pg))
    ) <= tol.kkt_tol
    chosen = None
    if problem.marginals is not None and all(
        isinstance(m, FixedMarginal) for m in problem.marginals
    ):
        chosen = tuple(problem.marginals)
    return SolveResult(
        fractions=best_x,
        objective=float(best_obj),
        converged=converged,
        max_constraint_violation=violation,
        starts_used=len(starts),
        chosen_marginals=chosen,
    )


def _pg_capped_simplex(fun, jac, x0, hi, tol: SolverTolerances) -> np.ndarray:
    """Monotone projected-gradient descent on the capped simplex."""
    x = project_capped_simplex(x0, hi)
    f = fun(x)
    t = 1.0
    for _ in range(tol.max_iters):
        g = jac(x)
        if float(np.max(np.abs(project_capped_simplex(x - g, hi) - x))) <= tol.kkt_tol * 0.1:
            break
        accepted = False
        for _ in range(50):
            xn = project_capped_simplex(x - t * g, hi)
            fn = fun(xn)
            decrease = float(np.dot(g, x - xn))
            if fn <= f - 1e-4 * decrease and fn <= f:
                x, f = xn, fn
                t = min(t * 1.5, 1e6)
                accepted = True
                break
            t *= 0.5
            if t < 1e-18:
                break
        if not accepted:
            break
    return x


# ---------------------------------------------------------------------------
# Range / generalized variants
# ---------------------------------------------------------------------------

def solve_range(problem: SolveProblem) -> SolveResult:
    """Optimize F and all range-marginal targets jointly."""
    if problem.extra_constraints:
        raise ValidationFailure(
            "extra constraints present: use solve_generalized"
        )
    return _solve_with_marginals(problem)


def solve_generalized(problem: SolveProblem) -> SolveResult:
    """Range solve plus linear constraints over the marginal variables."""
    return _solve_with_marginals(problem)


def solve(problem: SolveProblem) -> SolveResult:
    if problem.variant == "fixed":
        return solve_fixed(problem)
    if problem.variant == "range":
        return solve_range(problem)
    if problem.variant == "generalized":
        return solve_generalized(problem)
    raise ValidationFailure(f"unknown problem variant '{problem.variant}'")


def _constraint_rows(problem: SolveProblem, objective: RangeCosineObjective):
    """Extra linear constraints as (coeffs-over-x, adjusted rhs, relation)."""
    rows = []
    names = problem.characteristics or ()
    for constraint in problem.extra_constraints:
        coeffs = np.zeros(objective.n_vars)
        const = 0.0
        for char, group, coeff in constraint.terms:
            if char not in names:
                raise ValidationFailure(f"constraint names unknown characteristic '{char}'")
            c = names.index(char)
            g = problem.group_names[c].index(group)
            kind, payload = objective.entries[c]
            if kind == "const":
                const += coeff * float(payload[g])
            else:
                coeffs[objective.d + payload + g] += coeff
        rows.append((coeffs, constraint.rhs - const, constraint.relation))
    return rows


def _check_marginal_feasibility(problem, objective, rows):
    """Feasibility of the I-variable system alone, via an LP.

    Reports a best-effort violated subset by minimizing elastic slacks when
    the plain LP is infeasible.
    """
    n_extra = objective.n_vars - objective.d
    if n_extra == 0:
        feasible = all(
            (rel == "=" and abs(-rhs) <= 1e-9)
            or (rel == "<=" and -rhs <= 1e-9)
            or (rel == ">=" and rhs <= 1e-9)
            for coeffs, rhs, rel in [(r[0], r[1], r[2]) for r in rows]
            if not np.any(r[0])
            for rel, rhs in [(r[2], r[1])]
        ) if rows else True
        if not feasible:
            raise InfeasibleProblem("constant constraints are inconsistent")
        return

    a_eq, b_eq, a_ub, b_ub = [], [], [], []
    offset = 0
    lo = np.zeros(n_extra)
    hi = np.ones(n_extra)
    for c, (kind, payload) in enumerate(objective.entries):
        if kind != "var":
            continue
        g = objective.group_counts[c]
        row = np.zeros(n_extra)
        row[payload : payload + g] = 1.0
        a_eq.append(row)
        b_eq.append(1.0)
        a, b = problem.marginals[c].bounds()
        lo[payload : payload + g] = a
        hi[payload : payload + g] = b
        offset += g
    for coeffs, rhs, rel in rows:
        row = coeffs[objective.d :]
        if rel == "=":
            a_eq.append(row)
            b_eq.append(rhs)
        elif rel == "<=":
            a_ub.append(row)
            b_ub.append(rhs)
        else:
            a_ub.append(-row)
            b_ub.append(-rhs)

    res = linprog(
        np.zeros(n_extra),
        A_eq=np.array(a_eq) if a_eq else None,
        b_eq=np.array(b_eq) if b_eq else None,
        A_ub=np.array(a_ub) if a_ub else None,
        b_ub=np.array(b_ub) if b_ub else None,
        bounds=list(zip(lo, hi)),
        method="highs",
    )
    if res.status == 0:
        return

    # Elastic pass: one slack per row, minimize total slack, report the rows
    # that still need any.
    rows_all = [(r, b, "=") for r, b in zip(a_eq, b_eq)] + [
        (r, b, "<=") for r, b in zip(a_ub, b_ub)
    ]
    m = len(rows_all)
    n_tot = n_extra + m
    c_obj = np.concatenate([np.zeros(n_extra), np.ones(m)])
    aeq2, beq2, aub2, bub2 = [], [], [], []
    for i, (row, rhs, rel) in enumerate(rows_all):
        if rel == "=":
            up = np.concatenate([row, np.zeros(m)])
            up[n_extra + i] = -1.0
            aub2.append(up)
            bub2.append(rhs)
            down = np.concatenate([-row, np.zeros(m)])
            down[n_extra + i] = -1.0
            aub2.append(down)
            bub2.append(-rhs)
        else:
            up = np.concatenate([row, np.zeros(m)])
            up[n_extra + i] = -1.0
            aub2.append(up)
            bub2.append(rhs)
    bounds2 = list(zip(lo, hi)) + [(0.0, None)] * m
    res2 = linprog(
        c_obj,
        A_ub=np.array(aub2),
        b_ub=np.array(bub2),
        bounds=bounds2,
        method="highs",
    )
    detail = ""
    if res2.status == 0:
        slacks = res2.x[n_extra:]
        bad = [i for i, s in enumerate(slacks) if s > 1e-9]
        detail = f"; violated constraint rows (best effort): {bad}"
    raise InfeasibleProblem(
        "marginal constraint system is infeasible" + detail
    )


def _solve_with_marginals(problem: SolveProblem) -> SolveResult:
    caps = np.asarray(problem.caps, dtype=np.float64)
    if float(caps.sum()) < 1.0 - 1e-12:
        raise InfeasibleProblem(
            f"stratum capacities sum to {float(caps.sum()):.6g} < 1: "
            f"the sample size exceeds what the strata can supply"
        )
    if problem.marginals is None or problem.group_counts is None:
        raise ValidationFailure("range solve requires aligned marginals")

    d = int(np.prod(problem.group_counts))
    entries = []
    offset = 0
    for marginal, g in zip(problem.marginals, problem.group_counts):
        if isinstance(marginal, FixedMarginal):
            entries.append(("const", marginal.normalized()))
        else:
            bad = marginal.violations()
            if bad:
                raise InfeasibleProblem("; ".join(bad))
            entries.append(("var", offset))
            offset += g
    objective = RangeCosineObjective(d, problem.group_counts, entries)
    rows = _constraint_rows(problem, objective)

    if objective.n_vars == d and not rows:
        # Everything pinned: this is a fixed solve in disguise.
        constants = [payload for kind, payload in entries]
        fixed = SolveProblem(
            variant="fixed",
            caps=problem.caps,
            n=problem.n,
            joint_ideal=joint_ideal_from_vectors(constants),
            marginals=problem.marginals,
            group_counts=problem.group_counts,
            characteristics=problem.characteristics,
            group_names=problem.group_names,
            multistart=problem.multistart,
            seed=problem.seed,
            tolerances=problem.tolerances,
        )
        return solve_fixed(fixed)

    _check_marginal_feasibility(problem, objective, rows)
    tol = problem.tolerances
    hi_f = np.minimum(caps, 1.0)

    lo = np.zeros(objective.n_vars)
    hi = np.ones(objective.n_vars)
    hi[:d] = hi_f
    for c, (kind, payload) in enumerate(entries):
        if kind == "var":
            a, b = problem.marginals[c].bounds()
            lo[d + payload : d + payload + len(a)] = a
            hi[d + payload : d + payload + len(b)] = b

    def pack_start(f, vectors) -> np.ndarray:
        x = np.zeros(objective.n_vars)
        x[:d] = f
        for c, (kind, payload) in enumerate(entries):
            if kind == "var":
                x[d + payload : d + payload + len(vectors[c])] = vectors[c]
        return x

    def start_vectors(sample_fn):
        vecs = []
        for c, (kind, payload) in enumerate(entries):
            if kind == "const":
                vecs.append(payload)
            else:
                a, b = problem.marginals[c].bounds()
                vecs.append(project_box_simplex(sample_fn(a, b), a, b))
        return vecs

    # Deterministic start: interval midpoints and proportionate fractions.
    det_vectors = start_vectors(lambda a, b: 0.5 * (a + b))
    starts = [pack_start(caps / float(caps.sum()), det_vectors)]
    rng = np.random.default_rng(problem.seed)
    for _ in range(problem.multistart):
        f0 = project_capped_simplex(rng.dirichlet(np.ones(d)), hi_f)
        vecs = start_vectors(lambda a, b: rng.uniform(a, b))
        starts.append(pack_start(f0, vecs))

    eq_rows: list[tuple[np.ndarray, float]] = []
    sum_f = np.zeros(objective.n_vars)
    sum_f[:d] = 1.0
    eq_rows.append((sum_f, 1.0))
    for c, (kind, payload) in enumerate(entries):
        if kind == "var":
            row = np.zeros(objective.n_vars)
            row[d + payload : d + payload + problem.group_counts[c]] = 1.0
            eq_rows.append((row, 1.0))
    ineq_rows: list[tuple[np.ndarray, float]] = []  # a.x <= b form
    for coeffs, rhs, rel in rows:
        if rel == "=":
            eq_rows.append((coeffs, rhs))
        elif rel == "<=":
            ineq_rows.append((coeffs, rhs))
        else:
            ineq_rows.append((-coeffs, -rhs))

    def value(x):
        v = objective.value(x)
        if problem.extra_objective is not None and problem.extra_objective_weight:
            ev, _ = problem.extra_objective(x)
            v += problem.extra_objective_weight * ev
        return v

    def grad(x):
        g = objective.gradient(x)
        if problem.extra_objective is not None and problem.extra_objective_weight:
            _, eg = problem.extra_objective(x)
            g = g + problem.extra_objective_weight * eg
        return g

    cons = []
    for a, b in eq_rows:
        cons.append(
            {
                "type": "eq",
                "fun": (lambda a=a, b=b: lambda x: float(a @ x) - b)(),
                "jac": (lambda a=a: lambda x: a)(),
            }
        )
    for a, b in ineq_rows:
        cons.append(
            {
                "type": "ineq",
                "fun": (lambda a=a, b=b: lambda x: b - float(a @ x))(),
                "jac": (lambda a=a: lambda x: -a)(),
            }
        )
    bounds = list(zip(lo, hi))

    def violation_of(x) -> float:
        v = max(abs(float(a @ x) - b) for a, b in eq_rows)
        for a, b in ineq_rows:
            v = max(v, float(a @ x) - b)
        return max(v, 0.0)

    best = None  # (objective, marginals-key, x, violation)
    for x0 in starts:
        res = minimize(
            value,
            x0,
            jac=grad,
            method="SLSQP",
            bounds=bounds,
            constraints=cons,
            options={"maxiter": tol.max_iters, "ftol": 1e-12},
        )
        x = np.clip(res.x, lo, hi)
        if not res.success or violation_of(x) > tol.constraint_tol:
            x = _augmented_lagrangian(
                value, grad, x, lo, hi, eq_rows, ineq_rows, tol
            )
            x = np.clip(x, lo, hi)
        f, vectors = objective.split(x)
        cand_obj = cosine_distance(f, joint_ideal_from_vectors(vectors))
        key = (tuple(np.round(x[d:], 12)), tuple(np.round(f, 12)))
        viol = violation_of(x)
        if viol > max(tol.constraint_tol, 1e-6) and best is not None and best[3] <= tol.constraint_tol:
            continue  # never prefer an infeasible point over a feasible one
        if (
            best is None
            or cand_obj < best[0] - _TIE
            or (abs(cand_obj - best[0]) <= _TIE and key < best[1])
        ):
            best = (cand_obj, key, x, viol)

    obj_val, _, x, viol = best
    f, vectors = objective.split(x)
    chosen = tuple(
        FixedMarginal(
            characteristic=problem.characteristics[c],
            percents=tuple(float(p) for p in vec),
        )
        for c, vec in enumerate(vectors)
    )
    return SolveResult(
        fractions=f.copy(),
        objective=float(obj_val),
        converged=viol <= tol.constraint_tol,
        max_constraint_violation=float(viol),
        starts_used=len(starts),
        chosen_marginals=chosen,
    )


def _augmented_lagrangian(
    value, grad, x0, lo, hi, eq_rows, ineq_rows, tol: SolverTolerances
) -> np.ndarray:
    """Fallback when SLSQP degenerates: box-projected gradient descent on an
    augmented Lagrangian of the linear constraints."""
    x = np.clip(x0, lo, hi)
    lam = np.zeros(len(eq_rows))
    mu = np.zeros(len(ineq_rows))
    rho = 10.0

    def lagrangian(x):
        v = value(x)
        g = grad(x).copy()
        for i, (a, b) in enumerate(eq_rows):
            c = float(a @ x) - b
            v += lam[i] * c + 0.5 * rho * c * c
            g += (lam[i] + rho * c) * a
        for i, (a, b) in enumerate(ineq_rows):
            c = float(a @ x) - b
            t = max(0.0, mu[i] + rho * c)
            v += (t * t - mu[i] * mu[i]) / (2.0 * rho)
            g += t * a
        return v, g

    def violation(x):
        v = max((abs(float(a @ x) - b) for a, b in eq_rows), default=0.0)
        for a, b in ineq_rows:
            v = max(v, float(a @ x) - b)
        return v

    prev_viol = violation(x)
    for _outer in range(25):
        t = 1.0
        f, g = lagrangian(x)
        for _inner in range(200):
            step_done = False
            for _ in range(50):
                xn = np.clip(x - t * g, lo, hi)
                fn, gn = lagrangian(xn)
                if fn <= f - 1e-4 * float(np.dot(g, x - xn)) and fn <= f:
                    x, f, g = xn, fn, gn
                    t = min(t * 1.5, 1e6)
                    step_done = True
                    break
                t *= 0.5
                if t < 1e-18:
                    break
            if not step_done:
                break
            if float(np.max(np.abs(np.clip(x - g, lo, hi) - x))) <= tol.kkt_tol * 0.1:
                break
        for i, (a, b) in enumerate(eq_rows):
            lam[i] += rho * (float(a @ x) - b)
        for i, (a, b) in enumerate(ineq_rows):
            mu[i] = max(0.0, mu[i] + rho * (float(a @ x) - b))
        viol = violation(x)
        if viol <= tol.constraint_tol:
            break
        if viol > 0.5 * prev_viol:
            rho = min(rho * 10.0, 1e10)
        prev_viol = viol
    return x


# ---------------------------------------------------------------------------
# Brute-force oracle (test double for small problems)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OracleResult:
    objective: float
    fractions: np.ndarray
    chosen_marginals: tuple[FixedMarginal, ...] | None = None


def brute_force_oracle(problem: SolveProblem, step: float) -> OracleResult:
    """Exhaustive search over the capped simplex lattice (and the marginal
    lattices in range mode).  Deterministic; only for tiny dimensions."""
    d_caps = np.asarray(problem.caps, dtype=np.float64)
    d = len(d_caps)
    if d > 4:
        raise ValidationFailure("brute-force oracle limited to dimension <= 4")
    if step < 0.005:
        raise ValidationFailure("brute-force oracle requires step >= 0.005")
    if float(d_caps.sum()) < 1.0 - 1e-12:
        raise InfeasibleProblem("stratum capacities sum to less than 1")

    if problem.variant == "fixed":
        j = np.asarray(problem.joint_ideal, dtype=np.float64)
        obj, frac = _lattice_minimum(j, d_caps, step)
        return OracleResult(objective=obj, fractions=frac)

    if problem.marginals is None:
        raise ValidationFailure("range oracle requires aligned marginals")
    from .ideal import enumerate_range_grid  # local to avoid cycle confusion

    per_char = []
    for marginal in problem.marginals:
        if isinstance(marginal, FixedMarginal):
            per_char.append([marginal.normalized()])
        else:
            grid = enumerate_range_grid(marginal, step)
            if not grid:
                raise ValidationFailure(
                    f"no lattice enumeration for '{marginal.characteristic}'"
                )
            per_char.append(grid)

    best = None
    for combo in product(*per_char):
        j = joint_ideal_from_vectors(list(combo))
        obj, frac = _lattice_minimum(j, d_caps, step)
        if best is None or obj < best[0]:
            best = (obj, frac, combo)
    obj, frac, combo = best
    chosen = tuple(
        FixedMarginal(
            characteristic=problem.characteristics[c],
            percents=tuple(float(p) for p in vec),
        )
        for c, vec in enumerate(combo)
    )
    return OracleResult(objective=obj, fractions=frac, chosen_marginals=chosen)


def _lattice_minimum(j: np.ndarray, caps: np.ndarray, step: float):
    t_units = round(1.0 / step)
    if abs(1.0 / step - t_units) > 1e-9:
        raise ValidationFailure("oracle step must divide 1 (e.g. 0.01, 0.05)")
    d = len(caps)
    max_units = np.minimum(
        np.floor(caps / step + 1e-9).astype(np.int64), t_units
    )
    suffix = np.zeros(d + 1, dtype=np.int64)
    for i in range(d - 1, -1, -1):
        suffix[i] = suffix[i + 1] + max_units[i]
    if suffix[0] < t_units:
        raise InfeasibleProblem("no lattice point satisfies the caps")

    nj = float(np.linalg.norm(j))
    best_obj = math.inf
    best_units: tuple[int, ...] | None = None
    units = np.zeros(d, dtype=np.int64)

    def rec(i: int, remaining: int):
        nonlocal best_obj, best_units
        if i == d - 1:
            if remaining <= max_units[i]:
                units[i] = remaining
                f = units / t_units
                sim = float(np.dot(f, j)) / (float(np.linalg.norm(f)) * nj)
                obj = 1.0 - sim
                if obj < best_obj:
                    best_obj = obj
                    best_units = tuple(int(u) for u in units)
            return
        lo = max(0, remaining - int(suffix[i + 1]))
        hi = min(int(max_units[i]), remaining)
        for k in range(lo, hi + 1):
            units[i] = k
            rec(i + 1, remaining - k)

    rec(0, t_units)
    fractions = np.array(best_units, dtype=np.float64) / t_units
    return best_obj, fractions
