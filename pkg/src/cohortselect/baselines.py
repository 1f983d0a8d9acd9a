"""Comparison samplers: proportionate/optimum stratified, rank aggregation,
and weighted random sampling, plus the range-enumeration wrapper.

All methods return a :class:`FinalAllocation`: per-stratum sampling
fractions summing to 1 and respecting the per-stratum capacity init_h / n.
The stratified baselines return fractions only; converting them to integer
counts and concrete subjects is the allocation module's job so every method
shares one rounding rule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from itertools import product
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ValidationFailure
from .ideal import (
    FixedMarginal,
    IdealSpec,
    RangeMarginal,
    enumerate_range_grid,
    joint_ideal_from_vectors,
)
from .metrics import cosine_distance
from .population import Population, StratificationIndex, group_initial_distribution

__all__ = [
    "FinalAllocation",
    "NeymanConfig",
    "SubjectWeights",
    "psrs_allocation",
    "neyman_allocation",
    "rank_aggregation_select",
    "wrs_select",
    "range_wrapper",
    "compute_subject_weights",
    "footrule_aggregate",
]


@dataclass(frozen=True)
class FinalAllocation:
    """Per-stratum sampling fractions produced by one method."""

    fractions: np.ndarray
    method: str
    distance: float | None = None
    chosen_marginals: tuple[FixedMarginal, ...] | None = None
    selected_ids: tuple[str, ...] | None = None
    warnings: tuple[str, ...] = ()

    def evaluated_against(self, joint_ideal_values: np.ndarray) -> "FinalAllocation":
        """Copy with the cosine distance to the given joint ideal filled in."""
        return replace(
            self, distance=cosine_distance(self.fractions, joint_ideal_values)
        )


@dataclass(frozen=True)
class NeymanConfig:
    """How to estimate the per-stratum standard deviations for Eq.-style
    optimum allocation: a seeded pilot simple random sample measured on an
    explicit numeric column."""

    target_column: str
    pilot_size: int | None = None  # default min(N, 10 * D), at least 2
    pilot_seed: int = 0
    sigma_floor: float = 1e-6

    def __post_init__(self):
        if self.pilot_size is not None and self.pilot_size < 2:
            raise ValidationFailure("pilot_size must be at least 2")
        if self.sigma_floor <= 0:
            raise ValidationFailure("sigma_floor must be positive")


@dataclass(frozen=True)
class SubjectWeights:
    """Per-subject selection pressure derived from ideal vs initial shares."""

    subject_ids: tuple[str, ...]
    per_characteristic: Mapping[str, np.ndarray]
    joint: np.ndarray
    probabilities: np.ndarray


def _check_sample_size(index: StratificationIndex, n: int):
    if n < 1:
        raise ValidationFailure("sample size must be at least 1")
    if n > index.population_size:
        raise ValidationFailure(
            f"sample size {n} exceeds population size {index.population_size}"
        )


def psrs_allocation(index: StratificationIndex, n: int) -> FinalAllocation:
    """Proportionate stratified sampling: each stratum keeps its own share."""
    _check_sample_size(index, n)
    return FinalAllocation(fractions=index.joint_initial(), method="psrs")


def neyman_allocation(
    index: StratificationIndex, n: int, cfg: NeymanConfig, pop: Population
) -> FinalAllocation:
    """Optimum stratified sampling: shares proportional to size times the
    estimated standard deviation of the target column.

    Strata absent from the pilot (or with fewer than two pilot members, or
    zero spread) fall back to ``sigma_floor``.  When the raw shares exceed a
    stratum's capacity init_h / n, the excess is redistributed over the
    uncapped strata with a warning; the capacity bound is part of the
    allocation contract.
    """
    _check_sample_size(index, n)
    if cfg.target_column not in pop.columns:
        raise ValidationFailure(
            f"Neyman target column '{cfg.target_column}' not in population"
        )

    d = index.dimension
    pilot_size = cfg.pilot_size
    if pilot_size is None:
        pilot_size = max(2, min(pop.size, 10 * d))
    pilot_size = min(pilot_size, pop.size)

    rng = np.random.default_rng(cfg.pilot_seed)
    picked = rng.choice(pop.size, size=pilot_size, replace=False)

    values_by_stratum: dict[int, list[float]] = {}
    for pos in picked:
        subj = pop.subjects[pos]
        raw = subj.attributes[cfg.target_column]
        try:
            val = float(raw)
        except ValueError:
            raise ValidationFailure(
                f"Neyman target column '{cfg.target_column}' is not numeric "
                f"for subject '{subj.id}' (value {raw!r})"
            )
        values_by_stratum.setdefault(index.subject_stratum[subj.id], []).append(val)

    sigma = np.full(d, cfg.sigma_floor)
    for h, vals in values_by_stratum.items():
        if len(vals) >= 2:
            s = float(np.std(vals, ddof=1))
            sigma[h] = s if s > 0.0 else cfg.sigma_floor

    counts = index.init_counts().astype(np.float64)
    # Normalizing by the largest sigma keeps the equal-sigma case bitwise
    # identical to proportionate allocation.
    weights = sigma / sigma.max()
    raw = counts * weights
    fractions = raw / raw.sum()

    warnings: list[str] = []
    caps = index.caps(n)
    if np.any(fractions > caps + 1e-15):
        fractions = _cap_redistribute(fractions, caps)
        warnings.append(
            "optimum-allocation shares exceeded stratum capacity; "
            "excess redistributed over uncapped strata"
        )
    return FinalAllocation(
        fractions=fractions, method="osrs", warnings=tuple(warnings)
    )


def _cap_redistribute(fractions: np.ndarray, caps: np.ndarray) -> np.ndarray:
    """Clamp to caps and push the excess onto uncapped strata, keeping sum 1."""
    if float(caps.sum()) < 1.0 - 1e-12:
        raise ValidationFailure("stratum capacities sum to less than 1")
    f = fractions.copy()
    for _ in range(len(f)):
        over = f > caps + 1e-15
        if not np.any(over):
            break
        excess = float(np.sum(f[over] - caps[over]))
        f[over] = caps[over]
        free = ~over & (f < caps - 1e-15)
        room = float(np.sum(f[free]))
        if room <= 0.0:
            # Spread by remaining capacity instead of current mass.
            slack = caps[free] - f[free]
            f[free] += excess * slack / float(slack.sum())
        else:
            f[free] += excess * f[free] / room
    return f


def compute_subject_weights(
    index: StratificationIndex,
    marginals: Sequence[FixedMarginal],
) -> SubjectWeights:
    """Per-characteristic and joint weights for every subject.

    The per-characteristic weight is the ratio of the ideal share to the
    initial share of the subject's group; the joint weight is the same ratio
    on the subject's whole stratum, and the selection probability is the
    joint weight times 1/N.
    """
    by_name = {m.characteristic: m for m in marginals}
    ordered = []
    for schema in index.schemas:
        if schema.name not in by_name:
            raise ValidationFailure(f"no marginal for characteristic '{schema.name}'")
        ordered.append(by_name[schema.name].normalized())

    subject_ids: list[str] = []
    stratum_of: list[int] = []
    for h, stratum in enumerate(index.strata):
        for sid in stratum.member_ids:
            subject_ids.append(sid)
            stratum_of.append(h)
    order = np.argsort(np.array(subject_ids))
    subject_ids = [subject_ids[i] for i in order]
    stratum_of = np.array([stratum_of[i] for i in order])

    per_char: dict[str, np.ndarray] = {}
    for c, schema in enumerate(index.schemas):
        init = group_initial_distribution(index, schema.name)
        group_of = np.array([index.strata[h].index[c] for h in stratum_of])
        ideal = ordered[c]
        per_char[schema.name] = ideal[group_of] / init[group_of]

    j_init = index.joint_initial()
    j_ideal = joint_ideal_from_vectors(ordered)
    jw_strata = np.divide(
        j_ideal, j_init, out=np.zeros_like(j_ideal), where=j_init > 0
    )
    joint = jw_strata[stratum_of]
    return SubjectWeights(
        subject_ids=tuple(subject_ids),
        per_characteristic=per_char,
        joint=joint,
        probabilities=joint / index.population_size,
    )


def footrule_aggregate(orders: np.ndarray) -> tuple[np.ndarray, float]:
    """Consensus positions minimizing total displacement from the input orders.

    ``orders`` is (C, N): orders[c][s] is subject s's 0-based rank in list c.
    Realized as a minimum-cost perfect matching between subjects and rank
    positions with cost |order_c(s) - p| summed over lists; returns the
    per-subject aggregate position and the optimal total cost.
    """
    orders = np.asarray(orders, dtype=np.int64)
    if orders.ndim != 2:
        raise ValidationFailure("orders must be a (lists, subjects) matrix")
    n = orders.shape[1]
    positions = np.arange(n)
    cost = np.abs(orders[:, :, None] - positions[None, None, :]).sum(axis=0)
    rows, cols = linear_sum_assignment(cost)
    assigned = np.empty(n, dtype=np.int64)
    assigned[rows] = cols
    return assigned, float(cost[rows, cols].sum())


def rank_aggregation_select(
    index: StratificationIndex,
    pop: Population,
    marginals: Sequence[FixedMarginal],
    n: int,
) -> FinalAllocation:
    """Score subjects per characteristic, aggregate the orderings, take the
    top n.

    Weights are converted to orders (higher weight first, ties by ascending
    subject id); the order lists are merged by displacement-optimal
    aggregation and the top-n subjects of the consensus become the cohort.
    """
    _check_sample_size(index, n)
    by_name = {m.characteristic: m for m in marginals}

    subject_ids = [s.id for s in pop.subjects]
    stratum_of = np.array([index.subject_stratum[sid] for sid in subject_ids])
    warnings: list[str] = []

    order_lists = []
    for c, schema in enumerate(index.schemas):
        if schema.name not in by_name:
            raise ValidationFailure(f"no marginal for characteristic '{schema.name}'")
        ideal = by_name[schema.name].normalized()
        init = group_initial_distribution(index, schema.name)
        empty_targets = [
            schema.groups[g].name
            for g in range(len(init))
            if init[g] == 0.0 and ideal[g] > 0.0
        ]
        if empty_targets:
            warnings.append(
                f"characteristic '{schema.name}': ideal mass on empty "
                f"group(s) {empty_targets}; no subjects can be found there"
            )
        group_of = np.array([index.strata[h].index[c] for h in stratum_of])
        w = ideal[group_of] / init[group_of]
        ranked = sorted(range(len(subject_ids)), key=lambda s: (-w[s], subject_ids[s]))
        order = np.empty(len(subject_ids), dtype=np.int64)
        for position, s in enumerate(ranked):
            order[s] = position
        order_lists.append(order)

    assigned, _cost = footrule_aggregate(np.stack(order_lists))
    consensus = np.argsort(assigned, kind="stable")
    top = consensus[:n]
    selected = tuple(subject_ids[s] for s in top)

    fractions = np.bincount(stratum_of[top], minlength=index.dimension) / float(n)
    ji = joint_ideal_from_vectors(
        [by_name[s.name].normalized() for s in index.schemas]
    )
    return FinalAllocation(
        fractions=fractions,
        method="ra",
        distance=cosine_distance(fractions, ji),
        selected_ids=selected,
        warnings=tuple(warnings),
    )


def wrs_select(
    index: StratificationIndex,
    joint_ideal_values: np.ndarray,
    n: int,
    seed: int,
) -> FinalAllocation:
    """Weighted random sampling without replacement by exponential keys.

    Each subject's weight is its stratum's ideal-to-initial ratio; n
    distinct subjects are kept by ranking the keys u^(1/w), which makes the
    first draw land on subject s with probability exactly w_s / sum(w).
    Deterministic for a fixed seed.
    """
    _check_sample_size(index, n)
    ji = np.asarray(joint_ideal_values, dtype=np.float64)
    if ji.shape[0] != index.dimension:
        raise ValidationFailure("joint ideal length does not match stratification")

    j_init = index.joint_initial()
    warnings = []
    unreachable = (ji > 0.0) & (j_init == 0.0)
    if np.any(unreachable):
        labels = [index.label(int(h)) for h in np.flatnonzero(unreachable)[:5]]
        warnings.append(
            f"ideal mass on empty strata {labels}: that share is unreachable"
        )
    jw = np.divide(ji, j_init, out=np.zeros_like(ji), where=j_init > 0)

    subject_ids: list[str] = []
    weights: list[float] = []
    for h, stratum in enumerate(index.strata):
        for sid in stratum.member_ids:
            subject_ids.append(sid)
            weights.append(jw[h])
    # Key order must not depend on insertion order of the strata walk.
    id_order = np.argsort(np.array(subject_ids))
    subject_ids = [subject_ids[i] for i in id_order]
    w = np.array(weights)[id_order]

    if not np.any(w > 0.0):
        raise ValidationFailure("all selection weights are zero")
    if int(np.sum(w > 0.0)) < n:
        warnings.append(
            "fewer positive-weight subjects than the sample size; "
            "zero-weight subjects complete the cohort"
        )

    rng = np.random.default_rng(seed)
    u = rng.random(len(subject_ids))
    with np.errstate(divide="ignore"):
        keys = np.where(w > 0.0, np.log(u) / np.where(w > 0.0, w, 1.0), -np.inf)
    ranked = sorted(range(len(subject_ids)), key=lambda s: (-keys[s], subject_ids[s]))
    top = ranked[:n]
    selected = tuple(subject_ids[s] for s in top)

    stratum_of = np.array([index.subject_stratum[sid] for sid in subject_ids])
    fractions = np.bincount(stratum_of[top], minlength=index.dimension) / float(n)
    return FinalAllocation(
        fractions=fractions,
        method="wrs",
        distance=cosine_distance(fractions, ji),
        selected_ids=selected,
        warnings=tuple(warnings),
    )


MethodRunner = Callable[[tuple[FixedMarginal, ...], np.ndarray], FinalAllocation]


def range_wrapper(
    run_method: MethodRunner,
    index: StratificationIndex,
    spec: IdealSpec,
    n: int,
    step: float,
) -> FinalAllocation:
    """Run a fixed-variation method over every range enumeration and keep the
    closest result.

    Fixed marginals contribute a single enumeration; every range marginal
    contributes its whole step lattice.  Each combination gets its own joint
    ideal and cosine distance, and the argmin wins; ties go to the
    lexicographically smallest chosen marginals because the lattice walk is
    itself lexicographic.
    """
    _check_sample_size(index, n)
    per_char: list[list[np.ndarray]] = []
    names = []
    for schema in index.schemas:
        marginal = spec.marginal_for(schema.name)
        names.append(schema.name)
        if isinstance(marginal, FixedMarginal):
            per_char.append([marginal.normalized()])
        else:
            grid = enumerate_range_grid(marginal, step)
            if not grid:
                raise ValidationFailure(
                    f"characteristic '{schema.name}': no lattice enumeration "
                    f"at step {step} satisfies the sum constraint"
                )
            per_char.append(grid)

    best: FinalAllocation | None = None
    best_distance = math.inf
    for combo in product(*per_char):
        ji = joint_ideal_from_vectors(list(combo))
        marginals = tuple(
            FixedMarginal(characteristic=name, percents=tuple(float(x) for x in vec))
            for name, vec in zip(names, combo)
        )
        allocation = run_method(marginals, ji)
        distance = cosine_distance(allocation.fractions, ji)
        if distance < best_distance:
            best_distance = distance
            best = replace(
                allocation, distance=distance, chosen_marginals=marginals
            )
    assert best is not None
    return best
