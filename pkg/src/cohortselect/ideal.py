"""Ideal (target) distributions: fixed and range marginals, joint ideals.

The joint ideal percentage of a stratum is the product of the per-group
target percentages of the groups forming that stratum, taken in the same
nested-loop order as the stratification (first characteristic outermost).
Characteristics are treated as independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import reduce
from typing import Iterable, Sequence, Union

import numpy as np

from .errors import ValidationFailure
from .population import CharacteristicSchema, Population, StratificationIndex

__all__ = [
    "FixedMarginal",
    "RangeMarginal",
    "MarginalSpec",
    "LinearConstraint",
    "IdealSpec",
    "JointIdealVector",
    "ValidationReport",
    "joint_ideal",
    "joint_ideal_from_vectors",
    "marginalize_joint",
    "validate_spec",
    "enumerate_range_grid",
    "derive_ideal_from_labels",
]

SUM_TOL = 1e-9


@dataclass(frozen=True)
class FixedMarginal:
    """Exact target percentages for one characteristic, in group order."""

    characteristic: str
    percents: tuple[float, ...]

    def normalized(self) -> np.ndarray:
        """Validated percents, renormalized to sum to exactly 1.

        User-entered percentages rarely sum to exactly 1 in binary floating
        point; anything within 1e-9 is scaled, anything further off is an
        error.
        """
        p = np.asarray(self.percents, dtype=np.float64)
        if np.any(p < 0.0) or np.any(p > 1.0):
            raise ValidationFailure(
                f"marginal '{self.characteristic}': percents must lie in [0, 1]"
            )
        total = float(p.sum())
        if abs(total - 1.0) > SUM_TOL:
            raise ValidationFailure(
                f"marginal '{self.characteristic}' sums to {total:.6g}"
            )
        return p / total


@dataclass(frozen=True)
class RangeMarginal:
    """Interval targets [a_g, b_g] for one characteristic, in group order."""

    characteristic: str
    intervals: tuple[tuple[float, float], ...]

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        a = np.array([iv[0] for iv in self.intervals], dtype=np.float64)
        b = np.array([iv[1] for iv in self.intervals], dtype=np.float64)
        return a, b

    def violations(self) -> list[str]:
        a, b = self.bounds()
        out = []
        name = self.characteristic
        if np.any(a < 0) or np.any(b > 1) or np.any(a > b):
            out.append(
                f"marginal '{name}': intervals must satisfy 0 <= a <= b <= 1"
            )
        if float(a.sum()) > 1.0 + SUM_TOL:
            out.append(
                f"marginal '{name}': lower bounds sum to {float(a.sum()):.6g} > 1"
            )
        if float(b.sum()) < 1.0 - SUM_TOL:
            out.append(
                f"marginal '{name}': upper bounds sum to {float(b.sum()):.6g} < 1"
            )
        return out

    @property
    def is_degenerate(self) -> bool:
        return all(abs(b - a) <= 1e-15 for a, b in self.intervals)

    def as_fixed(self) -> FixedMarginal:
        return FixedMarginal(
            characteristic=self.characteristic,
            percents=tuple(iv[0] for iv in self.intervals),
        )


MarginalSpec = Union[FixedMarginal, RangeMarginal]


@dataclass(frozen=True)
class LinearConstraint:
    """Linear relation over marginal target variables.

    Terms are (characteristic, group, coefficient) triples; relation is one
    of "=", "<=", ">=".
    """

    terms: tuple[tuple[str, str, float], ...]
    relation: str
    rhs: float

    def __post_init__(self):
        if self.relation not in ("=", "<=", ">="):
            raise ValidationFailure(
                f"constraint relation must be one of =, <=, >= (got {self.relation!r})"
            )
        if not self.terms:
            raise ValidationFailure("constraint has no terms")


@dataclass(frozen=True)
class IdealSpec:
    """Per-characteristic targets plus the requested sample size."""

    marginals: tuple[MarginalSpec, ...]
    sample_size: int
    constraints: tuple[LinearConstraint, ...] = ()

    @property
    def variant(self) -> str:
        if self.constraints:
            return "generalized"
        if any(isinstance(m, RangeMarginal) for m in self.marginals):
            return "range"
        return "fixed"

    def marginal_for(self, characteristic: str) -> MarginalSpec:
        for m in self.marginals:
            if m.characteristic == characteristic:
                return m
        raise ValidationFailure(f"no marginal for characteristic '{characteristic}'")


@dataclass(frozen=True)
class JointIdealVector:
    """Per-stratum target fractions, ordered like the stratification."""

    values: np.ndarray

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[str, ...]

    @property
    def ok(self) -> bool:
        return not self.violations


def _aligned_marginals(
    spec: IdealSpec, index: StratificationIndex
) -> list[MarginalSpec]:
    """Marginals reordered to match the stratification's characteristics."""
    by_name = {m.characteristic: m for m in spec.marginals}
    if len(by_name) != len(spec.marginals):
        raise ValidationFailure("duplicate marginal characteristics")
    schema_names = [s.name for s in index.schemas]
    missing = [n for n in schema_names if n not in by_name]
    extra = [n for n in by_name if n not in schema_names]
    if missing or extra:
        raise ValidationFailure(
            "marginal/schema mismatch"
            + (f"; missing: {', '.join(missing)}" if missing else "")
            + (f"; unknown: {', '.join(extra)}" if extra else "")
        )
    return [by_name[n] for n in schema_names]


def joint_ideal_from_vectors(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Flattened outer product of per-characteristic target vectors.

    C-order flattening matches the nested-loop stratum order (first
    characteristic outermost).
    """
    return reduce(np.multiply.outer, [np.asarray(v) for v in vectors]).ravel()


def joint_ideal(spec: IdealSpec, index: StratificationIndex) -> JointIdealVector:
    """Joint ideal percentages for every stratum from all-fixed marginals."""
    aligned = _aligned_marginals(spec, index)
    vectors = []
    for marginal, schema in zip(aligned, index.schemas):
        if not isinstance(marginal, FixedMarginal):
            raise ValidationFailure(
                f"marginal '{marginal.characteristic}' is range-based; "
                f"the joint ideal needs fixed marginals"
            )
        if len(marginal.percents) != len(schema.groups):
            raise ValidationFailure(
                f"marginal '{marginal.characteristic}' has "
                f"{len(marginal.percents)} entries for {len(schema.groups)} groups"
            )
        vectors.append(marginal.normalized())
    return JointIdealVector(values=joint_ideal_from_vectors(vectors))


def marginalize_joint(
    values: np.ndarray, index: StratificationIndex, characteristic: str
) -> np.ndarray:
    """Sum a per-stratum vector over all groups of the other characteristics."""
    c = index.characteristic_position(characteristic)
    shaped = np.asarray(values).reshape(index.group_counts)
    axes = tuple(i for i in range(len(index.group_counts)) if i != c)
    return shaped.sum(axis=axes)


def validate_spec(spec: IdealSpec, index: StratificationIndex) -> ValidationReport:
    """Collect every spec problem into a report instead of failing fast."""
    violations: list[str] = []
    by_name = {}
    for m in spec.marginals:
        if m.characteristic in by_name:
            violations.append(
                f"duplicate marginal for characteristic '{m.characteristic}'"
            )
        by_name[m.characteristic] = m

    schema_by_name = {s.name: s for s in index.schemas}
    for name in schema_by_name:
        if name not in by_name:
            violations.append(f"no marginal provided for characteristic '{name}'")
    for name in by_name:
        if name not in schema_by_name:
            violations.append(f"marginal references unknown characteristic '{name}'")

    for name, marginal in by_name.items():
        schema = schema_by_name.get(name)
        expected = len(schema.groups) if schema else None
        if isinstance(marginal, FixedMarginal):
            if expected is not None and len(marginal.percents) != expected:
                violations.append(
                    f"marginal '{name}' has {len(marginal.percents)} entries "
                    f"for {expected} groups"
                )
            p = np.asarray(marginal.percents, dtype=np.float64)
            if np.any(p < 0) or np.any(p > 1):
                violations.append(f"marginal '{name}': percents must lie in [0, 1]")
            elif abs(float(p.sum()) - 1.0) > SUM_TOL:
                violations.append(f"marginal '{name}' sums to {float(p.sum()):.6g}")
        else:
            if expected is not None and len(marginal.intervals) != expected:
                violations.append(
                    f"marginal '{name}' has {len(marginal.intervals)} intervals "
                    f"for {expected} groups"
                )
            violations.extend(marginal.violations())

    if spec.sample_size < 1:
        violations.append("sample size must be at least 1")
    elif spec.sample_size > index.population_size:
        violations.append(
            f"sample size {spec.sample_size} exceeds population size "
            f"{index.population_size}"
        )

    for i, constraint in enumerate(spec.constraints):
        for char, group, _coeff in constraint.terms:
            schema = schema_by_name.get(char)
            if schema is None:
                violations.append(
                    f"constraint {i}: unknown characteristic '{char}'"
                )
            elif group not in schema.group_names:
                violations.append(
                    f"constraint {i}: characteristic '{char}' has no group '{group}'"
                )

    return ValidationReport(violations=tuple(violations))


def enumerate_range_grid(
    marginal: RangeMarginal, step: float
) -> list[np.ndarray]:
    """All step-lattice vectors inside the intervals that sum to exactly 1.

    The first G-1 coordinates walk the lattice; the last one is solved in
    closed form and only checked against its own interval, so the result
    never depends on a near-miss tolerance.  Vectors come back in
    lexicographic lattice order.
    """
    if step <= 0.0:
        raise ValidationFailure("grid step must be positive")
    bad = marginal.violations()
    if bad:
        raise ValidationFailure("; ".join(bad))

    a, b = marginal.bounds()
    g_count = len(a)
    inv = 1.0 / step
    denom = round(inv) if abs(inv - round(inv)) < 1e-9 else None

    def lattice_value(units: int) -> float:
        # k/T is the canonical double for decimal steps; k*step drifts.
        return units / denom if denom else units * step

    if g_count == 1:
        ok = a[0] - 1e-12 <= 1.0 <= b[0] + 1e-12
        return [np.array([1.0])] if ok else []

    lo_units = [math.ceil(x / step - 1e-9) for x in a]
    hi_units = [math.floor(x / step + 1e-9) for x in b]
    # Interval may be narrower than one lattice cell and contain no point.
    for g in range(g_count - 1):
        if lo_units[g] > hi_units[g]:
            return []

    min_rest = [0.0] * (g_count - 1)
    max_rest = [0.0] * (g_count - 1)
    acc_min = acc_max = 0.0
    for g in range(g_count - 2, -1, -1):
        min_rest[g] = acc_min
        max_rest[g] = acc_max
        acc_min += lattice_value(lo_units[g])
        acc_max += lattice_value(hi_units[g])

    out: list[np.ndarray] = []
    front = [0.0] * (g_count - 1)

    def walk(g: int, partial: float):
        if g == g_count - 1:
            last = 1.0 - math.fsum(front)
            if a[-1] - 1e-12 <= last <= b[-1] + 1e-12:
                out.append(np.array(front + [last]))
            return
        for units in range(lo_units[g], hi_units[g] + 1):
            v = lattice_value(units)
            total = partial + v
            # Prune branches that cannot reach sum 1 with the free tail.
            if total + min_rest[g] > 1.0 - a[-1] + 1e-12:
                break
            if total + max_rest[g] < 1.0 - b[-1] - 1e-12:
                continue
            front[g] = v
            walk(g + 1, total)

    walk(0, 0.0)
    return out


def derive_ideal_from_labels(
    pop: Population,
    desired_ids: Iterable[str],
    schemas: Sequence[CharacteristicSchema],
) -> list[FixedMarginal]:
    """Recover fixed marginals from an example set of desired subjects.

    For every characteristic the target percentage of a group is the share
    of desired subjects falling in it, which turns a select-by-example
    labeling into an ordinary fixed-target problem.
    """
    desired = set(desired_ids)
    if not desired:
        raise ValidationFailure("desired set is empty")
    by_id = {s.id: s for s in pop.subjects}
    unknown = desired - set(by_id)
    if unknown:
        raise ValidationFailure(
            f"desired ids not in population: {sorted(unknown)[:5]}"
        )

    out = []
    for schema in schemas:
        counts = np.zeros(len(schema.groups))
        for sid in desired:
            raw = by_id[sid].attributes[schema.source_column]
            g = schema.map_value(raw)
            if g is None:
                raise ValidationFailure(
                    f"subject '{sid}': value {raw!r} matches no group of "
                    f"characteristic '{schema.name}'"
                )
            counts[g] += 1.0
        out.append(
            FixedMarginal(
                characteristic=schema.name,
                percents=tuple(float(c) / len(desired) for c in counts),
            )
        )
    return out
