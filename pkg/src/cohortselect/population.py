"""Population loading, characteristic schemas, and stratification.

A population is a flat table of subjects with categorical or numeric
attributes.  Characteristic schemas bin each attribute into named groups
(value sets or half-open numeric intervals), and :func:`stratify` partitions
the subjects into the full cross-product of groups: one stratum per
combination, kept even when empty so the vector dimension is always the
product of the group counts.

Everything here is immutable after construction and safe to share across
threads.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ValidationFailure

__all__ = [
    "GroupDef",
    "CharacteristicSchema",
    "Subject",
    "Population",
    "Stratum",
    "StratificationIndex",
    "SyntheticCharacteristic",
    "PairwiseCorrelation",
    "SyntheticSpec",
    "load_population",
    "stratify",
    "group_initial_distribution",
    "generate_synthetic_population",
    "population_to_csv",
]


@dataclass(frozen=True)
class GroupDef:
    """One bin of a characteristic.

    Exactly one rule applies: a categorical value set, or a half-open
    numeric interval [lo, hi).  Either edge of the interval may be open
    (``None``) so schemas can express catch-all bins like "under 10" or
    "60 and over".
    """

    name: str
    values: frozenset[str] | None = None
    lo: float | None = None
    hi: float | None = None

    def __post_init__(self):
        numeric = self.lo is not None or self.hi is not None
        if numeric and self.values is not None:
            raise ValidationFailure(
                f"group '{self.name}': give either values or an interval, not both"
            )
        if not numeric and self.values is None:
            raise ValidationFailure(f"group '{self.name}' has no rule")
        if self.lo is not None and self.hi is not None and not self.lo < self.hi:
            raise ValidationFailure(
                f"group '{self.name}': interval requires lo < hi"
            )

    @property
    def is_interval(self) -> bool:
        return self.values is None

    def matches(self, raw: str) -> bool:
        if self.values is not None:
            return raw in self.values
        try:
            x = float(raw)
        except ValueError:
            return False
        if self.lo is not None and x < self.lo:
            return False
        if self.hi is not None and x >= self.hi:
            return False
        return True


@dataclass(frozen=True)
class CharacteristicSchema:
    """An attribute used for stratification, with its ordered groups.

    Groups must be pairwise disjoint; exhaustiveness over the actual data is
    enforced when stratifying (an unmatched subject is a hard error, never a
    silent drop).
    """

    name: str
    source_column: str
    groups: tuple[GroupDef, ...]

    def __post_init__(self):
        if not self.groups:
            raise ValidationFailure(f"characteristic '{self.name}' has no groups")
        names = [g.name for g in self.groups]
        if len(set(names)) != len(names):
            raise ValidationFailure(
                f"characteristic '{self.name}' has duplicate group names"
            )
        self._check_disjoint()

    def _check_disjoint(self):
        seen: set[str] = set()
        intervals: list[tuple[float, float, str]] = []
        for g in self.groups:
            if g.values is not None:
                overlap = seen & g.values
                if overlap:
                    raise ValidationFailure(
                        f"characteristic '{self.name}': value {sorted(overlap)[0]!r} "
                        f"appears in more than one group"
                    )
                seen |= g.values
            else:
                lo = -math.inf if g.lo is None else g.lo
                hi = math.inf if g.hi is None else g.hi
                intervals.append((lo, hi, g.name))
        intervals.sort()
        for (lo1, hi1, n1), (lo2, hi2, n2) in zip(intervals, intervals[1:]):
            if lo2 < hi1:
                raise ValidationFailure(
                    f"characteristic '{self.name}': intervals of groups "
                    f"'{n1}' and '{n2}' overlap"
                )

    @property
    def group_names(self) -> tuple[str, ...]:
        return tuple(g.name for g in self.groups)

    def group_index(self, group: str) -> int:
        for i, g in enumerate(self.groups):
            if g.name == group:
                return i
        raise ValidationFailure(
            f"characteristic '{self.name}' has no group '{group}'"
        )

    def map_value(self, raw: str) -> int | None:
        """Index of the unique matching group, or None if nothing matches."""
        for i, g in enumerate(self.groups):
            if g.matches(raw):
                return i
        return None


@dataclass(frozen=True)
class Subject:
    id: str
    attributes: Mapping[str, str]


@dataclass(frozen=True)
class Population:
    """An immutable sampling frame: one Subject per row of the input table."""

    subjects: tuple[Subject, ...]
    columns: tuple[str, ...]
    id_column: str

    @property
    def size(self) -> int:
        return len(self.subjects)

    def ids(self) -> tuple[str, ...]:
        return tuple(s.id for s in self.subjects)


@dataclass(frozen=True)
class Stratum:
    """One cell of the cross-product partition."""

    index: tuple[int, ...]
    member_ids: tuple[str, ...]
    init_count: int
    joint_initial_fraction: float


@dataclass(frozen=True)
class StratificationIndex:
    """All strata in nested-loop order: first characteristic outermost.

    The flattened order equals iterating group indices of the first
    characteristic in the outer loop and the last characteristic innermost,
    i.e. lexicographic order of the index tuples.
    """

    schemas: tuple[CharacteristicSchema, ...]
    strata: tuple[Stratum, ...]
    population_size: int
    subject_stratum: Mapping[str, int] = field(repr=False)

    @property
    def dimension(self) -> int:
        return len(self.strata)

    @property
    def group_counts(self) -> tuple[int, ...]:
        return tuple(len(s.groups) for s in self.schemas)

    def joint_initial(self) -> np.ndarray:
        return np.array([s.joint_initial_fraction for s in self.strata])

    def init_counts(self) -> np.ndarray:
        return np.array([s.init_count for s in self.strata], dtype=np.int64)

    def caps(self, n: int) -> np.ndarray:
        """Per-stratum upper bounds init_h / n on the final sampling fraction."""
        if n <= 0:
            raise ValidationFailure("sample size must be positive")
        return self.init_counts() / float(n)

    def label(self, h: int) -> str:
        idx = self.strata[h].index
        return "|".join(
            schema.groups[g].name for schema, g in zip(self.schemas, idx)
        )

    def characteristic_position(self, name: str) -> int:
        for i, schema in enumerate(self.schemas):
            if schema.name == name:
                return i
        raise ValidationFailure(f"unknown characteristic '{name}'")

    def strata_in_group(self, characteristic: str, group_index: int) -> np.ndarray:
        """Flat indices of all strata whose cell uses the given group."""
        c = self.characteristic_position(characteristic)
        mask = np.array(
            [s.index[c] == group_index for s in self.strata], dtype=bool
        )
        return np.flatnonzero(mask)


def load_population(file, id_column: str) -> Population:
    """Read a UTF-8 comma-delimited table with a header row into a Population.

    Rejects duplicate ids, a missing id column, and an empty data section.
    """
    try:
        with open(file, "r", encoding="utf-8", newline="") as fh:
            return _read_population(fh, id_column, str(file))
    except OSError as exc:
        raise ValidationFailure(f"cannot read population file {file}: {exc}") from exc


def _read_population(fh, id_column: str, source: str) -> Population:
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        raise ValidationFailure(f"empty population: {source} has no header row")
    header = [h.strip() for h in header]
    if id_column not in header:
        raise ValidationFailure(
            f"missing column '{id_column}' in {source} (have: {', '.join(header)})"
        )
    id_pos = header.index(id_column)

    subjects: list[Subject] = []
    seen: set[str] = set()
    for row_no, row in enumerate(reader, start=2):
        if len(row) != len(header):
            raise ValidationFailure(
                f"{source} row {row_no}: expected {len(header)} fields, got {len(row)}"
            )
        sid = row[id_pos].strip()
        if sid in seen:
            raise ValidationFailure(f"duplicate id '{sid}' at {source} row {row_no}")
        seen.add(sid)
        attrs = {col: val.strip() for col, val in zip(header, row)}
        subjects.append(Subject(id=sid, attributes=attrs))

    if not subjects:
        raise ValidationFailure(f"empty population: {source} has a header but no rows")
    return Population(
        subjects=tuple(subjects), columns=tuple(header), id_column=id_column
    )


def stratify(
    pop: Population, schemas: Sequence[CharacteristicSchema]
) -> StratificationIndex:
    """Partition the population into the cross-product of all groups.

    Every subject must map to exactly one group per characteristic; a value
    matched by no group is an error naming the subject, characteristic, and
    value.  Empty strata are retained with init_count = 0.
    """
    schemas = tuple(schemas)
    if not schemas:
        raise ValidationFailure("at least one characteristic schema is required")
    names = [s.name for s in schemas]
    if len(set(names)) != len(names):
        raise ValidationFailure("duplicate characteristic names")
    for schema in schemas:
        if schema.source_column not in pop.columns:
            raise ValidationFailure(
                f"characteristic '{schema.name}': column '{schema.source_column}'"
                f" not present in the population"
            )

    counts = tuple(len(s.groups) for s in schemas)
    members: dict[tuple[int, ...], list[str]] = {
        idx: [] for idx in np.ndindex(*counts)
    }
    subject_stratum: dict[str, int] = {}
    strides = _strides(counts)

    for subj in pop.subjects:
        cell: list[int] = []
        for schema in schemas:
            raw = subj.attributes[schema.source_column]
            g = schema.map_value(raw)
            if g is None:
                raise ValidationFailure(
                    f"subject '{subj.id}': value {raw!r} matches no group of "
                    f"characteristic '{schema.name}'"
                )
            cell.append(g)
        idx = tuple(cell)
        members[idx].append(subj.id)
        subject_stratum[subj.id] = int(np.dot(strides, idx))

    n_total = pop.size
    strata = []
    for idx in np.ndindex(*counts):
        ids = tuple(members[idx])
        strata.append(
            Stratum(
                index=tuple(int(i) for i in idx),
                member_ids=ids,
                init_count=len(ids),
                joint_initial_fraction=len(ids) / n_total,
            )
        )
    return StratificationIndex(
        schemas=schemas,
        strata=tuple(strata),
        population_size=n_total,
        subject_stratum=subject_stratum,
    )


def _strides(counts: Sequence[int]) -> np.ndarray:
    """Flat-index stride per axis for lexicographic (C-order) layout."""
    strides = np.ones(len(counts), dtype=np.int64)
    for i in range(len(counts) - 2, -1, -1):
        strides[i] = strides[i + 1] * counts[i + 1]
    return strides


def group_initial_distribution(
    index: StratificationIndex, characteristic: str
) -> np.ndarray:
    """Per-group fraction of the population, in schema group order."""
    c = index.characteristic_position(characteristic)
    n_groups = len(index.schemas[c].groups)
    out = np.zeros(n_groups)
    for s in index.strata:
        out[s.index[c]] += s.init_count
    return out / index.population_size


# ---------------------------------------------------------------------------
# Synthetic populations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticCharacteristic:
    """Marginal skew for one generated attribute.

    With ``bins`` given (one [lo, hi) pair per group), the emitted column is
    a numeric value drawn uniformly inside the chosen bin; otherwise the
    column holds the group name itself.
    """

    name: str
    groups: tuple[str, ...]
    skew: tuple[float, ...]
    bins: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self):
        if len(self.groups) != len(self.skew):
            raise ValidationFailure(
                f"synthetic characteristic '{self.name}': skew length mismatch"
            )
        skew = np.asarray(self.skew, dtype=np.float64)
        if np.any(skew < 0) or abs(float(skew.sum()) - 1.0) > 1e-9:
            raise ValidationFailure(
                f"synthetic characteristic '{self.name}': skew must be a "
                f"distribution (nonnegative, summing to 1)"
            )
        if self.bins is not None:
            if len(self.bins) != len(self.groups):
                raise ValidationFailure(
                    f"synthetic characteristic '{self.name}': bins length mismatch"
                )
            for lo, hi in self.bins:
                if not lo < hi:
                    raise ValidationFailure(
                        f"synthetic characteristic '{self.name}': bad bin [{lo}, {hi})"
                    )


@dataclass(frozen=True)
class PairwiseCorrelation:
    """Couple two characteristics through a shared latent uniform.

    With probability ``rho`` the second characteristic reuses the first
    one's latent draw, which induces positive dependence while preserving
    both marginals exactly.
    """

    first: str
    second: str
    rho: float

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValidationFailure("correlation rho must lie in [0, 1]")


@dataclass(frozen=True)
class SyntheticSpec:
    characteristics: tuple[SyntheticCharacteristic, ...]
    correlations: tuple[PairwiseCorrelation, ...] = ()


def generate_synthetic_population(
    spec: SyntheticSpec, n: int, seed: int
) -> Population:
    """Draw a deterministic synthetic population with the given marginal skews.

    Each characteristic is sampled by inverse-CDF from a latent uniform;
    correlated pairs share the latent with probability rho.  Empirical
    marginals converge to the skews as n grows.
    """
    if n < 1:
        raise ValidationFailure("synthetic population size must be at least 1")
    if not spec.characteristics:
        raise ValidationFailure("synthetic spec has no characteristics")
    names = [c.name for c in spec.characteristics]
    if len(set(names)) != len(names):
        raise ValidationFailure("duplicate synthetic characteristic names")
    for corr in spec.correlations:
        for endpoint in (corr.first, corr.second):
            if endpoint not in names:
                raise ValidationFailure(
                    f"correlation references unknown characteristic '{endpoint}'"
                )

    rng = np.random.default_rng(seed)
    # Latent uniforms: one per characteristic per subject, then coupling.
    latents = {name: rng.random(n) for name in names}
    for corr in spec.correlations:
        reuse = rng.random(n) < corr.rho
        coupled = latents[corr.second].copy()
        coupled[reuse] = latents[corr.first][reuse]
        latents[corr.second] = coupled

    columns: dict[str, list[str]] = {}
    for char in spec.characteristics:
        cdf = np.cumsum(np.asarray(char.skew, dtype=np.float64))
        cdf[-1] = 1.0  # guard against cumulative rounding
        picks = np.searchsorted(cdf, latents[char.name], side="right")
        picks = np.minimum(picks, len(char.groups) - 1)
        if char.bins is None:
            columns[char.name] = [char.groups[g] for g in picks]
        else:
            jitter = rng.random(n)
            vals = []
            for g, u in zip(picks, jitter):
                lo, hi = char.bins[g]
                vals.append(f"{lo + u * (hi - lo):.6f}")
            columns[char.name] = vals

    subjects = []
    for i in range(n):
        sid = f"s{i + 1}"
        attrs = {"id": sid}
        for name in names:
            attrs[name] = columns[name][i]
        subjects.append(Subject(id=sid, attributes=attrs))
    return Population(
        subjects=tuple(subjects),
        columns=("id", *names),
        id_column="id",
    )


def population_to_csv(pop: Population) -> str:
    """Serialize a population back to CSV text (UTF-8, header row)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(pop.columns)
    for subj in pop.subjects:
        writer.writerow([subj.attributes.get(col, "") for col in pop.columns])
    return buf.getvalue()
