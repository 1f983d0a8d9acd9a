"""Exception types shared across the package.

Every error the service maps to an HTTP response (and the CLI maps to an
exit code) derives from :class:`CohortSelectError` and carries a ``kind``
tag: ``"validation"`` or ``"infeasible"``.  Non-convergence of the solver is
not an exception; it is a flag on the returned result.
"""


class CohortSelectError(Exception):
    """Base class for all domain errors."""

    kind = "validation"


class ValidationFailure(CohortSelectError):
    """Bad inputs: malformed data, schema violations, unsupported requests."""

    kind = "validation"


class InfeasibleProblem(CohortSelectError):
    """The constraint system admits no feasible point."""

    kind = "infeasible"
