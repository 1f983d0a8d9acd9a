"""Distance functions between per-stratum distribution vectors.

All functions accept any one-dimensional array-likes of equal length with
nonnegative entries.  Cosine distance is the objective the rest of the
package minimizes; Euclidean distance and KL divergence are provided for
reporting alongside it.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationFailure

__all__ = [
    "cosine_similarity",
    "cosine_distance",
    "euclidean_distance",
    "kl_divergence",
]


def _as_pair(u, v) -> tuple[np.ndarray, np.ndarray]:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.ndim != 1 or v.ndim != 1:
        raise ValidationFailure("distribution vectors must be one-dimensional")
    if u.shape != v.shape:
        raise ValidationFailure(
            f"length mismatch: {u.shape[0]} vs {v.shape[0]}"
        )
    return u, v


def cosine_similarity(u, v) -> float:
    """Cosine of the angle between ``u`` and ``v``; in [0, 1] for nonnegative input.

    Raises :class:`ValidationFailure` on zero-norm input rather than guessing
    a convention: a zero vector upstream is always a bug.
    """
    u, v = _as_pair(u, v)
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise ValidationFailure("cosine similarity undefined for a zero-norm vector")
    return float(np.dot(u, v) / (nu * nv))


def cosine_distance(u, v) -> float:
    """1 minus the cosine similarity."""
    return 1.0 - cosine_similarity(u, v)


def euclidean_distance(u, v) -> float:
    u, v = _as_pair(u, v)
    return float(np.linalg.norm(u - v))


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats, with the 0*log(0) = 0 convention.

    Requires q[h] > 0 wherever p[h] > 0; a support violation names the
    offending stratum index.
    """
    p, q = _as_pair(p, q)
    support = p > 0.0
    bad = support & (q <= 0.0)
    if np.any(bad):
        h = int(np.flatnonzero(bad)[0])
        raise ValidationFailure(
            f"KL divergence undefined: q is zero at stratum {h} where p is positive"
        )
    ps = p[support]
    return float(np.sum(ps * np.log(ps / q[support])))
