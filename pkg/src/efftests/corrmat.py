"""Correlation matrices: structured families, estimation, eigen-analysis.

The central object is :class:`CorrelationMatrix`, a dense symmetric
unit-diagonal matrix.  Positive semidefiniteness is deliberately *not*
an invariant: pairwise-complete estimation from data with missing
entries can produce indefinite matrices, which downstream estimators
handle by clamping negative eigenvalues.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterator

import numpy as np

from .errors import DataError

__all__ = [
    "StructureKind",
    "StructuredCorrelationSpec",
    "CorrelationMatrix",
    "EigenSpectrum",
    "BlockPartition",
    "build_structured",
    "estimate_from_genotypes",
    "eigen_spectrum",
    "clamp_negative_eigenvalues",
    "prune_perfect_ld",
]

# A clamped eigenvalue below -LARGE_NEGATIVE_FACTOR * dim is no longer
# "small in absolute value" and gets flagged on the returned spectrum.
LARGE_NEGATIVE_FACTOR = 0.05

# |r_ij| within this tolerance of 1 counts as perfect dependence.
PERFECT_LD_TOL = 1e-12

_SYMMETRY_ATOL = 1e-10


class StructureKind(str, Enum):
    COMPOUND_SYMMETRY = "cs"
    AR1 = "ar1"
    TRIDIAGONAL = "tridiagonal"
    IDENTITY = "identity"


@dataclass(frozen=True)
class StructuredCorrelationSpec:
    """Parametric description of one of the structured correlation families.

    ``rho`` is validated against the positive-definiteness bound of each
    family: compound symmetry needs ``-1/(dim-1) < rho < 1``, AR1 needs
    ``|rho| < 1`` and the tridiagonal band needs ``|rho| <= 0.5`` (which
    guarantees positive definiteness for every dimension).
    """

    kind: StructureKind
    dim: int
    rho: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", StructureKind(self.kind))
        if self.dim < 1:
            raise ValueError(f"dim must be a positive integer, got {self.dim}")
        k, r, m = self.kind, self.rho, self.dim
        if k is StructureKind.IDENTITY:
            if r != 0.0:
                raise ValueError("identity structure takes no correlation parameter")
        elif k is StructureKind.COMPOUND_SYMMETRY:
            low = -1.0 / (m - 1) if m > 1 else -1.0
            if not (low < r < 1.0):
                raise ValueError(
                    f"compound symmetry requires rho in ({low:.6g}, 1), got {r}"
                )
        elif k is StructureKind.AR1:
            if not abs(r) < 1.0:
                raise ValueError(f"AR1 requires |rho| < 1, got {r}")
        elif k is StructureKind.TRIDIAGONAL:
            if not abs(r) <= 0.5:
                raise ValueError(
                    f"tridiagonal requires |rho| <= 0.5 for positive definiteness, got {r}"
                )


@dataclass(frozen=True)
class CorrelationMatrix:
    """Dense symmetric correlation matrix with exact unit diagonal.

    ``n_samples`` is set when the matrix was estimated from data and
    bounds the rank of the estimate (at most ``min(n_samples - 1, dim)``
    nonzero eigenvalues).
    """

    values: np.ndarray
    n_samples: int | None = None

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError(f"correlation matrix must be square, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("correlation matrix contains non-finite entries")
        asym = np.max(np.abs(v - v.T)) if v.size else 0.0
        if asym > _SYMMETRY_ATOL:
            raise ValueError(f"matrix is not symmetric (max asymmetry {asym:.3g})")
        diag_err = np.max(np.abs(np.diag(v) - 1.0)) if v.size else 0.0
        if diag_err > _SYMMETRY_ATOL:
            raise ValueError(f"diagonal must be 1 (max deviation {diag_err:.3g})")
        off_max = np.max(np.abs(v)) if v.size else 1.0
        if off_max > 1.0 + _SYMMETRY_ATOL:
            raise ValueError(f"off-diagonal entry out of [-1, 1]: magnitude {off_max:.6g}")
        # snap to an exactly symmetric, exactly unit-diagonal representation
        v = np.clip((v + v.T) / 2.0, -1.0, 1.0)
        np.fill_diagonal(v, 1.0)
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class EigenSpectrum:
    """Eigenvalues of a correlation matrix, sorted descending.

    ``rank_bound`` is ``min(n - 1, m)`` when the source matrix was
    estimated from ``n`` samples, else the dimension itself.  The clamp
    fields record what :func:`clamp_negative_eigenvalues` did, if
    anything.
    """

    lambdas: np.ndarray
    source_dim: int
    rank_bound: int | None = None
    n_clamped: int = 0
    most_negative_clamped: float | None = None
    large_negative_warning: bool = False

    def __post_init__(self) -> None:
        lam = np.array(self.lambdas, dtype=np.float64)
        if lam.ndim != 1 or lam.size != self.source_dim:
            raise ValueError(
                f"expected {self.source_dim} eigenvalues, got shape {lam.shape}"
            )
        if np.any(np.diff(lam) > 0):
            lam = np.sort(lam)[::-1].copy()
        lam.flags.writeable = False
        object.__setattr__(self, "lambdas", lam)


@dataclass(frozen=True)
class BlockPartition:
    """Contiguous, disjoint, exhaustive partition of marker indices 0..dim-1."""

    dim: int
    sizes: tuple[int, ...]

    def __post_init__(self) -> None:
        if any(s < 1 for s in self.sizes):
            raise ValueError("block sizes must be positive")
        if sum(self.sizes) != self.dim:
            raise ValueError(
                f"block sizes sum to {sum(self.sizes)}, expected dim {self.dim}"
            )

    @classmethod
    def uniform(cls, dim: int, block_size: int) -> "BlockPartition":
        """Blocks of ``block_size`` in input order, last block possibly shorter."""
        if block_size < 1:
            raise ValueError("block_size must be a positive integer")
        n_full, rem = divmod(dim, block_size)
        sizes = (block_size,) * n_full + ((rem,) if rem else ())
        return cls(dim=dim, sizes=sizes)

    @property
    def n_blocks(self) -> int:
        return len(self.sizes)

    def ranges(self) -> Iterator[tuple[int, int]]:
        start = 0
        for s in self.sizes:
            yield start, start + s
            start += s


def build_structured(spec: StructuredCorrelationSpec) -> CorrelationMatrix:
    """Materialize a structured correlation matrix from its closed form."""
    m, r = spec.dim, spec.rho
    if spec.kind is StructureKind.IDENTITY:
        v = np.eye(m)
    elif spec.kind is StructureKind.COMPOUND_SYMMETRY:
        v = np.full((m, m), r)
        np.fill_diagonal(v, 1.0)
    elif spec.kind is StructureKind.AR1:
        idx = np.arange(m)
        v = np.float_power(r, np.abs(idx[:, None] - idx[None, :]))
    else:  # tridiagonal
        v = np.eye(m)
        i = np.arange(m - 1)
        v[i, i + 1] = r
        v[i + 1, i] = r
    return CorrelationMatrix(values=v)


def block_diagonal(block: CorrelationMatrix, n_blocks: int) -> CorrelationMatrix:
    """Correlation matrix of ``n_blocks`` independent copies of ``block``."""
    if n_blocks < 1:
        raise ValueError("n_blocks must be positive")
    b = block.dim
    v = np.zeros((b * n_blocks, b * n_blocks))
    for k in range(n_blocks):
        v[k * b : (k + 1) * b, k * b : (k + 1) * b] = block.values
    return CorrelationMatrix(values=v)


def cs_eigenvalues(dim: int, rho: float) -> np.ndarray:
    """Closed-form spectrum of compound symmetry: 1+(m-1)rho and (m-1) copies of 1-rho."""
    return np.r_[1.0 + (dim - 1) * rho, np.full(dim - 1, 1.0 - rho)]


def estimate_from_genotypes(genotypes, missing_policy: str = "require_complete") -> CorrelationMatrix:
    """Pearson correlation matrix of additive-coded marker columns.

    ``genotypes`` is an (n, m) array (NaN marks missing entries) or any
    object with a ``genotypes`` attribute holding one, e.g. a
    :class:`efftests.data.GenotypeDataset`.

    With ``missing_policy="require_complete"`` any missing entry is an
    error; with ``"pairwise_complete"`` each matrix entry is computed
    from the rows where both markers are observed (the result may then
    fail to be positive semidefinite).
    """
    g = getattr(genotypes, "genotypes", genotypes)
    marker_ids = getattr(genotypes, "marker_ids", None)
    x = np.asarray(g, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"genotype matrix must be 2-D, got shape {x.shape}")
    n, m = x.shape
    if n < 2:
        raise DataError(f"need at least 2 samples to estimate correlations, got {n}")

    def name(j: int) -> str:
        return marker_ids[j] if marker_ids is not None else f"column {j}"

    missing = np.isnan(x)
    if missing_policy == "require_complete":
        if missing.any():
            i, j = np.argwhere(missing)[0]
            raise DataError(
                f"missing genotype at sample {i}, marker {name(j)}; "
                "use pairwise_complete or impute first"
            )
        sd = x.std(axis=0, ddof=1)
        zero = np.flatnonzero(sd <= 0.0)
        if zero.size:
            raise DataError(f"marker {name(zero[0])} has zero sample variance")
        xc = (x - x.mean(axis=0)) / sd
        v = (xc.T @ xc) / (n - 1)
        return CorrelationMatrix(values=np.clip(v, -1.0, 1.0), n_samples=n)

    if missing_policy != "pairwise_complete":
        raise ValueError(f"unknown missing_policy {missing_policy!r}")

    v = np.eye(m)
    obs = ~missing
    for i in range(m):
        for j in range(i + 1, m):
            both = obs[:, i] & obs[:, j]
            nij = int(both.sum())
            if nij < 2:
                raise DataError(
                    f"markers {name(i)} and {name(j)} share fewer than 2 complete rows"
                )
            xi = x[both, i]
            xj = x[both, j]
            xi = xi - xi.mean()
            xj = xj - xj.mean()
            si = math.sqrt(float(xi @ xi))
            sj = math.sqrt(float(xj @ xj))
            if si <= 0.0:
                raise DataError(f"marker {name(i)} has zero sample variance")
            if sj <= 0.0:
                raise DataError(f"marker {name(j)} has zero sample variance")
            v[i, j] = v[j, i] = float(xi @ xj) / (si * sj)
    return CorrelationMatrix(values=np.clip(v, -1.0, 1.0), n_samples=n)


def eigen_spectrum(r: CorrelationMatrix) -> EigenSpectrum:
    """Descending real eigenvalues of a correlation matrix.

    Deterministic for a given input; the trace identity sum(lambda) == m
    is verified to 1e-8 * m as a guard against a misbehaving input.
    """
    if not isinstance(r, CorrelationMatrix):
        r = CorrelationMatrix(values=np.asarray(r))
    lam = np.linalg.eigvalsh(r.values)[::-1].copy()
    m = r.dim
    if abs(lam.sum() - m) > 1e-8 * m:
        raise ValueError(
            f"eigenvalue sum {lam.sum():.12g} violates trace identity for dim {m}"
        )
    if r.n_samples is not None:
        bound = min(r.n_samples - 1, m)
    else:
        bound = m
    return EigenSpectrum(lambdas=lam, source_dim=m, rank_bound=bound)


def clamp_negative_eigenvalues(s: EigenSpectrum) -> EigenSpectrum:
    """Replace negative eigenvalues by zero, recording what was clamped."""
    lam = s.lambdas
    neg = lam < 0.0
    if not neg.any():
        return s
    most_negative = float(lam.min())
    clamped = np.where(neg, 0.0, lam)
    return replace(
        s,
        lambdas=clamped,
        n_clamped=int(neg.sum()),
        most_negative_clamped=most_negative,
        large_negative_warning=most_negative < -LARGE_NEGATIVE_FACTOR * s.source_dim,
    )


def prune_perfect_ld(
    r: CorrelationMatrix, tol: float = PERFECT_LD_TOL
) -> tuple[CorrelationMatrix, np.ndarray]:
    """Drop markers perfectly dependent on an earlier one.

    For every pair with |r_ij| >= 1 - tol only the lower-index marker is
    kept (first-kept tie-breaking).  Returns the pruned matrix and the
    0-based indices of the kept markers.
    """
    v = r.values
    m = r.dim
    kept: list[int] = []
    for i in range(m):
        if all(abs(v[j, i]) < 1.0 - tol for j in kept):
            kept.append(i)
    idx = np.array(kept, dtype=np.intp)
    pruned = CorrelationMatrix(values=v[np.ix_(idx, idx)], n_samples=r.n_samples)
    return pruned, idx
