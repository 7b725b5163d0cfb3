"""Eigenvalue-based estimators of the effective number of independent tests.

All estimators map the spectrum of a correlation matrix to a number
``meff`` in [1, m]; the Sidak (default) or Bonferroni rule then converts
``meff`` and a familywise error target ``alpha`` into a per-test local
significance level ``alpha_loc``.  The conversion algebra, including its
inverse and the additive composition over independent blocks, lives here
too.

Eigenvalue variance is always the sample variance (denominator m - 1):
that is the one convention under which the interpolation estimators hit
both extreme cases exactly (variance 0 for the identity, variance m for
complete dependence).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .corrmat import (
    BlockPartition,
    CorrelationMatrix,
    EigenSpectrum,
    clamp_negative_eigenvalues,
    eigen_spectrum,
)

__all__ = [
    "MeffMethod",
    "Correction",
    "GaoConfig",
    "MeffResult",
    "meff_cheverud",
    "meff_nyholt",
    "meff_gao",
    "meff_gao_blocked",
    "meff_liji",
    "meff_galwey",
    "alpha_loc_from_meff",
    "meff_from_alpha",
    "compose_blocks",
    "stange_block_alphas",
    "estimate_meff",
]

# Cumulative-fraction comparisons in the Gao counting rule tolerate this
# much slack at equality, so a fraction hitting the cutoff exactly (the
# identity matrix at c = 0.995, say) counts as explained.
GAO_EQUALITY_TOL = 1e-12


class MeffMethod(str, Enum):
    CHEVERUD = "cheverud"
    NYHOLT = "nyholt"
    GAO = "gao"
    LIJI = "liji"
    GALWEY = "galwey"
    ORDER2 = "order2"
    EXTERNAL = "external"


class Correction(str, Enum):
    SIDAK = "sidak"
    BONFERRONI = "bonferroni"


@dataclass(frozen=True)
class GaoConfig:
    """Cutoff and optional block size for the variance-explained counter."""

    cutoff_c: float = 0.995
    block_size: int | None = None

    def __post_init__(self) -> None:
        if not (0.0 < self.cutoff_c < 1.0):
            raise ValueError(f"cutoff_c must be strictly inside (0, 1), got {self.cutoff_c}")
        if self.block_size is not None and self.block_size < 1:
            raise ValueError("block_size must be a positive integer")


@dataclass(frozen=True)
class MeffResult:
    """An estimated effective test count with its derived local level."""

    method: MeffMethod
    meff: float
    alpha: float
    alpha_loc: float
    correction: Correction = Correction.SIDAK
    params: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "method": self.method.value,
            "meff": self.meff,
            "alpha": self.alpha,
            "alpha_loc": self.alpha_loc,
            "correction": self.correction.value,
            "params": dict(self.params),
        }


def _as_lambdas(s: EigenSpectrum | Sequence[float]) -> np.ndarray:
    if isinstance(s, EigenSpectrum):
        return s.lambdas
    return np.asarray(s, dtype=np.float64)


def meff_cheverud(s: EigenSpectrum) -> float:
    """m * (1 - (m-1) * Var(lambda) / m^2), sample variance."""
    lam = _as_lambdas(s)
    m = lam.size
    if m < 2:
        raise ValueError("Cheverud estimator needs at least 2 eigenvalues")
    var = float(lam.var(ddof=1))
    return m * (1.0 - (m - 1) * var / m**2)


def meff_nyholt(s: EigenSpectrum) -> float:
    """1 + (m-1) * (1 - Var(lambda) / m); algebraically equal to Cheverud's."""
    lam = _as_lambdas(s)
    m = lam.size
    if m < 2:
        raise ValueError("Nyholt estimator needs at least 2 eigenvalues")
    var = float(lam.var(ddof=1))
    return 1.0 + (m - 1) * (1.0 - var / m)


def _gao_count(lam: np.ndarray, cutoff_c: float) -> int:
    lam = np.sort(lam)[::-1]
    if np.any(lam < -GAO_EQUALITY_TOL):
        raise ValueError("Gao counting needs nonnegative eigenvalues; clamp first")
    m = lam.size
    frac = np.cumsum(lam) / m
    passed = frac > cutoff_c - GAO_EQUALITY_TOL
    if not passed.any():
        return m
    return int(np.argmax(passed)) + 1


def meff_gao(s: EigenSpectrum, cfg: GaoConfig | None = None, *, cutoff_c: float | None = None) -> float:
    """Smallest k whose leading eigenvalues explain more than the cutoff fraction.

    Operates on a single spectrum; for the blocked variant (markers split
    into contiguous blocks, counts summed) see :func:`meff_gao_blocked`,
    which needs the matrix rather than the spectrum.
    """
    if cutoff_c is None:
        cutoff_c = (cfg or GaoConfig()).cutoff_c
    if not (0.0 < cutoff_c < 1.0):
        raise ValueError(f"cutoff must be strictly inside (0, 1), got {cutoff_c}")
    return float(_gao_count(_as_lambdas(s), cutoff_c))


def meff_gao_blocked(r: CorrelationMatrix, cfg: GaoConfig) -> float:
    """Gao's counter applied per contiguous marker block, counts summed.

    The result depends on the block size, so block mode requires it
    explicitly.  Negative eigenvalues of a block (possible for
    pairwise-complete estimates) are clamped to zero before counting.
    """
    if cfg.block_size is None:
        raise ValueError("meff_gao_blocked requires an explicit block_size")
    part = BlockPartition.uniform(r.dim, cfg.block_size)
    total = 0
    for lo, hi in part.ranges():
        lam = np.linalg.eigvalsh(r.values[lo:hi, lo:hi])[::-1]
        total += _gao_count(np.maximum(lam, 0.0), cfg.cutoff_c)
    return float(total)


def meff_liji(s: EigenSpectrum) -> float:
    """Sum of f(|lambda|) with f(x) = [x >= 1] + (x - floor(x))."""
    lam = np.abs(_as_lambdas(s))
    return float(np.sum((lam >= 1.0).astype(np.float64) + lam - np.floor(lam)))


def meff_galwey(s: EigenSpectrum) -> float:
    """(sum sqrt(lambda))^2 / sum(lambda), for a nonnegative spectrum."""
    lam = _as_lambdas(s)
    if np.any(lam < 0.0):
        raise ValueError("Galwey estimator needs nonnegative eigenvalues; clamp first")
    total = float(lam.sum())
    if total <= 0.0:
        raise ValueError("Galwey estimator is undefined for an all-zero spectrum")
    return float(np.sqrt(lam).sum()) ** 2 / total


def alpha_loc_from_meff(
    meff: float, alpha: float, correction: Correction = Correction.SIDAK
) -> float:
    """Local significance level for an effective test count.

    Sidak: 1 - (1-alpha)^(1/meff); Bonferroni: alpha / meff.
    """
    if meff < 1.0:
        raise ValueError(f"meff must be >= 1, got {meff}")
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    if Correction(correction) is Correction.BONFERRONI:
        return alpha / meff
    return -math.expm1(math.log1p(-alpha) / meff)


def meff_from_alpha(alpha_loc: float, alpha: float) -> float:
    """Effective test count implied by a local level: log(1-alpha)/log(1-alpha_loc)."""
    if not (0.0 < alpha_loc < 1.0):
        raise ValueError(f"alpha_loc must be in (0, 1), got {alpha_loc}")
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    return math.log1p(-alpha) / math.log1p(-alpha_loc)


def compose_blocks(per_block_alphas: Sequence[float], alpha_loc: float) -> float:
    """Total effective test count over independent blocks at a common local level.

    Equals sum_b log(1-alpha_b) / log(1-alpha_loc), i.e. the effective
    count of the product-composed familywise error rate.  Additivity
    holds only because alpha_loc is shared by all blocks.
    """
    alphas = np.asarray(per_block_alphas, dtype=np.float64)
    if np.any((alphas <= 0.0) | (alphas >= 1.0)):
        raise ValueError("every block FWER must lie strictly inside (0, 1)")
    if not (0.0 < alpha_loc < 1.0):
        raise ValueError(f"alpha_loc must be in (0, 1), got {alpha_loc}")
    return float(np.sum(np.log1p(-alphas)) / math.log1p(-alpha_loc))


def stange_block_alphas(n_blocks: int, alpha: float) -> np.ndarray:
    """Equal per-block error budgets alpha_b = 1 - (1-alpha)^(1/B)."""
    if n_blocks < 1:
        raise ValueError("n_blocks must be a positive integer")
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    return np.full(n_blocks, -math.expm1(math.log1p(-alpha) / n_blocks))


def estimate_meff(
    r: CorrelationMatrix,
    method: MeffMethod | str,
    alpha: float = 0.05,
    correction: Correction = Correction.SIDAK,
    gao: GaoConfig | None = None,
) -> MeffResult:
    """Estimate meff for a correlation matrix and derive its local level.

    Interpolation estimators and Li-Ji consume the raw spectrum; Galwey
    and Gao consume the negatives-clamped spectrum, as their formulas
    require.  Gao with ``gao.block_size`` set switches to the blocked
    counter.
    """
    method = MeffMethod(method)
    gao = gao or GaoConfig()
    spectrum = eigen_spectrum(r)
    params: dict = {}
    if method is MeffMethod.CHEVERUD:
        meff = meff_cheverud(spectrum)
    elif method is MeffMethod.NYHOLT:
        meff = meff_nyholt(spectrum)
    elif method is MeffMethod.LIJI:
        meff = meff_liji(spectrum)
    elif method is MeffMethod.GALWEY:
        meff = meff_galwey(clamp_negative_eigenvalues(spectrum))
    elif method is MeffMethod.GAO:
        params = {"cutoff_c": gao.cutoff_c, "block_size": gao.block_size}
        if gao.block_size is None:
            meff = meff_gao(clamp_negative_eigenvalues(spectrum), gao)
        else:
            meff = meff_gao_blocked(r, gao)
    else:
        raise ValueError(f"method {method.value} is not an eigenvalue estimator")
    return MeffResult(
        method=method,
        meff=meff,
        alpha=alpha,
        alpha_loc=alpha_loc_from_meff(meff, alpha, correction),
        correction=Correction(correction),
        params=params,
    )
