"""Familywise error rate evaluation and inversion.

FWER(alpha_loc) = 1 - P(all |T_j| < d) with d the two-sided normal
quantile of alpha_loc.  The map is strictly increasing in alpha_loc, so
a target FWER is inverted by a bracketed root solve on
[alpha/m, alpha]; the Bonferroni end always undershoots the target and
the single-test end always overshoots it.

Evaluations come from the exact exchangeable closed form, the pairwise
product approximation, or the randomized lattice engine.  The solver
treats lattice estimates as noisy: bracketing decisions use the
estimate together with its error bound, and an ambiguous comparison
escalates the integration precision instead of guessing a side.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
from scipy.optimize import brentq
from scipy.special import ndtri

from .corrmat import CorrelationMatrix, StructuredCorrelationSpec, StructureKind, build_structured
from .errors import NumericalError
from .meff import MeffResult, alpha_loc_from_meff, meff_from_alpha
from .mvnprob import MvnEstimate, QmcConfig, RectangleSpec, cs_rectangle_exact, mvn_rectangle_qmc, order2_joint

__all__ = [
    "FwerMethod",
    "FwerQuery",
    "SolveResult",
    "rejection_threshold",
    "fwer_at",
    "solve_alpha_loc",
    "fwer_compose_blocks",
    "evaluate_method_fwer",
    "solve_stange_blocks",
]

_CS_PATTERN_TOL = 1e-12


class FwerMethod(str, Enum):
    EXACT = "exact"
    QMC = "qmc"
    ORDER2 = "order2"
    AUTO = "auto"


@dataclass(frozen=True)
class FwerQuery:
    corr: CorrelationMatrix | StructuredCorrelationSpec
    alpha_loc: float
    method: FwerMethod = FwerMethod.AUTO
    qmc: QmcConfig = QmcConfig()

    def __post_init__(self) -> None:
        if not (0.0 < self.alpha_loc < 1.0):
            raise ValueError(f"alpha_loc must be in (0, 1), got {self.alpha_loc}")
        object.__setattr__(self, "method", FwerMethod(self.method))


@dataclass(frozen=True)
class SolveResult:
    """Root of FWER(alpha_loc) = alpha with solver diagnostics."""

    alpha_loc: float
    achieved_fwer: float
    achieved_error: float
    iterations: int
    bracket: tuple[float, float]
    meff_equivalent: float


def rejection_threshold(alpha_loc: float) -> float:
    """Two-sided threshold d with P(|Z| >= d) = alpha_loc."""
    if not (0.0 < alpha_loc < 1.0):
        raise ValueError(f"alpha_loc must be in (0, 1), got {alpha_loc}")
    return float(-ndtri(alpha_loc / 2.0))


def _cs_parameters(corr: CorrelationMatrix | StructuredCorrelationSpec) -> tuple[int, float] | None:
    """(dim, rho) when the input is exchangeable with rho >= 0, else None."""
    if isinstance(corr, StructuredCorrelationSpec):
        if corr.kind is StructureKind.IDENTITY:
            return corr.dim, 0.0
        if corr.kind is StructureKind.COMPOUND_SYMMETRY and corr.rho >= 0.0:
            return corr.dim, corr.rho
        if corr.kind in (StructureKind.AR1, StructureKind.TRIDIAGONAL) and corr.rho == 0.0:
            return corr.dim, 0.0
        return None
    v = corr.values
    m = corr.dim
    if m == 1:
        return 1, 0.0
    off = v[~np.eye(m, dtype=bool)]
    rho = float(off[0])
    if rho >= 0.0 and np.max(np.abs(off - rho)) <= _CS_PATTERN_TOL:
        return m, rho
    return None


def _as_matrix(corr: CorrelationMatrix | StructuredCorrelationSpec) -> CorrelationMatrix:
    if isinstance(corr, StructuredCorrelationSpec):
        return build_structured(corr)
    return corr


def _dim_of(corr: CorrelationMatrix | StructuredCorrelationSpec) -> int:
    return corr.dim


def fwer_at(query: FwerQuery) -> MvnEstimate:
    """FWER at a given local level: 1 minus the joint rectangle probability."""
    method = query.method
    if method is FwerMethod.AUTO:
        method = FwerMethod.EXACT if _cs_parameters(query.corr) else FwerMethod.QMC
    d = rejection_threshold(query.alpha_loc)
    m = _dim_of(query.corr)
    if method is FwerMethod.EXACT:
        params = _cs_parameters(query.corr)
        if params is None:
            raise ValueError(
                "exact evaluation requires an exchangeable (compound symmetry "
                "or identity) correlation structure with rho >= 0"
            )
        dim, rho = params
        joint = cs_rectangle_exact(dim, rho, d)
        return MvnEstimate(
            value=1.0 - joint,
            abs_error=1e-11,
            n_points=0,
            n_shifts=0,
            seed=None,
            converged=True,
        )
    if method is FwerMethod.ORDER2:
        joint = order2_joint(_as_matrix(query.corr), d)
        return MvnEstimate(
            value=1.0 - joint,
            abs_error=max(1e-13, 2e-15 * m),
            n_points=0,
            n_shifts=0,
            seed=None,
            converged=True,
        )
    spec = RectangleSpec.symmetric(_as_matrix(query.corr), d)
    est = mvn_rectangle_qmc(spec, query.qmc)
    return replace(est, value=1.0 - est.value)


@dataclass
class _Eval:
    x: float
    fwer: float
    err: float


class _MonotoneAudit:
    """Checks that FWER evaluations increase with alpha_loc within noise."""

    def __init__(self) -> None:
        self._points: list[_Eval] = []

    def add(self, point: _Eval) -> None:
        for other in self._points:
            lo, hi = (other, point) if other.x < point.x else (point, other)
            if hi.fwer < lo.fwer - (lo.err + hi.err) - 1e-12:
                raise NumericalError(
                    "FWER evaluations are non-monotone beyond the integration "
                    f"noise bound (alpha_loc {lo.x:.6g} -> {lo.fwer:.8g}, "
                    f"{hi.x:.6g} -> {hi.fwer:.8g}); tighten abs_tol"
                )
        self._points.append(point)


def solve_alpha_loc(
    corr: CorrelationMatrix | StructuredCorrelationSpec,
    alpha: float,
    method: FwerMethod | str = FwerMethod.AUTO,
    tol: float = 1e-5,
    qmc: QmcConfig | None = None,
) -> SolveResult:
    """Invert FWER(alpha_loc) = alpha for the local significance level.

    ``tol`` is expressed in FWER units; the lattice engine runs at
    abs_tol = tol/10 during the solve.  Deterministic evaluation routes
    (exact and order-2) use Brent's method directly.
    """
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    if tol <= 0.0:
        raise ValueError("tol must be positive")
    method = FwerMethod(method)
    if method is FwerMethod.AUTO:
        method = FwerMethod.EXACT if _cs_parameters(corr) else FwerMethod.QMC
    m = _dim_of(corr)
    lo_end, hi_end = alpha / m, alpha
    if m == 1:
        return SolveResult(alpha, alpha, 0.0, 0, (lo_end, hi_end), 1.0)
    qmc = qmc or QmcConfig()

    if method in (FwerMethod.EXACT, FwerMethod.ORDER2):
        def f(x: float) -> float:
            return fwer_at(FwerQuery(corr, x, method, qmc)).value - alpha

        root, info = brentq(
            f,
            lo_end,
            hi_end,
            xtol=1e-16,
            rtol=4.0 * np.finfo(float).eps,
            maxiter=200,
            full_output=True,
        )
        final = fwer_at(FwerQuery(corr, root, method, qmc))
        if abs(final.value - alpha) > tol:
            raise NumericalError(
                f"root solve stalled: |achieved - target| = {abs(final.value - alpha):.3g} > {tol:g}"
            )
        return SolveResult(
            alpha_loc=float(root),
            achieved_fwer=final.value,
            achieved_error=final.abs_error,
            iterations=info.iterations,
            bracket=(lo_end, hi_end),
            meff_equivalent=meff_from_alpha(float(root), alpha),
        )

    # noisy route: interpolation-accelerated bisection on lattice estimates
    audit = _MonotoneAudit()
    eval_tol = tol / 10.0
    lo, hi = lo_end, hi_end
    x = alpha_loc_from_meff(m, alpha)  # Sidak point, a guaranteed lower bracket
    iterations = 0
    escalations = 0
    last: _Eval | None = None
    while iterations < 60:
        iterations += 1
        cfg = replace(qmc, abs_tol=eval_tol)
        est = fwer_at(FwerQuery(corr, x, FwerMethod.QMC, cfg))
        point = _Eval(x=x, fwer=est.value, err=est.abs_error)
        audit.add(point)
        last = point
        gap = est.value - alpha
        if abs(gap) + est.abs_error <= tol:
            return SolveResult(
                alpha_loc=x,
                achieved_fwer=est.value,
                achieved_error=est.abs_error,
                iterations=iterations,
                bracket=(lo, hi),
                meff_equivalent=meff_from_alpha(x, alpha),
            )
        if est.abs_error >= abs(gap):
            # cannot trust the sign of the gap: escalate precision
            if not est.converged or escalations >= 6:
                raise NumericalError(
                    "lattice integration too noisy to bracket the FWER root "
                    f"(gap {gap:.3g}, error {est.abs_error:.3g})"
                )
            escalations += 1
            eval_tol /= 4.0
            continue
        if gap < 0.0:
            lo = x
        else:
            hi = x
        meff_hat = meff_from_alpha(x, max(min(est.value, 1.0 - 1e-12), 1e-12))
        proposal = alpha_loc_from_meff(max(meff_hat, 1.0), alpha)
        margin = 0.01 * (hi - lo)
        if not (lo + margin <= proposal <= hi - margin):
            proposal = 0.5 * (lo + hi)
        x = proposal
    raise NumericalError("FWER root solve did not converge in 60 iterations")


def fwer_compose_blocks(per_block_fwers) -> float:
    """FWER over independent blocks: 1 - prod(1 - alpha_b), in log space."""
    fw = np.asarray(per_block_fwers, dtype=np.float64)
    if np.any((fw < 0.0) | (fw >= 1.0)):
        raise ValueError("block FWER values must lie in [0, 1)")
    return float(-math.expm1(float(np.sum(np.log1p(-fw)))))


def evaluate_method_fwer(
    corr: CorrelationMatrix | StructuredCorrelationSpec,
    meff_result: MeffResult,
    method: FwerMethod | str = FwerMethod.AUTO,
    qmc: QmcConfig | None = None,
) -> MvnEstimate:
    """FWER actually achieved by a method's local level on this structure."""
    return fwer_at(
        FwerQuery(
            corr=corr,
            alpha_loc=meff_result.alpha_loc,
            method=FwerMethod(method),
            qmc=qmc or QmcConfig(),
        )
    )


def solve_stange_blocks(
    blocks,
    alpha: float,
    method: FwerMethod | str = FwerMethod.AUTO,
    tol: float = 1e-5,
    qmc: QmcConfig | None = None,
) -> list[SolveResult]:
    """Per-block local levels under the equal-budget block split.

    Each of the B blocks receives alpha_b = 1 - (1-alpha)^(1/B) and is
    solved separately, so the resulting local levels differ between
    blocks; they are returned as-is.
    """
    blocks = list(blocks)
    if not blocks:
        raise ValueError("need at least one block")
    alpha_b = -math.expm1(math.log1p(-alpha) / len(blocks))
    return [solve_alpha_loc(b, alpha_b, method, tol, qmc) for b in blocks]
