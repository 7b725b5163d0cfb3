"""Multivariate normal rectangle probabilities P(all |T_j| < d).

Three routes, by structure:

* :func:`cs_rectangle_exact` -- exchangeable (compound symmetry)
  correlation admits a one-factor decomposition T_i = sqrt(rho) Y +
  sqrt(1-rho) Z_i, reducing the joint probability to a univariate
  integral handled by adaptive quadrature.
* :func:`bvn_rectangle` -- dimension two, by the Drezner-Wesolowsky
  quadrature with the high-correlation tail expansion.
* :func:`mvn_rectangle_qmc` -- general positive-definite matrices.
  Separation-of-variables transform (pivoted Cholesky with variable
  reordering by smallest conditional probability) onto the unit cube,
  integrated with a randomly shifted rank-1 lattice rule under the tent
  (baker) fold.  Independent random shifts give the error estimate; the
  lattice size doubles until the target error or the evaluation budget
  is reached.

:func:`order2_joint` is the product-type pairwise approximation of the
joint probability, exact when the dependence is first-order Markov.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator

import numpy as np
from scipy.fft import irfft, rfft
from scipy.integrate import quad
from scipy.special import ndtr, ndtri, roots_legendre

from .corrmat import CorrelationMatrix
from .errors import NotPositiveDefiniteError

__all__ = [
    "QmcConfig",
    "RectangleSpec",
    "MvnEstimate",
    "cs_rectangle_exact",
    "bvn_rectangle",
    "mvn_rectangle_qmc",
    "order2_joint",
]

_SQRT_TWO_PI = math.sqrt(2.0 * math.pi)

# Diagonal pivots at or below this are treated as loss of positive
# definiteness (inputs are correlation matrices, so unit scale).
_PD_TOL = 1e-10

# Default absolute error targets for the lattice engine.
_DEFAULT_ABS_TOL_SMALL = 1e-9  # dim <= 100
_DEFAULT_ABS_TOL_LARGE = 1e-7


@dataclass(frozen=True)
class QmcConfig:
    """Settings for the randomized lattice integration.

    ``abs_tol=None`` resolves per problem size: 1e-9 up to dimension 100,
    1e-7 beyond.  ``max_points`` caps the total number of integrand
    evaluations (lattice points times shifts, summed over refinement
    levels).
    """

    abs_tol: float | None = None
    max_points: int = 2**23
    n_shifts: int = 12
    seed: int = 0

    def __post_init__(self) -> None:
        if self.abs_tol is not None and not self.abs_tol > 0.0:
            raise ValueError(f"abs_tol must be positive, got {self.abs_tol}")
        if self.n_shifts < 2:
            raise ValueError("need at least 2 random shifts for an error estimate")
        if self.max_points < 1:
            raise ValueError("max_points must be positive")

    def resolve_abs_tol(self, dim: int) -> float:
        if self.abs_tol is not None:
            return self.abs_tol
        return _DEFAULT_ABS_TOL_SMALL if dim <= 100 else _DEFAULT_ABS_TOL_LARGE


@dataclass(frozen=True)
class RectangleSpec:
    """Symmetric rectangle {|T_j| < upper_j} for a correlated normal vector."""

    corr: CorrelationMatrix
    upper: np.ndarray

    def __post_init__(self) -> None:
        up = np.array(self.upper, dtype=np.float64)
        if up.shape != (self.corr.dim,):
            raise ValueError(
                f"bounds shape {up.shape} does not match dimension {self.corr.dim}"
            )
        if not np.all(np.isfinite(up)) or np.any(up <= 0.0):
            raise ValueError("rectangle half-widths must be finite and positive")
        up.flags.writeable = False
        object.__setattr__(self, "upper", up)

    @classmethod
    def symmetric(cls, corr: CorrelationMatrix, d: float) -> "RectangleSpec":
        return cls(corr=corr, upper=np.full(corr.dim, float(d)))

    @property
    def lower(self) -> np.ndarray:
        return -self.upper

    @property
    def dim(self) -> int:
        return self.corr.dim


@dataclass(frozen=True)
class MvnEstimate:
    """Probability estimate with its error bound and integration metadata.

    ``abs_error`` is three standard errors of the randomization spread
    for lattice estimates, or the quadrature error bound for the
    deterministic routes.  ``converged`` is False when the point budget
    ran out before the requested tolerance was met (the estimate is
    still the best available).
    """

    value: float
    abs_error: float
    n_points: int
    n_shifts: int
    seed: int | None
    converged: bool


# ---------------------------------------------------------------------------
# closed form for exchangeable correlation


def cs_rectangle_exact(m: int, rho: float, d: float) -> float:
    """P(all |T_j| < d) under compound symmetry with parameter rho >= 0.

    One-factor reduction: integrate over the shared factor y the m-th
    power of Phi((d - sqrt(rho) y) / sqrt(1 - rho)) minus its mirror.
    Adaptive quadrature keeps the absolute error below 1e-12.  Negative
    rho has no such factorization; use the lattice engine instead.
    """
    if m < 1:
        raise ValueError("dimension must be positive")
    if not 0.0 <= rho < 1.0:
        if rho < 0.0:
            raise ValueError(
                "the one-factor closed form needs rho >= 0; "
                "use mvn_rectangle_qmc for negative correlation"
            )
        raise ValueError(f"rho must be below 1, got {rho}")
    if not (np.isfinite(d) and d > 0.0):
        raise ValueError(f"threshold d must be finite and positive, got {d}")
    if rho == 0.0:
        return float((2.0 * ndtr(d) - 1.0) ** m)
    sr = math.sqrt(rho)
    sc = math.sqrt(1.0 - rho)

    def integrand(y: float) -> float:
        band = ndtr((d - sr * y) / sc) - ndtr((-d - sr * y) / sc)
        if band <= 0.0:
            return 0.0
        return math.exp(-0.5 * y * y) / _SQRT_TWO_PI * band**m

    # phi(y) bounds the tails: truncating at |y|=10 loses under 1e-22
    value, _ = quad(integrand, -10.0, 10.0, epsabs=1e-13, epsrel=1e-13, limit=300)
    return float(min(max(value, 0.0), 1.0))


# ---------------------------------------------------------------------------
# bivariate rectangle (Drezner-Wesolowsky with Genz's tail handling)


@lru_cache(maxsize=8)
def _gl_rule(n: int) -> tuple[np.ndarray, np.ndarray]:
    return roots_legendre(n)


def _bvn_upper(h: float, k: float, r: float) -> float:
    """P(X > h, Y > k) for a standard bivariate normal with correlation r.

    Quadrature on Drezner and Wesolowsky's single-integral form for
    moderate |r|; for |r| above 0.925 the integral is rewritten around
    the perfect-dependence limit and the remainder expanded, following
    Genz's double-precision refinement of the method.
    """
    if r == 0.0:
        return float(ndtr(-h) * ndtr(-k))
    ngl = 6 if abs(r) < 0.3 else (12 if abs(r) < 0.75 else 20)
    nodes, weights = _gl_rule(ngl)
    tp = 2.0 * math.pi
    hk = h * k
    if abs(r) < 0.925:
        # integrate exp((sin(t) hk - (h^2+k^2)/2) / cos^2(t)) over t in [0, asin r]
        hs = (h * h + k * k) / 2.0
        asr = math.asin(r) / 2.0
        sn = np.sin(asr * (1.0 + nodes))
        total = float(np.exp((sn * hk - hs) / (1.0 - sn * sn)) @ weights)
        total = total * asr / tp + float(ndtr(-h) * ndtr(-k))
        return min(max(total, 0.0), 1.0)

    if r < 0.0:
        k = -k
        hk = -hk
    a2 = (1.0 - r) * (1.0 + r)
    a = math.sqrt(a2)
    b = abs(h - k)
    b2 = b * b
    c = (4.0 - hk) / 8.0
    d = (12.0 - hk) / 80.0
    asr = -(b2 / a2 + hk) / 2.0
    total = 0.0
    if asr > -100.0:
        total = a * math.exp(asr) * (1.0 - c * (b2 - a2) * (1.0 - d * b2) / 3.0 + c * d * a2 * a2)
    if hk > -100.0:
        total -= math.exp(-hk / 2.0) * _SQRT_TWO_PI * float(ndtr(-b / a)) * b * (
            1.0 - c * b2 * (1.0 - d * b2) / 3.0
        )
    ah = a / 2.0
    xs = (ah * (1.0 + nodes)) ** 2
    asr_v = -(b2 / xs + hk) / 2.0
    keep = asr_v > -100.0
    if keep.any():
        xs_k = xs[keep]
        sp = 1.0 + c * xs_k * (1.0 + 5.0 * d * xs_k)
        rs = np.sqrt(1.0 - xs_k)
        ep = np.exp(-(hk / 2.0) * xs_k / (1.0 + rs) ** 2) / rs
        total = (ah * float((np.exp(asr_v[keep]) * (sp - ep)) @ weights[keep]) - total) / tp
    else:
        total = -total / tp
    if r > 0.0:
        total += float(ndtr(-max(h, k)))
    elif h >= k:
        total = -total
    else:
        if h < 0.0:
            total = float(ndtr(k) - ndtr(h)) - total
        else:
            total = float(ndtr(-h) - ndtr(-k)) - total
    return min(max(total, 0.0), 1.0)


def bvn_rectangle(d: float, r: float) -> float:
    """P(|Z1| < d, |Z2| < d) for standard bivariate normal correlation r.

    Absolute error is at the 1e-14 level (deterministic quadrature).
    """
    if not abs(r) < 1.0:
        raise ValueError(f"|r| must be below 1, got {r}")
    if not (np.isfinite(d) and d > 0.0):
        raise ValueError(f"threshold d must be finite and positive, got {d}")
    if r == 0.0:
        return float((2.0 * ndtr(d) - 1.0) ** 2)
    # inclusion-exclusion on the four tails; both same-sign corner pairs
    # have probability U(r), both mixed pairs U(-r)
    tail = float(ndtr(-d))
    value = 1.0 - 4.0 * tail + 2.0 * (_bvn_upper(d, d, r) + _bvn_upper(d, d, -r))
    return min(max(value, 0.0), 1.0)


# ---------------------------------------------------------------------------
# pairwise product approximation


def order2_joint(corr: CorrelationMatrix, d: float) -> float:
    """Markov-type product approximation of P(all |T_j| < d).

    P(O_1) * prod_j P(O_{j-1} and O_j) / P(O_{j-1}) over markers in
    input order; exact when the dependence is first-order Markov (AR1),
    an approximation otherwise.  Only the consecutive correlations
    enter, so any two structures sharing them are indistinguishable
    here.
    """
    if not (np.isfinite(d) and d > 0.0):
        raise ValueError(f"threshold d must be finite and positive, got {d}")
    m = corr.dim
    p_single = 2.0 * float(ndtr(d)) - 1.0
    if m == 1:
        return p_single
    consec = np.diag(corr.values, k=1)
    if np.any(np.abs(consec) >= 1.0):
        raise ValueError("order-2 factorization needs |consecutive correlation| < 1")
    log_p = math.log(p_single)
    uniq, counts = np.unique(consec, return_counts=True)
    for r, cnt in zip(uniq, counts):
        log_p += cnt * (math.log(bvn_rectangle(d, float(r))) - math.log(p_single))
    return float(min(max(math.exp(log_p), 0.0), 1.0))


# ---------------------------------------------------------------------------
# rank-1 lattice construction (fast component-by-component search)


def _primes_upto(limit: int) -> np.ndarray:
    sieve = np.ones(limit + 1, dtype=bool)
    sieve[:2] = False
    for p in range(2, int(limit**0.5) + 1):
        if sieve[p]:
            sieve[p * p :: p] = False
    return np.flatnonzero(sieve)


def _largest_prime_at_most(n: int) -> int:
    primes = _primes_upto(n)
    if primes.size == 0:
        raise ValueError(f"no prime at most {n}")
    return int(primes[-1])


def _primitive_root(p: int) -> int:
    """Smallest primitive root of the odd prime p."""
    phi = p - 1
    factors = []
    q, rem = 2, phi
    while q * q <= rem:
        if rem % q == 0:
            factors.append(q)
            while rem % q == 0:
                rem //= q
        q += 1
    if rem > 1:
        factors.append(rem)
    g = 2
    while True:
        if all(pow(g, phi // f, p) != 1 for f in factors):
            return g
        g += 1


_lattice_lock = threading.Lock()
_lattice_cache: dict[tuple[int, int], np.ndarray] = {}

# product weights gamma_s = _CBC_WEIGHT_DECAY**(s-1) in the worst-case
# error criterion; front components matter most after variable reordering
_CBC_WEIGHT_DECAY = 0.8


def _cbc_generating_vector(ndim: int, n: int) -> np.ndarray:
    """Generating vector of an n-point rank-1 lattice, n an odd prime.

    Component-by-component minimization of the shift-averaged worst-case
    error for the order-2 Korobov space, accelerated by indexing the
    candidates in the order of the powers of a primitive root so that
    each search step is a circular correlation done with FFTs.
    """
    if ndim < 1:
        raise ValueError("lattice dimension must be positive")
    key = (ndim, n)
    cached = _lattice_cache.get(key)
    if cached is not None:
        return cached
    z = np.ones(ndim, dtype=np.int64)
    if ndim > 1 and n >= 5:
        mhalf = (n - 1) // 2
        g = _primitive_root(n)
        powers = np.ones(mhalf, dtype=np.int64)
        for t in range(mhalf - 1):
            powers[t + 1] = (powers[t] * g) % n
        # fold by the symmetry omega(x) = omega(1-x)
        folded = np.minimum(powers, n - powers)
        x = folded / n
        kernel = x * x - x + 1.0 / 6.0  # Bernoulli polynomial B2 on [0, 1)
        fkernel = rfft(kernel)
        prod = np.ones(mhalf)
        w = 0
        for s in range(1, ndim):
            gamma = _CBC_WEIGHT_DECAY ** (s - 1)
            # realign the kernel to the component chosen in the previous
            # step (index reversal plus shift in the cyclic group)
            realigned = np.concatenate((kernel[: w + 1][::-1], kernel[w + 1 :][::-1]))
            prod = prod * (1.0 + gamma * realigned)
            scores = irfft(fkernel * rfft(prod), n=mhalf)
            w = int(np.argmin(scores))
            z[s] = folded[w]
    with _lattice_lock:
        _lattice_cache[key] = z
    return z


def _point_ladder(start: int = 1021) -> Iterator[int]:
    """Doubling sequence of prime lattice sizes."""
    target = start
    while True:
        yield _largest_prime_at_most(target)
        target *= 2


# ---------------------------------------------------------------------------
# separation-of-variables transform


def _reordered_cholesky(
    corr: np.ndarray, lower: np.ndarray, upper: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Pivoted Cholesky factor with integration bounds, rows normalized.

    At each step the remaining variable with the smallest conditional
    probability (evaluated at the truncated-normal means of the already
    pivoted variables) is brought forward; this ordering concentrates
    the integrand's variation in the leading lattice coordinates.
    Returns (L, lo, hi, perm) with unit diagonal L and bounds scaled so
    the conditional limits are lo[i] - s, hi[i] - s directly.
    """
    n = corr.shape[0]
    rp = np.array(corr, dtype=np.float64)
    a = np.array(lower, dtype=np.float64)
    b = np.array(upper, dtype=np.float64)
    piv = np.zeros((n, n))
    y = np.zeros(n)
    perm = np.arange(n)
    resid = np.diag(rp).copy()
    for k in range(n):
        s_all = piv[k:, :k] @ y[:k]
        dv = resid[k:]
        with np.errstate(invalid="ignore", divide="ignore"):
            sd = np.sqrt(np.maximum(dv, 0.0))
            width = ndtr((b[k:] - s_all) / sd) - ndtr((a[k:] - s_all) / sd)
        width = np.where(dv > _PD_TOL, width, np.inf)
        pick = int(np.argmin(width))
        if not np.isfinite(width[pick]):
            raise NotPositiveDefiniteError(
                f"matrix not positive definite at pivot {k}"
            )
        im = k + pick
        if im != k:
            rp[[k, im], :] = rp[[im, k], :]
            rp[:, [k, im]] = rp[:, [im, k]]
            piv[[k, im], :k] = piv[[im, k], :k]
            for arr in (a, b, resid, perm):
                arr[[k, im]] = arr[[im, k]]
        ck = math.sqrt(resid[k])
        piv[k, k] = ck
        if k + 1 < n:
            col = (rp[k + 1 :, k] - piv[k + 1 :, :k] @ piv[k, :k]) / ck
            piv[k + 1 :, k] = col
            resid[k + 1 :] -= col * col
        # truncated-normal mean of the pivot, used to condition later picks
        sk = float(piv[k, :k] @ y[:k])
        lok = (a[k] - sk) / ck
        hik = (b[k] - sk) / ck
        wk = float(ndtr(hik) - ndtr(lok))
        if wk > 1e-14:
            y[k] = (math.exp(-0.5 * lok * lok) - math.exp(-0.5 * hik * hik)) / (
                _SQRT_TWO_PI * wk
            )
        elif lok < -10.0:
            y[k] = hik
        elif hik > 10.0:
            y[k] = lok
        else:
            y[k] = (lok + hik) / 2.0
    diag = np.diag(piv).copy()
    return piv / diag[:, None], a / diag, b / diag, perm


def _integrate_shift(
    ln: np.ndarray,
    lo: np.ndarray,
    hi: np.ndarray,
    z: np.ndarray,
    n_points: int,
    shift: np.ndarray,
    y_buf: np.ndarray,
    block: int = 48,
) -> float:
    """Mean of the transformed integrand over one shifted lattice.

    The sequential conditioning needs s_i = ln[i, :i] @ y[:i] for every
    dimension; rows are processed in blocks so that the bulk of each dot
    product is one matrix product against the settled part of ``y``.
    """
    m = ln.shape[0]
    j = np.arange(n_points, dtype=np.float64)
    c = float(ndtr(lo[0]))
    d = float(ndtr(hi[0]))
    prob = np.full(n_points, d - c)
    cs = np.full(n_points, c)
    ds = np.full(n_points, d)
    base = np.empty((0, n_points))
    i0 = 0
    for i in range(1, m):
        x = j * (float(z[i - 1]) / n_points) + shift[i - 1]
        x = np.abs(2.0 * (x - np.floor(x)) - 1.0)
        u = cs + x * (ds - cs)
        np.clip(u, 1e-300, 1.0 - 1e-16, out=u)
        y_buf[i - 1] = ndtri(u)
        if i >= i0 + base.shape[0]:
            i0 = i
            base = ln[i : min(i + block, m), :i] @ y_buf[:i]
        s = base[i - i0]
        if i > i0:
            s = s + ln[i, i0:i] @ y_buf[i0:i]
        cs = ndtr(lo[i] - s)
        ds = ndtr(hi[i] - s)
        prob *= ds - cs
    return float(prob.mean())


def mvn_rectangle_qmc(spec: RectangleSpec, cfg: QmcConfig | None = None) -> MvnEstimate:
    """Estimate P(all |T_j| < upper_j) by randomized lattice integration.

    Deterministic for a fixed config: the random shifts are drawn from a
    seeded generator and the shift estimates are reduced in a fixed
    order.  When the tolerance is not reached within ``max_points`` the
    best estimate is returned with ``converged=False`` rather than
    raising.
    """
    cfg = cfg or QmcConfig()
    m = spec.dim
    abs_tol = cfg.resolve_abs_tol(m)
    if m == 1:
        up = float(spec.upper[0])
        value = float(ndtr(up) - ndtr(-up))
        return MvnEstimate(
            value=value,
            abs_error=1e-15,
            n_points=1,
            n_shifts=0,
            seed=cfg.seed,
            converged=True,
        )
    ln, lo, hi, _ = _reordered_cholesky(spec.corr.values, spec.lower, spec.upper)
    rng = np.random.default_rng(cfg.seed)
    used = 0
    value = math.nan
    err = math.inf
    n_used = 0
    converged = False
    y_buf: np.ndarray | None = None
    for n_points in _point_ladder():
        level_cost = n_points * cfg.n_shifts
        if used > 0 and used + level_cost > cfg.max_points:
            break
        z = _cbc_generating_vector(m - 1, n_points)
        shifts = rng.random((cfg.n_shifts, m - 1))
        if y_buf is None or y_buf.shape[1] != n_points:
            y_buf = np.empty((m - 1, n_points))
        vals = np.array(
            [
                _integrate_shift(ln, lo, hi, z, n_points, shifts[t], y_buf)
                for t in range(cfg.n_shifts)
            ]
        )
        value = float(vals.mean())
        err = 3.0 * float(vals.std(ddof=1)) / math.sqrt(cfg.n_shifts)
        used += level_cost
        n_used = n_points
        if err <= abs_tol:
            converged = True
            break
    return MvnEstimate(
        value=min(max(value, 0.0), 1.0),
        abs_error=err,
        n_points=n_used,
        n_shifts=cfg.n_shifts,
        seed=cfg.seed,
        converged=converged,
    )
