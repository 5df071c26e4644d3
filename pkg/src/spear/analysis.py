"""Closed-form sampling-cost and failure predictions, and exhaustive validators.

The gradient model behind all predictions draws every entry of the m x b
pre-activation gradient independently as ``zeta * |eps|`` with
``zeta ~ Bernoulli(1/2)`` and ``eps ~ N(0, 1)``.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import stats
from scipy.special import gammaln, logsumexp

from .sampler import solve_tau

SINGULARITY_BASE = 0.939
EULER_GAMMA = 0.5772156649015329
MAX_ENUMERATION = 1_000_000


@dataclass(frozen=True)
class FailureEstimate:
    p_ub: float
    p_approx: float
    b: int
    m: int
    p_fr: float


@dataclass(frozen=True)
class EmpiricalFailure:
    rate: float
    ci_low: float
    ci_high: float
    failures: int
    trials: int


def _require_batch(b: int) -> None:
    if b < 2:
        raise ValueError("the sampling analysis needs b >= 2; b = 1 is solved in closed form")


def harmonic(b: int) -> float:
    return math.fsum(1.0 / k for k in range(1, b + 1))


def success_prob_lower(b: int) -> float:
    """Lower bound on the chance that one sampled submatrix yields a correct direction."""
    _require_batch(b)
    return b / 2 ** (b - 1) * -math.expm1((b - 1) * math.log(SINGULARITY_BASE))


def expected_samples(b: int) -> float:
    """Coupon-collector expectation ``b * H_b / q`` with the exact harmonic number."""
    return b * harmonic(b) / success_prob_lower(b)


def expected_samples_asymptotic(b: int) -> float:
    return (b * math.log(b) + EULER_GAMMA * b + 0.5) / success_prob_lower(b)


def high_prob_samples(b: int, p: float, p_fr: float = 0.0) -> int:
    """Samples that recover all b directions with probability at least ``1 - p``.

    Solves ``Phi((c - n q) / sqrt(n q (1 - q))) = p*/2`` with
    ``c = b log(2b/p*)`` and ``p* = p - 1 + (1 - p_fr)^b`` as a quadratic in sqrt(n).
    """
    if b < 5:
        raise ValueError("normal approximation needs b >= 5")
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    p_star = p - 1.0 + (1.0 - p_fr) ** b
    if not p_star > 0:
        raise ValueError(f"false-rejection floor {1 - (1 - p_fr) ** b:.3g} exceeds the budget p={p:g}")
    q = success_prob_lower(b)
    c = b * math.log(2 * b / p_star)
    z = stats.norm.ppf(p_star / 2)
    spread = math.sqrt(q * (1 - q))
    root = (-z * spread + math.sqrt(z * z * q * (1 - q) + 4 * q * c)) / (2 * q)
    return math.ceil(root * root)


def success_prob_monte_carlo(b: int, trials: int = 20000, seed: int = 0) -> float:
    """Estimate of the exact per-sample success probability under the gradient model.

    A sample succeeds when its (b-1) x b submatrix has exactly one all-zero column
    and rank b-1. Used to quantify how loose the 0.939 bound is.
    """
    _require_batch(b)
    rng = np.random.default_rng(seed)
    A = (rng.random((trials, b - 1, b)) < 0.5) * np.abs(rng.normal(size=(trials, b - 1, b)))
    zero_cols = np.all(A == 0, axis=1).sum(axis=1)
    ranks = np.linalg.matrix_rank(A)
    return float(np.mean((zero_cols == 1) & (ranks == b - 1)))


def _log_binom_pmf_half(m: int) -> np.ndarray:
    k = np.arange(m + 1)
    return gammaln(m + 1) - gammaln(k + 1) - gammaln(m - k + 1) - m * math.log(2.0)


def _column_miss_prob(b: int, m: int, base: float) -> float:
    """``1 - sum_{k>=b-1} C(m,k) 2^-m (1 - base^((b-1) C(k,b-1)))`` evaluated as a sum of small terms."""
    log_pmf = _log_binom_pmf_half(m)
    k = np.arange(m + 1)
    r = b - 1
    terms = []
    low = k < r
    if low.any():
        terms.append(log_pmf[low])
    kk = k[~low]
    log_count = gammaln(kk + 1) - gammaln(r + 1) - gammaln(kk - r + 1)
    # base**N with N = r*C(k, r) possibly astronomically large: stay in log space
    with np.errstate(over="ignore"):
        exponent = r * np.exp(log_count)
    terms.append(log_pmf[~low] + exponent * math.log(base))
    return float(np.exp(logsumexp(np.concatenate(terms))))


def _false_reject_term(b: int, p_fr: float) -> float:
    if p_fr >= 1.0:
        return 1.0
    return -math.expm1(b * math.log1p(-p_fr))


def failure_prob_bounds(b: int, m: int, p_fr: float = 0.0) -> FailureEstimate:
    """Upper bound and independence approximation of the exhaustive-sampling failure rate."""
    _require_batch(b)
    if m < b:
        raise ValueError("need m >= b")
    if not 0.0 <= p_fr <= 1.0:
        raise ValueError("p_fr must lie in [0, 1]")
    fr = _false_reject_term(b, p_fr)
    miss_ub = _column_miss_prob(b, m, SINGULARITY_BASE)
    miss_ap = _column_miss_prob(b, m, 0.5)
    p_ub = b * miss_ub + fr
    # 1 - (1 - miss)^b
    p_ap = (-math.expm1(b * math.log1p(-miss_ap)) if miss_ap < 1 else 1.0) + fr
    return FailureEstimate(min(1.0, max(0.0, p_ub)), min(1.0, max(0.0, p_ap)), b, m, p_fr)


def clopper_pearson(k: int, n: int, alpha: float = 0.05) -> tuple[float, float]:
    lo = 0.0 if k == 0 else float(stats.beta.ppf(alpha / 2, k, n - k + 1))
    hi = 1.0 if k == n else float(stats.beta.ppf(1 - alpha / 2, k + 1, n - k))
    return lo, hi


def sample_model_gradient(rng: np.random.Generator, m: int, b: int) -> np.ndarray:
    return (rng.random((m, b)) < 0.5) * np.abs(rng.normal(size=(m, b)))


def column_recoverable(dZ: np.ndarray, i: int) -> bool:
    """Whether some b-1 rows are zero in column i and form a rank b-1 submatrix."""
    m, b = dZ.shape
    rows = np.flatnonzero(dZ[:, i] == 0)
    if len(rows) < b - 1:
        return False
    if b == 1:
        return True
    others = np.delete(dZ, i, axis=1)
    for combo in itertools.combinations(rows, b - 1):
        if np.linalg.matrix_rank(others[list(combo)]) == b - 1:
            return True
    return False


def trial_fails(dZ: np.ndarray, min_zeros: int) -> bool:
    m, b = dZ.shape
    for i in range(b):
        if np.count_nonzero(dZ[:, i] == 0) < min_zeros:
            return True
        if not column_recoverable(dZ, i):
            return True
    return False


def validate_failure_empirically(b: int, m: int, trials: int, seed: int = 0,
                                 p_fr: float = 1e-9) -> EmpiricalFailure:
    """Failure rate of exhaustive sampling under the gradient model, with a 95% CI."""
    _require_batch(b)
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if math.comb(m, b - 1) > MAX_ENUMERATION:
        raise ValueError(f"C({m}, {b - 1}) submatrices exceed the enumeration guard")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        tau = solve_tau(m, p_fr)
    min_zeros = math.ceil(tau * m - 1e-9)
    failures = 0
    for t in range(trials):
        rng = np.random.default_rng([seed, t])
        if trial_fails(sample_model_gradient(rng, m, b), min_zeros):
            failures += 1
    lo, hi = clopper_pearson(failures, trials)
    return EmpiricalFailure(failures / trials, lo, hi, failures, trials)


def exact_failure_prob_small(b: int, m: int, p_fr: float = 1e-9) -> float:
    """Failure probability by enumerating all 2^(m b) zero patterns (tiny sizes only).

    Nonzero magnitudes are almost surely in general position, so the rank of a
    pattern equals the rank of a random matrix with that support.
    """
    if m * b > 20:
        raise ValueError("pattern enumeration limited to m*b <= 20")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        tau = solve_tau(m, p_fr)
    min_zeros = math.ceil(tau * m - 1e-9)
    rng = np.random.default_rng(12345)
    mags = 1.0 + rng.random((m, b))
    fails = 0
    total = 2 ** (m * b)
    for code in range(total):
        bits = np.array([(code >> k) & 1 for k in range(m * b)], dtype=float).reshape(m, b)
        if trial_fails(bits * mags, min_zeros):
            fails += 1
    return fails / total


def monotone_in_m(b: int, ms, p_fr: float = 0.0) -> Optional[list[int]]:
    """Widths at which the upper bound increases with m; None when monotone."""
    values = [failure_prob_bounds(b, m, p_fr).p_ub for m in ms]
    bad = [ms[i + 1] for i in range(len(values) - 1) if values[i + 1] > values[i] + 1e-15]
    return bad or None
