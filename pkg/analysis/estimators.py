"""
MC, antithetic (AMC), K-antithetic and RQMC estimators of E[S(DM(z))].

Every estimator reduces its input to i.i.d. units (single values, pair means,
block means or replicate means), then builds a symmetric confidence interval
from the unit sample variance (divisor N-1). The antithetic correlation is
reported alongside but never enters the interval.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
from django.core.exceptions import ValidationError
from scipy import stats

from analysis.image_stats import is_constant

logger = logging.getLogger(__name__)

# Candidate widths below this fraction of max(1, baseline width) count as zero.
ZERO_WIDTH_RTOL = 1e-12


@dataclass(frozen=True)
class EstimatorReport:
    method: str
    estimate: float
    ci_lo: float
    ci_hi: float
    variance_estimate: float
    budget: int
    confidence: float
    units: int
    rho_hat: float | None = None

    def __post_init__(self):
        if not self.ci_lo <= self.estimate <= self.ci_hi:
            raise ValidationError(
                {"ci": f"Interval [{self.ci_lo}, {self.ci_hi}] excludes {self.estimate}."}
            )

    @property
    def half_width(self):
        return (self.ci_hi - self.ci_lo) / 2.0

    @property
    def width(self):
        return self.ci_hi - self.ci_lo


def _check_alpha(alpha):
    if not 0.0 < alpha < 1.0:
        raise ValidationError({"alpha": "alpha must lie strictly between 0 and 1."})


def normal_quantile(alpha):
    _check_alpha(alpha)
    return float(stats.norm.ppf(1.0 - alpha / 2.0))


def t_quantile(alpha, df):
    _check_alpha(alpha)
    return float(stats.t.ppf(1.0 - alpha / 2.0, df))


def _interval(method, units, quantile, alpha, budget, rho_hat=None):
    estimate = float(units.mean())
    variance = float(units.var(ddof=1))
    half_width = quantile * math.sqrt(variance / units.size)
    return EstimatorReport(
        method=method,
        estimate=estimate,
        ci_lo=estimate - half_width,
        ci_hi=estimate + half_width,
        variance_estimate=variance,
        budget=budget,
        confidence=1.0 - alpha,
        units=int(units.size),
        rho_hat=rho_hat,
    )


def _pearson_or_none(x, y):
    if is_constant(x) or is_constant(y):
        return None
    return float(np.clip(np.corrcoef(x, y)[0, 1], -1.0, 1.0))


def mc_estimate(values, alpha=0.05):
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size < 2:
        raise ValidationError({"values": "At least two values are needed to estimate a variance."})
    return _interval("MC", values, normal_quantile(alpha), alpha, budget=values.size)


def amc_estimate(pairs, alpha=0.05):
    """
    Antithetic pairs (S+, S-): the interval is mu_hat +/- z sqrt(2 s^2 / N), N = 2K,
    where s^2 is the sample variance of the K pair means.
    """
    pairs = np.asarray(pairs, dtype=np.float64)
    if pairs.ndim != 2 or pairs.shape[1] != 2:
        raise ValidationError({"pairs": "Pairs must have shape (K, 2)."})
    if pairs.shape[0] < 2:
        raise ValidationError({"pairs": "At least two antithetic pairs are required."})
    pair_means = 0.5 * (pairs[:, 0] + pairs[:, 1])
    return _interval(
        "AMC(k=2)",
        pair_means,
        normal_quantile(alpha),
        alpha,
        budget=pairs.size,
        rho_hat=_pearson_or_none(pairs[:, 0], pairs[:, 1]),
    )


def _exchangeable_correlation(blocks):
    deviations = blocks - blocks.mean()
    total = float(np.mean(deviations**2))
    if total == 0.0:
        return None
    B, K = blocks.shape
    sums = deviations.sum(axis=1)
    cross = float(np.sum(sums**2 - np.sum(deviations**2, axis=1)))
    return float(np.clip(cross / (B * K * (K - 1) * total), -1.0, 1.0))


def k_antithetic_estimate(blocks, alpha=0.05):
    """Blocks of K exchangeable values; block means are the i.i.d. units."""
    blocks = np.asarray(blocks, dtype=np.float64)
    if blocks.ndim != 2 or blocks.shape[1] < 2:
        raise ValidationError({"blocks": "Blocks must have shape (B, K) with K >= 2."})
    if blocks.shape[0] < 2:
        raise ValidationError({"blocks": "At least two blocks are required."})
    K = blocks.shape[1]
    if K == 2:
        return amc_estimate(blocks, alpha)
    return _interval(
        f"AMC(k={K})",
        blocks.mean(axis=1),
        normal_quantile(alpha),
        alpha,
        budget=blocks.size,
        rho_hat=_exchangeable_correlation(blocks),
    )


def rqmc_estimate(replicate_means, alpha=0.05, points_per_replicate=1):
    """Student-t interval over R independent randomization replicates."""
    replicate_means = np.asarray(replicate_means, dtype=np.float64).ravel()
    R = replicate_means.size
    if R < 2:
        raise ValidationError({"replicate_means": "At least two RQMC replicates are required."})
    return _interval(
        "RQMC",
        replicate_means,
        t_quantile(alpha, R - 1),
        alpha,
        budget=R * points_per_replicate,
    )


def efficiency_from_widths(baseline_width, candidate_width):
    tolerance = ZERO_WIDTH_RTOL * max(1.0, baseline_width)
    if candidate_width <= tolerance:
        return 1.0 if baseline_width <= tolerance else math.inf
    return (baseline_width / candidate_width) ** 2


def relative_efficiency(baseline, candidate):
    """(baseline CI width / candidate CI width)^2; +inf when the candidate width is zero."""
    if not math.isclose(baseline.confidence, candidate.confidence):
        raise ValidationError(
            {"confidence": "Reports must share a confidence level to be compared."}
        )
    if baseline.budget != candidate.budget:
        logger.warning(
            "Comparing %s (N=%d) with %s (N=%d) at unequal budgets",
            baseline.method,
            baseline.budget,
            candidate.method,
            candidate.budget,
        )
    return efficiency_from_widths(baseline.width, candidate.width)
