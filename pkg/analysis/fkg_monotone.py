"""
Monotone maps, antithetic correlation, and coordinatewise monotonicity of DDIM.

A map that is monotone in each input coordinate has Corr(G(Z), G(-Z)) <= 0 for
Z standard normal. The idealized one-step DDIM map F(x) = a x + c grad log p_t(x)
is coordinatewise nondecreasing when log p_t has nonnegative mixed partials and
a >= c * kappa_t bounds its diagonal curvature.
"""

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from django.core.exceptions import ValidationError

from analysis.image_stats import CONSTANT_RTOL, is_constant
from sampling.noise_design import uniform_to_normal
from sampling.toy_diffusion import (
    MixtureScoreField,
    ddim_sample,
    ddim_step_coeffs,
    marginal_moments,
    mixture_log_density_hessian,
    mixture_score,
)

logger = logging.getLogger(__name__)

MIN_SAMPLES = 1000
FD_STEP = 1e-5
MONOTONE_ATOL = 1e-8
DEFAULT_PROBES = 512


class CorrelationEstimate(NamedTuple):
    """Pearson rho_hat with a jackknife standard error; both None when undefined."""

    rho_hat: float | None
    std_error: float | None

    @property
    def defined(self):
        return self.rho_hat is not None


def jackknife_pearson(x, y):
    """Leave-one-out jackknife over the pairs, using running sums so it stays O(n)."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    n = x.size
    if n < 3 or y.size != n:
        raise ValidationError({"samples": "Need at least three paired samples."})
    if is_constant(x) or is_constant(y):
        return CorrelationEstimate(None, None)
    x = x - x.mean()
    y = y - y.mean()
    sxx, syy, sxy = np.dot(x, x), np.dot(y, y), np.dot(x, y)
    rho = float(np.clip(sxy / np.sqrt(sxx * syy), -1.0, 1.0))

    m = n - 1
    sx, sy = -x, -y
    cxx = (sxx - x * x) - sx * sx / m
    cyy = (syy - y * y) - sy * sy / m
    cxy = (sxy - x * y) - sx * sy / m
    if np.any(cxx <= CONSTANT_RTOL * sxx) or np.any(cyy <= CONSTANT_RTOL * syy):
        return CorrelationEstimate(rho, None)
    denominator = np.sqrt(cxx * cyy)
    leave_one_out = np.clip(cxy / denominator, -1.0, 1.0)
    spread = np.sum((leave_one_out - leave_one_out.mean()) ** 2)
    return CorrelationEstimate(rho, float(np.sqrt(m / n * spread)))


# ── Monotone scalar chains ───────────────────────────────────────────────


@dataclass(frozen=True)
class MonotoneChain:
    """h -> relu(w_l h + b_l) applied for l = 1..L to a scalar input."""

    weights: np.ndarray
    biases: np.ndarray

    def __post_init__(self):
        weights = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        biases = np.atleast_1d(np.asarray(self.biases, dtype=np.float64))
        if weights.size < 1 or weights.shape != biases.shape:
            raise ValidationError({"weights": "Need L >= 1 layers with one bias per weight."})
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "biases", biases)

    @property
    def depth(self):
        return self.weights.size

    @property
    def direction(self):
        """+1 if the composed map is nondecreasing, -1 if nonincreasing."""
        return -1.0 if np.count_nonzero(self.weights < 0.0) % 2 else 1.0

    def __call__(self, z):
        h = np.asarray(z, dtype=np.float64)
        for w, b in zip(self.weights, self.biases):
            h = np.maximum(w * h + b, 0.0)
        return h


def _random_chain(generator, L, weight_scale):
    weights = weight_scale * uniform_to_normal(generator.random(L))
    biases = 0.5 * uniform_to_normal(generator.random(L))
    return MonotoneChain(weights, biases)


def build_random_chain(stream, L, weight_scale=1.0):
    if L < 1:
        raise ValidationError({"L": "A chain needs at least one layer."})
    return _random_chain(stream.generator(), L, weight_scale)


def antithetic_corr(f, n, stream):
    """Corr(f(Z), f(-Z)) for scalar Z; undefined (None) when f is constant on the sample."""
    if n < MIN_SAMPLES:
        raise ValidationError({"n": f"At least {MIN_SAMPLES} samples are required."})
    z = uniform_to_normal(stream.uniforms(n))
    estimate = jackknife_pearson(f(z), f(-z))
    if not estimate.defined:
        logger.info("Map is constant on %d samples; correlation undefined", n)
    return estimate


# ── Partially monotone maps ──────────────────────────────────────────────


class PartialMonotoneMap:
    """
    Map R^m -> R^p whose every output is monotone in input j with direction signs[j].

    `func` takes rows of shape (n, m) and returns rows of shape (n, p).
    """

    def __init__(self, func, signs):
        signs = np.asarray(signs, dtype=np.float64)
        if signs.ndim != 1 or not np.all(np.abs(signs) == 1.0):
            raise ValidationError({"signs": "Monotonicity signs must each be +1 or -1."})
        self.func = func
        self.signs = signs

    @property
    def dim(self):
        return self.signs.size

    @classmethod
    def identity(cls, m):
        return cls(lambda z: z, np.ones(m))

    @classmethod
    def flip(cls, signs):
        """z -> signs * z, e.g. (x, y) -> (x, -y)."""
        signs = np.asarray(signs, dtype=np.float64)
        return cls(lambda z: z * signs, signs)

    def __call__(self, z):
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        if z.shape[1] != self.dim:
            raise ValidationError(
                {"z": f"Expected {self.dim} input coordinates, got {z.shape[1]}."}
            )
        return np.asarray(self.func(z), dtype=np.float64)

    def sign_normalized(self):
        """z -> F(signs * z); nondecreasing in every coordinate."""
        return PartialMonotoneMap(lambda z: self(z * self.signs), np.ones(self.dim))

    def is_monotone_along(self, point, coord, grid, atol=1e-12):
        rows = np.repeat(np.asarray(point, dtype=np.float64)[None, :], len(grid), axis=0)
        rows[:, coord] = np.sort(np.asarray(grid, dtype=np.float64))
        steps = np.diff(self(rows), axis=0) * self.signs[coord]
        return bool(np.all(steps >= -atol))


class AdditiveMonotoneMap(PartialMonotoneMap):
    """F(z)_k = sum_j mixing[k, j] * chain_j(z_j) with nonnegative mixing."""

    def __init__(self, chains, mixing):
        mixing = np.atleast_2d(np.asarray(mixing, dtype=np.float64))
        if mixing.shape[1] != len(chains):
            raise ValidationError({"mixing": "Mixing needs one column per chain."})
        if np.any(mixing < 0.0):
            raise ValidationError({"mixing": "Mixing weights must be nonnegative."})
        self.chains = list(chains)
        self.mixing = mixing
        super().__init__(self._evaluate, [chain.direction for chain in self.chains])

    def _evaluate(self, z):
        features = np.column_stack([chain(z[:, j]) for j, chain in enumerate(self.chains)])
        return features @ self.mixing.T

    @classmethod
    def random(cls, stream, m, outputs=None, depth=2, weight_scale=1.0):
        if m < 1:
            raise ValidationError({"m": "Need at least one input coordinate."})
        generator = stream.generator()
        chains = [_random_chain(generator, depth, weight_scale) for _ in range(m)]
        mixing = generator.random((outputs or m, m))
        return cls(chains, mixing)


def partial_monotone_corr(F, weights, n, stream, sign_normalize=False):
    """
    Corr(S(F(Z)), S(F(-Z))) for the linear statistic S(y) = y @ weights.

    With sign_normalize set, the correlation is computed on F(signs * .) evaluated
    at signs * Z, which reproduces the direct values exactly.
    """
    if n < 3:
        raise ValidationError({"n": "At least three samples are required."})
    weights = np.asarray(weights, dtype=np.float64)
    z = uniform_to_normal(stream.uniforms((n, F.dim)))
    G = F
    if sign_normalize:
        G, z = F.sign_normalized(), z * F.signs
    return jackknife_pearson(G(z) @ weights, G(-z) @ weights)


# ── DDIM monotonicity ────────────────────────────────────────────────────


def idealized_step_coeffs(schedule, t):
    """(a_t, c_t) with F_t(x) = a_t x + c_t grad log p_t(x) and c_t >= 0."""
    a, b = ddim_step_coeffs(schedule, t)
    return a, -b * float(np.sqrt(1.0 - schedule.alpha_bar[t]))


def marginal_probes(mixture, alpha_bar, count, stream):
    """Standard-normal probes scaled to the mean and per-coordinate spread of p_t."""
    means, variances = marginal_moments(mixture, alpha_bar)
    center = mixture.weights @ means
    spread = np.sqrt(mixture.weights @ (variances[:, None] + (means - center) ** 2))
    return center + spread * uniform_to_normal(stream.uniforms((count, mixture.dim)))


def _curvature(mixture, alpha_bar, points):
    """kappa (clipped at 0), minimum mixed partial, and probes with a negative one."""
    hessians = mixture_log_density_hessian(mixture, alpha_bar, np.atleast_2d(points))
    d = mixture.dim
    kappa = max(float(np.max(-np.diagonal(hessians, axis1=1, axis2=2))), 0.0)
    if d == 1:
        return kappa, None, 0
    off_diagonal = hessians[:, ~np.eye(d, dtype=bool)]
    violations = int(np.count_nonzero(np.any(off_diagonal < -MONOTONE_ATOL, axis=1)))
    return kappa, float(off_diagonal.min()), violations


def finite_difference_jacobian(func, points, step=FD_STEP):
    """Central differences with h = step * (1 + ||x||); returns (n, outputs, d)."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    h = step * (1.0 + np.linalg.norm(points, axis=1))
    columns = []
    for j in range(points.shape[1]):
        offset = np.zeros_like(points)
        offset[:, j] = h
        columns.append((func(points + offset) - func(points - offset)) / (2.0 * h[:, None]))
    return np.stack(columns, axis=2)


@dataclass(frozen=True)
class StepMonotonicityReport:
    t: int
    a: float
    c: float
    kappa: float
    min_mixed_partial: float | None
    mtp2_violations: int
    min_jacobian_entry: float
    min_analytic_jacobian_entry: float
    probe_count: int

    @property
    def condition_holds(self):
        return self.a >= self.c * self.kappa

    @property
    def monotone(self):
        return self.min_jacobian_entry >= -MONOTONE_ATOL


def one_step_monotonicity(mixture, alpha_bar, a, c, probes, t=0):
    """Monotonicity evidence for x -> a x + c grad log p(x) with p the marginal at alpha_bar."""
    probes = np.atleast_2d(np.asarray(probes, dtype=np.float64))
    if not np.all(np.isfinite(probes)):
        raise ValidationError({"probes": "Probe points must be finite."})
    kappa, min_mixed, violations = _curvature(mixture, alpha_bar, probes)
    if violations:
        logger.warning(
            "log p has negative mixed partials at %d of %d probes", violations, len(probes)
        )

    def step(x):
        return a * x + c * mixture_score(mixture, alpha_bar, x)

    jacobian = finite_difference_jacobian(step, probes)
    hessians = mixture_log_density_hessian(mixture, alpha_bar, probes)
    analytic = a * np.eye(mixture.dim) + c * hessians
    return StepMonotonicityReport(
        t=t,
        a=float(a),
        c=float(c),
        kappa=kappa,
        min_mixed_partial=min_mixed,
        mtp2_violations=violations,
        min_jacobian_entry=float(jacobian.min()),
        min_analytic_jacobian_entry=float(analytic.min()),
        probe_count=probes.shape[0],
    )


def ddim_monotonicity_check(mixture, schedule, t, probes):
    """Evaluate a_t >= c_t kappa_t and the one-step Jacobian of exact-score DDIM at step t."""
    a, c = idealized_step_coeffs(schedule, t)
    return one_step_monotonicity(mixture, schedule.alpha_bar[t], a, c, probes, t=t)


@dataclass(frozen=True)
class ChainMonotonicityReport:
    steps: list
    min_jacobian_entry: float
    probe_count: int

    @property
    def all_conditions_hold(self):
        return all(step.condition_holds for step in self.steps)

    @property
    def mtp2_violations(self):
        return sum(step.mtp2_violations for step in self.steps)

    @property
    def monotone(self):
        return self.min_jacobian_entry >= -MONOTONE_ATOL


def ddim_chain_monotonicity_check(mixture, schedule, probes):
    """
    Per-step curvature conditions along the DDIM paths started at the probes, and
    the finite-difference Jacobian of the composed map y_T -> y_0.
    """
    probes = np.atleast_2d(np.asarray(probes, dtype=np.float64))
    field = MixtureScoreField(mixture, schedule)
    trajectory = ddim_sample(field, schedule, probes, record_eps=False)
    steps = []
    for index, t in enumerate(trajectory.steps[:-1]):
        a, c = idealized_step_coeffs(schedule, int(t))
        kappa, min_mixed, violations = _curvature(
            mixture, schedule.alpha_bar[t], trajectory.states[index]
        )
        steps.append(
            StepMonotonicityReport(
                t=int(t),
                a=a,
                c=c,
                kappa=kappa,
                min_mixed_partial=min_mixed,
                mtp2_violations=violations,
                min_jacobian_entry=float("nan"),
                min_analytic_jacobian_entry=float("nan"),
                probe_count=probes.shape[0],
            )
        )

    def composed(x):
        return ddim_sample(field, schedule, x, record_eps=False, record_states=False).final

    jacobian = finite_difference_jacobian(composed, probes)
    return ChainMonotonicityReport(steps, float(jacobian.min()), probes.shape[0])


@dataclass(frozen=True)
class StepCountSweep:
    step_counts: list
    reports: list
    threshold: int | None


def step_count_sweep(mixture, schedule, step_counts, probes):
    """Chain checks on respaced schedules; the threshold is the smallest passing count."""
    counts = sorted(set(int(s) for s in step_counts))
    reports = [
        ddim_chain_monotonicity_check(mixture, schedule.respaced(count), probes)
        for count in counts
    ]
    passing = [count for count, report in zip(counts, reports) if report.all_conditions_hold]
    threshold = min(passing) if passing else None
    logger.info("Curvature condition threshold over %s steps: %s", counts, threshold)
    return StepCountSweep(counts, reports, threshold)
