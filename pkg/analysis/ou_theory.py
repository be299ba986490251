"""
Hermite-spectral checks of the Ornstein-Uhlenbeck forward process.

OU time t and the diffusion schedule meet through alpha_bar = exp(-2t), so an
OU-evolved mixture is the forward marginal of toy_diffusion at that alpha_bar.
Hermite polynomials are the probabilists' family He_n, orthogonal under the
standard Gaussian measure with <He_n, He_m> = n! delta_nm.
"""

import itertools
import logging
import math
from dataclasses import dataclass

import numpy as np
from django.core.exceptions import ValidationError
from numpy.polynomial.hermite_e import hermeval, hermegauss
from scipy import integrate

from antithetic_lab.exceptions import UnsupportedDimension
from sampling.toy_diffusion import (
    MixtureParams,
    mixture_log_density,
    mixture_score,
    sample_mixture,
    step_coeffs,
)

logger = logging.getLogger(__name__)

MAX_SPECTRAL_DIM = 3
MAX_QUADRATURE_DIM = 2

NORMALIZATION_ATOL = 1e-6
A0_ATOL = 1e-10
# Integration domains reach this many component stds beyond the extreme means.
DOMAIN_STDS = 12.0

_SQRT_2PI = math.sqrt(2.0 * math.pi)


def _check_time(t):
    if t < 0:
        raise ValidationError({"t": "OU time must be nonnegative."})


# ── Hermite polynomials and Gauss-Hermite quadrature ─────────────────────


def hermite_eval(n, x):
    if n < 0:
        raise ValidationError({"n": "Hermite degree must be nonnegative."})
    coefficients = np.zeros(n + 1)
    coefficients[n] = 1.0
    return hermeval(x, coefficients)


def multi_index_factorial(alpha):
    return math.prod(math.factorial(a) for a in alpha)


def multi_indices(d, max_degree):
    """All exponent tuples of length d with total degree <= max_degree, by degree."""
    exponents = itertools.product(range(max_degree + 1), repeat=d)
    indices = (a for a in exponents if sum(a) <= max_degree)
    return sorted(indices, key=lambda a: (sum(a), tuple(-e for e in a)))


def hermite_eval_multi(alpha, x):
    """He_alpha(x) = prod_i He_{alpha_i}(x_i) for points x of shape (..., d)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != len(alpha):
        raise ValidationError(
            {"alpha": f"Index length {len(alpha)} != point dimension {x.shape[-1]}."}
        )
    values = np.ones(x.shape[:-1])
    for i, a in enumerate(alpha):
        if a:
            values = values * hermite_eval(a, x[..., i])
    return values


def gauss_hermite_rule(order):
    """Nodes and weights for the standard Gaussian measure (weights sum to 1)."""
    if order < 1:
        raise ValidationError({"quadrature_order": "Quadrature order must be at least 1."})
    nodes, weights = hermegauss(order)
    return nodes, weights / _SQRT_2PI


def _tensor_rule(order, d):
    nodes, weights = gauss_hermite_rule(order)
    points = np.array(list(itertools.product(nodes, repeat=d)))
    products = np.prod(np.array(list(itertools.product(weights, repeat=d))), axis=1)
    return points, products


def gauss_hermite_inner(f, g, quadrature_order):
    """<f, g> under the standard Gaussian, exact for polynomials of degree < 2 * order."""
    nodes, weights = gauss_hermite_rule(quadrature_order)
    return float(np.sum(weights * f(nodes) * g(nodes)))


# ── Expansions and the OU semigroup ──────────────────────────────────────


@dataclass(frozen=True)
class HermiteExpansion:
    """Finite sum of a_alpha He_alpha; keys are multi-index tuples of length `dim`."""

    coefficients: dict
    dim: int = 1

    def __post_init__(self):
        if not 1 <= self.dim <= MAX_SPECTRAL_DIM:
            raise UnsupportedDimension(self.dim, MAX_SPECTRAL_DIM)
        cleaned = {}
        for alpha, value in self.coefficients.items():
            alpha = (alpha,) if isinstance(alpha, int) else tuple(int(a) for a in alpha)
            if len(alpha) != self.dim or min(alpha) < 0:
                raise ValidationError(
                    {"coefficients": f"{alpha} is not a multi-index of dimension {self.dim}."}
                )
            cleaned[alpha] = float(value)
        object.__setattr__(self, "coefficients", cleaned)

    @property
    def degree(self):
        return max((sum(a) for a, v in self.coefficients.items() if v != 0.0), default=0)

    def coefficient(self, alpha):
        return self.coefficients.get(tuple(alpha), 0.0)

    @classmethod
    def tensor(cls, factors):
        """Product of one-dimensional expansions, one per coordinate."""
        if any(f.dim != 1 for f in factors):
            raise ValidationError({"factors": "Tensor factors must be one-dimensional."})
        coefficients = {}
        for terms in itertools.product(*(f.coefficients.items() for f in factors)):
            alpha = tuple(a[0] for a, _ in terms)
            coefficients[alpha] = math.prod(v for _, v in terms)
        return cls(coefficients, dim=len(factors))

    def _evaluate_rows(self, rows):
        values = np.zeros(rows.shape[0])
        for alpha, a in self.coefficients.items():
            if a != 0.0:
                values += a * hermite_eval_multi(alpha, rows)
        return values

    def evaluate(self, x):
        """Scalar points of any shape for dim 1; points of shape (..., dim) otherwise."""
        x = np.asarray(x, dtype=np.float64)
        if self.dim == 1:
            return self._evaluate_rows(x.reshape(-1, 1)).reshape(x.shape)
        return self._evaluate_rows(x.reshape(-1, self.dim)).reshape(x.shape[:-1])

    def as_json(self):
        return {
            ",".join(str(a) for a in alpha): value
            for alpha, value in sorted(
                self.coefficients.items(), key=lambda kv: (sum(kv[0]), kv[0])
            )
        }

    @classmethod
    def from_json(cls, mapping):
        coefficients = {tuple(int(a) for a in key.split(",")): v for key, v in mapping.items()}
        dims = {len(alpha) for alpha in coefficients} or {1}
        if len(dims) != 1:
            raise ValidationError({"coefficients": "Multi-indices have mixed lengths."})
        return cls(coefficients, dim=dims.pop())


def semigroup_apply(expansion, t):
    """P_t He_alpha = exp(-t |alpha|) He_alpha."""
    _check_time(t)
    return HermiteExpansion(
        {alpha: a * math.exp(-t * sum(alpha)) for alpha, a in expansion.coefficients.items()},
        dim=expansion.dim,
    )


def semigroup_by_quadrature(expansion, t, quadrature_order=None):
    """
    Evolve by convolving with the OU kernel, then re-project onto He_alpha.

    (P_t f)(y) = E f(e^{-t} y + sqrt(1 - e^{-2t}) Z) is evaluated with Gauss-Hermite
    nodes in Z; the projection uses the same rule in y. Both are exact for
    polynomials once the order exceeds the expansion degree.
    """
    _check_time(t)
    degree = expansion.degree
    order = degree + 1 if quadrature_order is None else quadrature_order
    if order < degree + 1:
        raise ValidationError(
            {"quadrature_order": f"Order {order} is too low for degree {degree}."}
        )
    d = expansion.dim
    points, weights = _tensor_rule(order, d)
    decay = math.exp(-t)
    spread = math.sqrt(1.0 - decay * decay)
    moved = decay * points[:, None, :] + spread * points[None, :, :]
    evolved = expansion.evaluate(moved.reshape(-1, d) if d > 1 else moved[..., 0])
    evolved = evolved.reshape(points.shape[0], points.shape[0]) @ weights
    coefficients = {
        alpha: float(np.sum(weights * evolved * hermite_eval_multi(alpha, points)))
        / multi_index_factorial(alpha)
        for alpha in multi_indices(d, degree)
    }
    return HermiteExpansion(coefficients, dim=d)


def density_ratio_norm(expansion, t):
    """||f_t - 1|| in L2(gamma) for a density ratio f_0 with a_0 = 1."""
    _check_time(t)
    a0 = expansion.coefficient((0,) * expansion.dim)
    if abs(a0 - 1.0) > A0_ATOL:
        raise ValidationError({"a_0": f"A density ratio has a_0 = 1, got {a0}."})
    total = sum(
        a * a * multi_index_factorial(alpha) * math.exp(-2.0 * t * sum(alpha))
        for alpha, a in expansion.coefficients.items()
        if sum(alpha) > 0
    )
    return math.sqrt(total)


def project_density_ratio(p0, max_degree, quadrature_order):
    """
    Coefficients a_n = <p0 / gamma, He_n> / n! of a one-dimensional density p0.

    p0 takes an array of points and returns densities. p0 / gamma must lie in
    L2(gamma); for Gaussian mixtures that means every component variance < 2.
    """
    if max_degree < 0:
        raise ValidationError({"max_degree": "Degree must be nonnegative."})
    if quadrature_order < max(2 * max_degree, 1):
        raise ValidationError(
            {"quadrature_order": f"Order {quadrature_order} is too low for degree {max_degree}."}
        )
    nodes, weights = gauss_hermite_rule(quadrature_order)
    gaussian = np.exp(-0.5 * nodes**2) / _SQRT_2PI
    ratio = np.asarray(p0(nodes), dtype=np.float64) / gaussian
    return HermiteExpansion(
        {
            (n,): float(np.sum(weights * ratio * hermite_eval(n, nodes))) / math.factorial(n)
            for n in range(max_degree + 1)
        }
    )


# ── Relative Fisher information ──────────────────────────────────────────


def relative_fisher_information(density, score, bounds, points=None):
    """
    FI(p | gamma) = int ||grad log p(x) + x||^2 p(x) dx on a box covering the mass.

    density and score take a single point of shape (d,); bounds is one (lo, hi)
    pair per coordinate, d <= 2. `points` lists breakpoints for 1-D integration.
    """
    d = len(bounds)
    if not 1 <= d <= MAX_QUADRATURE_DIM:
        raise UnsupportedDimension(d, MAX_QUADRATURE_DIM)

    def mass_integrand(*coords):
        return float(density(np.array(coords)))

    def fisher_integrand(*coords):
        x = np.array(coords)
        drift = np.asarray(score(x)) + x
        return float(np.dot(drift, drift)) * float(density(x))

    if d == 1:
        lo, hi = bounds[0]
        options = {"limit": 400, "epsabs": 1e-13, "epsrel": 1e-12}
        if points:
            options["points"] = [p for p in points if lo < p < hi] or None

        def integral(f):
            return integrate.quad(f, lo, hi, **options)[0]

    else:
        (x_lo, x_hi), (y_lo, y_hi) = bounds

        def integral(f):
            return integrate.dblquad(
                lambda y, x: f(x, y), x_lo, x_hi, y_lo, y_hi, epsabs=1e-11, epsrel=1e-10
            )[0]

    mass = integral(mass_integrand)
    if abs(mass - 1.0) > NORMALIZATION_ATOL:
        raise ValidationError(
            {"density": f"Density integrates to {mass:.9f} on the domain, expected 1."}
        )
    return max(float(integral(fisher_integrand)), 0.0)


@dataclass(frozen=True)
class OUMixture:
    """A Gaussian mixture mu_0 evolved by the OU semigroup to time t."""

    params: MixtureParams

    @staticmethod
    def alpha_bar(t):
        _check_time(t)
        return math.exp(-2.0 * t)

    def evolved(self, t):
        alpha_bar = self.alpha_bar(t)
        return MixtureParams(
            self.params.weights,
            math.sqrt(alpha_bar) * self.params.means,
            np.sqrt(alpha_bar * self.params.stds**2 + 1.0 - alpha_bar),
        )

    def log_density(self, t, x):
        return mixture_log_density(self.params, self.alpha_bar(t), x)

    def density(self, t, x):
        return np.exp(self.log_density(t, x))

    def score(self, t, x):
        return mixture_score(self.params, self.alpha_bar(t), x)

    def center(self, t):
        return math.exp(-t) * (self.params.weights @ self.params.means)

    def integration_bounds(self, t):
        evolved = self.evolved(t)
        reach = DOMAIN_STDS * evolved.stds.max()
        return [
            (float(evolved.means[:, i].min() - reach), float(evolved.means[:, i].max() + reach))
            for i in range(evolved.dim)
        ]

    def fisher_information(self, t):
        evolved = self.evolved(t)
        points = sorted(set(evolved.means[:, 0].tolist())) if evolved.dim == 1 else None
        return relative_fisher_information(
            lambda x: self.density(t, x),
            lambda x: self.score(t, x),
            self.integration_bounds(t),
            points=points,
        )

    def check_square_integrable(self):
        if np.any(self.params.stds**2 >= 2.0):
            raise ValidationError(
                {"stds": "Component variances must be below 2 for p0 / gamma to lie in L2(gamma)."}
            )

    def density_ratio_expansion(self, max_degree, quadrature_order):
        if self.params.dim != 1:
            raise UnsupportedDimension(self.params.dim, 1)
        self.check_square_integrable()
        return project_density_ratio(
            lambda x: self.density(0.0, x[:, None]), max_degree, quadrature_order
        )


@dataclass(frozen=True)
class FisherDecay:
    t_grid: np.ndarray
    fisher_information: np.ndarray
    bound: np.ndarray

    @property
    def nonincreasing(self):
        return bool(np.all(np.diff(self.fisher_information) <= 1e-12))

    def within_bound(self, rtol=1e-6):
        return bool(np.all(self.fisher_information <= self.bound * (1.0 + rtol) + 1e-15))


def fisher_decay(mixture, t_grid):
    """FI(mu_t | gamma) on a time grid together with exp(-2t) FI(mu_0 | gamma)."""
    t_grid = np.asarray(t_grid, dtype=np.float64)
    initial = mixture.fisher_information(0.0)
    values = np.array([mixture.fisher_information(float(t)) for t in t_grid])
    logger.debug("FI(mu_0 | gamma) = %.6g over %d times", initial, t_grid.size)
    return FisherDecay(t_grid, values, np.exp(-2.0 * t_grid) * initial)


# ── Symmetry preservation ────────────────────────────────────────────────


@dataclass(frozen=True)
class SymmetryPreservationReport:
    t_grid: np.ndarray
    density_residuals: np.ndarray
    score_residuals: np.ndarray
    symmetric: bool

    @property
    def max_density_residual(self):
        return float(self.density_residuals.max())

    @property
    def max_score_residual(self):
        return float(self.score_residuals.max())


def symmetry_preservation_check(mixture, g, t_grid, probes, center=None, strict=True):
    """
    Max over probes x of |p_t(mu_t + g x) - p_t(mu_t + x)| and
    ||s_t(mu_t + g x) - g s_t(mu_t + x)|| for every t, with mu_t = e^{-t} mu.

    With strict set, a mixture that is not symmetric about mu under g is
    rejected; otherwise its residuals are reported.
    """
    g = np.atleast_2d(np.asarray(g, dtype=np.float64))
    d = mixture.params.dim
    if g.shape != (d, d) or not np.allclose(g.T @ g, np.eye(d), rtol=0.0, atol=1e-12):
        raise ValidationError({"g": f"g must be an orthogonal {d}x{d} matrix."})
    mu = mixture.center(0.0) if center is None else np.asarray(center, dtype=np.float64)
    symmetric = mixture.params.is_symmetric_under(g, mu)
    if not symmetric:
        if strict:
            raise ValidationError({"mixture": "Mixture is not symmetric about its center under g."})
        logger.warning("Mixture is not symmetric under g; residuals are reported only")

    probes = np.asarray(probes, dtype=np.float64)
    moved = probes @ g.T
    density_residuals, score_residuals = [], []
    for t in t_grid:
        mu_t = math.exp(-t) * mu
        density_residuals.append(
            np.max(np.abs(mixture.density(t, mu_t + moved) - mixture.density(t, mu_t + probes)))
        )
        equivariance = mixture.score(t, mu_t + moved) - mixture.score(t, mu_t + probes) @ g.T
        score_residuals.append(np.max(np.linalg.norm(equivariance, axis=1)))
    return SymmetryPreservationReport(
        np.asarray(t_grid, dtype=np.float64),
        np.array(density_residuals),
        np.array(score_residuals),
        symmetric,
    )


# ── One-step DDIM correlation bound ──────────────────────────────────────


@dataclass(frozen=True)
class OneStepBoundReport:
    """Per-coordinate |Corr(F_i(X), F_i(-X)) + 1| against its Fisher-information bound."""

    t: float
    delta: float
    a: float
    c: float
    fisher_information_0: float
    measured: np.ndarray
    bound: np.ndarray
    variance: np.ndarray

    @property
    def ratio(self):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.bound > 0.0, self.measured / self.bound, np.nan)

    def holds(self, tolerance=0.05):
        return bool(np.all(self.measured <= self.bound * (1.0 + tolerance) + 1e-12))


def one_step_correlation_bound(params, t, delta, n, stream):
    """
    Measure the one-step DDIM map F(x) = a x + c s_t(x) on X ~ mu_t with exact scores.

    The step runs from OU time t to t - delta. The bound is
    2 |c| / sqrt(v_i) * e^{-t} sqrt(FI(mu_0 | gamma)) with v_i the smaller of the
    sample variances of F_i(X) and F_i(-X).
    """
    if t <= 0 or not 0 < delta <= t:
        raise ValidationError({"delta": "Require t > 0 and 0 < delta <= t."})
    if n < 2:
        raise ValidationError({"n": "At least two samples are needed."})
    mixture = OUMixture(params)
    alpha_bar_t = mixture.alpha_bar(t)
    a, b = step_coeffs(mixture.alpha_bar(t - delta), alpha_bar_t)
    c = -b * math.sqrt(1.0 - alpha_bar_t)

    x = sample_mixture(mixture.evolved(t), n, stream)
    forward = a * x + c * mixture.score(t, x)
    backward = -a * x + c * mixture.score(t, -x)

    measured, variance = [], []
    for i in range(params.dim):
        v = min(forward[:, i].var(ddof=1), backward[:, i].var(ddof=1))
        rho = np.corrcoef(forward[:, i], backward[:, i])[0, 1] if v > 0.0 else np.nan
        measured.append(abs(rho + 1.0))
        variance.append(v)
    variance = np.array(variance)

    fisher_0 = mixture.fisher_information(0.0)
    with np.errstate(divide="ignore"):
        bound = 2.0 * abs(c) / np.sqrt(variance) * math.exp(-t) * math.sqrt(fisher_0)
    return OneStepBoundReport(
        float(t), float(delta), a, c, fisher_0, np.array(measured), bound, variance
    )
