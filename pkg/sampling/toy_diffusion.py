"""
Analytic-score diffusion engine.

Convention: eps(t, x) = -sqrt(1 - alpha_bar_t) * s_t(x), where s_t is the exact
score of the forward marginal at step t. With this choice the DDIM update

    x_{t-1} = a_t x_t + b_t eps(t, x_t)

and the Ornstein-Uhlenbeck formulas of the analysis app (alpha_bar = e^{-2t})
describe the same object. The Gaussian-mixture helpers take alpha_bar directly
so that both the discrete schedule and continuous OU time can use them.
"""

import abc
import logging
from dataclasses import dataclass, replace

import numpy as np
from django.core.exceptions import ValidationError
from scipy.special import logsumexp, softmax

from antithetic_lab.exceptions import SamplerDivergence

from .noise_design import RngStream, uniform_to_normal

logger = logging.getLogger(__name__)

DEFAULT_IMAGE_SHAPE = (3, 8, 8)

_LOG_2PI = np.log(2.0 * np.pi)


def _as_rows(x):
    x = np.asarray(x, dtype=np.float64)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


# ── Schedules ────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class Schedule:
    """
    Cumulative signal coefficients alpha_bar[0..T].

    alpha_bar[0] is the clean end of the chain (1.0 for schedules built from
    betas); steps t = 1..T are the noisy levels used by the samplers.
    """

    alpha_bar: np.ndarray
    timesteps: np.ndarray | None = None

    def __post_init__(self):
        values = np.asarray(self.alpha_bar, dtype=np.float64)
        errors = {}
        if values.ndim != 1 or values.size < 2:
            errors["alpha_bar"] = "A schedule needs at least alpha_bar_0 and alpha_bar_1."
        elif np.any(values <= 0.0) or np.any(values > 1.0):
            errors["alpha_bar"] = "Every alpha_bar must lie in (0, 1]."
        elif np.any(np.diff(values) >= 0.0):
            errors["alpha_bar"] = "alpha_bar must be strictly decreasing in t."
        if errors:
            raise ValidationError(errors)
        object.__setattr__(self, "alpha_bar", values)
        labels = np.arange(values.size) if self.timesteps is None else np.asarray(self.timesteps)
        object.__setattr__(self, "timesteps", labels)

    @classmethod
    def from_alpha_bar(cls, values):
        return cls(np.asarray(values, dtype=np.float64))

    @property
    def T(self):
        return self.alpha_bar.size - 1

    def check_step(self, t):
        if not 1 <= t <= self.T:
            raise ValidationError({"t": f"Step {t} is outside [1, {self.T}]."})

    def ou_time(self, t):
        """Continuous OU time matching step t: -1/2 log alpha_bar_t."""
        return -0.5 * np.log(self.alpha_bar[t])

    def respaced(self, steps):
        """A DDIM sub-schedule with `steps` noisy levels spread evenly over 1..T."""
        if not 1 <= steps <= self.T:
            raise ValidationError({"steps": f"Respacing needs 1 <= steps <= {self.T}."})
        indices = np.unique(np.round(np.linspace(0, self.T, steps + 1)).astype(int))
        return Schedule(self.alpha_bar[indices], timesteps=self.timesteps[indices])


def linear_beta_schedule(T, beta_min=1e-4, beta_max=0.02):
    if T < 1:
        raise ValidationError({"T": "A schedule needs at least one step."})
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ValidationError({"beta": "Require 0 < beta_min <= beta_max < 1."})
    betas = np.linspace(beta_min, beta_max, T)
    return Schedule(np.concatenate([[1.0], np.cumprod(1.0 - betas)]))


def step_coeffs(alpha_bar_prev, alpha_bar_t):
    a = np.sqrt(alpha_bar_prev / alpha_bar_t)
    b = np.sqrt(1.0 - alpha_bar_prev) - a * np.sqrt(1.0 - alpha_bar_t)
    return float(a), float(b)


def ddim_step_coeffs(schedule, t):
    schedule.check_step(t)
    return step_coeffs(schedule.alpha_bar[t - 1], schedule.alpha_bar[t])


# ── Gaussian mixtures ────────────────────────────────────────────────────


@dataclass(frozen=True)
class MixtureParams:
    """Isotropic Gaussian mixture: weights (K,), means (K, d), per-component stds (K,)."""

    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        weights = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        means = np.asarray(self.means, dtype=np.float64)
        stds = np.atleast_1d(np.asarray(self.stds, dtype=np.float64))
        if means.ndim == 1:
            means = means[:, None]

        errors = {}
        if weights.size < 1:
            errors["weights"] = "A mixture needs at least one component."
        elif np.any(weights < 0.0) or abs(weights.sum() - 1.0) > 1e-12:
            errors["weights"] = "Weights must be nonnegative and sum to 1."
        if means.shape[0] != weights.size:
            errors["means"] = f"Expected {weights.size} means, got {means.shape[0]}."
        if stds.shape != weights.shape:
            errors["stds"] = f"Expected {weights.size} stds, got {stds.size}."
        elif np.any(stds <= 0.0):
            errors["stds"] = "Component stds must be positive."
        if errors:
            raise ValidationError(errors)

        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "stds", stds)

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def components(self):
        return self.weights.size

    @classmethod
    def gaussian(cls, d, std=1.0, shift=0.0):
        return cls([1.0], np.full((1, d), float(shift)), [std])

    @classmethod
    def symmetric(cls, d, offset=1.0, std=0.5, shift=0.0):
        """Two equal components at shift +/- offset * pattern; symmetric about `shift`."""
        pattern = np.cos(0.7 * np.arange(d) + 0.3)
        pattern /= np.sqrt(np.mean(pattern**2))
        means = np.stack([offset * pattern, -offset * pattern]) + shift
        return cls([0.5, 0.5], means, [std, std])

    @classmethod
    def multimodal(cls, d, components, stream, offset=1.0, std=0.5, shift=0.0):
        means = offset * uniform_to_normal(stream.uniforms((components, d))) + shift
        return cls(np.full(components, 1.0 / components), means, np.full(components, std))

    def transformed(self, g, center=None):
        """Component means mapped by x -> center + g (x - center)."""
        center = np.zeros(self.dim) if center is None else np.asarray(center, dtype=np.float64)
        means = center + (self.means - center) @ np.asarray(g, dtype=np.float64).T
        return MixtureParams(self.weights, means, self.stds)

    def is_symmetric_under(self, g, center=None, atol=1e-12):
        """True when g maps the component set onto itself (weights and stds included)."""
        image = self.transformed(g, center)
        unmatched = set(range(self.components))
        for k in range(self.components):
            match = next(
                (
                    j
                    for j in unmatched
                    if abs(image.weights[k] - self.weights[j]) <= atol
                    and abs(image.stds[k] - self.stds[j]) <= atol
                    and np.allclose(image.means[k], self.means[j], rtol=0.0, atol=atol)
                ),
                None,
            )
            if match is None:
                return False
            unmatched.discard(match)
        return True


def marginal_moments(params, alpha_bar):
    """Component means and variances of the forward marginal at alpha_bar."""
    means = np.sqrt(alpha_bar) * params.means
    variances = alpha_bar * params.stds**2 + (1.0 - alpha_bar)
    return means, variances


def _component_log_terms(params, alpha_bar, x):
    means, variances = marginal_moments(params, alpha_bar)
    sq_dist = np.sum((x[:, None, :] - means[None, :, :]) ** 2, axis=2)
    d = params.dim
    return (
        np.log(params.weights)[None, :]
        - 0.5 * sq_dist / variances[None, :]
        - 0.5 * d * (_LOG_2PI + np.log(variances))[None, :]
    )


def mixture_log_density(params, alpha_bar, x):
    x, single = _as_rows(x)
    values = logsumexp(_component_log_terms(params, alpha_bar, x), axis=1)
    return values[0] if single else values


def _responsibilities_and_pulls(params, alpha_bar, x):
    means, variances = marginal_moments(params, alpha_bar)
    resp = softmax(_component_log_terms(params, alpha_bar, x), axis=1)
    # per-component gradients (mu_k - x) / v_k
    pulls = (means[None, :, :] - x[:, None, :]) / variances[None, :, None]
    return resp, pulls, variances


def mixture_score(params, alpha_bar, x):
    """grad log p at alpha_bar, via log-domain responsibilities."""
    x, single = _as_rows(x)
    resp, pulls, _ = _responsibilities_and_pulls(params, alpha_bar, x)
    score = np.einsum("nk,nkd->nd", resp, pulls)
    return score[0] if single else score


def mixture_log_density_hessian(params, alpha_bar, x):
    """Hessian of log p: sum_k r_k (u_k u_k^T - I / v_k) - g g^T."""
    x, single = _as_rows(x)
    resp, pulls, variances = _responsibilities_and_pulls(params, alpha_bar, x)
    grad = np.einsum("nk,nkd->nd", resp, pulls)
    outer = np.einsum("nk,nki,nkj->nij", resp, pulls, pulls)
    diagonal = (resp / variances[None, :]).sum(axis=1)
    hessian = outer - grad[:, :, None] * grad[:, None, :]
    hessian -= diagonal[:, None, None] * np.eye(params.dim)[None, :, :]
    return hessian[0] if single else hessian


def exact_mixture_eps(params, schedule, t, x):
    schedule.check_step(t)
    alpha_bar = schedule.alpha_bar[t]
    return -np.sqrt(1.0 - alpha_bar) * mixture_score(params, alpha_bar, x)


def sample_mixture(params, n, stream):
    generator = stream.generator()
    cumulative = np.cumsum(params.weights)
    labels = np.minimum(
        np.searchsorted(cumulative, generator.random(n), side="right"), params.components - 1
    )
    noise = uniform_to_normal(generator.random((n, params.dim)))
    return params.means[labels] + params.stds[labels, None] * noise


def forward_sample(x0, alpha_bar, stream):
    x0 = np.asarray(x0, dtype=np.float64)
    noise = uniform_to_normal(stream.uniforms(x0.shape))
    return np.sqrt(alpha_bar) * x0 + np.sqrt(1.0 - alpha_bar) * noise


# ── Score fields ─────────────────────────────────────────────────────────


class ScoreField(abc.ABC):
    """Evaluation contract eps(t, x) for x of shape (d,) or (n, d), bound to a schedule."""

    def __init__(self, schedule, dim):
        self.schedule = schedule
        self.dim = dim

    @abc.abstractmethod
    def eps(self, t, x):
        raise NotImplementedError

    def score(self, t, x):
        return -self.eps(t, x) / np.sqrt(1.0 - self.schedule.alpha_bar[t])


class MixtureScoreField(ScoreField):
    def __init__(self, params, schedule):
        super().__init__(schedule, params.dim)
        self.params = params

    def eps(self, t, x):
        return exact_mixture_eps(self.params, self.schedule, t, x)

    def score(self, t, x):
        self.schedule.check_step(t)
        return mixture_score(self.params, self.schedule.alpha_bar[t], x)


class AffineScoreField(ScoreField):
    """Time-independent eps(t, x) = A x + b."""

    def __init__(self, matrix, offset, schedule):
        matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
        super().__init__(schedule, matrix.shape[1])
        self.matrix = matrix
        self.offset = np.broadcast_to(np.asarray(offset, dtype=np.float64), (matrix.shape[0],))

    def eps(self, t, x):
        self.schedule.check_step(t)
        return np.asarray(x, dtype=np.float64) @ self.matrix.T + self.offset


# ── Samplers ─────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class Trajectory:
    """
    states[i] is the state at steps[i], running from y_T to y_0.

    initial_noise is the noise handed to the sampler. With negated set the chain
    started from -initial_noise and every step draw was negated too.

    eps[i] is the field output evaluated on states[i], for steps T..1. Arrays have
    a batch axis after the step axis when the sampler was given several rows.
    """

    states: np.ndarray
    steps: np.ndarray
    initial_noise: np.ndarray
    eps: np.ndarray | None = None
    negated: bool = False

    @classmethod
    def stack(cls, trajectories):
        """Inverse of unbatch: one batched trajectory from single-row runs on one schedule."""
        first = trajectories[0]
        if any(
            t.batched or t.negated != first.negated or not np.array_equal(t.steps, first.steps)
            for t in trajectories
        ):
            raise ValidationError({"trajectories": "Only alike unbatched runs can be stacked."})
        eps = None
        if all(t.eps is not None for t in trajectories):
            eps = np.stack([t.eps for t in trajectories], axis=1)
        return cls(
            np.stack([t.states for t in trajectories], axis=1),
            first.steps,
            np.stack([t.initial_noise for t in trajectories]),
            eps,
            first.negated,
        )

    @property
    def final(self):
        return self.states[-1]

    @property
    def batched(self):
        return self.states.ndim == 3

    def unbatch(self):
        if not self.batched:
            return [self]
        return [
            Trajectory(
                self.states[:, i],
                self.steps,
                self.initial_noise[i],
                None if self.eps is None else self.eps[:, i],
                self.negated,
            )
            for i in range(self.states.shape[1])
        ]


def _check_compatible(score, schedule, z):
    errors = {}
    if not np.array_equal(score.schedule.alpha_bar, schedule.alpha_bar):
        errors["schedule"] = "Score field is bound to a different schedule."
    if z.shape[-1] != score.dim:
        errors["z_init"] = (
            f"Noise dimension {z.shape[-1]} does not match field dimension {score.dim}."
        )
    if errors:
        raise ValidationError(errors)


def _run_chain(schedule, z, update, record_eps, record_states):
    T = schedule.T
    x = z.copy()
    states = [x] if record_states else None
    eps_records = [] if record_eps else None

    for t in range(T, 0, -1):
        x, eps = update(t, x)
        if not np.all(np.isfinite(x)):
            raise SamplerDivergence(t)
        if record_states:
            states.append(x)
        if record_eps:
            eps_records.append(eps)

    if record_states:
        steps = np.arange(T, -1, -1)
        stacked = np.stack(states)
    else:
        steps = np.array([T, 0])
        stacked = np.stack([z, x])
    return Trajectory(
        stacked,
        steps,
        z,
        None if eps_records is None else np.stack(eps_records),
    )


def ddim_sample(score, schedule, z_init, record_eps=True, record_states=True):
    """
    Deterministic DDIM from y_T = z_init down to y_0.

    With record_states=False only the two endpoints are kept.
    """
    z = np.asarray(z_init, dtype=np.float64)
    _check_compatible(score, schedule, z)

    def update(t, x):
        a, b = ddim_step_coeffs(schedule, t)
        eps = score.eps(t, x)
        return a * x + b * eps, eps

    return _run_chain(schedule, z, update, record_eps, record_states)


def ddpm_sample(
    score,
    schedule,
    z_init,
    step_noise,
    negate_all=False,
    eta=1.0,
    record_eps=True,
    record_states=True,
):
    """
    Ancestral sampling with sigma_t = eta * sqrt(posterior variance).

    `step_noise` is either an RngStream drawn from at every step, or a
    precomputed standard-normal array of shape (T, *z_init.shape) whose row i
    is used at step T - i. With negate_all set, the initial noise and every
    per-step draw are negated, so two runs sharing the noise form an antithetic
    pair. Draws happen even when sigma_t = 0 to keep paired runs aligned.
    """
    sign = -1.0 if negate_all else 1.0
    z = sign * np.asarray(z_init, dtype=np.float64)
    _check_compatible(score, schedule, z)

    if isinstance(step_noise, RngStream):
        generator = step_noise.generator()

        def draw(t, shape):
            return uniform_to_normal(generator.random(shape))

    else:
        table = np.asarray(step_noise, dtype=np.float64)
        if table.shape != (schedule.T, *z.shape):
            raise ValidationError(
                {"step_noise": f"Expected shape {(schedule.T, *z.shape)}, got {table.shape}."}
            )

        def draw(t, shape):
            return table[schedule.T - t]

    def update(t, x):
        alpha_bar_t = schedule.alpha_bar[t]
        alpha_bar_prev = schedule.alpha_bar[t - 1]
        alpha_t = alpha_bar_t / alpha_bar_prev
        beta_t = 1.0 - alpha_t
        eps = score.eps(t, x)
        mean = (x - beta_t / np.sqrt(1.0 - alpha_bar_t) * eps) / np.sqrt(alpha_t)
        sigma = eta * np.sqrt(beta_t * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar_t))
        noise = draw(t, x.shape)
        return mean + sigma * sign * noise, eps

    trajectory = _run_chain(schedule, z, update, record_eps, record_states)
    if negate_all:
        trajectory = replace(trajectory, initial_noise=-z, negated=True)
    return trajectory
