"""
Empirical probes of the symmetry conjecture on analytic score fields.

A slice is the selected coordinate of eps(t, c x) for c on a grid over [-1, 1]
that is symmetric about 0 bit for bit, so values[::-1] is f(-c) exactly.
"""

import logging
from dataclasses import dataclass

import numpy as np
from django.core.exceptions import ValidationError
from scipy.integrate import trapezoid

from analysis.image_stats import is_constant
from antithetic_lab.exceptions import UndefinedStatistic
from sampling.noise_design import uniform_to_normal

logger = logging.getLogger(__name__)

DEFAULT_GRID_SIZE = 201
PARAMETERIZATIONS = ("eps", "score")


@dataclass(frozen=True)
class SliceCurve:
    grid: np.ndarray
    values: np.ndarray
    anchor: np.ndarray | None = None
    coord: int = 0
    t: int = 0

    def __post_init__(self):
        errors = {}
        if self.grid.shape != self.values.shape:
            errors["values"] = "One value per grid point is required."
        elif not np.array_equal(self.grid, -self.grid[::-1]):
            errors["grid"] = "The grid must be symmetric about 0."
        if errors:
            raise ValidationError(errors)

    @classmethod
    def tabulate(cls, func, grid_size=DEFAULT_GRID_SIZE):
        """Curve of a scalar function of c, for probing curves that no field produced."""
        grid = symmetric_grid(grid_size)
        return cls(grid, np.asarray(func(grid), dtype=np.float64))


def symmetric_grid(grid_size):
    if grid_size < 3 or grid_size % 2 == 0:
        raise ValidationError({"grid_size": "Grid size must be odd and at least 3."})
    half = np.linspace(0.0, 1.0, grid_size // 2 + 1)
    return np.concatenate([-half[:0:-1], half])


def _field(score, parameterization):
    if parameterization not in PARAMETERIZATIONS:
        raise ValidationError({"parameterization": f"Choose one of {PARAMETERIZATIONS}."})
    return score.eps if parameterization == "eps" else score.score


def _check_coord(score, coord):
    if not 0 <= coord < score.dim:
        raise ValidationError({"coord": f"Coordinate {coord} is outside [0, {score.dim})."})


def draw_anchors(stream, count, d):
    return uniform_to_normal(stream.uniforms((count, d)))


def slice_curve(score, t, x, coord, grid_size=DEFAULT_GRID_SIZE):
    _check_coord(score, coord)
    x = np.asarray(x, dtype=np.float64)
    grid = symmetric_grid(grid_size)
    values = score.eps(t, grid[:, None] * x[None, :])[:, coord]
    return SliceCurve(grid, values, anchor=x, coord=coord, t=t)


def slice_curves(score, t, coord, anchors, grid_size=DEFAULT_GRID_SIZE, average=False):
    """One curve per anchor, or a single anchor-averaged curve."""
    curves = [slice_curve(score, t, x, coord, grid_size) for x in anchors]
    if not average:
        return curves
    return [
        SliceCurve(
            curves[0].grid,
            np.mean([c.values for c in curves], axis=0),
            anchor=np.asarray(anchors),
            coord=coord,
            t=t,
        )
    ]


def _moments(curve):
    f, grid = curve.values, curve.grid
    length = grid[-1] - grid[0]
    mean = trapezoid(f, grid) / length
    even = 0.5 * (f + f[::-1])
    return mean, trapezoid((f - mean) ** 2, grid), trapezoid((even - mean) ** 2, grid)


def antisymmetry_score(curve):
    """1 - int (even part - mean)^2 / int (f - mean)^2 ; 1 iff affine antisymmetric."""
    _, total, residual = _moments(curve)
    if is_constant(curve.values) or total <= np.finfo(float).tiny:
        raise UndefinedStatistic("Antisymmetry score is undefined for a constant curve.")
    return float(np.clip(1.0 - residual / total, 0.0, 1.0))


def variance_elimination(curve):
    """Variance of (f(c) + f(-c)) / 2 over the grid relative to the variance of f."""
    f, grid = curve.values, curve.grid
    length = grid[-1] - grid[0]
    even = 0.5 * (f + f[::-1])

    def variance(g):
        mean = trapezoid(g, grid) / length
        return trapezoid((g - mean) ** 2, grid) / length

    total = variance(f)
    if is_constant(f) or total <= np.finfo(float).tiny:
        raise UndefinedStatistic("Variance ratio is undefined for a constant curve.")
    return float(variance(even) / total)


@dataclass(frozen=True)
class TemporalCorrelation:
    steps: np.ndarray
    state_mean: np.ndarray
    state_std: np.ndarray
    eps_steps: np.ndarray | None = None
    eps_mean: np.ndarray | None = None
    eps_std: np.ndarray | None = None


def _rowwise_pearson(x, y):
    xc = x - x.mean(axis=1, keepdims=True)
    yc = y - y.mean(axis=1, keepdims=True)
    denominator = np.sqrt(np.sum(xc * xc, axis=1) * np.sum(yc * yc, axis=1))
    if np.any(is_constant(x, axis=1)) or np.any(is_constant(y, axis=1)):
        raise UndefinedStatistic("A constant state makes the pair correlation undefined.")
    return np.clip(np.sum(xc * yc, axis=1) / denominator, -1.0, 1.0)


def _series(first, second, centralized):
    """first, second: (pairs, steps, d) arrays -> per-step mean and std over pairs."""
    means, stds = [], []
    for s in range(first.shape[1]):
        a, b = first[:, s], second[:, s]
        if centralized:
            center = 0.5 * (a.mean(axis=0) + b.mean(axis=0))
            a, b = a - center, b - center
        rho = _rowwise_pearson(a, b)
        means.append(rho.mean())
        stds.append(rho.std(ddof=1))
    return np.array(means), np.array(stds)


def temporal_correlation(pn_trajectory_pairs, centralized=True):
    """Per-step correlation of PN pair states (and eps outputs) averaged over pairs."""
    if len(pn_trajectory_pairs) < 2:
        raise ValidationError({"pairs": "At least two trajectory pairs are required."})
    reference = pn_trajectory_pairs[0][0]
    for first, second in pn_trajectory_pairs:
        for trajectory in (first, second):
            if not np.array_equal(trajectory.steps, reference.steps) or (
                trajectory.states.shape != reference.states.shape
            ):
                raise ValidationError({"trajectories": "Trajectories use mismatched schedules."})

    first = np.stack([p[0].states for p in pn_trajectory_pairs])
    second = np.stack([p[1].states for p in pn_trajectory_pairs])
    state_mean, state_std = _series(first, second, centralized)

    eps_steps = eps_mean = eps_std = None
    if all(p[0].eps is not None and p[1].eps is not None for p in pn_trajectory_pairs):
        eps_steps = reference.steps[:-1]
        eps_mean, eps_std = _series(
            np.stack([p[0].eps for p in pn_trajectory_pairs]),
            np.stack([p[1].eps for p in pn_trajectory_pairs]),
            centralized,
        )
    return TemporalCorrelation(
        reference.steps, state_mean, state_std, eps_steps, eps_mean, eps_std
    )


def symmetry_center(score, t, coord, probe_count, stream, parameterization="eps"):
    """Estimate c_t as the mean of (f(x) + f(-x)) / 2 over standard-normal probes."""
    _check_coord(score, coord)
    if probe_count < 1:
        raise ValidationError({"probe_count": "At least one probe is required."})
    field = _field(score, parameterization)
    probes = uniform_to_normal(stream.uniforms((probe_count, score.dim)))
    centers = 0.5 * (field(t, probes)[:, coord] + field(t, -probes)[:, coord])
    return float(centers.mean())
