"""
Experiment runners behind the management commands.

A runner takes the validated config, a RunContext and a RunDirectory, writes
its tables and plot data, and returns the summary stored in manifest.json.
Stream ids come from a StreamPurpose plus a stable index, never from the
order in which workers finish, so thread count does not change any output.
"""

import logging
import math
import re
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from django.core.exceptions import ValidationError

from analysis.estimators import (
    k_antithetic_estimate,
    mc_estimate,
    relative_efficiency,
    rqmc_estimate,
)
from analysis.fkg_monotone import (
    AdditiveMonotoneMap,
    antithetic_corr,
    build_random_chain,
    ddim_chain_monotonicity_check,
    ddim_monotonicity_check,
    marginal_probes,
    partial_monotone_corr,
    step_count_sweep,
)
from analysis.image_stats import (
    ImageTensor,
    correlation_difference_pvalue,
    evaluate_statistics,
    pearson_centralized,
    pearson_standard,
    save_image_csv,
    ssim,
    wasserstein1,
    write_statistics_csv,
)
from analysis.ou_theory import (
    OUMixture,
    density_ratio_norm,
    fisher_decay,
    one_step_correlation_bound,
    semigroup_apply,
    semigroup_by_quadrature,
    symmetry_preservation_check,
)
from analysis.symmetry_lab import (
    antisymmetry_score,
    draw_anchors,
    slice_curves,
    symmetry_center,
    temporal_correlation,
    variance_elimination,
)
from sampling.noise_design import (
    RngStream,
    StreamPurpose,
    antithetic_expand,
    first_half_mask,
    gaussian_batch,
    k_antithetic_batch,
    masked_expand,
    upper_half_mask,
)
from sampling.qmc import Randomization, rqmc_point_sets, to_gaussian
from sampling.storage import save_batch, save_sobol_set, save_trajectory
from sampling.toy_diffusion import (
    MixtureParams,
    MixtureScoreField,
    Schedule,
    Trajectory,
    ddim_sample,
    ddpm_sample,
    linear_beta_schedule,
)

from .serializers import EstimatorReportSerializer, method_k

logger = logging.getLogger(__name__)

HISTOGRAM_BINS = 40
# DDPM step-noise stream index: (slot << GROUP_BITS) + row group
GROUP_BITS = 24
VIOLATION_SE = 3.0


@dataclass
class RunContext:
    """Seed, worker count and the bookkeeping a run reports in its manifest."""

    seed: int
    threads: int = 1
    chunk_size: int = 256
    export_noise: bool = False
    record_eps: bool = False
    streams: dict = field(default_factory=dict)
    sampler_calls: Counter = field(default_factory=Counter)

    def stream(self, purpose, index=0, label=None):
        stream = RngStream.for_purpose(self.seed, purpose, index)
        self.record_stream(label or f"{purpose.name.lower()}:{index}", stream.stream_id)
        return stream

    def record_stream(self, label, stream_id):
        self.streams[label] = int(stream_id)

    def map(self, func, items):
        """Order-preserving map, on a thread pool when threads > 1."""
        items = list(items)
        if self.threads <= 1 or len(items) < 2:
            return [func(item) for item in items]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(func, items))


# ── Model construction ───────────────────────────────────────────────────


def build_mixture(spec, d, stream=None):
    preset = spec["preset"]
    if preset == "gaussian":
        return MixtureParams.gaussian(d, std=spec.get("std", 1.0), shift=spec["shift"])
    if preset == "symmetric":
        return MixtureParams.symmetric(
            d, offset=spec["offset"], std=spec.get("std", 0.5), shift=spec["shift"]
        )
    if preset == "multimodal":
        if stream is None:
            raise ValidationError({"mixture": "Multimodal presets draw their means from a stream."})
        return MixtureParams.multimodal(
            d,
            spec["components"],
            stream,
            offset=spec["offset"],
            std=spec.get("std", 0.5),
            shift=spec["shift"],
        )
    params = MixtureParams(spec["weights"], spec["means"], spec["stds"])
    if params.dim != d:
        raise ValidationError(
            {"means": f"Explicit means have dimension {params.dim}, expected {d}."}
        )
    return params


def build_schedule(spec, respace=True):
    if "alpha_bar" in spec:
        schedule = Schedule.from_alpha_bar(spec["alpha_bar"])
    else:
        schedule = linear_beta_schedule(spec["T"], spec["beta_min"], spec["beta_max"])
    if respace and spec["steps"] is not None:
        schedule = schedule.respaced(spec["steps"])
    return schedule


@dataclass(frozen=True)
class DiffusionModel:
    """Analytic-score model of one run, with images of `image_shape`."""

    mixture: MixtureParams
    schedule: Schedule
    field: MixtureScoreField
    image_shape: tuple
    sampler: str = "ddim"
    eta: float = 1.0

    @property
    def d(self):
        return self.mixture.dim

    @classmethod
    def from_config(cls, config, ctx):
        spec = config["model"]
        image_shape = tuple(spec["image_shape"])
        mixture = build_mixture(
            spec["mixture"], math.prod(image_shape), ctx.stream(StreamPurpose.PRESET)
        )
        schedule = build_schedule(spec["schedule"])
        logger.info(
            "Model: %d-component mixture in d=%d, %d %s steps",
            mixture.components,
            mixture.dim,
            schedule.T,
            spec["sampler"],
        )
        return cls(
            mixture,
            schedule,
            MixtureScoreField(mixture, schedule),
            image_shape,
            spec["sampler"],
            spec["eta"],
        )


# ── Sampling ─────────────────────────────────────────────────────────────


def _step_noise(model, ctx, slot, first_group, groups, group, mask):
    """(T, groups * group, d) DDPM step noise, one stream per row group."""
    if first_group + groups > 2**GROUP_BITS:
        raise ValidationError({"budget": f"At most {2**GROUP_BITS} row groups per design."})
    T, d = model.schedule.T, model.d
    blocks = []
    for g in range(first_group, first_group + groups):
        stream = RngStream.for_purpose(
            ctx.seed, StreamPurpose.STEP_NOISE, (int(slot) << GROUP_BITS) + g
        )
        if group == 1:
            rows = gaussian_batch(stream, T, d).rows
        elif group == 2:
            base = gaussian_batch(stream, T, d)
            rows = (antithetic_expand(base) if mask is None else masked_expand(base, mask)).rows
        else:
            rows = k_antithetic_batch(stream, group, d, T).rows
        blocks.append(rows.reshape(T, group, d))
    return np.concatenate(blocks, axis=1)


def final_states(model, ctx, z, slot, group=1, mask=None, label=None):
    """
    y_0 for every noise row of z, sampled in chunks of whole row groups.

    Under DDPM the step noise of a row group follows the group's design:
    antithetic for pairs (partially negated when `mask` is given), K-antithetic
    for larger blocks. DDIM ignores groups.
    """
    z = np.asarray(z, dtype=np.float64)
    n = z.shape[0]
    if n % group:
        raise ValidationError({"group": f"{n} rows do not split into groups of {group}."})
    chunk = max(group, ctx.chunk_size // group * group)

    def run(start):
        rows = z[start : start + chunk]
        if model.sampler == "ddim":
            trajectory = ddim_sample(
                model.field, model.schedule, rows, record_eps=False, record_states=False
            )
        else:
            noise = _step_noise(model, ctx, slot, start // group, len(rows) // group, group, mask)
            trajectory = ddpm_sample(
                model.field,
                model.schedule,
                rows,
                noise,
                eta=model.eta,
                record_eps=False,
                record_states=False,
            )
        return trajectory.final

    finals = np.concatenate(ctx.map(run, range(0, n, chunk)))
    ctx.sampler_calls[label or slot.name] += n
    return finals


def images_of(model, finals):
    return [ImageTensor.from_sample(x, model.image_shape) for x in finals]


def statistics_of(model, finals, names):
    return evaluate_statistics(images_of(model, finals), names)


# ── Exports ──────────────────────────────────────────────────────────────


def export_batch(ctx, out, name, batch):
    if ctx.export_noise:
        out.register_files(save_batch(batch, out.path(f"noise/{name}")))


def export_point_set(ctx, out, name, sobol_set):
    if ctx.export_noise:
        out.register_files(save_sobol_set(sobol_set, out.path(f"noise/{name}")))


def export_trajectories(ctx, out, name, trajectories):
    """One batched file; states always, eps outputs only when the run records them."""
    if ctx.export_noise:
        path = out.path(f"trajectories/{name}")
        trajectory = Trajectory.stack(trajectories)
        out.register_files(save_trajectory(trajectory, path, record_eps=ctx.record_eps))


def export_images(ctx, out, name, images):
    if ctx.export_noise:
        out.register_files(
            save_image_csv(img, out.path(f"images/{name}_{i}.csv")) for i, img in enumerate(images)
        )


def write_statistics(out, relative, names, values):
    """Per-image statistics, one row per sampler output in draw order."""
    path = write_statistics_csv(out.path(relative), range(len(values)), names, values)
    return out.register_files([path])[0]


# ── correlation ──────────────────────────────────────────────────────────


def _protocol_finals(protocol, model, ctx, out, design):
    P, d = design["pairs"], model.d
    if protocol == "PN":
        batch = antithetic_expand(gaussian_batch(ctx.stream(StreamPurpose.PN), P, d))
        export_batch(ctx, out, "pn", batch)
        finals = final_states(model, ctx, batch.rows, StreamPurpose.PN, group=2, label="PN")
        return finals[0::2], finals[1::2]
    if protocol == "RR":
        left = gaussian_batch(ctx.stream(StreamPurpose.RR_LEFT), P, d)
        right = gaussian_batch(ctx.stream(StreamPurpose.RR_RIGHT), P, d)
        export_batch(ctx, out, "rr_left", left)
        export_batch(ctx, out, "rr_right", right)
        return (
            final_states(model, ctx, left.rows, StreamPurpose.RR_LEFT, label="RR"),
            final_states(model, ctx, right.rows, StreamPurpose.RR_RIGHT, label="RR"),
        )
    if design["mask"] == "upper_half":
        mask = upper_half_mask(model.image_shape)
    else:
        mask = first_half_mask(d)
    batch = masked_expand(gaussian_batch(ctx.stream(StreamPurpose.MASKED), P, d), mask)
    export_batch(ctx, out, "masked", batch)
    finals = final_states(
        model, ctx, batch.rows, StreamPurpose.MASKED, group=2, mask=mask, label="MASKED"
    )
    return finals[0::2], finals[1::2]


def _describe(values):
    values = np.asarray(values, dtype=np.float64)
    return {
        "mean": float(values.mean()),
        "sd": float(values.std(ddof=1)),
        "se": float(values.std(ddof=1) / math.sqrt(values.size)),
        "min": float(values.min()),
        "max": float(values.max()),
    }


def run_correlation(config, ctx, out):
    """Standard and centralized Pearson correlations of PN, RR and masked pairs."""
    model = DiffusionModel.from_config(config, ctx)
    design = config["design"]
    table, histogram, per_pair = [], [], []
    centralized = {}
    ssim_means = {}

    for protocol in design["protocols"]:
        first, second = _protocol_finals(protocol, model, ctx, out, design)
        images = list(zip(images_of(model, first), images_of(model, second)))
        export_images(ctx, out, f"{protocol.lower()}_pair0", images[0])
        series = {
            "standard": [pearson_standard(a.flat(), b.flat()) for a, b in images],
            "centralized": pearson_centralized([(a.flat(), b.flat()) for a, b in images]),
        }
        similarity = [ssim(a, b) for a, b in images]
        centralized[protocol] = series["centralized"]
        ssim_means[protocol] = float(np.mean(similarity))

        for kind, values in series.items():
            row = {"protocol": protocol, "correlation": kind, "pairs": len(values)}
            table.append({**row, **_describe(values)})
            counts, edges = np.histogram(values, bins=HISTOGRAM_BINS, range=(-1.0, 1.0))
            histogram.extend(
                {
                    "protocol": protocol,
                    "correlation": kind,
                    "bin_lo": lo,
                    "bin_hi": hi,
                    "count": count,
                }
                for lo, hi, count in zip(edges[:-1], edges[1:], counts)
            )
        per_pair.extend(
            {"protocol": protocol, "pair": i, "standard": s, "centralized": c, "ssim": q}
            for i, (s, c, q) in enumerate(
                zip(series["standard"], series["centralized"], similarity)
            )
        )
        logger.info(
            "%s: centralized mean %.6f over %d pairs",
            protocol,
            np.mean(series["centralized"]),
            len(images),
        )

    out.write_csv(
        "tables/correlation.csv",
        ["protocol", "correlation", "pairs", "mean", "sd", "se", "min", "max"],
        table,
    )
    out.write_csv(
        "plotdata/correlation_histogram.csv",
        ["protocol", "correlation", "bin_lo", "bin_hi", "count"],
        histogram,
    )
    out.write_csv(
        "plotdata/correlation_pairs.csv",
        ["protocol", "pair", "standard", "centralized", "ssim"],
        per_pair,
    )

    summary = {"ssim_mean": ssim_means}
    if "PN" in centralized and "RR" in centralized:
        summary["pn_vs_rr_pvalue"] = correlation_difference_pvalue(
            centralized["PN"], centralized["RR"]
        )
        summary["pn_vs_rr_wasserstein"] = wasserstein1(centralized["PN"], centralized["RR"])
    return summary


# ── uq / qmc_tradeoff ────────────────────────────────────────────────────


def method_slug(method):
    """File-name form of a method label: "AMC(k=8)" -> "amc_k8", "RQMC 4x64" -> "rqmc_4x64"."""
    return re.sub(r"[^a-z0-9]+", "_", method.lower().replace("=", "")).strip("_")


def _rqmc_reports(model, ctx, out, R, n, randomization, names, alpha, label):
    """(reports, per-image values) of R randomized n-point sets."""
    point_sets = rqmc_point_sets(model.d, n, R, ctx.seed, randomization)
    for r, points in enumerate(point_sets):
        ctx.record_stream(f"rqmc:{r}", points.stream_id)
        export_point_set(ctx, out, f"rqmc_{R}x{n}_r{r:03d}", points)
    rows = np.concatenate([to_gaussian(points).rows for points in point_sets])
    values = statistics_of(
        model, final_states(model, ctx, rows, StreamPurpose.RQMC, label=label), names
    )
    means = values.reshape(R, n, len(names)).mean(axis=1)
    reports = [
        rqmc_estimate(means[:, j], alpha, points_per_replicate=n) for j in range(len(names))
    ]
    return reports, values


def _method_reports(method, model, ctx, out, config):
    """(one EstimatorReport per statistic, per-image values) for `method` at the budget."""
    design, names, alpha = config["design"], config["statistics"], config["alpha"]
    N, d = design["budget"], model.d
    if method == "MC":
        batch = gaussian_batch(ctx.stream(StreamPurpose.MC), N, d)
        export_batch(ctx, out, "mc", batch)
        values = statistics_of(
            model, final_states(model, ctx, batch.rows, StreamPurpose.MC, label=method), names
        )
        return [mc_estimate(values[:, j], alpha) for j in range(len(names))], values
    if method == "RQMC":
        return _rqmc_reports(
            model,
            ctx,
            out,
            design["R"],
            design["n"],
            Randomization(design["randomization"]),
            names,
            alpha,
            method,
        )

    K = method_k(method)
    if K == 2:
        slot = StreamPurpose.AMC
        batch = antithetic_expand(gaussian_batch(ctx.stream(slot), N // 2, d))
    else:
        slot = StreamPurpose.K_ANTITHETIC
        batch = k_antithetic_batch(ctx.stream(slot, K), K, d, N // K)
    export_batch(ctx, out, method_slug(method), batch)
    values = statistics_of(
        model, final_states(model, ctx, batch.rows, slot, group=K, label=method), names
    )
    blocks = values.reshape(N // K, K, len(names))
    reports = [k_antithetic_estimate(blocks[:, :, j], alpha) for j in range(len(names))]
    return reports, values


def _efficiency(baseline, report):
    return None if baseline is None else relative_efficiency(baseline, report)


def run_uq(config, ctx, out):
    """Confidence intervals per statistic and method at one shared budget."""
    model = DiffusionModel.from_config(config, ctx)
    design, names = config["design"], config["statistics"]
    reports = {}
    for method in design["methods"]:
        reports[method], values = _method_reports(method, model, ctx, out, config)
        write_statistics(out, f"plotdata/statistics/{method_slug(method)}.csv", names, values)

    calls = {method: ctx.sampler_calls[method] for method in design["methods"]}
    if len(set(calls.values())) != 1:
        raise ValidationError({"budget": f"Methods used unequal sampler calls: {calls}."})
    logger.info("Sampler calls per method: %s", calls)

    rows, payload, efficiencies = [], {}, {}
    for j, name in enumerate(names):
        baseline = reports["MC"][j] if "MC" in reports else None
        payload[name] = {}
        for method in design["methods"]:
            report = reports[method][j]
            efficiency = _efficiency(baseline, report)
            efficiencies[f"{name}/{method}"] = efficiency
            payload[name][method] = {
                **EstimatorReportSerializer(report).data,
                "efficiency_vs_mc": efficiency,
            }
            rows.append(
                {
                    "statistic": name,
                    "method": method,
                    "estimate": report.estimate,
                    "ci_lo": report.ci_lo,
                    "ci_hi": report.ci_hi,
                    "ci_width": report.width,
                    "efficiency": efficiency,
                    "rho_hat": report.rho_hat,
                    "budget": report.budget,
                }
            )

    out.write_csv(
        "tables/uq.csv",
        [
            "statistic",
            "method",
            "estimate",
            "ci_lo",
            "ci_hi",
            "ci_width",
            "efficiency",
            "rho_hat",
            "budget",
        ],
        rows,
    )
    out.write_json("reports/uq.json", payload)
    return {"efficiency_vs_mc": efficiencies}


def run_qmc_tradeoff(config, ctx, out):
    """RQMC interval widths over (R, n) splits of one budget."""
    model = DiffusionModel.from_config(config, ctx)
    design, names, alpha = config["design"], config["statistics"], config["alpha"]
    randomization = Randomization(design["randomization"])
    baseline = None
    if "MC" in design["methods"]:
        baseline, _ = _method_reports("MC", model, ctx, out, config)

    rows, widths = [], {}
    for split in design["splits"]:
        R, n = split["R"], split["n"]
        label = f"{R}x{n}"
        reports, _ = _rqmc_reports(
            model, ctx, out, R, n, randomization, names, alpha, f"RQMC {label}"
        )
        for j, name in enumerate(names):
            report = reports[j]
            widths[f"{name}/{label}"] = report.width
            rows.append(
                {
                    "split": label,
                    "R": R,
                    "n": n,
                    "statistic": name,
                    "estimate": report.estimate,
                    "ci_lo": report.ci_lo,
                    "ci_hi": report.ci_hi,
                    "ci_width": report.width,
                    "efficiency": _efficiency(baseline[j] if baseline else None, report),
                }
            )
    out.write_csv(
        "tables/qmc_tradeoff.csv",
        ["split", "R", "n", "statistic", "estimate", "ci_lo", "ci_hi", "ci_width", "efficiency"],
        rows,
    )
    return {"ci_width": widths}


# ── symmetry ─────────────────────────────────────────────────────────────


def default_probe_steps(T):
    return sorted({t for t in (T, 3 * T // 4, T // 2, T // 4, 1) if t >= 1})


def _pn_trajectory_pairs(model, ctx, pairs):
    z = gaussian_batch(ctx.stream(StreamPurpose.PN, 1), pairs, model.d).rows
    chunk = max(1, ctx.chunk_size)

    def run(start):
        rows = z[start : start + chunk]
        plus = ddim_sample(model.field, model.schedule, rows)
        minus = ddim_sample(model.field, model.schedule, -rows)
        return list(zip(plus.unbatch(), minus.unbatch()))

    result = [pair for part in ctx.map(run, range(0, pairs, chunk)) for pair in part]
    ctx.sampler_calls["PN trajectories"] += 2 * pairs
    return result


def _temporal_rows(series):
    rows = []
    eps_count = 0 if series.eps_steps is None else series.eps_steps.size
    for i, step in enumerate(series.steps):
        row = {"step": step, "state_mean": series.state_mean[i], "state_std": series.state_std[i]}
        if i < eps_count:
            row.update(eps_mean=series.eps_mean[i], eps_std=series.eps_std[i])
        rows.append(row)
    return rows


def run_symmetry(config, ctx, out):
    """Score slices, antisymmetry scores, PN temporal correlation and symmetry centers."""
    model = DiffusionModel.from_config(config, ctx)
    spec = config["symmetry"]
    steps = spec["steps"] or default_probe_steps(model.schedule.T)
    for t in steps:
        model.schedule.check_step(t)
    anchors = draw_anchors(ctx.stream(StreamPurpose.ANCHORS), spec["anchors"], model.d)

    cells = [(t, coord) for t in steps for coord in spec["coords"]]
    curves_per_cell = ctx.map(
        lambda cell: slice_curves(
            model.field, cell[0], cell[1], anchors, spec["grid_size"], spec["average"]
        ),
        cells,
    )
    scores = []
    for (t, coord), curves in zip(cells, curves_per_cell):
        for index, curve in enumerate(curves):
            anchor = "mean" if spec["average"] else str(index)
            out.write_csv(
                f"plotdata/slices/t{t:04d}_coord{coord}_anchor{anchor}.csv",
                ["c", "value"],
                ({"c": c, "value": v} for c, v in zip(curve.grid, curve.values)),
            )
            scores.append(
                {
                    "t": t,
                    "coord": coord,
                    "anchor": anchor,
                    "antisymmetry": antisymmetry_score(curve),
                    "variance_elimination": variance_elimination(curve),
                }
            )
    out.write_csv(
        "tables/antisymmetry.csv",
        ["t", "coord", "anchor", "antisymmetry", "variance_elimination"],
        scores,
    )

    pairs = _pn_trajectory_pairs(model, ctx, spec["pairs"])
    export_trajectories(ctx, out, "pn_plus", [p[0] for p in pairs])
    export_trajectories(ctx, out, "pn_minus", [p[1] for p in pairs])
    for centralized, name in ((False, "standard"), (True, "centralized")):
        series = temporal_correlation(pairs, centralized=centralized)
        out.write_csv(
            f"plotdata/temporal_{name}.csv",
            ["step", "state_mean", "state_std", "eps_mean", "eps_std"],
            _temporal_rows(series),
        )

    centers = ctx.map(
        lambda item: symmetry_center(
            model.field,
            item[1][0],
            item[1][1],
            spec["probe_count"],
            ctx.stream(StreamPurpose.PROBES, item[0]),
            spec["parameterization"],
        ),
        list(enumerate(cells)),
    )
    out.write_csv(
        "tables/symmetry_center.csv",
        ["t", "ou_time", "coord", "center"],
        (
            {"t": t, "ou_time": model.schedule.ou_time(t), "coord": coord, "center": center}
            for (t, coord), center in zip(cells, centers)
        ),
    )
    return {
        "min_antisymmetry": min(row["antisymmetry"] for row in scores),
        "max_abs_center": max(abs(c) for c in centers),
    }


# ── ou ───────────────────────────────────────────────────────────────────


def reflection(kind, d):
    if kind == "central":
        return -np.eye(d)
    if d < 2:
        raise ValidationError({"reflection": "A coordinate swap needs d >= 2."})
    g = np.eye(d)
    g[[0, 1]] = g[[1, 0]]
    return g


def _density_ratio_rows(expansion, t_grid):
    times = sorted({0.0, *t_grid})
    norms = [density_ratio_norm(expansion, t) for t in times]
    rows = [{"t": times[0], "norm": norms[0]}]
    for i in range(1, len(times)):
        row = {"t": times[i], "norm": norms[i], "step_bound": math.exp(-(times[i] - times[i - 1]))}
        if norms[i - 1] > 0.0:
            row["step_ratio"] = norms[i] / norms[i - 1]
        rows.append(row)
    return rows


def run_ou(config, ctx, out):
    """Fisher decay, Hermite spectral checks, symmetry preservation and the one-step bound."""
    spec = config["ou"]
    mixture = OUMixture(build_mixture(spec["mixture"], 1, ctx.stream(StreamPurpose.PRESET)))
    t_grid = spec["t_grid"]

    decay = fisher_decay(mixture, t_grid)
    out.write_csv(
        "tables/fisher_decay.csv",
        ["t", "fisher_information", "bound"],
        (
            {"t": t, "fisher_information": fi, "bound": bound}
            for t, fi, bound in zip(decay.t_grid, decay.fisher_information, decay.bound)
        ),
    )
    if not decay.nonincreasing or not decay.within_bound():
        logger.warning("Fisher information is not monotonically below its bound")

    expansion = mixture.density_ratio_expansion(spec["max_degree"], spec["quadrature_order"])
    out.write_json(
        "reports/expansion.json",
        {
            "max_degree": spec["max_degree"],
            "quadrature_order": spec["quadrature_order"],
            "coefficients": expansion.as_json(),
        },
    )
    out.write_csv(
        "tables/density_ratio.csv",
        ["t", "norm", "step_ratio", "step_bound"],
        _density_ratio_rows(expansion, t_grid),
    )

    semigroup_rows = []
    for t in t_grid:
        spectral = semigroup_apply(expansion, t)
        convolved = semigroup_by_quadrature(expansion, t)
        error = max(
            abs(spectral.coefficient(alpha) - convolved.coefficient(alpha))
            for alpha in expansion.coefficients
        )
        semigroup_rows.append({"t": t, "max_coefficient_error": error})
    out.write_csv("tables/semigroup_check.csv", ["t", "max_coefficient_error"], semigroup_rows)

    symmetric = OUMixture(
        build_mixture(
            spec["symmetry_mixture"],
            spec["symmetry_mixture"].get("d", 2),
            ctx.stream(StreamPurpose.PRESET, 1),
        )
    )
    d = symmetric.params.dim
    probes = gaussian_batch(ctx.stream(StreamPurpose.PROBES), spec["symmetry_probes"], d).rows
    preservation = symmetry_preservation_check(
        symmetric,
        reflection(spec["reflection"], d),
        spec["symmetry_times"],
        probes,
        strict=spec["strict"],
    )
    out.write_csv(
        "tables/symmetry_preservation.csv",
        ["t", "density_residual", "score_residual"],
        (
            {"t": t, "density_residual": p, "score_residual": s}
            for t, p, s in zip(
                preservation.t_grid, preservation.density_residuals, preservation.score_residuals
            )
        ),
    )

    bounds = ctx.map(
        lambda item: one_step_correlation_bound(
            mixture.params,
            item[1],
            spec["bound_delta"],
            spec["bound_samples"],
            ctx.stream(StreamPurpose.SYNTHETIC, item[0]),
        ),
        list(enumerate(spec["bound_times"])),
    )
    out.write_csv(
        "tables/one_step_bound.csv",
        ["t", "delta", "coord", "a", "c", "fisher_information_0", "measured", "bound", "ratio"],
        (
            {
                "t": report.t,
                "delta": report.delta,
                "coord": i,
                "a": report.a,
                "c": report.c,
                "fisher_information_0": report.fisher_information_0,
                "measured": report.measured[i],
                "bound": report.bound[i],
                "ratio": report.ratio[i],
            }
            for report in bounds
            for i in range(report.measured.size)
        ),
    )
    return {
        "fisher_nonincreasing": decay.nonincreasing,
        "fisher_within_bound": decay.within_bound(),
        "max_density_residual": preservation.max_density_residual,
        "max_score_residual": preservation.max_score_residual,
        "one_step_bound_holds": all(report.holds() for report in bounds),
    }


# ── fkg ──────────────────────────────────────────────────────────────────


def _chain_row(index, spec, ctx):
    chain = build_random_chain(
        ctx.stream(StreamPurpose.CHAINS, index), spec["depth"], spec["weight_scale"]
    )
    estimate = antithetic_corr(
        chain, spec["samples"], ctx.stream(StreamPurpose.CHAIN_SAMPLES, index)
    )
    violation = (
        estimate.std_error is not None
        and estimate.rho_hat > VIOLATION_SE * estimate.std_error
    )
    return {
        "chain": index,
        "direction": int(chain.direction),
        "rho_hat": estimate.rho_hat,
        "std_error": estimate.std_error,
        "violation": violation,
    }


def _map_row(index, spec, ctx):
    F = AdditiveMonotoneMap.random(
        ctx.stream(StreamPurpose.MAPS, index),
        spec["map_dim"],
        depth=spec["depth"],
        weight_scale=spec["weight_scale"],
    )
    weights = np.full(F.mixing.shape[0], 1.0 / F.mixing.shape[0])
    samples = ctx.stream(StreamPurpose.MAP_SAMPLES, index)
    direct = partial_monotone_corr(F, weights, spec["samples"], samples)
    normalized = partial_monotone_corr(F, weights, spec["samples"], samples, sign_normalize=True)
    delta = None
    if direct.defined and normalized.defined:
        delta = abs(direct.rho_hat - normalized.rho_hat)
    return {
        "map": index,
        "signs": "".join("+" if s > 0 else "-" for s in F.signs),
        "rho_hat": direct.rho_hat,
        "std_error": direct.std_error,
        "normalized_rho_hat": normalized.rho_hat,
        "delta": delta,
    }


STEP_FIELDS = [
    "t",
    "a",
    "c",
    "kappa",
    "condition_holds",
    "min_mixed_partial",
    "mtp2_violations",
    "min_jacobian_entry",
    "min_analytic_jacobian_entry",
]


def _step_row(report):
    return {
        "t": report.t,
        "a": report.a,
        "c": report.c,
        "kappa": report.kappa,
        "condition_holds": report.condition_holds,
        "min_mixed_partial": report.min_mixed_partial,
        "mtp2_violations": report.mtp2_violations,
        "min_jacobian_entry": report.min_jacobian_entry,
        "min_analytic_jacobian_entry": report.min_analytic_jacobian_entry,
    }


def run_fkg(config, ctx, out):
    """Antithetic correlation of monotone maps and monotonicity of exact-score DDIM."""
    spec = config["fkg"]
    chains = ctx.map(lambda i: _chain_row(i, spec, ctx), range(spec["chains"]))
    out.write_csv(
        "tables/fkg_chains.csv",
        ["chain", "direction", "rho_hat", "std_error", "violation"],
        chains,
    )
    maps = ctx.map(lambda i: _map_row(i, spec, ctx), range(spec["maps"]))
    out.write_csv(
        "tables/fkg_partial_maps.csv",
        ["map", "signs", "rho_hat", "std_error", "normalized_rho_hat", "delta"],
        maps,
    )

    mixture = build_mixture(spec["mixture"], spec["dim"], ctx.stream(StreamPurpose.PRESET))
    base = build_schedule(config["model"]["schedule"], respace=False)
    schedule = build_schedule(config["model"]["schedule"])
    steps = spec["steps"] or list(range(schedule.T, 0, -1))
    for t in steps:
        schedule.check_step(t)
    step_reports = ctx.map(
        lambda t: ddim_monotonicity_check(
            mixture,
            schedule,
            t,
            marginal_probes(
                mixture, schedule.alpha_bar[t], spec["probes"], ctx.stream(StreamPurpose.PROBES, t)
            ),
        ),
        steps,
    )
    out.write_csv(
        "tables/ddim_monotonicity.csv",
        STEP_FIELDS + ["monotone"],
        ({**_step_row(r), "monotone": r.monotone} for r in step_reports),
    )

    probes = marginal_probes(
        mixture, schedule.alpha_bar[schedule.T], spec["probes"], ctx.stream(StreamPurpose.PROBES)
    )
    chain = ddim_chain_monotonicity_check(mixture, schedule, probes)
    out.write_csv("tables/ddim_chain.csv", STEP_FIELDS, (_step_row(r) for r in chain.steps))

    sweep = step_count_sweep(mixture, base, spec["step_counts"], probes)
    out.write_csv(
        "tables/step_count_sweep.csv",
        ["steps", "all_conditions_hold", "mtp2_violations", "min_jacobian_entry", "monotone"],
        (
            {
                "steps": count,
                "all_conditions_hold": report.all_conditions_hold,
                "mtp2_violations": report.mtp2_violations,
                "min_jacobian_entry": report.min_jacobian_entry,
                "monotone": report.monotone,
            }
            for count, report in zip(sweep.step_counts, sweep.reports)
        ),
    )
    if chain.mtp2_violations:
        logger.warning("%d MTP2 violations along the DDIM chain", chain.mtp2_violations)

    defined_deltas = [row["delta"] for row in maps if row["delta"] is not None]
    return {
        "chain_violations": sum(row["violation"] for row in chains),
        "undefined_chains": sum(row["rho_hat"] is None for row in chains),
        "max_sign_normalization_delta": max(defined_deltas, default=0.0),
        "steps_monotone": all(r.monotone for r in step_reports),
        "chain_min_jacobian_entry": chain.min_jacobian_entry,
        "chain_monotone": chain.monotone,
        "step_count_threshold": sweep.threshold,
    }


RUNNERS = {
    "correlation": run_correlation,
    "uq": run_uq,
    "qmc_tradeoff": run_qmc_tradeoff,
    "symmetry": run_symmetry,
    "ou": run_ou,
    "fkg": run_fkg,
}


def execute(config, ctx, out):
    """Run the experiment named by config["kind"] and return its summary."""
    started = time.perf_counter()
    summary = RUNNERS[config["kind"]](config, ctx, out)
    logger.info(
        "%s run finished in %.2fs with %d threads; sampler calls %s",
        config["kind"],
        time.perf_counter() - started,
        ctx.threads,
        dict(ctx.sampler_calls),
    )
    return summary
