import csv
import json
import math
from io import StringIO
from pathlib import Path
from unittest.mock import Mock, patch

import numpy as np
import pytest
from django.core.management import call_command
from django.core.management.base import CommandError

from analysis.image_stats import load_image_csv
from antithetic_lab.exceptions import UndefinedStatistic
from experiments.models import ExperimentRun
from sampling.noise_design import Design
from sampling.qmc import Randomization
from sampling.storage import load_batch, load_sobol_set, load_trajectory

LINEAR_MODEL = {
    "image_shape": [1, 8, 8],
    "mixture": {"preset": "gaussian"},
    "schedule": {"T": 100, "steps": 10},
}

# Pixels never reach the clip, so block means of any size cancel exactly.
NARROW_MODEL = {**LINEAR_MODEL, "mixture": {"preset": "gaussian", "std": 0.05}}


def _config(kind, **sections):
    return {"schema_version": 1, "kind": kind, "seed": 20240917, **sections}


def _run(kind, config_path, *args):
    out = StringIO()
    call_command(kind, "--config", config_path, *args, stdout=out)
    return out.getvalue()


def _rows(path):
    with Path(path).open(newline="") as handle:
        return list(csv.DictReader(handle))


def _manifest(root):
    return json.loads((Path(root) / "manifest.json").read_text())


# ── correlation ──────────────────────────────────────────────────────────


@pytest.mark.django_db
class TestCorrelationCommand:
    def test_pn_pairs_are_perfectly_anticorrelated(self, write_config, tmp_path):
        config = write_config(
            _config(
                "correlation",
                model=LINEAR_MODEL,
                statistics=["mean_pixel"],
                design={"pairs": 1000, "protocols": ["PN", "RR"]},
            )
        )
        output = _run("correlation", config, "--out", str(tmp_path / "run"))
        assert "wrote" in output

        rows = {
            (row["protocol"], row["correlation"]): row
            for row in _rows(tmp_path / "run" / "tables" / "correlation.csv")
        }
        assert float(rows[("PN", "centralized")]["mean"]) == pytest.approx(-1.0, abs=1e-6)
        assert float(rows[("PN", "standard")]["mean"]) == pytest.approx(-1.0, abs=1e-6)
        assert abs(float(rows[("RR", "centralized")]["mean"])) <= 3.0 / math.sqrt(1000)

        manifest = _manifest(tmp_path / "run")
        assert manifest["sampler_calls"] == {"PN": 2000, "RR": 2000}
        assert "pn_vs_rr_pvalue" in manifest["summary"]
        assert "tables/correlation.csv" in manifest["artifacts"]

    def test_masked_protocol(self, write_config, tmp_path):
        config = write_config(
            _config(
                "correlation",
                model={**LINEAR_MODEL, "sampler": "ddpm"},
                statistics=["mean_pixel"],
                design={"pairs": 50, "protocols": ["MASKED"], "mask": "upper_half"},
            )
        )
        _run("correlation", config, "--out", str(tmp_path / "run"))
        rows = _rows(tmp_path / "run" / "tables" / "correlation.csv")
        assert {row["protocol"] for row in rows} == {"MASKED"}
        assert _manifest(tmp_path / "run")["sampler_calls"] == {"MASKED": 100}

    def test_output_is_independent_of_directory_and_threads(self, write_config, tmp_path):
        config = write_config(
            _config(
                "correlation",
                model={**LINEAR_MODEL, "sampler": "ddpm"},
                statistics=["mean_pixel"],
                design={"pairs": 300, "protocols": ["PN", "RR", "MASKED"]},
            )
        )
        _run("correlation", config, "--out", str(tmp_path / "a"), "--threads", "1")
        _run("correlation", config, "--out", str(tmp_path / "b"), "--threads", "3")
        first = (tmp_path / "a" / "manifest.json").read_bytes()
        second = (tmp_path / "b" / "manifest.json").read_bytes()
        assert first == second

    def test_seed_override_changes_output(self, write_config, tmp_path):
        config = write_config(
            _config(
                "correlation",
                model=LINEAR_MODEL,
                statistics=["mean_pixel"],
                design={"pairs": 20, "protocols": ["RR"]},
            )
        )
        _run("correlation", config, "--out", str(tmp_path / "a"))
        _run("correlation", config, "--out", str(tmp_path / "b"), "--seed", "5")
        assert _manifest(tmp_path / "b")["seed"] == 5
        assert _manifest(tmp_path / "a")["config_hash"] != _manifest(tmp_path / "b")["config_hash"]

    def test_default_output_directory(self, write_config, settings):
        config = write_config(
            _config(
                "correlation",
                model=LINEAR_MODEL,
                statistics=["mean_pixel"],
                design={"pairs": 10, "protocols": ["PN"]},
            )
        )
        _run("correlation", config)
        run = ExperimentRun.objects.get()
        assert Path(run.output_dir).parent == settings.LAB_OUTPUT_DIR
        assert Path(run.output_dir).name == f"correlation-{run.config_hash[:12]}"


# ── uq / qmc_tradeoff ────────────────────────────────────────────────────


@pytest.mark.django_db
class TestUQCommand:
    def test_linear_model_makes_antithetic_designs_exact(self, write_config, tmp_path):
        config = write_config(
            _config(
                "uq",
                model=NARROW_MODEL,
                statistics=["mean_pixel"],
                design={
                    "budget": 256,
                    "methods": ["MC", "AMC(k=2)", "AMC(k=8)", "RQMC"],
                    "R": 8,
                    "n": 32,
                },
            )
        )
        _run("uq", config, "--out", str(tmp_path / "run"))

        rows = {row["method"]: row for row in _rows(tmp_path / "run" / "tables" / "uq.csv")}
        assert rows["MC"]["efficiency"] == "1.0"
        assert rows["AMC(k=2)"]["efficiency"] == "inf"
        assert rows["AMC(k=8)"]["efficiency"] == "inf"
        assert math.isfinite(float(rows["RQMC"]["ci_width"]))
        assert rows["MC"]["rho_hat"] == ""
        assert float(rows["AMC(k=2)"]["rho_hat"]) == pytest.approx(-1.0)
        assert all(row["budget"] == "256" for row in rows.values())

        manifest = _manifest(tmp_path / "run")
        assert set(manifest["sampler_calls"].values()) == {256}
        assert manifest["summary"]["efficiency_vs_mc"]["mean_pixel/AMC(k=2)"] == "inf"

        report = json.loads((tmp_path / "run" / "reports" / "uq.json").read_text())
        assert report["mean_pixel"]["RQMC"]["budget"] == 256

    def test_per_image_statistics_written(self, write_config, tmp_path):
        config = write_config(
            _config(
                "uq",
                model=NARROW_MODEL,
                statistics=["mean_pixel", "contrast"],
                design={"budget": 64, "methods": ["MC", "AMC(k=2)"]},
            )
        )
        _run("uq", config, "--out", str(tmp_path / "run"))
        root = tmp_path / "run"
        assert {"plotdata/statistics/mc.csv", "plotdata/statistics/amc_k2.csv"} <= set(
            _manifest(root)["artifacts"]
        )
        rows = _rows(root / "plotdata" / "statistics" / "amc_k2.csv")
        assert len(rows) == 64
        assert list(rows[0]) == ["image_id", "mean_pixel", "contrast"]
        pair_sum = float(rows[0]["mean_pixel"]) + float(rows[1]["mean_pixel"])
        assert pair_sum == pytest.approx(1.0, abs=1e-12)

    def test_budget_mismatch_exits_with_config_error(self, write_config):
        config = write_config(_config("uq", design={"budget": 3200, "R": 20, "n": 128}))
        with pytest.raises(CommandError) as exc:
            _run("uq", config)
        assert exc.value.returncode == 2
        assert "budget" in str(exc.value)
        assert not ExperimentRun.objects.exists()


@pytest.mark.django_db
class TestQMCTradeoffCommand:
    def test_every_split_reported(self, write_config, tmp_path):
        splits = [{"R": 4, "n": 64}, {"R": 8, "n": 32}, {"R": 16, "n": 16}]
        config = write_config(
            _config(
                "qmc_tradeoff",
                model={**LINEAR_MODEL, "mixture": {"preset": "symmetric"}},
                statistics=["mean_pixel", "contrast"],
                design={"budget": 256, "methods": ["MC", "RQMC"], "splits": splits},
            )
        )
        _run("qmc_tradeoff", config, "--out", str(tmp_path / "run"))
        rows = _rows(tmp_path / "run" / "tables" / "qmc_tradeoff.csv")
        assert {row["split"] for row in rows} == {"4x64", "8x32", "16x16"}
        assert len(rows) == 6
        assert all(math.isfinite(float(row["ci_width"])) for row in rows)
        assert all(row["efficiency"] for row in rows)


# ── symmetry / ou / fkg ──────────────────────────────────────────────────


@pytest.mark.django_db
class TestSymmetryCommand:
    def test_linear_field_is_antisymmetric(self, write_config, tmp_path):
        config = write_config(
            _config(
                "symmetry",
                model={**LINEAR_MODEL, "image_shape": [1, 4, 4]},
                statistics=["mean_pixel"],
                symmetry={
                    "coords": [0, 5],
                    "grid_size": 21,
                    "anchors": 2,
                    "pairs": 4,
                    "probe_count": 16,
                },
            )
        )
        _run("symmetry", config, "--out", str(tmp_path / "run"))
        root = tmp_path / "run"
        summary = _manifest(root)["summary"]
        assert summary["min_antisymmetry"] >= 1.0 - 1e-8
        assert summary["max_abs_center"] <= 1e-12
        assert (root / "plotdata" / "slices" / "t0010_coord5_anchor1.csv").exists()
        temporal = _rows(root / "plotdata" / "temporal_centralized.csv")
        assert len(temporal) == 11
        assert all(float(row["state_mean"]) == pytest.approx(-1.0) for row in temporal)


@pytest.mark.django_db
class TestOUCommand:
    def test_shifted_gaussian(self, write_config, tmp_path):
        config = write_config(
            _config(
                "ou",
                ou={
                    "mixture": {"preset": "gaussian", "shift": 2.0},
                    "t_grid": [0.5, 1.0, 1.5],
                    "max_degree": 6,
                    "quadrature_order": 40,
                    "symmetry_times": [0.5, 1.0],
                    "symmetry_probes": 16,
                    "bound_times": [0.5],
                    "bound_samples": 2000,
                },
            )
        )
        _run("ou", config, "--out", str(tmp_path / "run"))
        root = tmp_path / "run"
        for row in _rows(root / "tables" / "fisher_decay.csv"):
            expected = 4.0 * math.exp(-2.0 * float(row["t"]))
            assert float(row["fisher_information"]) == pytest.approx(expected, abs=1e-6)
        summary = _manifest(root)["summary"]
        assert summary["fisher_nonincreasing"] is True
        assert summary["max_score_residual"] < 1e-10
        assert summary["one_step_bound_holds"] is True
        expansion = json.loads((root / "reports" / "expansion.json").read_text())
        assert expansion["coefficients"]["2"] == pytest.approx(2.0, abs=1e-6)


@pytest.mark.django_db
class TestFKGCommand:
    def test_monotone_maps_and_ddim(self, write_config, tmp_path):
        config = write_config(
            _config(
                "fkg",
                model={"schedule": {"T": 100, "steps": 10}},
                fkg={
                    "chains": 10,
                    "depth": 3,
                    "samples": 2000,
                    "maps": 5,
                    "map_dim": 3,
                    "probes": 32,
                    "steps": [1, 5, 10],
                    "step_counts": [1, 2, 5],
                },
            )
        )
        _run("fkg", config, "--out", str(tmp_path / "run"))
        summary = _manifest(tmp_path / "run")["summary"]
        assert summary["chain_violations"] == 0
        assert summary["max_sign_normalization_delta"] == 0.0
        assert summary["steps_monotone"] is True
        assert summary["chain_monotone"] is True
        assert summary["step_count_threshold"] == 1
        assert len(_rows(tmp_path / "run" / "tables" / "fkg_chains.csv")) == 10


# ── Failures and ledger ──────────────────────────────────────────────────


@pytest.mark.django_db
class TestFailures:
    def test_missing_config_file(self, tmp_path):
        with pytest.raises(CommandError) as exc:
            _run("uq", str(tmp_path / "absent.json"))
        assert exc.value.returncode == 2

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(CommandError) as exc:
            _run("uq", str(path))
        assert exc.value.returncode == 2

    def test_unknown_key(self, write_config):
        config = write_config(_config("uq", sampler="ddim"))
        with pytest.raises(CommandError) as exc:
            _run("uq", config)
        assert exc.value.returncode == 2
        assert "sampler" in str(exc.value)

    def test_kind_mismatch(self, write_config):
        config = write_config(_config("uq"))
        with pytest.raises(CommandError) as exc:
            _run("correlation", config)
        assert exc.value.returncode == 2

    def test_kind_defaults_to_command(self, write_config, tmp_path):
        data = _config("correlation", model=LINEAR_MODEL, statistics=["mean_pixel"])
        del data["kind"]
        data["design"] = {"pairs": 10, "protocols": ["RR"]}
        _run("correlation", write_config(data), "--out", str(tmp_path / "run"))
        assert _manifest(tmp_path / "run")["kind"] == "correlation"

    def test_threads_must_be_positive(self, write_config):
        config = write_config(_config("uq"))
        with pytest.raises(CommandError) as exc:
            _run("uq", config, "--threads", "0")
        assert exc.value.returncode == 2

    def test_numerical_failure_exits_with_three(self, write_config, tmp_path):
        config = write_config(
            _config(
                "correlation",
                model=LINEAR_MODEL,
                statistics=["mean_pixel"],
                design={"pairs": 10, "protocols": ["PN"]},
            )
        )
        with patch(
            "experiments.runners.pearson_standard",
            side_effect=UndefinedStatistic("constant image"),
        ):
            with pytest.raises(CommandError) as exc:
                _run("correlation", config, "--out", str(tmp_path / "run"))
        assert exc.value.returncode == 3
        run = ExperimentRun.objects.get()
        assert run.status == "FAILED"
        assert run.exit_code == 3
        assert "constant image" in run.error

    def test_unexpected_error_marks_the_run_failed(self, write_config, tmp_path):
        config = write_config(
            _config(
                "correlation",
                model=LINEAR_MODEL,
                statistics=["mean_pixel"],
                design={"pairs": 10, "protocols": ["PN"]},
            )
        )
        failing = Mock(side_effect=RuntimeError("disk went away"))
        with patch.dict("experiments.runners.RUNNERS", {"correlation": failing}):
            with pytest.raises(RuntimeError):
                _run("correlation", config, "--out", str(tmp_path / "run"))
        run = ExperimentRun.objects.get()
        assert run.status == "FAILED"
        assert run.exit_code == 1
        assert "disk went away" in run.error
        assert run.finished_at is not None


@pytest.mark.django_db
class TestLedger:
    def test_successful_run_records_artifacts(self, write_config, tmp_path):
        config = write_config(
            _config(
                "correlation",
                model=LINEAR_MODEL,
                statistics=["mean_pixel"],
                design={"pairs": 10, "protocols": ["PN"]},
            )
        )
        output = _run("correlation", config, "--out", str(tmp_path / "run"))
        run = ExperimentRun.objects.get()
        assert run.status == "SUCCEEDED"
        assert run.exit_code == 0
        assert run.seed == "20240917"
        paths = set(run.artifacts.values_list("path", flat=True))
        assert paths == {
            "manifest.json",
            "tables/correlation.csv",
            "plotdata/correlation_histogram.csv",
            "plotdata/correlation_pairs.csv",
        }
        assert f"run #{run.id} wrote 3 artifacts" in output

    def test_repeated_runs_share_a_config_hash(self, write_config, tmp_path):
        config = write_config(
            _config(
                "correlation",
                model=LINEAR_MODEL,
                statistics=["mean_pixel"],
                design={"pairs": 10, "protocols": ["RR"]},
            )
        )
        _run("correlation", config, "--out", str(tmp_path / "a"))
        _run("correlation", config, "--out", str(tmp_path / "b"))
        hashes = set(ExperimentRun.objects.values_list("config_hash", flat=True))
        assert len(hashes) == 1
        assert ExperimentRun.objects.count() == 2


# ── exports ──────────────────────────────────────────────────────────────


@pytest.mark.django_db
class TestExports:
    def test_correlation_exports_noise_and_images(self, write_config, tmp_path):
        config = write_config(
            _config(
                "correlation",
                model=LINEAR_MODEL,
                statistics=["mean_pixel"],
                design={"pairs": 10, "protocols": ["PN", "RR"]},
            )
        )
        _run("correlation", config, "--out", str(tmp_path / "run"), "--export-noise")
        root = tmp_path / "run"
        manifest = _manifest(root)
        assert manifest["exports"] == {"noise": True, "record_eps": False}
        for name in ("pn", "rr_left", "rr_right"):
            assert f"noise/{name}.f64" in manifest["artifacts"]
            assert f"noise/{name}.json" in manifest["artifacts"]
        assert {"images/pn_pair0_0.csv", "images/pn_pair0_1.csv"} <= set(manifest["artifacts"])

        batch = load_batch(root / "noise" / "pn")
        assert batch.design is Design.ANTITHETIC_PAIR
        assert batch.rows.shape == (20, 64)
        np.testing.assert_array_equal(batch.rows[1::2], -batch.rows[0::2])
        first = load_image_csv(root / "images" / "pn_pair0_0.csv")
        second = load_image_csv(root / "images" / "pn_pair0_1.csv")
        np.testing.assert_allclose(first.values + second.values, 1.0, atol=1e-12)

    def test_uq_exports_every_design(self, write_config, tmp_path):
        config = write_config(
            _config(
                "uq",
                model=NARROW_MODEL,
                statistics=["mean_pixel"],
                design={"budget": 64, "methods": ["MC", "AMC(k=4)", "RQMC"], "R": 2, "n": 32},
            )
        )
        _run("uq", config, "--out", str(tmp_path / "run"), "--export-noise")
        root = tmp_path / "run"
        artifacts = _manifest(root)["artifacts"]
        for stem in ("mc", "amc_k4", "rqmc_2x32_r000", "rqmc_2x32_r001"):
            assert f"noise/{stem}.f64" in artifacts

        points = load_sobol_set(root / "noise" / "rqmc_2x32_r001")
        assert points.randomization is Randomization.OWEN_SCRAMBLE
        assert points.points.shape == (32, 64)
        assert np.all((points.points > 0.0) & (points.points < 1.0))
        assert load_batch(root / "noise" / "amc_k4").k == 4

    def test_symmetry_exports_trajectories(self, write_config, tmp_path):
        config = write_config(
            _config(
                "symmetry",
                model={**LINEAR_MODEL, "image_shape": [1, 4, 4]},
                statistics=["mean_pixel"],
                symmetry={"coords": [0], "grid_size": 11, "anchors": 1, "pairs": 4},
            )
        )
        _run(
            "symmetry",
            config,
            "--out",
            str(tmp_path / "run"),
            "--export-noise",
            "--record-eps",
        )
        root = tmp_path / "run"
        artifacts = _manifest(root)["artifacts"]
        assert "trajectories/pn_plus_eps.f64" in artifacts

        plus = load_trajectory(root / "trajectories" / "pn_plus")
        minus = load_trajectory(root / "trajectories" / "pn_minus")
        assert plus.states.shape == (11, 4, 16)
        assert plus.eps.shape == (10, 4, 16)
        np.testing.assert_array_equal(minus.initial_noise, -plus.initial_noise)
        np.testing.assert_allclose(minus.final, -plus.final, atol=1e-12)

    def test_eps_left_out_unless_recorded(self, write_config, tmp_path):
        config = write_config(
            _config(
                "symmetry",
                model={**LINEAR_MODEL, "image_shape": [1, 4, 4]},
                statistics=["mean_pixel"],
                symmetry={"coords": [0], "grid_size": 11, "anchors": 1, "pairs": 4},
            )
        )
        _run("symmetry", config, "--out", str(tmp_path / "run"), "--export-noise")
        artifacts = _manifest(tmp_path / "run")["artifacts"]
        assert "trajectories/pn_plus.f64" in artifacts
        assert not any(path.endswith("_eps.f64") for path in artifacts)
        assert load_trajectory(tmp_path / "run" / "trajectories" / "pn_plus").eps is None

    def test_nothing_exported_by_default(self, write_config, tmp_path):
        config = write_config(
            _config(
                "uq",
                model=NARROW_MODEL,
                statistics=["mean_pixel"],
                design={"budget": 64, "methods": ["MC", "RQMC"], "R": 2, "n": 32},
            )
        )
        _run("uq", config, "--out", str(tmp_path / "run"))
        manifest = _manifest(tmp_path / "run")
        assert manifest["exports"] == {"noise": False, "record_eps": False}
        assert not any(path.startswith("noise/") for path in manifest["artifacts"])
        assert not (tmp_path / "run" / "noise").exists()


# ── runs ─────────────────────────────────────────────────────────────────


@pytest.mark.django_db
class TestRunsCommand:
    @pytest.fixture
    def finished_run(self, write_config, tmp_path):
        config = write_config(
            _config(
                "correlation",
                model=LINEAR_MODEL,
                statistics=["mean_pixel"],
                design={"pairs": 10, "protocols": ["PN"]},
            )
        )
        _run("correlation", config, "--out", str(tmp_path / "run"))
        return ExperimentRun.objects.get()

    def _list(self, *args):
        out = StringIO()
        call_command("runs", *args, stdout=out)
        return json.loads(out.getvalue())

    def test_lists_runs_with_artifacts(self, finished_run):
        runs = self._list()
        assert [run["id"] for run in runs] == [finished_run.id]
        assert runs[0]["status"] == "SUCCEEDED"
        assert runs[0]["exit_code"] == 0
        paths = {artifact["path"] for artifact in runs[0]["artifacts"]}
        assert "manifest.json" in paths

    def test_single_run(self, finished_run):
        run = self._list(str(finished_run.id))
        assert run["kind"] == "correlation"
        assert run["config_hash"] == finished_run.config_hash

    def test_status_filter(self, finished_run):
        assert self._list("--status", "FAILED") == []
        assert len(self._list("--status", "SUCCEEDED", "--kind", "correlation")) == 1

    def test_unknown_run_is_an_error(self):
        with pytest.raises(CommandError) as exc:
            call_command("runs", "999", stdout=StringIO())
        assert exc.value.returncode == 2
