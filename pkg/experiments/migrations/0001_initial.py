# Generated by Django 6.0.2 on 2026-10-19 09:12

import django.db.models.deletion
from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = []

    operations = [
        migrations.CreateModel(
            name="ExperimentRun",
            fields=[
                (
                    "id",
                    models.BigAutoField(
                        auto_created=True,
                        primary_key=True,
                        serialize=False,
                        verbose_name="ID",
                    ),
                ),
                (
                    "kind",
                    models.CharField(
                        choices=[
                            ("correlation", "PN/RR correlation"),
                            ("uq", "Uncertainty quantification"),
                            ("qmc_tradeoff", "RQMC replicate tradeoff"),
                            ("symmetry", "Score symmetry"),
                            ("ou", "OU spectral theory"),
                            ("fkg", "FKG monotonicity"),
                        ],
                        max_length=20,
                    ),
                ),
                ("config_hash", models.CharField(max_length=64)),
                ("seed", models.CharField(max_length=20)),
                ("output_dir", models.CharField(max_length=500)),
                (
                    "status",
                    models.CharField(
                        choices=[
                            ("RUNNING", "Running"),
                            ("SUCCEEDED", "Succeeded"),
                            ("FAILED", "Failed"),
                        ],
                        default="RUNNING",
                        max_length=20,
                    ),
                ),
                ("exit_code", models.IntegerField(blank=True, null=True)),
                ("error", models.TextField(blank=True)),
                ("created_at", models.DateTimeField(auto_now_add=True)),
                ("finished_at", models.DateTimeField(blank=True, null=True)),
            ],
            options={
                "db_table": "experiment_runs",
                "ordering": ["-created_at"],
                "indexes": [
                    models.Index(fields=["kind", "config_hash"], name="run_kind_hash_idx"),
                    models.Index(fields=["status"], name="run_status_idx"),
                ],
            },
        ),
        migrations.CreateModel(
            name="RunArtifact",
            fields=[
                (
                    "id",
                    models.BigAutoField(
                        auto_created=True,
                        primary_key=True,
                        serialize=False,
                        verbose_name="ID",
                    ),
                ),
                ("path", models.CharField(max_length=500)),
                ("sha256", models.CharField(max_length=64)),
                ("size_bytes", models.PositiveBigIntegerField()),
                (
                    "run",
                    models.ForeignKey(
                        on_delete=django.db.models.deletion.CASCADE,
                        related_name="artifacts",
                        to="experiments.experimentrun",
                    ),
                ),
            ],
            options={
                "db_table": "run_artifacts",
                "ordering": ["path"],
                "constraints": [
                    models.UniqueConstraint(fields=("run", "path"), name="unique_artifact_per_run")
                ],
            },
        ),
    ]
