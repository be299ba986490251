from django.db import models
from django.utils import timezone


class ExperimentRun(models.Model):
    """
    Ledger entry for one harness invocation.

    Timestamps are kept here and never written into the run directory, so
    repeated runs produce identical output trees.
    """

    KIND_CHOICES = [
        ("correlation", "PN/RR correlation"),
        ("uq", "Uncertainty quantification"),
        ("qmc_tradeoff", "RQMC replicate tradeoff"),
        ("symmetry", "Score symmetry"),
        ("ou", "OU spectral theory"),
        ("fkg", "FKG monotonicity"),
    ]

    STATUS_CHOICES = [
        ("RUNNING", "Running"),
        ("SUCCEEDED", "Succeeded"),
        ("FAILED", "Failed"),
    ]

    kind = models.CharField(max_length=20, choices=KIND_CHOICES)
    config_hash = models.CharField(max_length=64)
    # 64-bit unsigned seeds do not fit a signed BIGINT column
    seed = models.CharField(max_length=20)
    output_dir = models.CharField(max_length=500)
    status = models.CharField(max_length=20, choices=STATUS_CHOICES, default="RUNNING")
    exit_code = models.IntegerField(null=True, blank=True)
    error = models.TextField(blank=True)
    created_at = models.DateTimeField(auto_now_add=True)
    finished_at = models.DateTimeField(null=True, blank=True)

    class Meta:
        db_table = "experiment_runs"
        ordering = ["-created_at"]
        indexes = [
            models.Index(fields=["kind", "config_hash"], name="run_kind_hash_idx"),
            models.Index(fields=["status"], name="run_status_idx"),
        ]

    def __str__(self):
        return f"Run #{self.id} - {self.kind} {self.config_hash[:12]} ({self.status})"

    def mark_succeeded(self):
        self.status = "SUCCEEDED"
        self.exit_code = 0
        self.finished_at = timezone.now()
        self.save(update_fields=["status", "exit_code", "finished_at"])

    def mark_failed(self, exit_code, error):
        self.status = "FAILED"
        self.exit_code = exit_code
        self.error = str(error)
        self.finished_at = timezone.now()
        self.save(update_fields=["status", "exit_code", "error", "finished_at"])


class RunArtifact(models.Model):
    """A file written by a run, relative to the run's output directory."""

    run = models.ForeignKey(ExperimentRun, on_delete=models.CASCADE, related_name="artifacts")
    path = models.CharField(max_length=500)
    sha256 = models.CharField(max_length=64)
    size_bytes = models.PositiveBigIntegerField()

    class Meta:
        db_table = "run_artifacts"
        ordering = ["path"]
        constraints = [
            models.UniqueConstraint(fields=["run", "path"], name="unique_artifact_per_run"),
        ]

    def __str__(self):
        return f"{self.path} ({self.sha256[:12]})"
