import json
import logging
from pathlib import Path

from django.conf import settings
from django.core.exceptions import ValidationError
from django.core.management.base import BaseCommand, CommandError
from django.db import transaction

from antithetic_lab.exceptions import NumericalFailure
from experiments.models import ExperimentRun, RunArtifact
from experiments.outputs import MANIFEST_NAME, RunDirectory, default_output_dir, sha256_file
from experiments.runners import RunContext, execute
from experiments.serializers import (
    SCHEMA_VERSION,
    ExperimentConfigSerializer,
    canonical_config,
    config_hash,
)

logger = logging.getLogger(__name__)

UNEXPECTED_ERROR = 1
CONFIG_ERROR = 2
NUMERICAL_ERROR = 3


def _messages(exc):
    return exc.message_dict if hasattr(exc, "error_dict") else exc.messages


class ExperimentCommand(BaseCommand):
    """
    Shared surface of the experiment commands: --config, --out, --seed, --threads,
    --export-noise and --record-eps.

    Exit code 1 marks an unexpected error, 2 a config or validation error and 3 a
    numerical failure. Every failure is recorded on the run before it propagates.
    """

    kind = None

    def add_arguments(self, parser):
        parser.add_argument("--config", required=True, help="Path to the experiment JSON config")
        parser.add_argument(
            "--out", help="Output directory (default: LAB_OUTPUT_DIR/<kind>-<hash>)"
        )
        parser.add_argument("--seed", type=int, help="Override the config seed")
        parser.add_argument("--threads", type=int, help="Worker threads (default: LAB_THREADS)")
        parser.add_argument(
            "--export-noise",
            action="store_true",
            help="Also write noise batches, Sobol sets, PN trajectories and sample images",
        )
        parser.add_argument(
            "--record-eps",
            action="store_true",
            help="Store eps outputs with exported trajectories",
        )

    def load_config(self, options):
        path = Path(options["config"])
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise CommandError(f"Config file {path} not found", returncode=CONFIG_ERROR) from exc
        except json.JSONDecodeError as exc:
            raise CommandError(
                f"Config {path} is not valid JSON: {exc}", returncode=CONFIG_ERROR
            ) from exc
        if not isinstance(data, dict):
            raise CommandError("Config must be a JSON object", returncode=CONFIG_ERROR)

        data.setdefault("kind", self.kind)
        if data["kind"] != self.kind:
            raise CommandError(
                f"Config is for '{data['kind']}', not '{self.kind}'", returncode=CONFIG_ERROR
            )
        if options.get("seed") is not None:
            data["seed"] = options["seed"]

        serializer = ExperimentConfigSerializer(data=data)
        if not serializer.is_valid():
            logger.warning("Rejected %s config %s: %s", self.kind, path, serializer.errors)
            raise CommandError(
                f"Invalid config: {json.dumps(serializer.errors, sort_keys=True)}",
                returncode=CONFIG_ERROR,
            )
        return serializer.validated_data

    def handle(self, *args, **options):
        config = self.load_config(options)
        threads = options.get("threads")
        if threads is None:
            threads = settings.LAB_THREADS
        if threads < 1:
            raise CommandError("--threads must be at least 1", returncode=CONFIG_ERROR)

        digest = config_hash(config)
        root = Path(
            options.get("out") or config.get("output_dir") or default_output_dir(self.kind, digest)
        )
        run = ExperimentRun.objects.create(
            kind=self.kind, config_hash=digest, seed=str(config["seed"]), output_dir=str(root)
        )
        logger.info(
            "Run #%s: %s config %s seed %s -> %s",
            run.id,
            self.kind,
            digest[:12],
            config["seed"],
            root,
        )

        try:
            out = RunDirectory(root)
            ctx = RunContext(
                config["seed"],
                threads,
                settings.LAB_CHUNK_SIZE,
                export_noise=options.get("export_noise", False),
                record_eps=options.get("record_eps", False),
            )
            summary = execute(config, ctx, out)
            manifest = out.write_manifest(
                {
                    "schema_version": SCHEMA_VERSION,
                    "kind": self.kind,
                    "config_hash": digest,
                    "seed": config["seed"],
                    "config": canonical_config(config),
                    "streams": ctx.streams,
                    "sampler_calls": dict(ctx.sampler_calls),
                    "exports": {"noise": ctx.export_noise, "record_eps": ctx.record_eps},
                    "summary": summary,
                }
            )
        except ValidationError as exc:
            run.mark_failed(CONFIG_ERROR, _messages(exc))
            raise CommandError(
                f"Invalid input: {_messages(exc)}", returncode=CONFIG_ERROR
            ) from exc
        except NumericalFailure as exc:
            run.mark_failed(NUMERICAL_ERROR, exc)
            raise CommandError(f"Numerical failure: {exc}", returncode=NUMERICAL_ERROR) from exc
        except Exception as exc:
            logger.error("Run #%s failed: %s", run.id, exc)
            run.mark_failed(UNEXPECTED_ERROR, exc)
            raise

        with transaction.atomic():
            RunArtifact.objects.bulk_create(
                [
                    RunArtifact(
                        run=run, path=path, sha256=info["sha256"], size_bytes=info["size_bytes"]
                    )
                    for path, info in out.artifacts.items()
                ]
                + [
                    RunArtifact(
                        run=run,
                        path=MANIFEST_NAME,
                        sha256=sha256_file(manifest),
                        size_bytes=manifest.stat().st_size,
                    )
                ]
            )
            run.mark_succeeded()

        self.stdout.write(
            self.style.SUCCESS(
                f"{self.kind} run #{run.id} wrote {len(out.artifacts)} artifacts to {root}"
            )
        )
