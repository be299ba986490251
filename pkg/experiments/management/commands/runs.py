import json

from django.core.management.base import BaseCommand, CommandError

from experiments.models import ExperimentRun
from experiments.serializers import ExperimentRunSerializer


class Command(BaseCommand):
    help = "Print run ledger entries (status, exit code, artifacts) as JSON"

    def add_arguments(self, parser):
        parser.add_argument("run_id", nargs="?", type=int, help="Show a single run")
        parser.add_argument("--kind", choices=[kind for kind, _ in ExperimentRun.KIND_CHOICES])
        parser.add_argument(
            "--status", choices=[status for status, _ in ExperimentRun.STATUS_CHOICES]
        )
        parser.add_argument("--limit", type=int, default=20, help="Newest runs to list")

    def handle(self, *args, **options):
        runs = ExperimentRun.objects.prefetch_related("artifacts")

        if options.get("run_id") is not None:
            try:
                run = runs.get(pk=options["run_id"])
            except ExperimentRun.DoesNotExist as exc:
                raise CommandError(f"Run #{options['run_id']} not found", returncode=2) from exc
            data = ExperimentRunSerializer(run).data
        else:
            if options.get("kind"):
                runs = runs.filter(kind=options["kind"])
            if options.get("status"):
                runs = runs.filter(status=options["status"])
            data = ExperimentRunSerializer(runs[: options["limit"]], many=True).data

        self.stdout.write(json.dumps(data, indent=2))
