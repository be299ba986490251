from experiments.management.base import ExperimentCommand


class Command(ExperimentCommand):
    help = "Antithetic correlation of monotone maps and DDIM monotonicity checks"
    kind = "fkg"
