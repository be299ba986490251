from experiments.management.base import ExperimentCommand


class Command(ExperimentCommand):
    help = "OU Fisher decay, Hermite spectral checks, symmetry preservation and one-step bound"
    kind = "ou"
