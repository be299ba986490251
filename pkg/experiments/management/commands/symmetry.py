from experiments.management.base import ExperimentCommand


class Command(ExperimentCommand):
    help = "Score slices, antisymmetry scores, PN temporal correlation and symmetry centers"
    kind = "symmetry"
