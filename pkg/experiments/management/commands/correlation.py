from experiments.management.base import ExperimentCommand


class Command(ExperimentCommand):
    help = "Compare standard and centralized correlations of PN, RR and masked pairs"
    kind = "correlation"
