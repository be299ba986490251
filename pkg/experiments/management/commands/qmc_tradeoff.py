from experiments.management.base import ExperimentCommand


class Command(ExperimentCommand):
    help = "RQMC interval widths over (R, n) splits of a fixed budget"
    kind = "qmc_tradeoff"
