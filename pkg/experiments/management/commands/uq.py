from experiments.management.base import ExperimentCommand


class Command(ExperimentCommand):
    help = "Confidence intervals and efficiency of MC, AMC and RQMC at a shared budget"
    kind = "uq"
