"""
Raw little-endian float64 matrices with a JSON sidecar.

`<stem>.f64` holds the values row-major; `<stem>.json` holds shape and
provenance. Sidecars are written with sorted keys so reruns are byte-identical.
"""

import json
import logging
from pathlib import Path

import numpy as np
from django.core.exceptions import ValidationError

from .noise_design import Design, NoiseBatch
from .qmc import Randomization, SobolSet
from .toy_diffusion import Trajectory

logger = logging.getLogger(__name__)

DATA_SUFFIX = ".f64"
SIDECAR_SUFFIX = ".json"


def _paths(path):
    path = Path(path)
    return path.with_suffix(DATA_SUFFIX), path.with_suffix(SIDECAR_SUFFIX)


def write_matrix(path, values, sidecar):
    data_path, sidecar_path = _paths(path)
    data_path.parent.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(values, dtype="<f8").tofile(data_path)
    sidecar = {**sidecar, "shape": list(np.shape(values))}
    sidecar_path.write_text(json.dumps(sidecar, sort_keys=True, indent=2) + "\n")
    logger.debug("Wrote %s (%s)", data_path, sidecar["shape"])
    return data_path, sidecar_path


def read_matrix(path):
    data_path, sidecar_path = _paths(path)
    sidecar = json.loads(sidecar_path.read_text())
    values = np.fromfile(data_path, dtype="<f8")
    shape = tuple(sidecar["shape"])
    if values.size != int(np.prod(shape)):
        raise ValidationError(
            {"data": f"{data_path.name} holds {values.size} values, sidecar expects {shape}."}
        )
    return values.reshape(shape), sidecar


def save_batch(batch, path):
    return write_matrix(
        path,
        batch.rows,
        {
            "kind": "noise_batch",
            "n": batch.n,
            "d": batch.d,
            "design": batch.design.value,
            "k": batch.k,
            "seed": batch.seed,
            "stream_id": batch.stream_id,
            "metadata": batch.metadata,
        },
    )


def load_batch(path):
    rows, sidecar = read_matrix(path)
    return NoiseBatch(
        rows,
        Design(sidecar["design"]),
        k=sidecar.get("k"),
        seed=sidecar.get("seed"),
        stream_id=sidecar.get("stream_id"),
        metadata=sidecar.get("metadata", {}),
    )


def save_sobol_set(sobol_set, path):
    return write_matrix(
        path,
        sobol_set.points,
        {
            "kind": "sobol_set",
            "n": sobol_set.n,
            "d": sobol_set.d,
            "shift": None if sobol_set.shift is None else sobol_set.shift.tolist(),
            **sobol_set.metadata(),
        },
    )


def load_sobol_set(path):
    points, sidecar = read_matrix(path)
    shift = sidecar.get("shift")
    return SobolSet(
        points,
        Randomization(sidecar["randomization"]),
        seed=sidecar.get("seed"),
        stream_id=sidecar.get("stream_id"),
        shift=None if shift is None else np.asarray(shift),
    )


def save_trajectory(trajectory, path, record_eps=True):
    """States (and optionally eps outputs) go to `<stem>` and `<stem>_eps`."""
    path = Path(path)
    written = list(
        write_matrix(
            path,
            trajectory.states,
            {
                "kind": "trajectory_states",
                "steps": trajectory.steps.tolist(),
                "initial_noise": np.asarray(trajectory.initial_noise).tolist(),
                "negated": trajectory.negated,
            },
        )
    )
    if record_eps and trajectory.eps is not None:
        written += write_matrix(
            path.with_name(path.stem + "_eps"),
            trajectory.eps,
            {"kind": "trajectory_eps", "steps": trajectory.steps[:-1].tolist()},
        )
    return written


def load_trajectory(path):
    path = Path(path)
    states, sidecar = read_matrix(path)
    eps_path = path.with_name(path.stem + "_eps")
    eps = read_matrix(eps_path)[0] if eps_path.with_suffix(DATA_SUFFIX).exists() else None
    return Trajectory(
        states,
        np.asarray(sidecar["steps"]),
        np.asarray(sidecar["initial_noise"]),
        eps,
        sidecar.get("negated", False),
    )
