"""
Sobol' point sets, their randomizations, and the map to Gaussian noise.

Direction numbers come from scipy.stats.qmc.Sobol, which bundles the Joe-Kuo
table. Unrandomized sets are the canonical sequence (index 0 is the origin)
and cannot be mapped to Gaussian noise until randomized.
"""

import enum
import logging
from dataclasses import dataclass

import numpy as np
from django.core.exceptions import ValidationError
from scipy.stats import qmc as scipy_qmc

from antithetic_lab.exceptions import UnsupportedDimension

from .noise_design import (
    Design,
    NoiseBatch,
    RngStream,
    StreamPurpose,
    clamp_uniform,
    uniform_to_normal,
)

logger = logging.getLogger(__name__)

# Direction-number table ceiling supported by the lab.
MAX_DIMENSION = 1111

# Points are generated with 52 bits so that digital shifts act on every
# mantissa bit of a float64 in (0, 1).
SOBOL_BITS = 52
_SCALE = float(2**SOBOL_BITS)


class Randomization(enum.Enum):
    NONE = "none"
    DIGITAL_SHIFT = "digital_shift"
    OWEN_SCRAMBLE = "owen_scramble"


@dataclass(frozen=True)
class SobolSet:
    points: np.ndarray
    randomization: Randomization = Randomization.NONE
    seed: int | None = None
    stream_id: int | None = None
    shift: np.ndarray | None = None

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def d(self):
        return self.points.shape[1]

    def metadata(self):
        return {
            "randomization": self.randomization.value,
            "seed": self.seed,
            "stream_id": self.stream_id,
        }


def _log2_exact(n):
    if n < 1 or n & (n - 1):
        raise ValidationError({"n": f"Sobol' point counts must be powers of two, got {n}."})
    return n.bit_length() - 1


def sobol_points(d, n):
    """The first n points of the canonical (unscrambled) Sobol' sequence in d dimensions."""
    if d < 1:
        raise ValidationError({"d": "Dimension must be at least 1."})
    if d > MAX_DIMENSION:
        raise UnsupportedDimension(d, MAX_DIMENSION)
    m = _log2_exact(n)
    engine = scipy_qmc.Sobol(d, scramble=False, bits=SOBOL_BITS)
    return SobolSet(engine.random_base2(m))


def randomize(sobol_set, method, stream):
    """
    Randomize a canonical set, seeded by `stream`.

    OWEN_SCRAMBLE uses scipy's linear matrix scramble plus digital shift, which
    keeps the digital-net property. DIGITAL_SHIFT XORs every point with one
    uniform 52-bit vector. Outputs are clamped away from 0 and 1.
    """
    if sobol_set.randomization is not Randomization.NONE:
        raise ValidationError({"set": "Only canonical (unrandomized) sets can be randomized."})
    if method is Randomization.NONE:
        raise ValidationError({"method": "Choose DIGITAL_SHIFT or OWEN_SCRAMBLE."})

    generator = stream.generator()
    shift = None
    if method is Randomization.OWEN_SCRAMBLE:
        engine = scipy_qmc.Sobol(
            sobol_set.d, scramble=True, bits=SOBOL_BITS, seed=generator
        )
        points = engine.random_base2(_log2_exact(sobol_set.n))
    else:
        shift_bits = generator.integers(0, 2**SOBOL_BITS, size=sobol_set.d, dtype=np.uint64)
        integer_points = (sobol_set.points * _SCALE).astype(np.uint64)
        points = np.bitwise_xor(integer_points, shift_bits) / _SCALE
        shift = shift_bits / _SCALE

    return SobolSet(
        clamp_uniform(points),
        randomization=method,
        seed=stream.seed,
        stream_id=stream.stream_id,
        shift=shift,
    )


def to_gaussian(sobol_set):
    if sobol_set.randomization is Randomization.NONE:
        raise ValidationError(
            {"set": "Unrandomized sets contain the origin, which has no Gaussian quantile."}
        )
    return NoiseBatch(
        uniform_to_normal(sobol_set.points),
        Design.RQMC,
        seed=sobol_set.seed,
        stream_id=sobol_set.stream_id,
        metadata=sobol_set.metadata(),
    )


def rqmc_point_sets(d, n, R, seed, method=Randomization.OWEN_SCRAMBLE):
    """R independently randomized copies of one n-point set, replicate r on RQMC stream r."""
    if R < 1:
        raise ValidationError({"R": "At least one replicate is required."})
    base = sobol_points(d, n)
    logger.debug("RQMC replicates d=%d n=%d R=%d method=%s", d, n, R, method.value)
    return [
        randomize(base, method, RngStream.for_purpose(seed, StreamPurpose.RQMC, r))
        for r in range(R)
    ]


def rqmc_replicates(d, n, R, seed, method=Randomization.OWEN_SCRAMBLE):
    """The point sets of rqmc_point_sets as Gaussian noise batches."""
    return [to_gaussian(points) for points in rqmc_point_sets(d, n, R, seed, method)]
