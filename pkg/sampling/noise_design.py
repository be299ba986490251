"""
Seeded Gaussian noise under correlation-inducing designs.

Every batch is a plain (n, d) float64 matrix plus a design tag. Antithetic
batches interleave each row with its negation (row 2i+1 = -row 2i);
K-antithetic batches are stacked blocks of K rows whose sum is zero.
"""

import enum
import logging
from dataclasses import dataclass, field

import numpy as np
from django.core.exceptions import ValidationError
from scipy.special import ndtri

logger = logging.getLogger(__name__)

# Uniforms are clamped here before the inverse CDF so that both the MC and the
# RQMC paths stay finite.
UNIFORM_FLOOR = 2.0**-53
UNIFORM_CEIL = 1.0 - 2.0**-53

_MAX_UINT64 = 2**64


class Design(enum.Enum):
    IID = "iid"
    ANTITHETIC_PAIR = "antithetic_pair"
    K_ANTITHETIC = "k_antithetic"
    MASKED = "masked"
    RQMC = "rqmc"


class StreamPurpose(enum.IntEnum):
    """Stable labels for stream ids; a run never derives ids from scheduling order."""

    PN = 1
    RR_LEFT = 2
    RR_RIGHT = 3
    MASKED = 4
    MC = 10
    AMC = 11
    K_ANTITHETIC = 12
    RQMC = 13
    STEP_NOISE = 20
    PROBES = 30
    ANCHORS = 31
    CHAINS = 40
    MAPS = 41
    CHAIN_SAMPLES = 42
    MAP_SAMPLES = 43
    PRESET = 50
    SYNTHETIC = 60


@dataclass(frozen=True)
class RngStream:
    """
    A (seed, stream_id) label for a Philox counter-based generator.

    Identical labels reproduce identical draws; distinct stream ids spawn
    independent SeedSequence children.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        errors = {}
        if not 0 <= int(self.seed) < _MAX_UINT64:
            errors["seed"] = "Seed must be a 64-bit unsigned integer."
        if not 0 <= int(self.stream_id) < _MAX_UINT64:
            errors["stream_id"] = "Stream id must be a 64-bit unsigned integer."
        if errors:
            raise ValidationError(errors)

    @classmethod
    def for_purpose(cls, seed, purpose, index=0):
        if not 0 <= index < 2**32:
            raise ValidationError({"index": "Stream index must fit in 32 bits."})
        return cls(seed, (int(purpose) << 32) + int(index))

    def generator(self):
        sequence = np.random.SeedSequence(entropy=int(self.seed), spawn_key=(int(self.stream_id),))
        return np.random.Generator(np.random.Philox(sequence))

    def uniforms(self, shape):
        return self.generator().random(shape)


@dataclass(frozen=True)
class NoiseBatch:
    rows: np.ndarray
    design: Design = Design.IID
    k: int | None = None
    seed: int | None = None
    stream_id: int | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.rows.shape[0]

    @property
    def d(self):
        return self.rows.shape[1]

    def pairs(self):
        """Split an interleaved pair design into (first members, second members)."""
        if self.design not in (Design.ANTITHETIC_PAIR, Design.MASKED):
            raise ValidationError({"design": f"{self.design.value} batches are not paired."})
        return self.rows[0::2], self.rows[1::2]

    def blocks(self):
        if self.design is not Design.K_ANTITHETIC:
            raise ValidationError({"design": f"{self.design.value} batches have no blocks."})
        return self.rows.reshape(-1, self.k, self.d)


def clamp_uniform(u):
    return np.clip(u, UNIFORM_FLOOR, UNIFORM_CEIL)


def uniform_to_normal(u):
    """Coordinate-wise standard-normal quantile of clamped uniforms."""
    return ndtri(clamp_uniform(np.asarray(u, dtype=np.float64)))


def gaussian_batch(stream, n, d):
    if n < 1 or d < 1:
        raise ValidationError({"shape": f"Need n >= 1 and d >= 1, got n={n}, d={d}."})
    rows = uniform_to_normal(stream.uniforms((n, d)))
    return NoiseBatch(rows, Design.IID, seed=stream.seed, stream_id=stream.stream_id)


def antithetic_expand(batch):
    if batch.design is not Design.IID:
        raise ValidationError(
            {"design": f"Antithetic expansion needs an IID batch, got {batch.design.value}."}
        )
    rows = np.empty((2 * batch.n, batch.d))
    rows[0::2] = batch.rows
    rows[1::2] = -batch.rows
    return NoiseBatch(
        rows, Design.ANTITHETIC_PAIR, seed=batch.seed, stream_id=batch.stream_id
    )


def k_antithetic_batch(stream, K, d, blocks):
    """
    Build `blocks` independent groups of K rows, z_i = sqrt(K/(K-1)) (w_i - w_bar).

    Within a block every pair of rows has correlation -1/(K-1) per coordinate,
    and each row is marginally standard normal.
    """
    if K < 2:
        raise ValidationError({"K": "K-antithetic blocks need K >= 2."})
    if blocks < 1 or d < 1:
        raise ValidationError({"shape": f"Need blocks >= 1 and d >= 1, got {blocks}, {d}."})

    w = uniform_to_normal(stream.uniforms((blocks, K, d)))
    z = np.sqrt(K / (K - 1)) * (w - w.mean(axis=1, keepdims=True))
    # residual mean left by rounding
    z -= z.mean(axis=1, keepdims=True)
    logger.debug("K-antithetic batch K=%d blocks=%d d=%d stream=%d", K, blocks, d, stream.stream_id)
    return NoiseBatch(
        z.reshape(blocks * K, d),
        Design.K_ANTITHETIC,
        k=K,
        seed=stream.seed,
        stream_id=stream.stream_id,
    )


def partial_negate(z, mask):
    z = np.asarray(z, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != z.shape[-1:]:
        raise ValidationError(
            {"mask": f"Mask length {mask.shape[0]} does not match noise dimension {z.shape[-1]}."}
        )
    return np.where(mask, -z, z)


def masked_expand(batch, mask):
    """Pair every IID row with its partial negation under `mask`."""
    if batch.design is not Design.IID:
        raise ValidationError(
            {"design": f"Masked expansion needs an IID batch, got {batch.design.value}."}
        )
    rows = np.empty((2 * batch.n, batch.d))
    rows[0::2] = batch.rows
    rows[1::2] = partial_negate(batch.rows, mask)
    return NoiseBatch(
        rows,
        Design.MASKED,
        seed=batch.seed,
        stream_id=batch.stream_id,
        metadata={"negated_coordinates": int(np.count_nonzero(mask))},
    )


def upper_half_mask(shape):
    """Mask selecting the top floor(H/2) rows of every channel of a (C, H, W) image."""
    channels, height, width = shape
    mask = np.zeros(shape, dtype=bool)
    mask[:, : height // 2, :] = True
    return mask.reshape(channels * height * width)


def first_half_mask(d):
    mask = np.zeros(d, dtype=bool)
    mask[: d // 2] = True
    return mask
