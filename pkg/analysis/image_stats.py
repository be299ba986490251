"""
Pixel statistics S and pairwise similarity metrics.

Images are (C, H, W) float arrays. Rows are indexed from 1 for the centroid
and the middle row of an odd-height image belongs to the bottom half.
"""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from django.core.exceptions import ValidationError
from scipy import stats
from skimage.metrics import structural_similarity

from antithetic_lab.exceptions import UndefinedStatistic

logger = logging.getLogger(__name__)

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_SIGMA = 1.5
SSIM_WINDOW = 11

# Spread below this fraction of the magnitude counts as a constant input.
CONSTANT_RTOL = 1e-12


@dataclass(frozen=True)
class ImageTensor:
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3:
            raise ValidationError({"values": f"Expected a (C, H, W) array, got {values.shape}."})
        if not np.all(np.isfinite(values)):
            raise ValidationError({"values": "Image values must be finite."})
        if np.any(values < 0.0) or np.any(values > 1.0):
            raise ValidationError({"values": "Pixel values must lie in [0, 1]."})
        object.__setattr__(self, "values", values)

    @classmethod
    def from_flat(cls, values, shape):
        values = np.asarray(values, dtype=np.float64)
        if values.size != int(np.prod(shape)):
            raise ValidationError(
                {"shape": f"{values.size} values cannot fill an image of shape {tuple(shape)}."}
            )
        return cls(values.reshape(shape))

    @classmethod
    def from_sample(cls, x, shape):
        """
        Map a sampler output x to pixels clip((x + 1) / 2, 0, 1).

        The clip commutes with x -> -x, so a PN pair still gives pixels p and 1 - p.
        """
        pixels = np.clip((np.asarray(x, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)
        return cls.from_flat(pixels, shape)

    @property
    def shape(self):
        return self.values.shape

    def flat(self):
        return self.values.reshape(-1)


# ── Statistics ───────────────────────────────────────────────────────────


def mean_pixel(img):
    return float(img.values.mean())


def brightness(img):
    if img.shape[0] != 3:
        raise ValidationError({"channels": f"Brightness needs 3 channels, got {img.shape[0]}."})
    return float(np.tensordot(LUMA_WEIGHTS, img.values, axes=1).mean())


def contrast(img):
    height = img.shape[1]
    if height < 2:
        raise ValidationError({"height": "Contrast needs at least two rows."})
    top = img.values[:, : height // 2, :].mean()
    bottom = img.values[:, height // 2 :, :].mean()
    return float(100.0 * (top - bottom))


def centroid_row(img):
    mass = img.values.mean(axis=0)
    total = mass.sum()
    if total <= 0.0:
        raise UndefinedStatistic("Centroid is undefined for an image without positive mass.")
    rows = np.arange(1, mass.shape[0] + 1)
    return float((rows[:, None] * mass).sum() / total)


STATISTICS = {
    "mean_pixel": mean_pixel,
    "brightness": brightness,
    "contrast": contrast,
    "centroid_row": centroid_row,
}


def evaluate_statistics(images, names):
    """Matrix of shape (len(images), len(names))."""
    unknown = sorted(set(names) - STATISTICS.keys())
    if unknown:
        raise ValidationError({"statistics": f"Unknown statistics: {', '.join(unknown)}."})
    return np.array([[STATISTICS[name](img) for name in names] for img in images])


def write_statistics_csv(path, image_ids, names, values):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["image_id", *names])
        for image_id, row in zip(image_ids, values):
            writer.writerow([image_id, *(repr(float(v)) for v in row)])
    return path


# ── Correlations and distances ───────────────────────────────────────────


def is_constant(x, axis=None):
    x = np.asarray(x, dtype=np.float64)
    return np.ptp(x, axis=axis) <= CONSTANT_RTOL * np.max(np.abs(x), axis=axis)


def pearson_standard(x, y):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size or x.size < 2:
        raise ValidationError({"values": "Need two equal-length inputs with at least 2 entries."})
    if is_constant(x) or is_constant(y):
        raise UndefinedStatistic("Pearson correlation is undefined for a constant input.")
    xc = x - x.mean()
    yc = y - y.mean()
    denominator = np.sqrt(np.dot(xc, xc) * np.dot(yc, yc))
    return float(np.clip(np.dot(xc, yc) / denominator, -1.0, 1.0))


def pearson_centralized(pairs):
    """Subtract the group mean mu_c (over all 2K members) before correlating each pair."""
    if len(pairs) < 1:
        raise ValidationError({"pairs": "At least one pair is required."})
    members = np.asarray(
        [
            [np.asarray(x, dtype=np.float64).ravel(), np.asarray(y, dtype=np.float64).ravel()]
            for x, y in pairs
        ]
    )
    center = members.mean(axis=(0, 1))
    return [pearson_standard(x - center, y - center) for x, y in members]


def correlation_difference_pvalue(first, second):
    """Welch two-sample t-test p-value for a difference in correlation means."""
    return float(stats.ttest_ind(first, second, equal_var=False).pvalue)


def wasserstein1(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValidationError({"samples": "Wasserstein distance needs nonempty samples."})
    return float(stats.wasserstein_distance(a, b))


def _ssim_from_moments(mu_a, mu_b, var_a, var_b, cov):
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    )


def _ssim_channel(a, b):
    if min(a.shape) < SSIM_WINDOW:
        mu_a, mu_b = a.mean(), b.mean()
        cov = np.mean((a - mu_a) * (b - mu_b))
        return float(_ssim_from_moments(mu_a, mu_b, a.var(), b.var(), cov))

    return float(
        structural_similarity(
            a,
            b,
            data_range=1.0,
            gaussian_weights=True,
            sigma=SSIM_SIGMA,
            use_sample_covariance=False,
            K1=SSIM_K1,
            K2=SSIM_K2,
        )
    )


def ssim(a, b):
    """Mean SSIM over channels, dynamic range 1; global statistics below an 11-pixel side."""
    if a.shape != b.shape:
        raise ValidationError({"shape": f"Shapes differ: {a.shape} vs {b.shape}."})
    return float(np.mean([_ssim_channel(ca, cb) for ca, cb in zip(a.values, b.values)]))


# ── CSV images ───────────────────────────────────────────────────────────


def save_image_csv(img, path):
    """Header `shape=CxHxW`, then one value per line in (C, H, W) order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["shape=" + "x".join(str(s) for s in img.shape)])
        writer.writerows([repr(float(v))] for v in img.flat())
    return path


def load_image_csv(path):
    with Path(path).open(newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader)[0]
        if not header.startswith("shape="):
            raise ValidationError({"header": f"Expected a shape header, got {header!r}."})
        shape = tuple(int(s) for s in header.removeprefix("shape=").split("x"))
        values = [float(row[0]) for row in reader if row]
    return ImageTensor.from_flat(values, shape)
