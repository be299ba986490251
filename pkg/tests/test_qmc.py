import numpy as np
import pytest
from django.core.exceptions import ValidationError

from antithetic_lab.exceptions import UnsupportedDimension
from sampling.noise_design import Design, RngStream, StreamPurpose
from sampling.qmc import (
    MAX_DIMENSION,
    Randomization,
    SobolSet,
    randomize,
    rqmc_replicates,
    sobol_points,
    to_gaussian,
)


def _stratified(points):
    """Every coordinate puts exactly one point in each interval [k/n, (k+1)/n)."""
    n = points.shape[0]
    cells = np.floor(points * n).astype(int)
    return all(np.array_equal(np.sort(cells[:, j]), np.arange(n)) for j in range(points.shape[1]))


class TestSobolPoints:
    def test_canonical_set_starts_at_origin(self):
        sobol = sobol_points(3, 8)
        assert sobol.points.shape == (8, 3)
        np.testing.assert_array_equal(sobol.points[0], np.zeros(3))
        assert sobol.randomization is Randomization.NONE

    def test_one_dimensional_opening_points(self):
        np.testing.assert_array_equal(sobol_points(1, 4).points[:, 0], [0.0, 0.5, 0.75, 0.25])

    def test_canonical_set_is_stratified(self):
        assert _stratified(sobol_points(5, 64).points)

    def test_non_power_of_two_rejected(self):
        with pytest.raises(ValidationError):
            sobol_points(2, 100)

    def test_dimension_beyond_table_rejected(self):
        with pytest.raises(UnsupportedDimension) as exc:
            sobol_points(MAX_DIMENSION + 1, 2)
        assert exc.value.limit == MAX_DIMENSION

    def test_dimension_ceiling_is_1111(self):
        assert MAX_DIMENSION == 1111
        assert sobol_points(1111, 2).d == 1111
        with pytest.raises(UnsupportedDimension):
            sobol_points(1112, 2)

    def test_unrandomized_set_has_no_gaussian_image(self):
        with pytest.raises(ValidationError):
            to_gaussian(sobol_points(2, 4))

    def test_gaussian_image_uses_inverse_normal_cdf(self):
        point_set = SobolSet(
            np.array([[0.9750021048517795, 0.5]]), randomization=Randomization.DIGITAL_SHIFT
        )
        rows = to_gaussian(point_set).rows
        assert rows[0, 0] == pytest.approx(1.959963984540054, abs=1e-12)
        assert rows[0, 1] == 0.0


class TestRandomize:
    @pytest.mark.parametrize("method", [Randomization.OWEN_SCRAMBLE, Randomization.DIGITAL_SHIFT])
    def test_randomization_keeps_stratification(self, stream, method):
        randomized = randomize(sobol_points(4, 128), method, stream)
        assert randomized.randomization is method
        assert _stratified(randomized.points)
        assert np.all((randomized.points > 0.0) & (randomized.points < 1.0))

    def test_same_stream_same_points(self, stream):
        base = sobol_points(3, 16)
        np.testing.assert_array_equal(
            randomize(base, Randomization.OWEN_SCRAMBLE, stream).points,
            randomize(base, Randomization.OWEN_SCRAMBLE, stream).points,
        )

    def test_digital_shift_is_recorded(self, stream):
        shifted = randomize(sobol_points(2, 8), Randomization.DIGITAL_SHIFT, stream)
        assert shifted.shift.shape == (2,)
        assert shifted.metadata()["randomization"] == "digital_shift"

    def test_digital_shift_moves_origin_onto_shift(self, stream):
        shifted = randomize(sobol_points(3, 8), Randomization.DIGITAL_SHIFT, stream)
        np.testing.assert_array_equal(shifted.points[0], shifted.shift)

    def test_scrambled_pairs_fill_every_elementary_interval(self, stream):
        n = 16
        points = randomize(sobol_points(2, n), Randomization.OWEN_SCRAMBLE, stream).points
        for a in range(5):
            b = 4 - a
            cells = np.floor(points[:, 0] * 2**a).astype(int) * 2**b + np.floor(
                points[:, 1] * 2**b
            ).astype(int)
            np.testing.assert_array_equal(np.sort(cells), np.arange(n))

    def test_randomized_sets_cannot_be_randomized_again(self, stream):
        once = randomize(sobol_points(2, 8), Randomization.OWEN_SCRAMBLE, stream)
        with pytest.raises(ValidationError):
            randomize(once, Randomization.OWEN_SCRAMBLE, stream)

    def test_none_is_not_a_randomization(self, stream):
        with pytest.raises(ValidationError):
            randomize(sobol_points(2, 8), Randomization.NONE, stream)


class TestReplicates:
    def test_replicates_use_distinct_streams(self, seed):
        replicates = rqmc_replicates(3, 16, 4, seed)
        assert len(replicates) == 4
        assert all(batch.design is Design.RQMC for batch in replicates)
        assert len({batch.stream_id for batch in replicates}) == 4
        expected = RngStream.for_purpose(seed, StreamPurpose.RQMC, 2)
        assert replicates[2].stream_id == expected.stream_id

    def test_replicates_are_deterministic(self, seed):
        first = rqmc_replicates(2, 8, 3, seed)
        second = rqmc_replicates(2, 8, 3, seed)
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.rows, b.rows)

    def test_rqmc_error_decays_faster_than_mc(self, seed):
        d, R = 4, 32
        exponents = range(4, 13)

        def integrand(u):
            return np.prod(0.5 + u, axis=1)

        rqmc_std, mc_std = [], []
        for m in exponents:
            n = 2**m
            base = sobol_points(d, n)
            means = [
                integrand(
                    randomize(
                        base,
                        Randomization.OWEN_SCRAMBLE,
                        RngStream.for_purpose(seed, StreamPurpose.RQMC, r),
                    ).points
                ).mean()
                for r in range(R)
            ]
            rqmc_std.append(np.std(means, ddof=1))
            mc_means = [
                integrand(
                    RngStream.for_purpose(seed, StreamPurpose.MC, 100 * m + r).uniforms((n, d))
                ).mean()
                for r in range(R)
            ]
            mc_std.append(np.std(mc_means, ddof=1))

        log_n = np.array(list(exponents), dtype=float)
        rqmc_slope = np.polyfit(log_n, np.log2(rqmc_std), 1)[0]
        mc_slope = np.polyfit(log_n, np.log2(mc_std), 1)[0]
        assert rqmc_slope <= -0.8
        assert mc_slope == pytest.approx(-0.5, abs=0.1)
