import numpy as np
import pytest
from django.core.exceptions import ValidationError
from scipy import stats

from sampling.noise_design import (
    UNIFORM_FLOOR,
    Design,
    RngStream,
    StreamPurpose,
    antithetic_expand,
    first_half_mask,
    gaussian_batch,
    k_antithetic_batch,
    masked_expand,
    partial_negate,
    uniform_to_normal,
    upper_half_mask,
)


# ── Streams ──────────────────────────────────────────────────────────────


class TestRngStream:
    def test_same_label_reproduces_draws(self, seed):
        first = RngStream(seed, 5).uniforms(100)
        second = RngStream(seed, 5).uniforms(100)
        np.testing.assert_array_equal(first, second)

    def test_distinct_stream_ids_differ(self, seed):
        assert not np.array_equal(RngStream(seed, 1).uniforms(10), RngStream(seed, 2).uniforms(10))

    def test_distinct_seeds_differ(self):
        assert not np.array_equal(RngStream(1, 0).uniforms(10), RngStream(2, 0).uniforms(10))

    def test_for_purpose_enumerates_ids(self, seed):
        stream = RngStream.for_purpose(seed, StreamPurpose.RR_RIGHT, 7)
        assert stream.stream_id == (int(StreamPurpose.RR_RIGHT) << 32) + 7

    def test_full_64_bit_seed_accepted(self):
        RngStream(2**64 - 1).uniforms(3)

    def test_negative_seed_rejected(self):
        with pytest.raises(ValidationError) as exc:
            RngStream(-1)
        assert "seed" in exc.value.message_dict

    def test_index_must_fit_32_bits(self, seed):
        with pytest.raises(ValidationError):
            RngStream.for_purpose(seed, StreamPurpose.PN, 2**32)


# ── Designs ──────────────────────────────────────────────────────────────


class TestGaussianBatch:
    def test_shape_and_tag(self, stream):
        batch = gaussian_batch(stream, 10, 4)
        assert batch.rows.shape == (10, 4)
        assert batch.design is Design.IID
        assert batch.stream_id == stream.stream_id

    def test_inverse_cdf_stays_finite_at_zero(self):
        assert np.isfinite(uniform_to_normal(np.array([0.0, 1.0]))).all()
        assert uniform_to_normal(0.0) == uniform_to_normal(UNIFORM_FLOOR)

    def test_empty_batch_rejected(self, stream):
        with pytest.raises(ValidationError):
            gaussian_batch(stream, 0, 4)


class TestAntitheticExpand:
    def test_rows_are_interleaved_negations(self, stream):
        batch = antithetic_expand(gaussian_batch(stream, 6, 3))
        assert batch.design is Design.ANTITHETIC_PAIR
        first, second = batch.pairs()
        np.testing.assert_array_equal(second, -first)

    def test_requires_iid_input(self, stream):
        with pytest.raises(ValidationError):
            antithetic_expand(antithetic_expand(gaussian_batch(stream, 2, 2)))

    def test_blocks_rejected_for_pairs(self, stream):
        with pytest.raises(ValidationError):
            antithetic_expand(gaussian_batch(stream, 2, 2)).blocks()

    def test_both_halves_are_standard_normal(self, stream):
        first, second = antithetic_expand(gaussian_batch(stream, 5000, 1)).pairs()
        assert stats.kstest(first.ravel(), "norm").pvalue > 1e-3
        assert stats.kstest(second.ravel(), "norm").pvalue > 1e-3


class TestKAntithetic:
    def test_block_sums_vanish(self, stream):
        batch = k_antithetic_batch(stream, 4, 3, 1000)
        assert batch.design is Design.K_ANTITHETIC
        assert np.abs(batch.blocks().sum(axis=1)).max() <= 1e-12

    @pytest.mark.parametrize("K", [2, 4, 8])
    def test_pairwise_correlation(self, seed, K):
        stream = RngStream.for_purpose(seed, StreamPurpose.K_ANTITHETIC, K)
        blocks = k_antithetic_batch(stream, K, 1, 100_000).blocks()[:, :, 0]
        rho = np.corrcoef(blocks[:, 0], blocks[:, 1])[0, 1]
        assert rho == pytest.approx(-1.0 / (K - 1), abs=0.02)

    def test_rows_are_standard_normal(self, stream):
        rows = k_antithetic_batch(stream, 8, 1, 20_000).rows
        assert rows.mean() == pytest.approx(0.0, abs=0.03)
        assert rows.std() == pytest.approx(1.0, abs=0.03)

    @pytest.mark.parametrize("K", [3, 8])
    def test_block_members_pass_normality_test(self, seed, K):
        stream = RngStream.for_purpose(seed, StreamPurpose.K_ANTITHETIC, 100 + K)
        blocks = k_antithetic_batch(stream, K, 2, 5000).blocks()
        for member in range(K):
            assert stats.kstest(blocks[:, member, :].ravel(), "norm").pvalue > 1e-4

    def test_k_below_two_rejected(self, stream):
        with pytest.raises(ValidationError):
            k_antithetic_batch(stream, 1, 3, 10)


class TestMasks:
    def test_upper_half_mask(self):
        mask = upper_half_mask((3, 8, 8)).reshape(3, 8, 8)
        assert mask[:, :4, :].all()
        assert not mask[:, 4:, :].any()

    def test_first_half_mask(self):
        np.testing.assert_array_equal(first_half_mask(5), [True, True, False, False, False])

    def test_partial_negate(self):
        z = np.array([[1.0, 2.0, 3.0]])
        np.testing.assert_array_equal(
            partial_negate(z, np.array([True, False, True])), [[-1.0, 2.0, -3.0]]
        )

    def test_mask_length_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            partial_negate(np.zeros((2, 3)), np.array([True, False]))

    def test_masked_expand(self, stream):
        mask = first_half_mask(4)
        batch = masked_expand(gaussian_batch(stream, 5, 4), mask)
        first, second = batch.pairs()
        np.testing.assert_array_equal(second[:, :2], -first[:, :2])
        np.testing.assert_array_equal(second[:, 2:], first[:, 2:])
        assert batch.metadata["negated_coordinates"] == 2
