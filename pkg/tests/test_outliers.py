"""Outlier extraction and CSR construction."""

import numpy as np
import pytest

from cmpq.errors import DomainError, EmptyInputError, InternalError, ShapeError
from cmpq.outliers import (
    ChannelOutlierSet,
    ElementOutlierSet,
    SparseMatrixCSR,
    extract_activation_outliers,
    extract_quant_outliers,
    to_csr,
    top_k_indices,
)


def scatter_reference(channels, elements, d_in, d_out):
    """Independent dense scatter of both outlier sets."""
    dense = np.zeros((d_in, d_out), dtype=np.float32)
    for i, ch in enumerate(channels.indices):
        dense[ch] = channels.rows[i].astype(np.float32)
    for r, c, v in zip(elements.rows, elements.cols, elements.values):
        dense[r, c] = np.float32(v)
    return dense


def empty_elements():
    return ElementOutlierSet(
        rows=np.empty(0, dtype=np.int64),
        cols=np.empty(0, dtype=np.int64),
        values=np.empty(0, dtype=np.float16),
    )


def empty_channels(d_out):
    return ChannelOutlierSet(
        indices=np.empty(0, dtype=np.int64),
        rows=np.empty((0, d_out), dtype=np.float16),
    )


class TestTopK:
    def test_ties_resolve_to_lower_position(self):
        vals = np.array([5.0, 7.0, 5.0, 7.0, 1.0])
        np.testing.assert_array_equal(top_k_indices(vals, 3), [0, 1, 3])

    def test_all_equal(self):
        np.testing.assert_array_equal(top_k_indices(np.ones(6), 4), [0, 1, 2, 3])

    def test_k_zero_and_k_full(self):
        vals = np.array([3.0, 1.0])
        assert top_k_indices(vals, 0).size == 0
        np.testing.assert_array_equal(top_k_indices(vals, 2), [0, 1])


class TestActivationOutliers:
    def test_round_half_up_count(self):
        w = np.ones((1000, 4), dtype=np.float32)
        a = np.arange(1000, dtype=np.float64)
        _, picked = extract_activation_outliers(w, a, 0.0045)
        assert picked.count == 5  # round(4.5) rounds up
        np.testing.assert_array_equal(picked.indices, [995, 996, 997, 998, 999])

    def test_ratio_zero_is_identity(self):
        w = np.arange(12, dtype=np.float32).reshape(3, 4)
        w_prime, picked = extract_activation_outliers(w, np.ones(3), 0.0)
        assert picked.count == 0
        np.testing.assert_array_equal(w_prime, w)

    def test_top_channel_extracted_and_zeroed(self):
        w = np.arange(16, dtype=np.float32).reshape(4, 4)
        a = np.array([1.0, 2.0, 3.0, 4.0])
        w_prime, picked = extract_activation_outliers(w, a, 0.25)
        np.testing.assert_array_equal(picked.indices, [3])
        np.testing.assert_array_equal(w_prime[3], np.zeros(4))
        np.testing.assert_array_equal(w_prime[:3], w[:3])
        np.testing.assert_array_equal(picked.rows[0], w[3].astype(np.float16))

    def test_norm_ties_take_lower_index(self):
        w = np.ones((4, 2), dtype=np.float32)
        a = np.array([7.0, 7.0, 7.0, 1.0])
        _, picked = extract_activation_outliers(w, a, 0.5)
        np.testing.assert_array_equal(picked.indices, [0, 1])

    def test_ratio_leaving_nothing(self):
        w = np.ones((2, 2), dtype=np.float32)
        with pytest.raises(EmptyInputError):
            extract_activation_outliers(w, np.ones(2), 0.9)

    def test_bad_ratio(self):
        with pytest.raises(DomainError):
            extract_activation_outliers(np.ones((2, 2), np.float32), np.ones(2), 1.0)

    def test_norm_length_mismatch(self):
        with pytest.raises(ShapeError):
            extract_activation_outliers(np.ones((2, 2), np.float32), np.ones(3), 0.0)


class TestQuantOutliers:
    def test_zero_residual_is_deterministic_lexicographic(self):
        w = np.ones((3, 4))
        out = extract_quant_outliers(w, w, 0.25)  # 3 coords, all residual 0
        np.testing.assert_array_equal(out.rows, [0, 0, 0])
        np.testing.assert_array_equal(out.cols, [0, 1, 2])

    def test_single_worst_cell(self):
        w = np.zeros((4, 5))
        w_q = np.zeros((4, 5))
        w_q[2, 3] = -9.0  # residual 9 at (2, 3)
        out = extract_quant_outliers(w, w_q, 0.05)
        assert out.count == 1
        assert (out.rows[0], out.cols[0]) == (2, 3)
        assert out.values[0] == np.float16(0.0)  # original value, not residual

    def test_ratio_zero(self):
        out = extract_quant_outliers(np.ones((2, 2)), np.zeros((2, 2)), 0.0)
        assert out.count == 0

    def test_protected_channels_skipped(self):
        w = np.zeros((3, 3))
        w_q = np.zeros((3, 3))
        w_q[0, 0] = 100.0
        w_q[1, 1] = 50.0
        out = extract_quant_outliers(w, w_q, 1 / 9, protected=[0])
        assert (out.rows[0], out.cols[0]) == (1, 1)

    def test_values_are_originals(self):
        w = np.array([[1.5, 2.5], [3.5, 4.5]])
        w_q = np.zeros((2, 2))
        out = extract_quant_outliers(w, w_q, 0.5)
        picked = {(r, c): v for r, c, v in zip(out.rows, out.cols, out.values)}
        assert picked == {(1, 0): np.float16(3.5), (1, 1): np.float16(4.5)}


class TestCsr:
    def test_single_protected_row(self):
        ch = ChannelOutlierSet(
            indices=np.array([1]), rows=np.arange(4, dtype=np.float16).reshape(1, 4)
        )
        csr = to_csr(ch, empty_elements(), 3, 4)
        np.testing.assert_array_equal(csr.row_ptr, [0, 0, 4, 4])
        np.testing.assert_array_equal(csr.col_idx, [0, 1, 2, 3])
        np.testing.assert_array_equal(csr.densify()[1], [0, 1, 2, 3])

    def test_empty_sets(self):
        csr = to_csr(empty_channels(5), empty_elements(), 4, 5)
        np.testing.assert_array_equal(csr.row_ptr, np.zeros(5))
        assert csr.nnz == 0
        np.testing.assert_array_equal(csr.densify(), np.zeros((4, 5)))

    def test_overlap_rejected(self):
        ch = ChannelOutlierSet(
            indices=np.array([0]), rows=np.ones((1, 3), dtype=np.float16)
        )
        el = ElementOutlierSet(
            rows=np.array([0]), cols=np.array([1]), values=np.ones(1, dtype=np.float16)
        )
        with pytest.raises(InternalError):
            to_csr(ch, el, 2, 3)

    def test_scatter_gather_round_trip(self, philox):
        rng = philox(3)
        d_in, d_out = 10, 7
        ch_idx = np.array([2, 5])
        ch = ChannelOutlierSet(
            indices=ch_idx,
            rows=rng.normal(size=(2, d_out)).astype(np.float16),
        )
        free_rows = [r for r in range(d_in) if r not in ch_idx]
        coords = sorted({(int(rng.choice(free_rows)), int(rng.integers(d_out))) for _ in range(6)})
        el = ElementOutlierSet(
            rows=np.array([r for r, _ in coords]),
            cols=np.array([c for _, c in coords]),
            values=rng.normal(size=len(coords)).astype(np.float16),
        )
        csr = to_csr(ch, el, d_in, d_out)
        assert csr.nnz == 2 * d_out + len(coords)
        np.testing.assert_array_equal(
            csr.densify(), scatter_reference(ch, el, d_in, d_out)
        )

    def test_matmul_equals_densified(self, philox):
        rng = philox(4)
        ch = ChannelOutlierSet(
            indices=np.array([0]), rows=rng.integers(-8, 8, size=(1, 6)).astype(np.float16)
        )
        el = ElementOutlierSet(
            rows=np.array([2, 2, 4]),
            cols=np.array([1, 5, 0]),
            values=rng.integers(-8, 8, size=3).astype(np.float16),
        )
        csr = to_csr(ch, el, 5, 6)
        x = rng.integers(-4, 4, size=(3, 5)).astype(np.float64)
        np.testing.assert_array_equal(
            csr.matmul(x, dtype=np.float64), x @ csr.densify(np.float64)
        )

    def test_validate_rejects_bad_row_ptr(self):
        csr = SparseMatrixCSR(
            row_ptr=np.array([0, 2, 1]),
            col_idx=np.array([0, 1]),
            values=np.zeros(2, dtype=np.float16),
            n_cols=3,
        )
        with pytest.raises(InternalError):
            csr.validate()


class TestBudget:
    @pytest.mark.parametrize("seed", range(8))
    def test_total_within_bound(self, seed, philox):
        rng = philox(seed + 20)
        d_in, d_out = 64, 40
        w = rng.normal(size=(d_in, d_out)).astype(np.float32)
        a = np.abs(rng.normal(size=d_in))
        ratio_act, ratio_q = 0.0045, 0.0005
        w_prime, ch = extract_activation_outliers(w, a, ratio_act)
        w_q = w_prime + rng.normal(scale=0.1, size=w.shape)
        el = extract_quant_outliers(w_prime, w_q, ratio_q, protected=ch.indices)
        total = ch.count * d_out + el.count
        cap = np.ceil((ratio_act + ratio_q) * d_in * d_out) + d_out
        assert total <= cap
