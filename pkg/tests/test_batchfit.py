"""The batched fitting fast path must match the scalar path bit for bit."""

import numpy as np
import pytest

from cmpq import QuantizeConfig, quantize_layer
from cmpq.batchfit import (
    _bisect_rows,
    _row_quantiles,
    assign_block,
    fit_centroids_block,
)
from cmpq.pipeline import _quantize_chunk, _quantize_chunk_scalar
from cmpq.quantizer import fit_centroids_sorted, nearest_assign
from cmpq.tensor_store import encode_layer


class TestPrimitives:
    @pytest.mark.parametrize("seed", range(5))
    def test_bisect_matches_searchsorted(self, seed, philox):
        rng = philox(seed)
        rows = np.sort(rng.normal(size=(8, 200)), axis=1)
        keys = rng.normal(size=(8, 7))
        lengths = rng.integers(150, 201, size=8)
        got = _bisect_rows(rows, lengths, keys)
        for i in range(8):
            expect = np.searchsorted(rows[i, : lengths[i]], keys[i], side="left")
            np.testing.assert_array_equal(got[i], expect)

    @pytest.mark.parametrize("k", [4, 8, 16])
    def test_row_quantiles_match_numpy(self, k, philox):
        rng = philox(k)
        rows = np.sort(rng.normal(size=(12, 300)), axis=1)
        lengths = rng.integers(130, 301, size=12)
        got = _row_quantiles(rows, lengths, k)
        q = (np.arange(k) + 0.5) / k
        for i in range(12):
            expect = np.quantile(rows[i, : lengths[i]], q)
            assert np.array_equal(got[i], expect)


class TestFitBlock:
    @pytest.mark.parametrize("k", [4, 8, 16])
    def test_bitwise_equal_to_scalar(self, k, philox):
        rng = philox(k + 10)
        count, n = 24, 400
        rows = np.sort(rng.normal(size=(count, n)) * rng.uniform(0.2, 5), axis=1)
        lengths = np.full(count, n, dtype=np.int64)
        # a few refit-style rows with shorter logical length
        for i in range(0, count, 5):
            lengths[i] = n - int(rng.integers(1, 4))
            rows[i, lengths[i] :] = rows[i, lengths[i] - 1]
        results = fit_centroids_block(rows, lengths, k, 100, 1e-6)
        for i in range(count):
            expect = fit_centroids_sorted(rows[i, : lengths[i]], k, "lloyd", 100, 1e-6)
            assert np.array_equal(results[i], expect), i

    def test_degenerate_rows_use_scalar(self, philox):
        rng = philox(99)
        rows = np.sort(rng.normal(size=(6, 50)), axis=1)
        rows[2] = 1.5  # constant row
        rows[4, :] = np.repeat(np.arange(5.0), 10)  # 5 distinct values
        lengths = np.full(6, 50, dtype=np.int64)
        results = fit_centroids_block(rows, lengths, 8, 100, 1e-6)
        for i in range(6):
            expect = fit_centroids_sorted(rows[i], 8, "lloyd", 100, 1e-6)
            assert np.array_equal(results[i], expect), i


class TestAssignBlock:
    def test_matches_scalar_nearest(self, philox):
        rng = philox(7)
        count, n, k = 16, 120, 8
        data = rng.normal(size=(count, n))
        orders = np.argsort(data, axis=1, kind="stable")
        rows_sorted = np.take_along_axis(data, orders, axis=1)
        codebooks = np.sort(rng.normal(size=(count, k)), axis=1)
        real_k = rng.integers(2, k + 1, size=count)
        for i in range(count):  # pad the tail like the pipeline does
            codebooks[i, real_k[i] :] = codebooks[i, real_k[i] - 1]
        assigns, usable = assign_block(rows_sorted, orders, codebooks, real_k)
        assert usable.all()
        for i in range(count):
            expect = nearest_assign(data[i], codebooks[i])
            np.testing.assert_array_equal(assigns[i], expect)

    def test_collided_codebooks_flagged(self, philox):
        rng = philox(8)
        data = rng.normal(size=(2, 40))
        orders = np.argsort(data, axis=1, kind="stable")
        rows_sorted = np.take_along_axis(data, orders, axis=1)
        codebooks = np.sort(rng.normal(size=(2, 4)), axis=1)
        codebooks[1, 1] = codebooks[1, 0]  # collision among real entries
        _, usable = assign_block(rows_sorted, orders, codebooks, np.array([4, 4]))
        assert usable[0] and not usable[1]


class TestChunkEquivalence:
    @pytest.mark.parametrize("seed", range(4))
    def test_chunk_matches_scalar_chunk(self, seed, philox):
        rng = philox(seed + 40)
        count, d_out = 20, 300
        rows = (rng.normal(size=(count, d_out)) * rng.uniform(0.5, 3)).astype(np.float32)
        bit_list = rng.choice([2, 3, 4], size=count).astype(np.uint8)
        masks = None
        if seed % 2:
            masks = {}
            for ch in range(count):
                keep = np.ones(d_out, dtype=bool)
                if ch % 3 == 0:
                    keep[rng.integers(0, d_out, size=2)] = False
                masks[ch] = keep
            masks = [masks[ch] for ch in range(count)]
        cfg = QuantizeConfig()
        fast = _quantize_chunk((rows, masks, bit_list, cfg))
        slow = _quantize_chunk_scalar(rows, masks, bit_list, cfg)
        for (cb_f, as_f), (cb_s, as_s) in zip(fast, slow):
            assert np.array_equal(cb_f.view(np.uint16), cb_s.view(np.uint16))
            assert np.array_equal(as_f, as_s)

    def test_layer_identical_with_batch_disabled(self, philox, monkeypatch):
        rng = philox(60)
        w = rng.normal(size=(48, 200)).astype(np.float32)
        a = np.abs(rng.normal(size=48)) + 0.1
        cfg = QuantizeConfig(budget=2.7, ratio_act=0.05, ratio_q=0.01)
        fast = quantize_layer(w, a, cfg)
        import cmpq.pipeline as pl

        monkeypatch.setattr(pl, "_quantize_chunk", lambda args: _quantize_chunk_scalar(*args))
        slow = quantize_layer(w, a, cfg)
        assert encode_layer(fast) == encode_layer(slow)
