"""Reference forward path against independent reconstructions."""

import numpy as np
import pytest

from cmpq import QuantizeConfig, dequantize_layer, forward, quantize_layer
from cmpq.errors import NumericError, ShapeError
from cmpq.inference import precision_groups

from conftest import make_layer


def unpack_stream_reference(buf, width, count):
    """Independent LSB-first bit reader (pure int arithmetic)."""
    big = int.from_bytes(buf, "little")
    mask = (1 << width) - 1
    return [(big >> (i * width)) & mask for i in range(count)]


def naive_reconstruction(layer):
    """Scatter-gather reconstruction that shares no code with inference."""
    out = np.zeros((layer.d_in, layer.d_out), dtype=np.float32)
    for ch in range(layer.d_in):
        width = int(layer.precision.bits[ch])
        if width == 0:
            continue
        idx = unpack_stream_reference(layer.streams[ch], width, layer.d_out)
        lut = layer.codebooks[ch].astype(np.float32)
        out[ch] = lut[np.array(idx)]
    csr = layer.outliers
    for row in range(layer.d_in):
        for k in range(int(csr.row_ptr[row]), int(csr.row_ptr[row + 1])):
            out[row, int(csr.col_idx[k])] = np.float32(csr.values[k])
    return out


class TestDequantize:
    def test_exact_centroid_weights_recover(self, philox):
        rng = philox(0)
        levels = np.array([-2.0, -0.5, 0.5, 2.0], dtype=np.float32)
        w = levels[rng.integers(0, 4, size=(6, 20))]
        a = np.abs(rng.normal(size=6)) + 0.1
        layer = quantize_layer(w, a, QuantizeConfig(budget=3.0, ratio_act=0.0, ratio_q=0.0))
        np.testing.assert_array_equal(dequantize_layer(layer), w)

    def test_protected_channel_is_fp16_exact(self, philox):
        rng = philox(1)
        w = rng.normal(size=(10, 16)).astype(np.float32)
        a = np.arange(10, dtype=np.float64)
        layer = quantize_layer(w, a, QuantizeConfig(budget=3.0, ratio_act=0.1, ratio_q=0.0))
        assert list(layer.precision.fp16_channels) == [9]
        np.testing.assert_array_equal(
            dequantize_layer(layer)[9], w[9].astype(np.float16).astype(np.float32)
        )

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_naive_scatter_gather(self, seed):
        _, _, layer = make_layer(seed, d_in=15, d_out=26, budget=[2.0, 2.4, 3.0, 3.6, 4.0, 2.8, 3.2, 2.2][seed])
        np.testing.assert_array_equal(dequantize_layer(layer), naive_reconstruction(layer))

    def test_groups_partition_channels(self):
        _, _, layer = make_layer(30, budget=3.0)
        groups = precision_groups(layer)
        seen = np.concatenate([m for m in groups.values()] + [layer.precision.fp16_channels])
        assert sorted(seen.tolist()) == list(range(layer.d_in))


class TestForward:
    def test_zero_input(self):
        _, _, layer = make_layer(2)
        y = forward(layer, np.zeros(layer.d_in))
        np.testing.assert_array_equal(y, np.zeros(layer.d_out))

    def test_exact_centroid_layer_matches_clean_matmul(self, philox):
        rng = philox(3)
        levels = np.array([-1.0, 0.0, 1.0, 3.0], dtype=np.float32)
        w = levels[rng.integers(0, 4, size=(12, 18))]
        a = np.abs(rng.normal(size=12)) + 0.1
        layer = quantize_layer(w, a, QuantizeConfig(budget=2.0, ratio_act=0.0, ratio_q=0.0))
        x = rng.normal(size=(4, 12)).astype(np.float32)
        np.testing.assert_allclose(forward(layer, x), x @ w, rtol=1e-5, atol=1e-5)

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_dense_oracle(self, seed, philox):
        _, _, layer = make_layer(seed + 40, d_in=16, d_out=8, ratio_act=0.1, ratio_q=0.02)
        rng = philox(seed)
        x = rng.normal(size=(9, 16)).astype(np.float32)
        dense = x.astype(np.float64) @ dequantize_layer(layer).astype(np.float64)
        y = forward(layer, x)
        np.testing.assert_allclose(y, dense, rtol=1e-5, atol=1e-5)

    def test_vector_input_round_trip(self, philox):
        _, _, layer = make_layer(50)
        rng = philox(50)
        x = rng.normal(size=layer.d_in).astype(np.float32)
        y = forward(layer, x)
        assert y.shape == (layer.d_out,)
        np.testing.assert_array_equal(y, forward(layer, x[None, :])[0])

    def test_shape_mismatch(self):
        _, _, layer = make_layer(4)
        with pytest.raises(ShapeError):
            forward(layer, np.zeros(layer.d_in + 1))

    def test_non_finite_input(self):
        _, _, layer = make_layer(5)
        x = np.zeros(layer.d_in)
        x[0] = np.nan
        with pytest.raises(NumericError):
            forward(layer, x)

    def test_group_order_independent_in_float64_on_integer_data(self, philox):
        # integer-valued weights/inputs make every partial sum exact, so
        # reordering the precision groups cannot change a single bit
        rng = philox(6)
        w = rng.integers(-7, 8, size=(30, 12)).astype(np.float32)
        a = np.abs(rng.normal(size=30)) + 0.1
        layer = quantize_layer(w, a, QuantizeConfig(budget=3.0, ratio_act=0.1, ratio_q=0.01))
        x = rng.integers(-5, 6, size=(7, 30)).astype(np.float64)

        from itertools import permutations

        from cmpq.inference import _group_matrix

        groups = precision_groups(layer)
        results = []
        for order in permutations(groups):
            y = np.zeros((7, layer.d_out), dtype=np.float64)
            for width in order:
                y += x[:, groups[width]] @ _group_matrix(layer, groups[width], np.float64)
            y += layer.outliers.matmul(x, dtype=np.float64)
            results.append(y)
        for other in results[1:]:
            np.testing.assert_array_equal(results[0], other)

    def test_csr_multiply_exact_in_float64_on_integer_data(self, philox):
        rng = philox(7)
        w = rng.integers(-7, 8, size=(20, 10)).astype(np.float32)
        a = np.abs(rng.normal(size=20)) + 0.1
        layer = quantize_layer(w, a, QuantizeConfig(budget=3.0, ratio_act=0.1, ratio_q=0.02))
        x = rng.integers(-5, 6, size=(5, 20)).astype(np.float64)
        csr = layer.outliers
        np.testing.assert_array_equal(
            csr.matmul(x, dtype=np.float64),
            x @ csr.densify(np.float64),
        )

    def test_float64_mode(self, philox):
        _, _, layer = make_layer(8)
        rng = philox(8)
        x = rng.normal(size=(3, layer.d_in))
        y64 = forward(layer, x, float64=True)
        assert y64.dtype == np.float64
        dense = x @ dequantize_layer(layer, dtype=np.float64)
        np.testing.assert_allclose(y64, dense, rtol=1e-12)
