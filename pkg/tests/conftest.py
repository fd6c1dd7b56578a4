import numpy as np
import pytest

from cmpq import QuantizeConfig, quantize_layer


def make_layer(seed, d_in=24, d_out=48, budget=3.0, ratio_act=0.05, ratio_q=0.01,
               name=None, **cfg_kw):
    """Small random quantized layer for format/inference tests."""
    rng = np.random.Generator(np.random.Philox(seed))
    w = rng.normal(size=(d_in, d_out)).astype(np.float32)
    a = np.abs(rng.normal(size=d_in)) + 0.05
    cfg = QuantizeConfig(budget=budget, ratio_act=ratio_act, ratio_q=ratio_q, **cfg_kw)
    layer = quantize_layer(w, a, cfg, name=name or f"layer{seed}")
    return w, a, layer


@pytest.fixture
def philox():
    def gen(seed):
        return np.random.Generator(np.random.Philox(seed))

    return gen
