"""Error metrics, synthetic layers, and strategy-comparison harnesses.

Perplexity-style scores need a full model, so the desk-scale figures of
merit are reconstruction error and activation-weighted output error.
Synthetic weights come from a counter-based Philox generator (64-bit),
so every suite is reproducible from its seed alone.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .allocation import PrecisionMap
from .errors import ConfigError, ShapeError
from .inference import dequantize_layer
from .layer import QuantizeConfig
from .outliers import extract_activation_outliers
from .pipeline import quantize_layer, quantize_with_map
from .quantizer import uniform_dequantize, uniform_quantize

CSV_HEADER = ["strategy", "b_nominal", "b_effective", "recon_mse", "output_rel_err", "wall_time"]


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _recon_stats(w: np.ndarray, w_hat: np.ndarray) -> dict:
    diff = w.astype(np.float64) - w_hat.astype(np.float64)
    denom = float(np.linalg.norm(w.astype(np.float64)))
    fro = float(np.linalg.norm(diff))
    return {
        "mse": float((diff * diff).mean()),
        "frobenius_rel": fro / denom if denom else fro,
    }


def recon_error(w, layer) -> dict:
    """{mse, frobenius_rel} of the layer's dense reconstruction vs w."""
    w = np.asarray(w, dtype=np.float32)
    w_hat = dequantize_layer(layer)
    if w.shape != w_hat.shape:
        raise ShapeError(f"shape mismatch {w.shape} vs {w_hat.shape}")
    return _recon_stats(w, w_hat)


def output_error(w, layer, x_val) -> float:
    """Relative output error ||X (W - What)||_F / ||X W||_F."""
    w_hat = dequantize_layer(layer)
    return output_error_dense(w, w_hat, x_val)


def output_error_dense(w, w_hat, x_val) -> float:
    w = np.asarray(w, dtype=np.float64)
    w_hat = np.asarray(w_hat, dtype=np.float64)
    x = np.asarray(x_val, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != w.shape[0] or w.shape != w_hat.shape:
        raise ShapeError(
            f"incompatible shapes x {x.shape}, w {w.shape}, w_hat {w_hat.shape}"
        )
    err = float(np.linalg.norm(x @ (w - w_hat)))
    denom = float(np.linalg.norm(x @ w))
    return err / denom if denom else err


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

SYNTH_KINDS = ("gaussian", "laplace", "student_t", "channel_salient")


def synth_weights(
    kind: str,
    d_in: int,
    d_out: int,
    seed: int,
    nu: float = 3.0,
    sigma_ratio: float = 10.0,
):
    """Deterministic synthetic (weights, norms) pair.

    gaussian: unit-variance normal entries; laplace: scale-1 Laplace;
    student_t: Student-t with ``nu`` degrees of freedom (heavy tails);
    channel_salient: per-channel scales spread over [1, sigma_ratio] with
    norms equal to the channel scales, so salience is a real signal.
    """
    if d_in < 1 or d_out < 1:
        raise ConfigError(f"dimensions must be positive, got {d_in}x{d_out}")
    rng = np.random.Generator(np.random.Philox(seed))
    if kind == "gaussian":
        w = rng.normal(0.0, 1.0, size=(d_in, d_out))
    elif kind == "laplace":
        w = rng.laplace(0.0, 1.0, size=(d_in, d_out))
    elif kind == "student_t":
        w = rng.standard_t(nu, size=(d_in, d_out))
    elif kind == "channel_salient":
        scales = sigma_ratio ** rng.random(d_in)
        w = rng.normal(0.0, 1.0, size=(d_in, d_out)) * scales[:, None]
        return w.astype(np.float32), scales.astype(np.float64)
    else:
        raise ConfigError(f"unknown synthetic kind {kind!r}")
    norms = np.exp(rng.normal(0.0, 0.5, size=d_in))
    return w.astype(np.float32), norms


def synth_activations(norms, m: int, seed: int) -> np.ndarray:
    """(m, d_in) activations whose per-channel L2 norms match `norms`."""
    a = np.asarray(getattr(norms, "values", norms), dtype=np.float64)
    rng = np.random.Generator(np.random.Philox(seed))
    x = rng.normal(0.0, 1.0, size=(m, a.size))
    return (x * (a / np.sqrt(m))[None, :]).astype(np.float32)


def plant_element_outliers(w, count: int, scale: float, seed: int) -> np.ndarray:
    """Copy of w with `count` entries blown up to +-scale x channel std."""
    w = np.array(w, dtype=np.float32, copy=True)
    rng = np.random.Generator(np.random.Philox(seed))
    flat = rng.choice(w.size, size=count, replace=False)
    rows, cols = np.divmod(flat, w.shape[1])
    stds = w.std(axis=1)
    signs = np.where(rng.random(count) < 0.5, -1.0, 1.0)
    w[rows, cols] = signs * scale * np.maximum(stds[rows], 1e-3)
    return w


# ---------------------------------------------------------------------------
# strategies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StrategySpec:
    """One allocation policy plus its outlier configuration."""

    name: str
    policy: str                     # flat | cmpq | k_mixed | uniform_rtn
    n_bits: int | None = None       # flat, uniform_rtn
    k_percent: float | None = None  # k_mixed
    ratio_act: float = 0.0
    ratio_q: float = 0.0
    group_size: int = 128           # uniform_rtn
    denominator_variant: str = "conventional"

    @staticmethod
    def flat(n_bits: int, **kw) -> "StrategySpec":
        return StrategySpec(name=f"flat-{n_bits}", policy="flat", n_bits=n_bits, **kw)

    @staticmethod
    def cmpq(**kw) -> "StrategySpec":
        return StrategySpec(name="cmpq", policy="cmpq", **kw)

    @staticmethod
    def k_mixed(k_percent: float, **kw) -> "StrategySpec":
        return StrategySpec(
            name=f"mixed-{k_percent:g}pct", policy="k_mixed", k_percent=k_percent, **kw
        )

    @staticmethod
    def uniform_rtn(n_bits: int, group_size: int = 128, **kw) -> "StrategySpec":
        return StrategySpec(
            name=f"uniform-rtn-{n_bits}",
            policy="uniform_rtn",
            n_bits=n_bits,
            group_size=group_size,
            **kw,
        )

    def check_budget(self, budget: float) -> None:
        if not 2.0 <= budget <= 4.0:
            raise ConfigError(f"budget {budget} outside [2, 4]")
        if self.policy in ("flat", "uniform_rtn") and budget != self.n_bits:
            raise ConfigError(
                f"strategy {self.name} is fixed at {self.n_bits} bits, "
                f"incompatible with budget {budget}"
            )
        if self.policy == "k_mixed" and budget != 3.0:
            raise ConfigError(f"strategy {self.name} only defines a 3-bit budget")


def _k_mixed_map(norms: np.ndarray, k_percent: float, excluded) -> PrecisionMap:
    """Top k% of channels to 4 bits, bottom k% to 2 bits, rest 3."""
    d_in = norms.size
    excluded = np.asarray(excluded, dtype=np.int64)
    active = np.setdiff1d(np.arange(d_in, dtype=np.int64), excluded)
    bits = np.zeros(d_in, dtype=np.uint8)
    bits[active] = 3
    count = int(np.floor(k_percent / 100.0 * active.size + 0.5))
    a = norms[active]
    order_asc = active[np.argsort(a, kind="stable")]
    order_desc = active[np.argsort(-a, kind="stable")]
    bits[order_asc[:count]] = 2
    bits[order_desc[:count]] = 4
    return PrecisionMap(bits=bits, fp16_channels=excluded)


def _uniform_rtn_dense(w_prime, spec: StrategySpec) -> tuple[np.ndarray, int]:
    """Grouped RTN reconstruction of every channel; returns (w_hat, n_groups)."""
    d_in, d_out = w_prime.shape
    w_hat = np.zeros_like(w_prime, dtype=np.float32)
    n_groups = 0
    for ch in range(d_in):
        for start in range(0, d_out, spec.group_size):
            group = w_prime[ch, start : start + spec.group_size]
            params, idx = uniform_quantize(group, spec.n_bits, spec.denominator_variant)
            w_hat[ch, start : start + spec.group_size] = uniform_dequantize(params, idx)
            n_groups += 1
    return w_hat, n_groups


def _evaluate_uniform(w, norms, spec: StrategySpec, x_val):
    d_in, d_out = w.shape
    w_prime, ch_set = extract_activation_outliers(w, norms, spec.ratio_act)
    w_hat, n_groups = _uniform_rtn_dense(w_prime, spec)
    if ch_set.count:
        w_hat[ch_set.indices] = ch_set.rows.astype(np.float32)
    stats = _recon_stats(w, w_hat)
    out_err = output_error_dense(w, w_hat, x_val) if x_val is not None else float("nan")
    nnz = ch_set.count * d_out
    # scale/offset pair per group (two fp16 values) instead of codebooks
    total_bits = (
        spec.n_bits * (d_in - ch_set.count) * d_out
        + 32 * n_groups
        + 16 * nnz
        + 32 * (nnz + d_in + 1)
    )
    return stats, out_err, float(spec.n_bits), total_bits / w.size


def evaluate_strategy(spec: StrategySpec, budget: float, w, norms, x_val=None) -> dict:
    """Quantize one layer under a strategy and measure it."""
    spec.check_budget(budget)
    w = np.asarray(w, dtype=np.float32)
    a = np.asarray(getattr(norms, "values", norms), dtype=np.float64)
    start = time.perf_counter()

    if spec.policy == "uniform_rtn":
        stats, out_err, b_nom, b_eff = _evaluate_uniform(w, a, spec, x_val)
    else:
        cfg = QuantizeConfig(
            budget=budget, ratio_act=spec.ratio_act, ratio_q=spec.ratio_q
        )
        if spec.policy == "cmpq":
            layer = quantize_layer(w, a, cfg)
        else:
            _, ch_set = extract_activation_outliers(w, a, spec.ratio_act)
            if spec.policy == "flat":
                bits = np.full(w.shape[0], spec.n_bits, dtype=np.uint8)
                bits[ch_set.indices] = 0
                pmap = PrecisionMap(bits=bits, fp16_channels=ch_set.indices)
            else:  # k_mixed
                pmap = _k_mixed_map(a, spec.k_percent, excluded=ch_set.indices)
            layer = quantize_with_map(w, pmap, cfg)
        stats = recon_error(w, layer)
        out_err = output_error(w, layer, x_val) if x_val is not None else float("nan")
        b_nom = layer.stats["nominal_bits"]
        b_eff = layer.stats["effective_bits"]

    return {
        "strategy": spec.name,
        "b_nominal": b_nom,
        "b_effective": b_eff,
        "recon_mse": stats["mse"],
        "output_rel_err": out_err,
        "wall_time": time.perf_counter() - start,
    }


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\r\n")  # RFC 4180
        writer.writerow(CSV_HEADER)
        for row in self.rows:
            writer.writerow([row[c] if c == "strategy" else repr(row[c]) for c in CSV_HEADER])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(self.rows, sort_keys=True, indent=2)

    def write(self, path, fmt: str = "csv") -> None:
        from .tensor_store import atomic_write

        text = self.to_csv() if fmt == "csv" else self.to_json()
        atomic_write(path, text.encode("utf-8"))


def _mean_rows(strategy: str, per_layer: list[dict]) -> dict:
    out = {"strategy": strategy}
    for key in CSV_HEADER[1:]:
        out[key] = float(np.mean([r[key] for r in per_layer]))
    return out


def run_comparison(layers, strategies, budgets, x_val=None) -> BenchReport:
    """Evaluate every (strategy, budget) over a set of (w, norms) layers.

    Returns one aggregated row per grid point, in grid order.
    """
    layers = list(layers)
    strategies = list(strategies)
    budgets = list(budgets)
    if not layers or not strategies or not budgets:
        raise ConfigError("comparison needs layers, strategies, and budgets")
    for spec in strategies:
        for b in budgets:
            spec.check_budget(b)

    report = BenchReport()
    for spec in strategies:
        for b in budgets:
            per_layer = [
                evaluate_strategy(spec, b, w, a, x_val) for (w, a) in layers
            ]
            row = _mean_rows(spec.name, per_layer)
            row["b_nominal"] = float(np.mean([r["b_nominal"] for r in per_layer]))
            report.rows.append(row)
    return report


def outlier_sweep(w, norms, ratios, budget: float, cluster_method: str = "lloyd") -> BenchReport:
    """recon_mse of the pipeline as the protected-channel ratio grows.

    Sweeps the activation-outlier ratio with element outliers disabled, so
    the first point of an ascending sweep that starts at 0 is exactly the
    no-outlier pipeline.
    """
    ratios = [float(r) for r in ratios]
    if any(b < a for a, b in zip(ratios, ratios[1:])):
        raise ConfigError("ratios must be ascending")
    if ratios and (ratios[0] < 0 or ratios[-1] > 0.005):
        raise ConfigError("ratios must lie in [0, 0.005]")

    report = BenchReport()
    for ratio in ratios:
        start = time.perf_counter()
        cfg = QuantizeConfig(
            budget=budget, ratio_act=ratio, ratio_q=0.0, cluster_method=cluster_method
        )
        layer = quantize_layer(w, norms, cfg)
        report.rows.append(
            {
                "strategy": f"cmpq-oact-{ratio:g}",
                "b_nominal": layer.stats["nominal_bits"],
                "b_effective": layer.stats["effective_bits"],
                "recon_mse": layer.stats["recon_mse"],
                "output_rel_err": float("nan"),
                "wall_time": time.perf_counter() - start,
            }
        )
    return report


# ---------------------------------------------------------------------------
# named suites (CLI surface)
# ---------------------------------------------------------------------------


def run_suite(name: str) -> BenchReport:
    if name == "preliminary":
        layers = [
            synth_weights("channel_salient", 128, 512, seed) for seed in range(4)
        ]
        x_val = synth_activations(layers[0][1], 64, seed=99)
        strategies = [
            StrategySpec.flat(3),
            StrategySpec.k_mixed(1),
            StrategySpec.k_mixed(10),
            StrategySpec.cmpq(),
        ]
        return run_comparison(layers, strategies, [3.0], x_val=x_val)
    if name == "fractional-sweep":
        layers = [synth_weights("channel_salient", 96, 384, seed) for seed in range(3)]
        budgets = [round(2.0 + 0.2 * i, 1) for i in range(11)]
        return run_comparison(layers, [StrategySpec.cmpq()], budgets)
    if name == "outlier-sweep":
        w, a = synth_weights("channel_salient", 128, 512, seed=5)
        w = plant_element_outliers(w, count=64, scale=40.0, seed=6)
        return outlier_sweep(w, a, [0.0, 0.0005, 0.001, 0.002, 0.003, 0.0045], 3.0)
    if name == "uniform-vs-nonuniform":
        layers = [synth_weights("student_t", 96, 512, seed) for seed in range(3)]
        report = BenchReport()
        for n_bits in (2, 3, 4):
            part = run_comparison(
                layers,
                [StrategySpec.uniform_rtn(n_bits), StrategySpec.flat(n_bits)],
                [float(n_bits)],
            )
            report.rows.extend(part.rows)
        return report
    raise ConfigError(f"unknown suite {name!r}")


SUITES = ("preliminary", "fractional-sweep", "outlier-sweep", "uniform-vs-nonuniform")
