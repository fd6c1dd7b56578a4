"""End-to-end layer quantization.

Per layer: extract activation-salient channels -> allocate per-channel
precisions under the bit budget -> fit per-channel codebooks (first pass)
-> pull the worst quantization residuals out as element outliers -> refit
the channels that lost elements -> pack streams, build the CSR outlier
matrix, and attach storage/error stats.

Channels are independent, so the fitting work can be spread over worker
processes; results are reassembled in channel order and the output is
byte-identical for any worker count.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import inference, packing
from .allocation import allocate, nominal_avg_bits
from .calibration import ActivationNorms
from .errors import ConfigError, NumericError, ShapeError
from .layer import CmpqContainer, QuantizeConfig, QuantizedLayer
from .outliers import extract_activation_outliers, extract_quant_outliers, to_csr
from .quantizer import fit_centroids_sorted, kmeans_exact_1d, nearest_assign

__all__ = [
    "quantize_layer",
    "quantize_with_map",
    "quantize_model",
    "effective_bits",
    "QuantizeConfig",
]

TOOL_VERSION = "0.1.0"


def _pad_codebook(centroids, k):
    stored = np.empty(k, dtype=np.float16)
    stored[: centroids.size] = centroids.astype(np.float16)
    stored[centroids.size :] = stored[max(centroids.size - 1, 0)]
    return stored


def _fit_and_assign(row, keep_mask, bits, cfg: QuantizeConfig):
    """Fit one channel's codebook and assign every position.

    `keep_mask` selects the values the codebook is fitted on (element
    outliers are excluded from fitting, not zeroed); assignment always
    covers the full row so the packed stream stays dense.  Returns the
    fp16 codebook padded to 2**bits entries and uint8 assignments.
    """
    k = 1 << bits
    fit_values = row if keep_mask is None else row[keep_mask]
    if fit_values.size == 0:
        centroids = np.zeros(1)
    elif cfg.cluster_method == "exact":
        centroids = kmeans_exact_1d(fit_values, k)[0].centroids
    else:
        centroids = fit_centroids_sorted(
            np.sort(fit_values.astype(np.float64)), k, "lloyd", cfg.max_iter, cfg.tol
        )
    stored = _pad_codebook(centroids, k)
    # indices point at what is actually stored, so assign against fp16
    # values; tie-to-lower-index means the padding tail is never chosen
    assign = nearest_assign(row, stored.astype(np.float64))
    return stored, assign.astype(np.uint8)


def _quantize_chunk_scalar(rows, masks, bit_list, cfg):
    out = []
    for i in range(rows.shape[0]):
        mask = None if masks is None else masks[i]
        out.append(_fit_and_assign(rows[i], mask, int(bit_list[i]), cfg))
    return out


def _quantize_chunk(args):
    """Quantize one block of channels, batching rows that share a width.

    The batched path produces bit-identical results to _fit_and_assign
    (it delegates degenerate rows to the same scalar code), so chunking
    and worker counts never affect the artifact.
    """
    rows, masks, bit_list, cfg = args
    if cfg.cluster_method != "lloyd":
        return _quantize_chunk_scalar(rows, masks, bit_list, cfg)

    from . import batchfit

    count, d_out = rows.shape
    rows64 = rows.astype(np.float64)
    orders = np.argsort(rows64, axis=1, kind="stable")
    sorted_full = np.take_along_axis(rows64, orders, axis=1)

    stored_out: list = [None] * count
    assign_out: list = [None] * count
    for width in np.unique(bit_list):
        sel = np.flatnonzero(bit_list == width)
        k = 1 << int(width)

        if masks is None:
            fit_rows = sorted_full[sel]
            fit_len = np.full(sel.size, d_out, dtype=np.int64)
        else:
            fit_rows = np.empty((sel.size, d_out))
            fit_len = np.empty(sel.size, dtype=np.int64)
            for pos, ch in enumerate(sel):
                kept = np.sort(rows64[ch][masks[ch]])
                fit_len[pos] = kept.size
                fit_rows[pos, : kept.size] = kept
                fit_rows[pos, kept.size :] = kept[-1] if kept.size else 0.0

        fitted = []
        nonempty = fit_len > 0
        if nonempty.all():
            fitted = batchfit.fit_centroids_block(
                fit_rows, fit_len, k, cfg.max_iter, cfg.tol
            )
        else:
            for pos in range(sel.size):
                if fit_len[pos] == 0:
                    fitted.append(np.zeros(1))
                else:
                    fitted.append(
                        fit_centroids_sorted(
                            fit_rows[pos, : fit_len[pos]], k, "lloyd",
                            cfg.max_iter, cfg.tol,
                        )
                    )

        codebooks = np.empty((sel.size, k))
        real_k = np.empty(sel.size, dtype=np.int64)
        for pos, centroids in enumerate(fitted):
            stored = _pad_codebook(centroids, k)
            stored_out[sel[pos]] = stored
            codebooks[pos] = stored.astype(np.float64)
            real_k[pos] = centroids.size

        assigns, usable = batchfit.assign_block(
            sorted_full[sel], orders[sel], codebooks, real_k
        )
        for pos, ch in enumerate(sel):
            if usable[pos]:
                assign_out[ch] = assigns[pos]
            else:
                assign_out[ch] = nearest_assign(
                    rows64[ch], codebooks[pos]
                ).astype(np.uint8)
    return list(zip(stored_out, assign_out))


def _quantize_channels(w, channels, bits, cfg, threads, masks=None):
    """Fit + assign the given channels, optionally over worker processes.

    Returns dicts channel -> fp16 codebook and channel -> uint8 stream.
    """
    channels = np.asarray(channels, dtype=np.int64)
    tasks = []
    chunk = max(1, -(-channels.size // (threads * 4)) if threads > 1 else channels.size)
    for start in range(0, channels.size, chunk):
        idx = channels[start : start + chunk]
        task_masks = None if masks is None else [masks[c] for c in idx]
        tasks.append((w[idx], task_masks, bits[idx], cfg))

    if threads > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_quantize_chunk, tasks))
    else:
        results = [_quantize_chunk(t) for t in tasks]

    codebooks: dict[int, np.ndarray] = {}
    streams: dict[int, np.ndarray] = {}
    pos = 0
    for task_out in results:
        for stored, assign in task_out:
            ch = int(channels[pos])
            codebooks[ch] = stored
            streams[ch] = assign
            pos += 1
    return codebooks, streams


def _reconstruct_quantized(shape, codebooks, assignments):
    out = np.zeros(shape, dtype=np.float32)
    for ch, assign in assignments.items():
        out[ch] = codebooks[ch].astype(np.float32)[assign]
    return out


def quantize_with_map(
    w,
    precision,
    cfg: QuantizeConfig,
    name: str = "layer",
    threads: int = 1,
) -> QuantizedLayer:
    """Quantize under an externally supplied precision map.

    This is the back half of quantize_layer; benchmarks use it to evaluate
    fixed precision policies.  fp16 channels in the map are stored in the
    CSR part; element outliers are extracted iff cfg.ratio_q > 0.
    """
    w = np.asarray(w, dtype=np.float32)
    if w.ndim != 2:
        raise ShapeError(f"weight matrix must be 2-D, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise NumericError("weights contain non-finite values")
    d_in, d_out = w.shape
    if precision.bits.shape[0] != d_in:
        raise ShapeError("precision map length does not match d_in")

    # fp16 channels are carried by the CSR side; zero them in the working copy
    from .outliers import ChannelOutlierSet, ElementOutlierSet

    protected = precision.fp16_channels
    ch_set = ChannelOutlierSet(
        indices=protected, rows=w[protected].astype(np.float16)
    )
    w_prime = w.copy()
    w_prime[protected] = 0.0

    quantized = precision.quantized_channels()
    codebooks, assignments = _quantize_channels(
        w_prime, quantized, precision.bits, cfg, threads
    )

    if cfg.ratio_q > 0:
        w_q = _reconstruct_quantized(w.shape, codebooks, assignments)
        el_set = extract_quant_outliers(w_prime, w_q, cfg.ratio_q, protected=protected)
        if el_set.count:
            masks = {}
            affected = np.unique(el_set.rows)
            for ch in affected:
                keep = np.ones(d_out, dtype=bool)
                keep[el_set.cols[el_set.rows == ch]] = False
                masks[int(ch)] = keep
            re_cb, re_streams = _quantize_channels(
                w_prime, affected, precision.bits, cfg, threads, masks=masks
            )
            codebooks.update(re_cb)
            assignments.update(re_streams)
    else:
        el_set = ElementOutlierSet(
            rows=np.empty(0, dtype=np.int64),
            cols=np.empty(0, dtype=np.int64),
            values=np.empty(0, dtype=np.float16),
        )

    csr = to_csr(ch_set, el_set, d_in, d_out)
    layer = QuantizedLayer(
        name=name,
        d_in=d_in,
        d_out=d_out,
        precision=precision,
        codebooks=[codebooks.get(ch) for ch in range(d_in)],
        streams=[
            packing.pack_indices(assignments[ch], int(precision.bits[ch]))
            if ch in assignments
            else None
            for ch in range(d_in)
        ],
        outliers=csr,
        stats={},
    )

    w_hat = inference.dequantize_layer(layer)
    diff = w.astype(np.float64) - w_hat.astype(np.float64)
    denom = float(np.linalg.norm(w.astype(np.float64)))
    fro = float(np.linalg.norm(diff))
    layer.stats = {
        "recon_mse": float((diff * diff).mean()),
        "frobenius_rel": fro / denom if denom else fro,
        "nominal_bits": nominal_avg_bits(precision),
        "effective_bits": effective_bits(layer),
    }
    return layer


def quantize_layer(
    w,
    norms,
    cfg: QuantizeConfig,
    name: str = "layer",
    threads: int = 1,
) -> QuantizedLayer:
    """Run the full staged flow on one weight matrix."""
    w = np.asarray(w, dtype=np.float32)
    if w.ndim != 2:
        raise ShapeError(f"weight matrix must be 2-D, got shape {w.shape}")
    a = np.asarray(getattr(norms, "values", norms), dtype=np.float64)
    if a.shape != (w.shape[0],):
        raise ShapeError(
            f"norms length {a.shape[0] if a.ndim == 1 else a.shape} "
            f"does not match d_in {w.shape[0]}"
        )
    _, ch_set = extract_activation_outliers(w, a, cfg.ratio_act)
    precision = allocate(a, cfg.budget, excluded=ch_set.indices)
    return quantize_with_map(w, precision, cfg, name=name, threads=threads)


def effective_bits(layer: QuantizedLayer) -> float:
    """Stored bits per weight: streams + codebooks + CSR + precision map."""
    bits = layer.precision.bits
    widths = bits[bits > 0].astype(np.int64)
    nnz = layer.outliers.nnz
    total = (
        int(widths.sum()) * layer.d_out
        + 16 * int((1 << widths).sum())
        + 16 * nnz
        + 32 * (nnz + layer.d_in + 1)
        + 2 * layer.d_in
    )
    return total / (layer.d_in * layer.d_out)


def quantize_model(
    tensors,
    norms_by_layer: dict,
    cfg: QuantizeConfig,
    threads: int = 1,
) -> CmpqContainer:
    """Quantize every tensor in the set; norms are required per layer."""
    entries = tensors.entries if hasattr(tensors, "entries") else tensors
    layers = []
    for name, w in entries.items():
        if name not in norms_by_layer:
            raise ConfigError(f"no activation norms supplied for layer {name!r}")
        norms = norms_by_layer[name]
        if not isinstance(norms, ActivationNorms):
            norms = ActivationNorms(values=np.asarray(norms, dtype=np.float64))
        layers.append(quantize_layer(w, norms, cfg, name=name, threads=threads))
    metadata = {
        "tool": "cmpq",
        "tool_version": TOOL_VERSION,
        "budget": cfg.budget,
        "ratio_act": cfg.ratio_act,
        "ratio_q": cfg.ratio_q,
        "denominator_variant": cfg.denominator_variant,
        "cluster_method": cfg.cluster_method,
    }
    return CmpqContainer(layers=layers, metadata=metadata)
