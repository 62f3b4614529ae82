"""Latent weight distributions of a quantized layer."""

from __future__ import annotations

import csv

import numpy as np

from ..quantize import signed_binary_values, ternary_values

SERIES = ("total", "beta_pos", "beta_neg", "effectual", "ineffectual")


def weight_histogram(latent, region_map=None, delta=0.0, bins=100, value_range=(-1.0, 1.0)):
    """Bin counts of latent RSCK weights.

    Returns a dict with ``edges`` and one count array per series: all
    weights, weights in beta=+1 and beta=-1 regions, and weights whose
    quantized value is nonzero (effectual) or zero (ineffectual). Without a
    region map the split uses the ternary quantizer and the beta series are
    empty. Values exactly at the upper range edge land in the last bin.
    """
    W = np.asarray(latent, dtype=np.float32)
    edges = np.linspace(value_range[0], value_range[1], bins + 1)
    if region_map is not None:
        beta = np.broadcast_to(region_map.beta_tensor(*W.shape[:2]), W.shape)
        q = signed_binary_values(W, beta, delta)
        pos_mask, neg_mask = beta > 0, beta < 0
    else:
        q = ternary_values(W, delta)
        pos_mask = neg_mask = np.zeros(W.shape, dtype=bool)

    def hist(mask):
        return np.histogram(W[mask], bins=edges)[0]

    everything = np.ones(W.shape, dtype=bool)
    return {
        "edges": edges,
        "total": hist(everything),
        "beta_pos": hist(pos_mask),
        "beta_neg": hist(neg_mask),
        "effectual": hist(q != 0),
        "ineffectual": hist(q == 0),
        "delta": float(delta),
    }


def write_histogram_csv(path, hist, header: dict | None = None):
    with open(path, "w", newline="") as fh:
        for k, v in (header or {}).items():
            fh.write(f"# {k}={v}\n")
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", *SERIES])
        e = hist["edges"]
        for i in range(len(e) - 1):
            w.writerow([f"{e[i]:.6g}", f"{e[i + 1]:.6g}", *(int(hist[s][i]) for s in SERIES)])


def find_peaks(counts, positions) -> dict:
    """For each bin index in ``positions`` report whether it beats both
    neighbours (edge bins compare against their single neighbour)."""
    counts = np.asarray(counts)
    out = {}
    for i in positions:
        left = counts[i - 1] if i > 0 else -1
        right = counts[i + 1] if i + 1 < len(counts) else -1
        out[int(i)] = bool(counts[i] > left and counts[i] > right)
    return out


def bin_index(edges, value) -> int:
    return int(np.clip(np.searchsorted(edges, value, side="right") - 1, 0, len(edges) - 2))


def merge_histograms(hists) -> dict:
    hists = list(hists)
    if not hists:
        raise ValueError("no histograms to merge")
    edges = hists[0]["edges"]
    out = {"edges": edges, "delta": float(np.mean([h["delta"] for h in hists]))}
    for s in SERIES:
        out[s] = np.sum([h[s] for h in hists], axis=0)
    return out


def distribution_report(latents, region_maps, deltas, bins=100) -> dict:
    """Shape statistics of trained latent weights, pooled over layers.

    ``latents``, ``region_maps`` and ``deltas`` are parallel sequences, one
    entry per quantized layer. Peaks are looked for at the outermost bins
    (weights held at the clamp) and within one bin of +-delta.
    """
    hists = [weight_histogram(W, m, d, bins) for W, m, d in zip(latents, region_maps, deltas)]
    h = merge_histograms(hists)
    flat = np.concatenate([np.ravel(W) for W in latents])
    pos, neg = [], []
    for W, m in zip(latents, region_maps):
        if m is None:
            continue
        beta = np.broadcast_to(m.beta_tensor(*np.shape(W)[:2]), np.shape(W))
        pos.append(np.asarray(W)[beta > 0])
        neg.append(np.asarray(W)[beta < 0])
    mean_pos = float(np.mean(np.concatenate(pos))) if pos else float("nan")
    mean_neg = float(np.mean(np.concatenate(neg))) if neg else float("nan")
    total = h["total"]
    e = h["edges"]

    def peak_near(value):
        i = bin_index(e, value)
        cands = [j for j in (i - 1, i, i + 1) if 0 <= j < len(total)]
        return any(find_peaks(total, cands).values())

    ends = find_peaks(total, [0, len(total) - 1])
    return {
        "mean": float(flat.mean()),
        "std": float(flat.std()),
        "mean_over_std": float(abs(flat.mean()) / flat.std()),
        "mean_beta_pos": mean_pos,
        "mean_beta_neg": mean_neg,
        "peak_at_minus_one": ends[0],
        "peak_at_plus_one": ends[len(total) - 1],
        "peak_near_minus_delta": peak_near(-h["delta"]),
        "peak_near_plus_delta": peak_near(h["delta"]),
        "delta": h["delta"],
        "histogram": h,
    }
