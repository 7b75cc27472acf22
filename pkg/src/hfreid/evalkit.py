"""Retrieval metrics, pair-distance statistics, and report artifacts.

CMC and mAP over a query x gallery distance matrix, the positive/negative
cross-modal distance histogram, patch-selection overlays, and matplotlib
figure rendering for the CLI report path.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import write_pnm


@dataclass
class RetrievalResult:
    distances: np.ndarray  # (Q, G)
    cmc: np.ndarray  # rank -> accuracy, 1-based rank at index 0
    mean_ap: float
    pos_mean: float = float("nan")
    neg_mean: float = float("nan")
    gap: float = float("nan")

    def summary(self):
        return {
            "rank1": float(self.cmc[0]),
            "rank5": float(self.cmc[min(4, len(self.cmc) - 1)]),
            "rank10": float(self.cmc[min(9, len(self.cmc) - 1)]),
            "mAP": float(self.mean_ap),
            "pos_mean": self.pos_mean,
            "neg_mean": self.neg_mean,
            "gap": self.gap,
        }


def _ranked_gallery(dist_row):
    # stable sort: ties in distance broken by gallery index
    return np.argsort(dist_row, kind="stable")


def cmc(dist, q_labels, g_labels, max_rank=None):
    """Cumulative matching characteristic curve.

    cmc[k-1] is the fraction of queries whose k nearest gallery items contain
    a same-identity match.
    """
    dist = np.asarray(dist, dtype=np.float64)
    q_labels = np.asarray(q_labels)
    g_labels = np.asarray(g_labels)
    if not np.all(np.isfinite(dist)):
        raise ValueError("distance matrix contains non-finite values")
    nq, ng = dist.shape
    max_rank = ng if max_rank is None else min(max_rank, ng)
    curve = np.zeros(max_rank)
    for qi in range(nq):
        hits = g_labels[_ranked_gallery(dist[qi])] == q_labels[qi]
        if not hits.any():
            raise ValueError(f"query {qi} has no positive in the gallery")
        first = int(np.argmax(hits))
        if first < max_rank:
            curve[first:] += 1.0
    return curve / nq


def mean_ap(dist, q_labels, g_labels):
    """Mean over queries of average precision along the ranked gallery."""
    dist = np.asarray(dist, dtype=np.float64)
    q_labels = np.asarray(q_labels)
    g_labels = np.asarray(g_labels)
    aps = []
    for qi in range(dist.shape[0]):
        hits = (g_labels[_ranked_gallery(dist[qi])] == q_labels[qi]).astype(np.float64)
        total = hits.sum()
        if total == 0:
            raise ValueError(f"query {qi} has no positive in the gallery")
        precision = np.cumsum(hits) / np.arange(1, hits.size + 1)
        aps.append(float((precision * hits).sum() / total))
    return float(np.mean(aps))


def pair_distance_stats(embeddings, labels, modalities, bins=32):
    """Cross-modal positive/negative pair distance means, gap, and histogram."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    modalities = np.asarray(modalities)
    if np.unique(labels).size < 2:
        raise ValueError("need at least 2 identities")
    cross = modalities[:, None] != modalities[None, :]
    iu = np.triu_indices(len(labels), k=1)
    cross_pairs = cross[iu]
    if not cross_pairs.any():
        raise ValueError("no cross-modal pairs present")
    diff = embeddings[:, None, :] - embeddings[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=2))[iu]
    same_id = (labels[:, None] == labels[None, :])[iu]
    pos = dist[cross_pairs & same_id]
    neg = dist[cross_pairs & ~same_id]
    pos_mean = float(pos.mean()) if pos.size else float("nan")
    neg_mean = float(neg.mean()) if neg.size else float("nan")
    hi = max(dist.max(), 1e-12)
    edges = np.linspace(0.0, hi, bins + 1)
    hist_pos, _ = np.histogram(pos, bins=edges)
    hist_neg, _ = np.histogram(neg, bins=edges)
    return {
        "pos_mean": pos_mean,
        "neg_mean": neg_mean,
        "gap": neg_mean - pos_mean,
        "bin_left": edges[:-1],
        "count_pos": hist_pos,
        "count_neg": hist_neg,
    }


def retrieval_result(q_emb, g_emb, q_labels, g_labels, max_rank=20):
    q = np.asarray(q_emb, dtype=np.float64)
    g = np.asarray(g_emb, dtype=np.float64)
    d2 = (q**2).sum(1)[:, None] + (g**2).sum(1)[None, :] - 2.0 * q @ g.T
    dist = np.sqrt(np.maximum(d2, 0.0))
    return RetrievalResult(
        distances=dist,
        cmc=cmc(dist, q_labels, g_labels, max_rank),
        mean_ap=mean_ap(dist, q_labels, g_labels),
    )


def patch_cell(index, grid_rows, grid_cols, patch):
    """Index -> (row0, col0) pixel origin of the patch cell, row-major."""
    if not 0 <= index < grid_rows * grid_cols:
        raise ValueError(f"patch index {index} outside {grid_rows}x{grid_cols} grid")
    r, c = divmod(index, grid_cols)
    return r * patch, c * patch


def dump_patch_overlay(img, indices, path, grid_rows, grid_cols, patch):
    """Write a PPM with the selected patch cells brightened and bordered."""
    img = np.asarray(img, dtype=np.float64).copy()
    for idx in indices:
        y0, x0 = patch_cell(int(idx), grid_rows, grid_cols, patch)
        cell = img[y0:y0 + patch, x0:x0 + patch]
        cell *= 0.5
        cell += 0.5
        cell[0, :] = cell[-1, :] = (1.0, 0.2, 0.2)
        cell[:, 0] = cell[:, -1] = (1.0, 0.2, 0.2)
    write_pnm(path, np.clip(img, 0.0, 1.0))
    return path


# ---------------------------------------------------------------------------
# report artifacts (delimited output + matplotlib figures)


def write_histogram_csv(stats, path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["bin_left", "count_pos", "count_neg"])
        for left, cp, cn in zip(stats["bin_left"], stats["count_pos"], stats["count_neg"]):
            wr.writerow([f"{left:.6f}", int(cp), int(cn)])


def write_metrics_json(result, path, extra=None):
    blob = result.summary()
    blob["cmc"] = [float(x) for x in result.cmc]
    if extra:
        blob.update(extra)
    Path(path).write_text(json.dumps(blob, indent=2))


def _mpl():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_cmc(result, path):
    plt = _mpl()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ranks = np.arange(1, len(result.cmc) + 1)
    ax.plot(ranks, result.cmc, marker="o", ms=3)
    ax.set_xlabel("rank")
    ax.set_ylabel("matching rate")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_distance_hist(stats, path):
    plt = _mpl()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    width = stats["bin_left"][1] - stats["bin_left"][0] if len(stats["bin_left"]) > 1 else 0.1
    ax.bar(stats["bin_left"], stats["count_pos"], width=width, align="edge",
           alpha=0.6, label="positive pairs")
    ax.bar(stats["bin_left"], stats["count_neg"], width=width, align="edge",
           alpha=0.6, label="negative pairs")
    ax.set_xlabel("euclidean distance")
    ax.set_ylabel("pair count")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_loss_curve(records, path):
    """records: list of per-iteration dicts with 'iter' and loss terms."""
    plt = _mpl()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    iters = [r["iter"] for r in records]
    for key in ("overall", "base", "high", "i2p", "p2p", "p2p_pp"):
        if any(key in r for r in records):
            ax.plot(iters, [r.get(key, float("nan")) for r in records], label=key, lw=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7, ncol=3)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
