"""Cross-modal high-frequency patch mining and the enhanced-representation loss.

IR images are scored by wavelet high-band energy; the top-K patches form an
IR subsequence. The EMA shadow encoder embeds that subsequence and the full
RGB sequence, their dot-product similarity picks the K most correlated RGB
patches, and both subsequences are re-encoded by the live encoder to produce
the enhanced class-token representations. The mining path itself carries no
gradient.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import encoder as enc
from . import instrumentation, objectives, wavelet


@dataclass
class Subsequence:
    """Selected patch indices for one sample, strictly increasing."""
    indices: np.ndarray
    modality: str


def fraction_to_k(fraction, n):
    """Realize the top-K fraction as a count: floor(fraction * N), min 1."""
    return max(1, int(np.floor(fraction * n)))


def ir_highfreq_indices(ir_img, k, cfg):
    """Top-k patch indices of an IR image by wavelet high-band response."""
    rows, cols = cfg.grid
    n = rows * cols
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} patches")
    instrumentation.bump("mining")
    scores = wavelet.patch_scores(np.asarray(ir_img, dtype=np.float64), rows, cols)
    return wavelet.topk_select(scores, k)


def mine_ir_highfreq(ir_img, k, params, cfg):
    """IR high-freq subsequence: token sequence plus selected indices."""
    idx = ir_highfreq_indices(ir_img, k, cfg)
    tokens = enc.tokens_for_subset(ir_img, params, cfg, idx[None, :])
    return tokens, Subsequence(indices=idx, modality="ir")


def cross_modal_similarity(ir_sub_encoded, rgb_seq_encoded):
    """Raw dot products between IR subsequence and RGB patch embeddings.

    Inputs are patch embeddings with the class token already excluded:
    (M, D) and (N, D) numpy arrays from the shadow encoder.
    """
    a = np.asarray(ir_sub_encoded, dtype=np.float64)
    b = np.asarray(rgb_seq_encoded, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"similarity: shapes {a.shape} and {b.shape} do not conform")
    return a @ b.T


def correlation_vector(sim):
    """Column means of the similarity matrix: one score per RGB patch."""
    sim = np.asarray(sim, dtype=np.float64)
    if sim.shape[0] < 1:
        raise ValueError("similarity matrix needs at least one IR patch row")
    return sim.mean(axis=0)


def select_rgb_correlated(scores, k):
    """Indices of the k RGB patches most correlated with the IR subsequence."""
    return wavelet.topk_select(np.asarray(scores, dtype=np.float64), k)


def shadow_patch_embeddings(tokens, shadow_params, cfg):
    """Final-layer patch embeddings from the shadow encoder, class token dropped."""
    with ag.no_grad():
        h = enc._backbone(tokens, shadow_params, cfg)
        g = enc._block(h, shadow_params, "global_block", cfg.heads)
    return g.data[:, 1:, :]


def mine_batch(ir_imgs, rgb_imgs, k, live_params, shadow_params, cfg):
    """Per-slot-pair mining for a batch of IR/RGB images.

    Returns (ir_indices, rgb_indices), each (B, k), computed entirely under
    the shadow encoder with no gradient tape.
    """
    instrumentation.bump("mining")
    ir_imgs = np.asarray(ir_imgs)
    rgb_imgs = np.asarray(rgb_imgs)
    rows, cols = cfg.grid
    n = rows * cols
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} patches")
    ir_idx = np.stack([
        wavelet.topk_select(wavelet.patch_scores(img.astype(np.float64), rows, cols), k)
        for img in ir_imgs
    ])
    with ag.no_grad():
        ir_tokens = enc.tokens_for_subset(ir_imgs, shadow_params, cfg, ir_idx)
        rgb_tokens = enc.tokenize(rgb_imgs, shadow_params, cfg)
    ir_emb = shadow_patch_embeddings(ir_tokens, shadow_params, cfg)
    rgb_emb = shadow_patch_embeddings(rgb_tokens, shadow_params, cfg)
    # batched raw dot products, then column means -> per-RGB-patch correlation
    sims = np.matmul(ir_emb, rgb_emb.swapaxes(1, 2))
    corr = sims.mean(axis=1)
    rgb_idx = np.stack([wavelet.topk_select(s, k) for s in corr])
    return ir_idx, rgb_idx


def mine_batch_pooled(ir_imgs, rgb_imgs, k, live_params, shadow_params, cfg):
    """Pooled variant: each IR instance mines against all RGB patches pooled.

    The correlation for each RGB image averages similarities from every IR
    subsequence in the batch rather than its slot partner.
    """
    instrumentation.bump("mining")
    rows, cols = cfg.grid
    n = rows * cols
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} patches")
    ir_imgs = np.asarray(ir_imgs)
    rgb_imgs = np.asarray(rgb_imgs)
    ir_idx = np.stack([
        wavelet.topk_select(wavelet.patch_scores(img.astype(np.float64), rows, cols), k)
        for img in ir_imgs
    ])
    with ag.no_grad():
        ir_tokens = enc.tokens_for_subset(ir_imgs, shadow_params, cfg, ir_idx)
        rgb_tokens = enc.tokenize(rgb_imgs, shadow_params, cfg)
    ir_emb = shadow_patch_embeddings(ir_tokens, shadow_params, cfg)
    rgb_emb = shadow_patch_embeddings(rgb_tokens, shadow_params, cfg)
    pooled = ir_emb.reshape(-1, ir_emb.shape[-1])  # all IR high-freq patches
    corr = np.matmul(rgb_emb, pooled.T).mean(axis=2)
    rgb_idx = np.stack([wavelet.topk_select(s, k) for s in corr])
    return ir_idx, rgb_idx


def enhanced_representations(ir_imgs, rgb_imgs, ir_idx, rgb_idx, live_params, cfg):
    """Encode both mined subsequences with the live encoder: (z_I, z_R).

    Gradients flow into the live parameters; the selection indices are fixed
    constants by this point.
    """
    ir_tokens = enc.tokens_for_subset(ir_imgs, live_params, cfg, ir_idx)
    rgb_tokens = enc.tokens_for_subset(rgb_imgs, live_params, cfg, rgb_idx)
    z_i = enc.encode_class(ir_tokens, live_params, cfg)
    z_r = enc.encode_class(rgb_tokens, live_params, cfg)
    return z_i, z_r


def loss_high(z_i, z_r, labels_ir, labels_rgb, classifier, margin=0.3):
    """Identity objective on the enhanced representations: CE + triplet each."""
    term_i = ag.add(objectives.cross_entropy(z_i, labels_ir, classifier),
                    objectives.triplet(z_i, labels_ir, margin))
    term_r = ag.add(objectives.cross_entropy(z_r, labels_rgb, classifier),
                    objectives.triplet(z_r, labels_rgb, margin))
    return ag.add(term_i, term_r)
