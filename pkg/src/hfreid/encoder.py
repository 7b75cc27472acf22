"""Tiny part-based vision transformer and its EMA shadow copy.

The live encoder tokenizes fixed-size images into non-overlapping patches,
runs a short stack of transformer blocks, then branches into a global block
(class token -> global feature) and a weight-shared part block over T uniform
patch groups. The shadow encoder has the identical structure, never receives
gradients, and is refreshed as shadow = m * shadow + (1 - m) * live.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor


@dataclass
class EncoderConfig:
    image_h: int = 64
    image_w: int = 32
    channels: int = 3
    patch: int = 8
    dim: int = 64
    depth: int = 3
    heads: int = 4
    parts: int = 4
    mlp_ratio: int = 2
    num_classes: int = 16
    dtype: str = "float32"

    @property
    def grid(self):
        if self.image_h % self.patch or self.image_w % self.patch:
            raise ValueError(
                f"image {self.image_h}x{self.image_w} not divisible by patch {self.patch}")
        return self.image_h // self.patch, self.image_w // self.patch

    @property
    def num_patches(self):
        gh, gw = self.grid
        return gh * gw

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


def _trunc_normal(rng, shape, std=0.02):
    vals = rng.standard_normal(shape) * std
    return np.clip(vals, -2 * std, 2 * std)


def _block_params(rng, d, hidden, prefix, out):
    out[f"{prefix}.ln1.g"] = np.ones(d)
    out[f"{prefix}.ln1.b"] = np.zeros(d)
    for name in ("wq", "wk", "wv", "wo"):
        out[f"{prefix}.attn.{name}"] = _trunc_normal(rng, (d, d))
        out[f"{prefix}.attn.{name[-1]}b"] = np.zeros(d)
    out[f"{prefix}.ln2.g"] = np.ones(d)
    out[f"{prefix}.ln2.b"] = np.zeros(d)
    out[f"{prefix}.mlp.w1"] = _trunc_normal(rng, (d, hidden))
    out[f"{prefix}.mlp.b1"] = np.zeros(hidden)
    out[f"{prefix}.mlp.w2"] = _trunc_normal(rng, (hidden, d))
    out[f"{prefix}.mlp.b2"] = np.zeros(d)


def init_params(cfg, seed=0, requires_grad=True):
    """Fresh parameter dict: name -> Tensor. Deterministic under seed."""
    rng = np.random.default_rng(seed)
    d = cfg.dim
    n = cfg.num_patches
    raw = {}
    raw["patch.w"] = _trunc_normal(rng, (cfg.patch * cfg.patch * cfg.channels, d))
    raw["patch.b"] = np.zeros(d)
    raw["cls"] = _trunc_normal(rng, (1, d))
    raw["pos"] = np.zeros((1 + n, d))
    hidden = d * cfg.mlp_ratio
    for i in range(cfg.depth):
        _block_params(rng, d, hidden, f"block{i}", raw)
    _block_params(rng, d, hidden, "part_block", raw)
    _block_params(rng, d, hidden, "global_block", raw)
    raw["norm.g"] = np.ones(d)
    raw["norm.b"] = np.zeros(d)
    raw["head.w"] = _trunc_normal(rng, (d, cfg.num_classes))
    raw["head.b"] = np.zeros(cfg.num_classes)
    dt = cfg.np_dtype
    return {k: Tensor(v.astype(dt), requires_grad=requires_grad) for k, v in raw.items()}


def clone_shadow(params):
    """Structurally identical copy that never receives gradients."""
    return {k: Tensor(p.data.copy(), requires_grad=False) for k, p in params.items()}


def ema_update(shadow, live, momentum):
    """shadow <- momentum * shadow + (1 - momentum) * live, in place."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"momentum must be in [0, 1], got {momentum}")
    if shadow.keys() != live.keys():
        raise ValueError("shadow/live parameter structures differ")
    for k in shadow:
        if shadow[k].data.shape != live[k].data.shape:
            raise ValueError(f"shape mismatch at {k}")
        shadow[k].data *= momentum
        shadow[k].data += (1.0 - momentum) * live[k].data
    return shadow


# ---------------------------------------------------------------------------
# forward passes (batched; single-sample wrappers at the bottom)


def extract_patches(imgs, cfg):
    """(B, H, W, C) pixel block -> (B, N, patch*patch*C) row-major patches."""
    imgs = np.asarray(imgs, dtype=cfg.np_dtype)
    if imgs.ndim == 3:
        imgs = imgs[None]
    b, h, w, c = imgs.shape
    p = cfg.patch
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} not divisible by patch {p}")
    gh, gw = h // p, w // p
    cells = imgs.reshape(b, gh, p, gw, p, c).transpose(0, 1, 3, 2, 4, 5)
    return cells.reshape(b, gh * gw, p * p * c)


def tokenize(imgs, params, cfg):
    """Images -> (B, 1+N, D) token sequences: [cls, F(x_1)..F(x_N)] + pos."""
    patches = Tensor(extract_patches(imgs, cfg))
    b = patches.shape[0]
    proj = ag.linear(patches, params["patch.w"], params["patch.b"])
    cls = ag.expand(params["cls"], 0, b)  # (B, 1, D)
    seq = ag.concat([cls, proj], axis=1)
    return ag.add(seq, ag.expand(params["pos"], 0, b))


def tokens_for_subset(imgs, params, cfg, indices):
    """Token sequences for per-sample patch subsets, class token prepended.

    `indices` is (B, k) into the patch grid; each kept token reuses its
    original position-embedding row so spatial identity survives selection.
    """
    full = tokenize(imgs, params, cfg)
    idx = np.asarray(indices, dtype=np.intp)
    sub = ag.gather_batch(full, idx + 1)  # +1 skips the class token row
    cls = ag.take(full, [0], axis=1)
    return ag.concat([cls, sub], axis=1)


def _split_heads(x, heads):
    b, s, d = x.shape
    dh = d // heads
    return ag.transpose(ag.reshape(x, (b, s, heads, dh)), (0, 2, 1, 3))


def _merge_heads(x):
    b, h, s, dh = x.shape
    return ag.reshape(ag.transpose(x, (0, 2, 1, 3)), (b, s, h * dh))


def _block(x, params, prefix, heads):
    ln1 = ag.layer_norm(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    q = _split_heads(ag.linear(ln1, params[f"{prefix}.attn.wq"], params[f"{prefix}.attn.qb"]), heads)
    k = _split_heads(ag.linear(ln1, params[f"{prefix}.attn.wk"], params[f"{prefix}.attn.kb"]), heads)
    v = _split_heads(ag.linear(ln1, params[f"{prefix}.attn.wv"], params[f"{prefix}.attn.vb"]), heads)
    att = _merge_heads(ag.attention(q, k, v))
    x = ag.add(x, ag.linear(att, params[f"{prefix}.attn.wo"], params[f"{prefix}.attn.ob"]))
    ln2 = ag.layer_norm(x, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    h = ag.relu(ag.linear(ln2, params[f"{prefix}.mlp.w1"], params[f"{prefix}.mlp.b1"]))
    return ag.add(x, ag.linear(h, params[f"{prefix}.mlp.w2"], params[f"{prefix}.mlp.b2"]))


def _backbone(seq, params, cfg):
    x = seq
    for i in range(cfg.depth):
        x = _block(x, params, f"block{i}", cfg.heads)
    return x


def _class_token(x, params):
    cls = ag.reshape(ag.take(x, [0], axis=1), (x.shape[0], x.shape[2]))
    return ag.layer_norm(cls, params["norm.g"], params["norm.b"])


def encode_class(seq, params, cfg):
    """Backbone + global block; returns the encoded class token, (B, D).

    Accepts full sequences or mined subsequences (any length >= 2).
    """
    if seq.shape[1] < 2:
        raise ValueError("sequence needs the class token plus at least one patch")
    h = _backbone(seq, params, cfg)
    g = _block(h, params, "global_block", cfg.heads)
    return _class_token(g, params)


def encode_parts(seq, params, cfg):
    """Backbone, then global and part heads.

    Returns (f_g, f_parts) with shapes (B, D) and (B, T, D). Patch rows are
    split into T uniform groups; each group plus the class token goes through
    the shared part block.
    """
    b, s, d = seq.shape
    n = s - 1
    t = cfg.parts
    if n % t:
        raise ValueError(f"{n} patches not divisible into {t} parts")
    h = _backbone(seq, params, cfg)

    g = _block(h, params, "global_block", cfg.heads)
    f_g = _class_token(g, params)

    per = n // t
    groups = []
    for j in range(t):
        idx = [0] + list(range(1 + j * per, 1 + (j + 1) * per))
        groups.append(ag.take(h, idx, axis=1))
    stacked = ag.concat(groups, axis=0)  # (T*B, 1+per, D)
    enc = _block(stacked, params, "part_block", cfg.heads)
    cls = _class_token(enc, params)  # (T*B, D)
    f_parts = ag.transpose(ag.reshape(cls, (t, b, d)), (1, 0, 2))
    return f_g, f_parts


def classify(reps, params):
    """Shared identity head logits."""
    return ag.linear(reps, params["head.w"], params["head.b"])


def encode_image(img, params, cfg):
    """Single-image convenience wrapper: returns (f_g, f_parts) without batch."""
    seq = tokenize(img, params, cfg)
    f_g, f_parts = encode_parts(seq, params, cfg)
    return ag.reshape(f_g, (cfg.dim,)), ag.reshape(f_parts, (cfg.parts, cfg.dim))
