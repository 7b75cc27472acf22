"""Training objectives: identity losses, prototype contrast, and composition.

All losses take and return autodiff Tensors so gradients reach the encoder.
Contrastive terms use the cosine-kernel exp(cos(a, b) / tau) and are written
in the -log(intra / (intra + inter)) form, so each one is non-negative and
driven toward zero as same-identity similarity dominates.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor


@dataclass
class LossReport:
    """Named scalar terms of one iteration, plus optional gradient norms."""
    base: float = 0.0
    high: float = 0.0
    i2p: float = 0.0
    p2p: float = 0.0
    p2p_pp: float = 0.0
    inst: float = 0.0
    overall: float = 0.0
    grad_norms: dict = field(default_factory=dict)

    def as_dict(self):
        return {
            "base": self.base, "high": self.high, "i2p": self.i2p,
            "p2p": self.p2p, "p2p_pp": self.p2p_pp, "inst": self.inst,
            "overall": self.overall,
        }


def _as2d(reps):
    reps = reps if isinstance(reps, Tensor) else Tensor(reps)
    if reps.ndim == 1:
        reps = ag.reshape(reps, (1, reps.shape[0]))
    return reps


def cross_entropy(reps, labels, classifier):
    """Mean -log softmax probability of the true identity.

    `classifier` is the shared head as a (weights, bias) pair.
    """
    reps = _as2d(reps)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    w, b = classifier
    num_classes = w.shape[1]
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"label out of range [0, {num_classes})")
    logp = ag.log_softmax(ag.linear(reps, w, b))
    onehot = np.zeros((labels.size, num_classes), dtype=logp.data.dtype)
    onehot[np.arange(labels.size), labels] = 1.0
    picked = ag.sum_(ag.mul(logp, Tensor(onehot)), axis=1)
    return ag.scale(ag.mean(picked), -1.0)


def pairwise_distances(reps):
    """(B, B) Euclidean distance matrix as a Tensor."""
    b = reps.shape[0]
    rows = ag.expand(reps, 1, b)
    cols = ag.expand(reps, 0, b)
    return ag.euclidean(rows, cols, axis=-1)


def triplet(reps, labels, margin=0.3):
    """Batch-hard triplet loss with Euclidean distances.

    Per anchor: max(0, d(a, hardest positive) - d(a, hardest negative) + margin),
    averaged over the batch.
    """
    reps = _as2d(reps)
    labels = np.asarray(labels, dtype=np.intp)
    b = reps.shape[0]
    if np.unique(labels).size < 2:
        raise ValueError("triplet loss needs at least 2 identities in the batch")
    dist = pairwise_distances(reps)
    same = labels[:, None] == labels[None, :]
    d = dist.data
    pos_idx = np.where(same, d, -np.inf).argmax(axis=1)
    neg_idx = np.where(same, np.inf, d).argmin(axis=1)
    flat = ag.reshape(dist, (b * b,))
    pos_d = ag.take(flat, np.arange(b) * b + pos_idx)
    neg_d = ag.take(flat, np.arange(b) * b + neg_idx)
    hinge = ag.relu(ag.add(ag.sub(pos_d, neg_d), Tensor(np.full(b, margin, dtype=d.dtype))))
    return ag.mean(hinge)


def proto_nce(v, c, negatives, taus):
    """Softmax contrast of an instance against its prototype and negatives.

    `taus` holds the per-prototype temperature for [c, *negatives].
    """
    if not negatives:
        raise ValueError("proto_nce needs at least one negative prototype")
    protos = [c] + list(negatives)
    if len(taus) != len(protos):
        raise ValueError("one temperature per prototype required")
    if any(t <= 0 for t in taus):
        raise ValueError("temperatures must be positive")
    v = v if isinstance(v, Tensor) else Tensor(v)
    logits = []
    for proto, tau in zip(protos, taus):
        proto = proto if isinstance(proto, Tensor) else Tensor(proto)
        dot = ag.sum_(ag.mul(v, proto))
        logits.append(ag.reshape(ag.scale(dot, 1.0 / tau), (1,)))
    logp = ag.log_softmax(ag.concat(logits, axis=0))
    return ag.scale(ag.sum_(ag.take(logp, [0])), -1.0)


def loss_base(f_g, f_parts, labels, classifier, margin=0.3):
    """Global + part identity objective.

    CE(f_g) + Tri(f_g) + (1/T) sum_j [CE(f_j) + Tri(f_j)] with f_parts (B, T, D).
    """
    total = ag.add(cross_entropy(f_g, labels, classifier), triplet(f_g, labels, margin))
    t = f_parts.shape[1]
    part_sum = None
    for j in range(t):
        fj = ag.reshape(ag.take(f_parts, [j], axis=1), (f_parts.shape[0], f_parts.shape[2]))
        term = ag.add(cross_entropy(fj, labels, classifier), triplet(fj, labels, margin))
        part_sum = term if part_sum is None else ag.add(part_sum, term)
    return ag.add(total, ag.scale(part_sum, 1.0 / t))


def kernel_sim(a, b, tau):
    """exp(cosine(a, b) / tau) for single vectors."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    a = ag.normalize_rows(ag.reshape(a if isinstance(a, Tensor) else Tensor(a), (1, -1)))
    b = ag.normalize_rows(ag.reshape(b if isinstance(b, Tensor) else Tensor(b), (1, -1)))
    cos = ag.sum_(ag.mul(a, b))
    return ag.exp(ag.scale(cos, 1.0 / tau))


def _gather_rows(mat, idx):
    return ag.take(mat, np.asarray(idx, dtype=np.intp), axis=0)


def _instances_per_identity(labels):
    labels = np.asarray(labels, dtype=np.intp)
    ids, counts = np.unique(labels, return_counts=True)
    if np.unique(counts).size != 1:
        raise ValueError("batch is unbalanced: identities have unequal instance counts")
    return ids, int(counts[0])


def loss_i2p(z_i, z_r, f_gi, f_gr, labels, protos):
    """Instance-to-prototype distance pull for both streams.

    `protos` maps identity -> dict with Tensors under keys
    'p_ir', 'p_rgb', 'p', 'q_ir', 'q_rgb', 'q'. Per stream: modality terms are
    normalized by P (instances per identity per modality) and the fused term
    by 2P, with instances of both modalities measured against the fused
    prototype.
    """
    labels = np.asarray(labels, dtype=np.intp)
    ids, per = _instances_per_identity(labels)
    for c in ids:
        if c not in protos:
            raise KeyError(f"identity {c} has no initialized prototype")
    order = {c: i for i, c in enumerate(ids)}
    rows = np.array([order[c] for c in labels], dtype=np.intp)

    def fam(key):
        return ag.concat([ag.reshape(protos[c][key], (1, -1)) for c in ids], axis=0)

    def stream(inst_a, inst_b, key_a, key_b, key_fused):
        da = ag.euclidean(inst_a, _gather_rows(fam(key_a), rows), axis=-1)
        db = ag.euclidean(inst_b, _gather_rows(fam(key_b), rows), axis=-1)
        fused = fam(key_fused)
        df_a = ag.euclidean(inst_a, _gather_rows(fused, rows), axis=-1)
        df_b = ag.euclidean(inst_b, _gather_rows(fused, rows), axis=-1)
        t = ag.add(ag.scale(ag.add(ag.sum_(da), ag.sum_(db)), 1.0 / per),
                   ag.scale(ag.add(ag.sum_(df_a), ag.sum_(df_b)), 1.0 / (2 * per)))
        return t

    high = stream(_as2d(z_i), _as2d(z_r), "p_ir", "p_rgb", "p")
    glob = stream(_as2d(f_gi), _as2d(f_gr), "q_ir", "q_rgb", "q")
    return ag.add(high, glob)


def _set_contrast(anchors, targets, num_ids, tau):
    """Shared core of the prototype-set contrast losses.

    `anchors`/`targets` are (3C, D) Tensors, rows grouped by identity.
    Numerator: same identity, j != i. Denominator adds all other identities.
    Returns -(1/C) * sum over anchors of log(intra / (intra + inter)).
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if num_ids < 2:
        raise ValueError("prototype contrast needs at least 2 identities")
    an = ag.normalize_rows(anchors)
    tn = ag.normalize_rows(targets)
    sim = ag.exp(ag.scale(ag.matmul(an, ag.transpose(tn, (1, 0))), 1.0 / tau))
    rows = 3 * num_ids
    group = np.repeat(np.arange(num_ids), 3)
    same_id = group[:, None] == group[None, :]
    intra_mask = (same_id & ~np.eye(rows, dtype=bool)).astype(sim.data.dtype)
    inter_mask = (~same_id).astype(sim.data.dtype)
    intra = ag.sum_(ag.mul(sim, Tensor(intra_mask)), axis=1)
    inter = ag.sum_(ag.mul(sim, Tensor(inter_mask)), axis=1)
    frac = ag.sub(ag.log(intra), ag.log(ag.add(intra, inter)))
    return ag.scale(ag.sum_(frac), -1.0 / num_ids)


def _stack_sets(sets):
    # sets: ordered list over identities of 3-element prototype lists
    rows = []
    for triple in sets:
        if len(triple) != 3:
            raise ValueError("each prototype set must hold exactly 3 vectors")
        rows.extend(ag.reshape(t if isinstance(t, Tensor) else Tensor(t), (1, -1))
                    for t in triple)
    return ag.concat(rows, axis=0)


def loss_p2p(p_sets, q_sets, tau):
    """Prototype-to-prototype contrast, high-freq plus global streams.

    `p_sets`/`q_sets`: ordered lists over identities of [ir, rgb, fused]
    prototype vectors.
    """
    c = len(p_sets)
    p = _stack_sets(p_sets)
    q = _stack_sets(q_sets)
    return ag.add(_set_contrast(p, p, c, tau), _set_contrast(q, q, c, tau))


def loss_p2p_plus(p_sets, q_sets, tau):
    """Hybrid contrast: global anchors against stop-gradient high-freq targets."""
    c = len(p_sets)
    q = _stack_sets(q_sets)
    p = ag.stop_gradient(_stack_sets(p_sets))
    return _set_contrast(q, p, c, tau)


def _instance_contrast(anchors, targets, labels, tau):
    if tau <= 0:
        raise ValueError("temperature must be positive")
    labels = np.asarray(labels, dtype=np.intp)
    if np.unique(labels).size < 2:
        raise ValueError("instance contrast needs at least 2 identities")
    b = anchors.shape[0]
    an = ag.normalize_rows(anchors)
    tn = ag.normalize_rows(targets)
    sim = ag.exp(ag.scale(ag.matmul(an, ag.transpose(tn, (1, 0))), 1.0 / tau))
    same = (labels[:, None] == labels[None, :]).astype(sim.data.dtype)
    intra = ag.sum_(ag.mul(sim, Tensor(same)), axis=1)
    inter = ag.sum_(ag.mul(sim, Tensor(1.0 - same)), axis=1)
    frac = ag.sub(ag.log(intra), ag.log(ag.add(intra, inter)))
    return ag.scale(ag.sum_(frac), -1.0 / b)


def loss_inst(z_i, z_r, f_gi, f_gr, labels, tau):
    """Plain cross-modal instance contrast (the prototype-free ablation)."""
    high = _instance_contrast(_as2d(z_r), _as2d(z_i), labels, tau)
    glob = _instance_contrast(_as2d(f_gr), _as2d(f_gi), labels, tau)
    return ag.add(high, glob)


def loss_overall(terms):
    """Sum of the five enabled training terms, each a scalar Tensor."""
    required = ("base", "high", "i2p", "p2p", "p2p_pp")
    missing = [k for k in required if k not in terms]
    if missing:
        raise KeyError(f"missing loss terms: {missing}")
    total = None
    for k in required:
        total = terms[k] if total is None else ag.add(total, terms[k])
    return total
