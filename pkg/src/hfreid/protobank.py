"""Per-identity multimodal prototype bank with EMA updates.

Six vectors per identity: high-freq (ir, rgb, fused) and global (ir, rgb,
fused). Stored state is plain numpy and is only ever mutated through
`PrototypeBank.update`; the optimizer never sees it. The update also returns
post-update prototypes as autodiff Tensors so the current batch's center
contribution stays differentiable while the history term is a constant.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import instrumentation
from .autograd import Tensor

FAMILIES = ("p_ir", "p_rgb", "p", "q_ir", "q_rgb", "q")


@dataclass
class BatchCenters:
    """Per-identity arithmetic centers of one mini-batch, as Tensors."""
    centers: dict  # identity -> {family: Tensor}
    per_identity: int  # P, instances per identity per modality


def _mean_rows(reps, idx):
    sel = ag.take(reps, np.asarray(idx, dtype=np.intp), axis=0)
    return ag.mean(sel, axis=0)


def batch_centers(z_i, z_r, f_gi, f_gr, labels):
    """Statistic centers per identity for both streams.

    Modality centers average the P instances of that modality; fused centers
    average all 2P instances. The batch must be balanced (sampler contract).
    """
    labels = np.asarray(labels, dtype=np.intp)
    ids, counts = np.unique(labels, return_counts=True)
    if np.unique(counts).size != 1:
        raise ValueError("unbalanced batch: unequal instances per identity")
    per = int(counts[0])

    def as2d(x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        return ag.reshape(x, (1, -1)) if x.ndim == 1 else x

    z_i, z_r, f_gi, f_gr = map(as2d, (z_i, z_r, f_gi, f_gr))
    centers = {}
    for c in ids:
        idx = np.flatnonzero(labels == c)
        both_z = ag.concat([ag.take(z_i, idx, axis=0), ag.take(z_r, idx, axis=0)], axis=0)
        both_f = ag.concat([ag.take(f_gi, idx, axis=0), ag.take(f_gr, idx, axis=0)], axis=0)
        centers[int(c)] = {
            "p_ir": _mean_rows(z_i, idx),
            "p_rgb": _mean_rows(z_r, idx),
            "p": ag.mean(both_z, axis=0),
            "q_ir": _mean_rows(f_gi, idx),
            "q_rgb": _mean_rows(f_gr, idx),
            "q": ag.mean(both_f, axis=0),
        }
    return BatchCenters(centers=centers, per_identity=per)


class PrototypeBank:
    """EMA-maintained prototypes for C identities, D-dimensional."""

    def __init__(self, num_ids, dim, alpha, dtype=np.float32):
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {alpha}")
        self.num_ids = num_ids
        self.dim = dim
        self.alpha = float(alpha)
        self.store = {f: np.zeros((num_ids, dim), dtype=dtype) for f in FAMILIES}
        self.initialized = np.zeros(num_ids, dtype=bool)

    def update(self, centers):
        """Fold batch centers into the bank: new = alpha*center + (1-alpha)*old.

        The first observation of an identity initializes it to the batch
        center directly. Returns post-update prototypes as Tensors (gradient
        flows through the center term only).
        """
        instrumentation.bump("protobank")
        posterior = {}
        for c, fams in centers.centers.items():
            if not 0 <= c < self.num_ids:
                raise ValueError(f"identity {c} outside bank range [0, {self.num_ids})")
            first = not self.initialized[c]
            post = {}
            for fam, center in fams.items():
                if first:
                    post[fam] = center
                else:
                    prev = self.store[fam][c].copy()
                    post[fam] = ag.add(ag.scale(center, self.alpha),
                                       Tensor((1.0 - self.alpha) * prev))
                self.store[fam][c] = post[fam].data.astype(self.store[fam].dtype)
            self.initialized[c] = True
            posterior[c] = post
        return posterior

    def prototype_sets(self, c):
        """([p_ir, p_rgb, p], [q_ir, q_rgb, q]) for one initialized identity."""
        if not 0 <= c < self.num_ids or not self.initialized[c]:
            raise KeyError(f"identity {c} not initialized in the bank")
        p_set = [self.store[f][c] for f in ("p_ir", "p_rgb", "p")]
        q_set = [self.store[f][c] for f in ("q_ir", "q_rgb", "q")]
        return p_set, q_set

    def contrast_sets(self, posterior=None):
        """Ordered (p_sets, q_sets, ids) over all initialized identities.

        Identities present in `posterior` contribute their differentiable
        post-update Tensors; the rest enter as constants.
        """
        posterior = posterior or {}
        ids = [c for c in range(self.num_ids) if self.initialized[c]]
        p_sets, q_sets = [], []
        for c in ids:
            if c in posterior:
                post = posterior[c]
                p_sets.append([post["p_ir"], post["p_rgb"], post["p"]])
                q_sets.append([post["q_ir"], post["q_rgb"], post["q"]])
            else:
                p_set, q_set = self.prototype_sets(c)
                p_sets.append([Tensor(v) for v in p_set])
                q_sets.append([Tensor(v) for v in q_set])
        return p_sets, q_sets, ids

    def state_arrays(self):
        """Flat name -> array map for checkpointing."""
        out = {f"proto.{f}": self.store[f] for f in FAMILIES}
        out["proto.initialized"] = self.initialized.astype(np.float32)
        return out

    def load_state_arrays(self, arrays):
        for f in FAMILIES:
            self.store[f][...] = arrays[f"proto.{f}"]
        self.initialized[...] = arrays["proto.initialized"] > 0.5
