"""Finite-difference verification of every training objective.

Each check builds a tiny 2-identity micro-batch of representation tensors at
64-bit precision and compares the analytic gradients of one loss against
central differences. Used by `hfreid gradcheck` and the acceptance tests.
"""
from __future__ import annotations

import numpy as np

from . import autograd as ag
from . import mining, objectives, protobank
from .autograd import Tensor

DIM = 6
NUM_CLASSES = 2
LABELS = np.array([0, 0, 1, 1])


def _reps(rng, n=4, d=DIM):
    return Tensor(rng.uniform(-1.0, 1.0, (n, d)), requires_grad=True)


def _classifier(rng):
    w = Tensor(rng.uniform(-1.0, 1.0, (DIM, NUM_CLASSES)), requires_grad=True)
    b = Tensor(rng.uniform(-0.1, 0.1, NUM_CLASSES), requires_grad=True)
    return w, b


def _proto_map(rng):
    protos = {}
    for c in (0, 1):
        protos[c] = {key: Tensor(rng.uniform(-1.0, 1.0, DIM), requires_grad=True)
                     for key in protobank.FAMILIES}
    return protos


def _proto_params(protos):
    return {f"proto.{c}.{key}": t for c, fams in protos.items()
            for key, t in fams.items()}


def _sets(protos):
    p_sets = [[protos[c]["p_ir"], protos[c]["p_rgb"], protos[c]["p"]] for c in (0, 1)]
    q_sets = [[protos[c]["q_ir"], protos[c]["q_rgb"], protos[c]["q"]] for c in (0, 1)]
    return p_sets, q_sets


def checks():
    """Ordered (name, loss_fn, params) triples for every objective."""
    rng = np.random.default_rng(1234)
    out = []

    reps = _reps(rng)
    w, b = _classifier(rng)
    out.append(("cross_entropy",
                lambda: objectives.cross_entropy(reps, LABELS, (w, b)),
                {"reps": reps, "w": w, "b": b}))

    treps = _reps(rng)
    out.append(("triplet",
                lambda: objectives.triplet(treps, LABELS, margin=0.3),
                {"reps": treps}))

    v = Tensor(rng.uniform(-1, 1, DIM), requires_grad=True)
    c0 = Tensor(rng.uniform(-1, 1, DIM), requires_grad=True)
    negs = [Tensor(rng.uniform(-1, 1, DIM), requires_grad=True) for _ in range(3)]
    taus = [0.5, 0.4, 0.6, 0.5]
    out.append(("proto_nce",
                lambda: objectives.proto_nce(v, c0, negs, taus),
                {"v": v, "c": c0, **{f"n{i}": n for i, n in enumerate(negs)}}))

    bg = _reps(rng)
    bp = Tensor(rng.uniform(-1, 1, (4, 2, DIM)), requires_grad=True)
    bw, bb = _classifier(rng)
    out.append(("loss_base",
                lambda: objectives.loss_base(bg, bp, LABELS, (bw, bb), 0.3),
                {"f_g": bg, "f_parts": bp, "w": bw, "b": bb}))

    hz_i, hz_r = _reps(rng), _reps(rng)
    hw, hb = _classifier(rng)
    out.append(("loss_high",
                lambda: mining.loss_high(hz_i, hz_r, LABELS, LABELS, (hw, hb), 0.3),
                {"z_i": hz_i, "z_r": hz_r, "w": hw, "b": hb}))

    iz_i, iz_r, if_i, if_r = (_reps(rng) for _ in range(4))
    iprotos = _proto_map(rng)
    out.append(("loss_i2p",
                lambda: objectives.loss_i2p(iz_i, iz_r, if_i, if_r, LABELS, iprotos),
                {"z_i": iz_i, "z_r": iz_r, "f_i": if_i, "f_r": if_r,
                 **_proto_params(iprotos)}))

    pprotos = _proto_map(rng)
    out.append(("loss_p2p",
                lambda: objectives.loss_p2p(*_sets(pprotos), tau=0.5),
                _proto_params(pprotos)))

    # stop-gradient targets are excluded: finite differences see the full
    # dependence while the analytic gradient is zero there by definition
    qprotos = _proto_map(rng)
    q_only = {k: t for k, t in _proto_params(qprotos).items() if ".q" in k}
    out.append(("loss_p2p_plus",
                lambda: objectives.loss_p2p_plus(*_sets(qprotos), tau=0.5),
                q_only))

    nz_i, nz_r, nf_i, nf_r = (_reps(rng) for _ in range(4))
    out.append(("loss_inst",
                lambda: objectives.loss_inst(nz_i, nz_r, nf_i, nf_r, LABELS, 0.5),
                {"z_i": nz_i, "z_r": nz_r, "f_i": nf_i, "f_r": nf_r}))

    oz_i, oz_r, of_i, of_r, og = (_reps(rng) for _ in range(5))
    op = Tensor(rng.uniform(-1, 1, (4, 2, DIM)), requires_grad=True)
    ow, ob = _classifier(rng)
    oprotos = _proto_map(rng)

    def overall():
        terms = {
            "base": objectives.loss_base(og, op, LABELS, (ow, ob), 0.3),
            "high": mining.loss_high(oz_i, oz_r, LABELS, LABELS, (ow, ob), 0.3),
            "i2p": objectives.loss_i2p(oz_i, oz_r, of_i, of_r, LABELS, oprotos),
            "p2p": objectives.loss_p2p(*_sets(oprotos), tau=0.5),
            "p2p_pp": objectives.loss_p2p_plus(*_sets(oprotos), tau=0.5),
        }
        return objectives.loss_overall(terms)

    overall_params = {"z_i": oz_i, "z_r": oz_r, "f_i": of_i, "f_r": of_r,
                      "f_g": og, "parts": op, "w": ow, "b": ob}
    overall_params.update({k: t for k, t in _proto_params(oprotos).items()
                           if ".q" in k})
    out.append(("loss_overall", overall, overall_params))
    return out


def run_all(eps=1e-5, verbose=False):
    """Run every check; returns name -> GradCheckReport."""
    reports = {}
    for name, fn, params in checks():
        reports[name] = ag.grad_check(fn, params, eps=eps)
        if verbose:
            print(f"{name}: max rel err {reports[name].max_rel_error:.3e}")
    return reports
