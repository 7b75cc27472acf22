"""Episodic training loop wiring every subsystem, plus evaluation.

Per iteration: baseline forward on the full batch, high-frequency mining and
enhancement, prototype construction and EMA update, the contrastive stack,
one optimizer step, then the shadow-encoder EMA refresh. Evaluation embeds
test images through the part-based encoder's global feature only; none of
the training-only machinery runs there.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import checkpoints
from . import encoder as enc
from . import evalkit, mining, objectives, protobank
from .autograd import Tensor
from .data import Dataset, sample_batch
from .encoder import EncoderConfig


class TrainingDiverged(RuntimeError):
    """Raised when a loss term goes non-finite; carries the per-term dump."""

    def __init__(self, terms):
        self.terms = terms
        super().__init__(f"non-finite loss; per-term values: {terms}")


@dataclass
class TrainConfig:
    lr: float = 3e-4
    weight_decay: float = 1e-4
    epochs: int = 1
    iters_per_epoch: int = 500
    k_fraction: float = 0.30
    ema_momentum: float = 0.9999
    proto_alpha: float = 0.8
    tau: float = 0.1
    parts: int = 4
    batch_ids: int = 8
    per_modality: int = 4
    margin: float = 0.3
    seed: int = 0
    dim: int = 64
    depth: int = 3
    heads: int = 4
    patch: int = 8
    dtype: str = "float32"
    enable_chpe: bool = True
    enable_i2p: bool = True
    enable_p2p: bool = True
    enable_p2p_pp: bool = True
    use_inst_contrast: bool = False
    mining_pairing: str = "slot"
    proto_update_order: str = "before"

    def __post_init__(self):
        if not 0 < self.k_fraction <= 1:
            raise ValueError("k_fraction must be in (0, 1]")
        if not 0 < self.ema_momentum <= 1:
            raise ValueError("ema_momentum must be in (0, 1]")
        if self.mining_pairing not in ("slot", "pooled"):
            raise ValueError("mining_pairing must be 'slot' or 'pooled'")
        if self.proto_update_order not in ("before", "after"):
            raise ValueError("proto_update_order must be 'before' or 'after'")
        needs_chpe = self.enable_i2p or self.enable_p2p or self.enable_p2p_pp \
            or self.use_inst_contrast
        if needs_chpe and not self.enable_chpe:
            raise ValueError("the prototype/instance contrast terms require enable_chpe")

    @classmethod
    def from_json(cls, path):
        blob = json.loads(Path(path).read_text())
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(blob) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**blob)

    def to_dict(self):
        return dataclasses.asdict(self)

    def digest(self):
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def encoder_config(self, num_classes):
        return EncoderConfig(patch=self.patch, dim=self.dim, depth=self.depth,
                             heads=self.heads, parts=self.parts,
                             num_classes=num_classes, dtype=self.dtype)


def cosine_lr(base, step, total):
    """Cosine decay from base at step 0 to exactly 0 at the final step."""
    if total <= 1:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * step / (total - 1)))


class AdamW:
    """Decoupled-weight-decay adaptive-moment optimizer."""

    def __init__(self, params, lr=3e-4, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=1e-4):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= (lr * update + lr * self.weight_decay * p.data).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self):
        out = {}
        for k in self.params:
            out[f"opt.m.{k}"] = self.m[k]
            out[f"opt.v.{k}"] = self.v[k]
        out["opt.step"] = np.array([self.step_count], dtype=np.float64)
        return out

    def load_state_arrays(self, arrays):
        for k in self.params:
            self.m[k][...] = arrays[f"opt.m.{k}"]
            self.v[k][...] = arrays[f"opt.v.{k}"]
        self.step_count = int(arrays["opt.step"][0])


@dataclass
class TrainState:
    config: TrainConfig
    enc_cfg: EncoderConfig
    params: dict
    shadow: dict
    bank: protobank.PrototypeBank
    optimizer: AdamW
    class_of: dict  # dataset identity -> classifier index
    iteration: int = 0
    total_iters: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))


def init_state(config, dataset):
    train_ids = dataset.manifest.train_ids
    enc_cfg = config.encoder_config(num_classes=len(train_ids))
    params = enc.init_params(enc_cfg, seed=config.seed)
    shadow = enc.clone_shadow(params)
    bank = protobank.PrototypeBank(len(train_ids), enc_cfg.dim, config.proto_alpha,
                                   dtype=enc_cfg.np_dtype)
    opt = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    return TrainState(
        config=config,
        enc_cfg=enc_cfg,
        params=params,
        shadow=shadow,
        bank=bank,
        optimizer=opt,
        class_of={c: i for i, c in enumerate(train_ids)},
        total_iters=config.epochs * config.iters_per_epoch,
        rng=np.random.default_rng(np.random.SeedSequence([7211, config.seed])),
    )


def _finite(name, t, dump):
    val = float(t.data)
    dump[name] = val
    if not np.isfinite(val):
        raise TrainingDiverged(dump)
    return t


def train_step(state, batch):
    """One full iteration; returns the LossReport."""
    cfg = state.config
    ecfg = state.enc_cfg
    n_half = len(batch.labels)
    classes = np.array([state.class_of[c] for c in batch.labels], dtype=np.intp)
    classifier = (state.params["head.w"], state.params["head.b"])
    dump = {}

    # baseline stream over IR then RGB halves in one batch
    imgs = np.concatenate([batch.ir, batch.rgb], axis=0)
    labels_all = np.concatenate([classes, classes])
    seq = enc.tokenize(imgs, state.params, ecfg)
    f_g, f_parts = enc.encode_parts(seq, state.params, ecfg)
    terms = {}
    terms["base"] = _finite("base", objectives.loss_base(
        f_g, f_parts, labels_all, classifier, cfg.margin), dump)

    f_gi = ag.take(f_g, np.arange(n_half), axis=0)
    f_gr = ag.take(f_g, np.arange(n_half, 2 * n_half), axis=0)

    z_i = z_r = None
    if cfg.enable_chpe:
        k = mining.fraction_to_k(cfg.k_fraction, ecfg.num_patches)
        mine = mining.mine_batch if cfg.mining_pairing == "slot" else mining.mine_batch_pooled
        ir_idx, rgb_idx = mine(batch.ir, batch.rgb, k, state.params, state.shadow, ecfg)
        z_i, z_r = mining.enhanced_representations(
            batch.ir, batch.rgb, ir_idx, rgb_idx, state.params, ecfg)
        terms["high"] = _finite("high", mining.loss_high(
            z_i, z_r, classes, classes, classifier, cfg.margin), dump)

    if cfg.use_inst_contrast:
        terms["inst"] = _finite("inst", objectives.loss_inst(
            z_i, z_r, f_gi, f_gr, classes, cfg.tau), dump)
    elif cfg.enable_i2p or cfg.enable_p2p or cfg.enable_p2p_pp:
        centers = protobank.batch_centers(z_i, z_r, f_gi, f_gr, classes)
        if cfg.proto_update_order == "before":
            posterior = state.bank.update(centers)
        else:
            # losses see pre-update values; unseen identities still need an
            # initial value, which is the (differentiable) batch center
            posterior = {c: fams for c, fams in centers.centers.items()
                         if not state.bank.initialized[c]}
        if cfg.enable_i2p:
            proto_map = dict(posterior)
            for c in np.unique(classes):
                if int(c) not in proto_map:
                    p_set, q_set = state.bank.prototype_sets(int(c))
                    proto_map[int(c)] = {
                        "p_ir": Tensor(p_set[0]), "p_rgb": Tensor(p_set[1]),
                        "p": Tensor(p_set[2]), "q_ir": Tensor(q_set[0]),
                        "q_rgb": Tensor(q_set[1]), "q": Tensor(q_set[2]),
                    }
            terms["i2p"] = _finite("i2p", objectives.loss_i2p(
                z_i, z_r, f_gi, f_gr, classes, proto_map), dump)
        if cfg.enable_p2p or cfg.enable_p2p_pp:
            p_sets, q_sets, _ = state.bank.contrast_sets(
                posterior if cfg.proto_update_order == "before" else posterior)
            if len(p_sets) >= 2:
                if cfg.enable_p2p:
                    terms["p2p"] = _finite("p2p", objectives.loss_p2p(
                        p_sets, q_sets, cfg.tau), dump)
                if cfg.enable_p2p_pp:
                    terms["p2p_pp"] = _finite("p2p_pp", objectives.loss_p2p_plus(
                        p_sets, q_sets, cfg.tau), dump)
        if cfg.proto_update_order == "after":
            state.bank.update(centers)

    total = None
    for t in terms.values():
        total = t if total is None else ag.add(total, t)
    total = _finite("overall", total, dump)

    state.optimizer.zero_grad()
    total.backward()
    lr = cosine_lr(cfg.lr, state.iteration, state.total_iters)
    state.optimizer.step(lr=lr)
    enc.ema_update(state.shadow, state.params, cfg.ema_momentum)
    state.iteration += 1

    grad_sq = sum(float((p.grad**2).sum()) for p in state.params.values()
                  if p.grad is not None)
    return objectives.LossReport(
        base=dump.get("base", 0.0), high=dump.get("high", 0.0),
        i2p=dump.get("i2p", 0.0), p2p=dump.get("p2p", 0.0),
        p2p_pp=dump.get("p2p_pp", 0.0), inst=dump.get("inst", 0.0),
        overall=dump["overall"], grad_norms={"overall": math.sqrt(grad_sq)},
    )


def save_checkpoint(state, path):
    arrays = {f"enc.{k}": p.data for k, p in state.params.items()}
    arrays.update({f"shadow.{k}": p.data for k, p in state.shadow.items()})
    arrays.update(state.bank.state_arrays())
    arrays.update(state.optimizer.state_arrays())
    metadata = {
        "iteration": state.iteration,
        "config": state.config.to_dict(),
        "config_hash": state.config.digest(),
    }
    checkpoints.save(path, arrays, metadata)


def load_checkpoint(path, dataset):
    arrays, metadata = checkpoints.load(path)
    config = TrainConfig(**metadata["config"])
    state = init_state(config, dataset)
    for k, p in state.params.items():
        p.data = arrays[f"enc.{k}"].astype(state.enc_cfg.np_dtype)
    for k, p in state.shadow.items():
        p.data = arrays[f"shadow.{k}"].astype(state.enc_cfg.np_dtype)
    state.bank.load_state_arrays(arrays)
    state.optimizer.load_state_arrays(arrays)
    state.iteration = int(metadata["iteration"])
    return state


def train(config, dataset, out_dir, log_every=1):
    """Full run: returns (state, records) and writes logs plus checkpoints."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state = init_state(config, dataset)
    records = []
    log_path = out / "metrics.jsonl"
    with open(log_path, "w") as log:
        for epoch in range(config.epochs):
            for _ in range(config.iters_per_epoch):
                batch = sample_batch(dataset, state.rng, config.batch_ids,
                                     config.per_modality)
                lr = cosine_lr(config.lr, state.iteration, state.total_iters)
                report = train_step(state, batch)
                rec = {"iter": state.iteration, "lr": lr, **report.as_dict()}
                records.append(rec)
                if state.iteration % log_every == 0:
                    log.write(json.dumps(rec) + "\n")
            save_checkpoint(state, out / f"ckpt_epoch{epoch + 1}.bin")
    save_checkpoint(state, out / "ckpt_final.bin")
    evalkit.plot_loss_curve(records, out / "loss_curve.png")
    return state, records


# ---------------------------------------------------------------------------
# evaluation (inference path: part-based encoder global feature only)


def embed_images(imgs, params, enc_cfg, chunk=64):
    """Global features f_g for a stack of images, gradient-free."""
    feats = []
    with ag.no_grad():
        for i in range(0, len(imgs), chunk):
            seq = enc.tokenize(np.asarray(imgs[i:i + chunk]), params, enc_cfg)
            f_g, _ = enc.encode_parts(seq, params, enc_cfg)
            feats.append(f_g.data)
    return np.concatenate(feats, axis=0)


def evaluate(params, enc_cfg, dataset, direction="i2v", max_rank=20):
    """Cross-modal retrieval on the test identities.

    direction 'i2v': IR queries against an RGB gallery; 'v2i' the reverse.
    Single-shot gallery: one image (variant 0) per identity.
    """
    if direction not in ("i2v", "v2i"):
        raise ValueError("direction must be 'i2v' or 'v2i'")
    test_ids = dataset.manifest.test_ids
    q_mod, g_mod = ("ir", "rgb") if direction == "i2v" else ("rgb", "ir")
    q_imgs, q_labels = [], []
    for c in test_ids:
        for k in range(dataset.manifest.per_identity):
            q_imgs.append(dataset.get(c, q_mod, k))
            q_labels.append(c)
    g_imgs = [dataset.get(c, g_mod, 0) for c in test_ids]
    g_labels = list(test_ids)

    q_emb = embed_images(q_imgs, params, enc_cfg)
    g_emb = embed_images(g_imgs, params, enc_cfg)
    result = evalkit.retrieval_result(q_emb, g_emb, np.array(q_labels),
                                      np.array(g_labels), max_rank=max_rank)

    # cross-modal pair statistics over all test embeddings
    all_emb = np.concatenate([q_emb, g_emb], axis=0)
    all_labels = np.array(q_labels + g_labels)
    all_mods = np.array([q_mod] * len(q_labels) + [g_mod] * len(g_labels))
    stats = evalkit.pair_distance_stats(all_emb, all_labels, all_mods)
    result.pos_mean = stats["pos_mean"]
    result.neg_mean = stats["neg_mean"]
    result.gap = stats["gap"]
    return result, stats
