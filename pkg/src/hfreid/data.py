"""Procedural dual-modality identity dataset and the P x (4+4) batch sampler.

Each identity is a deterministic function of its seed: a person-like
silhouette, a cell-level binary texture layout filled with a period-2
checker (all of its energy lands in the wavelet high bands), and a few
always-on accessory glyph cells. Renders add nuisance that lives in the low
bands: random smooth backgrounds, random body fill, small even-pixel
translation, and for IR a random 20% dropout of texture cells plus noise.
Identity evidence therefore sits in the high-frequency structure, which is
what the mining pipeline is built to exploit.

On-disk layout: manifest.json, labels.csv, images/<id>_<modality>_<k>.pgm|ppm.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HEIGHT, WIDTH = 64, 32
CELL = 4  # texture cell size in pixels
TEXTURE_DROP = 0.2  # fraction of IR texture cells dropped per render


@dataclass
class IdentitySignature:
    seed: int
    silhouette: np.ndarray  # (H, W) bool
    cell_pattern: np.ndarray  # (H/CELL, W/CELL) bool, inside silhouette only
    cell_amplitude: np.ndarray  # per-cell texture contrast
    glyph_cells: np.ndarray  # (3, 2) always-on accent cells


@dataclass
class DatasetManifest:
    num_identities: int
    per_identity: int  # images per identity per modality
    train_ids: list
    test_ids: list
    seed: int

    def validate(self):
        if set(self.train_ids) & set(self.test_ids):
            raise ValueError("train and test identity sets overlap")
        ids = set(self.train_ids) | set(self.test_ids)
        if ids != set(range(self.num_identities)):
            raise ValueError("identity lists do not cover range(num_identities)")


@dataclass
class Batch:
    rgb: np.ndarray  # (P*4, H, W, 3)
    ir: np.ndarray  # (P*4, H, W, 3), gray replicated
    labels: np.ndarray  # (P*4,), shared by slot-paired RGB/IR instances


def _ellipse(h, w, cy, cx, ry, rx):
    yy, xx = np.mgrid[0:h, 0:w]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def generate_identity(seed):
    """Deterministic identity signature; distinct seeds give distinct shapes."""
    rng = np.random.default_rng(np.random.SeedSequence([98321, int(seed)]))
    cy = rng.uniform(34, 42)
    cx = rng.uniform(13, 19)
    ry = rng.uniform(15, 20)
    rx = rng.uniform(9, 12)
    torso = _ellipse(HEIGHT, WIDTH, cy, cx, ry, rx)
    head_r = rng.uniform(4.0, 6.0)
    head = _ellipse(HEIGHT, WIDTH, cy - ry - head_r + 2, cx, head_r, head_r)
    sil = torso | head

    gh, gw = HEIGHT // CELL, WIDTH // CELL
    cell_centers = sil[CELL // 2::CELL, CELL // 2::CELL]
    pattern = (rng.random((gh, gw)) < 0.5) & cell_centers
    amplitude = rng.uniform(0.25, 0.45, (gh, gw))

    inside = np.argwhere(cell_centers)
    glyphs = inside[rng.choice(len(inside), size=min(3, len(inside)), replace=False)]
    return IdentitySignature(seed=int(seed), silhouette=sil, cell_pattern=pattern,
                             cell_amplitude=amplitude, glyph_cells=glyphs)


def _checker(h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    return np.where((yy + xx) % 2 == 0, 1.0, -1.0)


def _smooth_background(rng, channels):
    yy, xx = np.mgrid[0:HEIGHT, 0:WIDTH]
    bg = np.empty((HEIGHT, WIDTH, channels))
    for ch in range(channels):
        base = rng.uniform(0.25, 0.75)
        gy = rng.uniform(-0.25, 0.25) / HEIGHT
        gx = rng.uniform(-0.25, 0.25) / WIDTH
        bg[..., ch] = base + gy * yy + gx * xx
    return np.clip(bg, 0.0, 1.0)


def _texture_field(sig, rng, drop_fraction):
    """Signed per-pixel texture: checker inside active cells, glyphs always on."""
    gh, gw = sig.cell_pattern.shape
    active = sig.cell_pattern.copy()
    if drop_fraction > 0:
        keep = rng.random((gh, gw)) >= drop_fraction
        active &= keep
    amp = np.where(active, sig.cell_amplitude, 0.0)
    for gy, gx in sig.glyph_cells:
        amp[gy, gx] = 0.5
    amp_px = np.repeat(np.repeat(amp, CELL, axis=0), CELL, axis=1)
    return amp_px * _checker(HEIGHT, WIDTH) * sig.silhouette


def _translate(img, dy, dx):
    out = np.zeros_like(img)
    src = img[max(0, -dy):HEIGHT - max(0, dy), max(0, -dx):WIDTH - max(0, dx)]
    out[max(0, dy):max(0, dy) + src.shape[0], max(0, dx):max(0, dx) + src.shape[1]] = src
    return out


def render(sig, modality, variation_seed):
    """One (H, W, 3) image in [0, 1], quantized to 8-bit levels.

    RGB: colored smooth background, random body fill, full texture.
    IR: gray background, texture with random cell dropout, additive noise.
    """
    if modality not in ("rgb", "ir"):
        raise ValueError(f"unknown modality {modality!r}")
    # nuisance is seeded by (variation, modality) only, never by the identity:
    # every identity shares the same background/fill/translation library, so
    # none of it carries identity information
    rng = np.random.default_rng(
        np.random.SeedSequence([55107, int(variation_seed),
                                0 if modality == "rgb" else 1]))
    dy, dx = rng.choice([-2, 0, 2]), rng.choice([-2, 0, 2])
    sil = _translate(sig.silhouette.astype(np.float64), dy, dx)

    if modality == "rgb":
        img = _smooth_background(rng, 3)
        body = rng.uniform(0.35, 0.65, 3)
        tex = _translate(_texture_field(sig, rng, drop_fraction=0.0), dy, dx)
        for ch in range(3):
            img[..., ch] = img[..., ch] * (1 - sil) + sil * body[ch]
            img[..., ch] += tex * rng.uniform(0.8, 1.0)
    else:
        gray = _smooth_background(rng, 1)[..., 0]
        body = rng.uniform(0.35, 0.65)
        tex = _translate(_texture_field(sig, rng, drop_fraction=TEXTURE_DROP), dy, dx)
        gray = gray * (1 - sil) + sil * body + tex
        gray += rng.normal(0.0, 0.02, gray.shape)
        img = np.repeat(gray[..., None], 3, axis=2)

    img = np.clip(img, 0.0, 1.0)
    return np.round(img * 255.0) / 255.0


class Dataset:
    """In-memory dataset generated from a manifest (deterministic)."""

    def __init__(self, manifest):
        manifest.validate()
        self.manifest = manifest
        self.signatures = {c: generate_identity(manifest.seed * 100003 + c)
                           for c in range(manifest.num_identities)}
        self.images = {}
        for c in range(manifest.num_identities):
            for modality in ("rgb", "ir"):
                self.images[(c, modality)] = [
                    render(self.signatures[c], modality, k)
                    for k in range(manifest.per_identity)
                ]

    def get(self, identity, modality, k):
        return self.images[(identity, modality)][k]


def make_manifest(num_ids, per_id, train_fraction=0.5, seed=0):
    ids = list(range(num_ids))
    split = int(round(num_ids * train_fraction))
    return DatasetManifest(num_identities=num_ids, per_identity=per_id,
                           train_ids=ids[:split], test_ids=ids[split:], seed=seed)


def sample_batch(dataset, rng, num_ids=8, per_modality=4):
    """P distinct train identities, 4 RGB + 4 IR images each, slot-paired."""
    train = dataset.manifest.train_ids
    if len(train) < num_ids:
        raise ValueError(f"need {num_ids} train identities, have {len(train)}")
    chosen = rng.choice(train, size=num_ids, replace=False)
    rgb, ir, labels = [], [], []
    for c in chosen:
        per = dataset.manifest.per_identity
        rgb_ks = rng.choice(per, size=per_modality, replace=per < per_modality)
        ir_ks = rng.choice(per, size=per_modality, replace=per < per_modality)
        for kr, ki in zip(rgb_ks, ir_ks):
            rgb.append(dataset.get(int(c), "rgb", int(kr)))
            ir.append(dataset.get(int(c), "ir", int(ki)))
            labels.append(int(c))
    return Batch(rgb=np.stack(rgb), ir=np.stack(ir), labels=np.array(labels))


# ---------------------------------------------------------------------------
# netpbm I/O and dataset round-trip


def write_pnm(path, img):
    """8-bit binary PGM (1 channel) or PPM (3 channels)."""
    img = np.asarray(img)
    levels = np.round(img * 255.0).astype(np.uint8)
    path = Path(path)
    if levels.ndim == 2 or (levels.ndim == 3 and path.suffix == ".pgm"):
        if levels.ndim == 3:
            levels = levels[..., 0]
        header = f"P5\n{levels.shape[1]} {levels.shape[0]}\n255\n"
    else:
        header = f"P6\n{levels.shape[1]} {levels.shape[0]}\n255\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(levels.tobytes())


def read_pnm(path):
    """Read a binary PGM/PPM written by write_pnm; returns (H, W, 3) in [0, 1]."""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] not in (b"P5", b"P6"):
        raise ValueError(f"{path}: not a binary PGM/PPM file")
    w, h = map(int, parts[1].split())
    maxval = int(parts[2])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported max value {maxval}")
    channels = 1 if parts[0] == b"P5" else 3
    pix = np.frombuffer(parts[3], dtype=np.uint8, count=h * w * channels)
    img = pix.reshape(h, w, channels).astype(np.float64) / 255.0
    if channels == 1:
        img = np.repeat(img, 3, axis=2)
    return img


def write_dataset(dataset, out_dir):
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    m = dataset.manifest
    (out / "manifest.json").write_text(json.dumps({
        "num_identities": m.num_identities,
        "per_identity": m.per_identity,
        "train_ids": m.train_ids,
        "test_ids": m.test_ids,
        "seed": m.seed,
    }, indent=2))
    with open(out / "labels.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["filename", "identity", "modality"])
        for c in range(m.num_identities):
            for modality, ext in (("rgb", "ppm"), ("ir", "pgm")):
                for k in range(m.per_identity):
                    name = f"{c}_{modality}_{k}.{ext}"
                    write_pnm(out / "images" / name, dataset.get(c, modality, k))
                    wr.writerow([name, c, modality])


def read_manifest(path):
    try:
        blob = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: corrupt manifest: {e}") from e
    fields = ("num_identities", "per_identity", "train_ids", "test_ids", "seed")
    for f in fields:
        if f not in blob:
            raise ValueError(f"{path}: manifest missing field {f!r}")
    m = DatasetManifest(**{f: blob[f] for f in fields})
    m.validate()
    return m


def read_dataset(in_dir):
    """Load a dataset directory back into memory; errors name missing files."""
    root = Path(in_dir)
    m = read_manifest(root / "manifest.json")
    ds = Dataset.__new__(Dataset)
    ds.manifest = m
    ds.signatures = {}
    ds.images = {}
    with open(root / "labels.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    seen = {}
    for row in rows:
        p = root / "images" / row["filename"]
        if not p.exists():
            raise FileNotFoundError(f"missing image file: {p}")
        c, modality = int(row["identity"]), row["modality"]
        ds.images.setdefault((c, modality), []).append(read_pnm(p))
        seen[c] = True
    if len(seen) != m.num_identities:
        raise ValueError(
            f"manifest lists {m.num_identities} identities, directory has {len(seen)}")
    return ds
