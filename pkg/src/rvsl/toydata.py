"""Procedural toy-vehicle corpus with identity labels, depth maps and haze.

Generates a paired "synthetic" domain (clear + rendered haze with known
parameters) and a deliberately shifted "real" domain (heavier, chromatic,
spatially varying haze plus sensor noise and gamma jitter), then splits held
out identities into a one-hazy-probe-per-identity probe/gallery protocol.

RNG scheme: every stream is ``np.random.default_rng([seed, tag, id, view])``
with a small integer tag per purpose (0 = identity attributes, 1 = view
jitter, 2 = haze parameters, 3 = splits). Output is independent of any
generation order or worker count as long as the collision-resampling pass
over identity attributes runs over ids in ascending order.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .haze import HazeParams, transmission_from_depth, synthesize_haze

GENERATOR_VERSION = 1

DOMAINS = ("syn_clear", "syn_hazy", "real_clear", "real_hazy")

_TAG_IDENTITY, _TAG_VIEW, _TAG_HAZE, _TAG_SPLIT = 0, 1, 2, 3


@dataclass(frozen=True)
class Identity:
    id: int
    body_hue: float
    saturation: float
    aspect: float
    wheel_layout: int
    marking_pattern: int

    def signature(self):
        # coarse grid used for uniqueness / collision detection
        return (round(self.body_hue, 2), round(self.saturation, 2),
                round(self.aspect, 1), self.wheel_layout, self.marking_pattern)


@dataclass
class DataConfig:
    image_size: int = 64
    syn_identities: int = 120
    syn_views: int = 8
    real_identities: int = 60
    real_views: int = 8
    eval_identities: int = 30
    eval_views: int = 4
    # haze distributions; the real domain is deliberately shifted
    syn_beta: tuple = (0.4, 1.6)
    syn_airlight: tuple = (0.5, 1.0)
    real_beta: tuple = (0.8, 2.2)
    real_airlight_jitter: float = 0.08
    # constant per-domain color cast added to the real airlight (systematic
    # shift, e.g. a different camera/atmosphere; (0,0,0) = none)
    real_airlight_bias: tuple = (0.0, 0.0, 0.0)
    real_noise_sigma: float = 0.01
    real_gamma_jitter: float = 0.1
    # multiplicative per-channel camera gain applied to every real-domain
    # image, clear and hazy alike ((1,1,1) = none)
    real_color_gain: tuple = (1.0, 1.0, 1.0)

    def validate(self):
        if self.image_size < 16:
            raise ValueError(f"image_size too small: {self.image_size}")
        for name in ("syn_identities", "syn_views", "real_identities",
                     "real_views", "eval_identities", "eval_views"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.eval_views < 2:
            raise ValueError("eval_views must be >= 2 (probe + gallery)")
        return self


@dataclass
class ManifestRecord:
    id: int
    path: str
    domain: str
    split: str
    beta: float | None = None
    airlight: tuple | None = None


@dataclass
class DatasetManifest:
    records: list
    seed: int
    version: int = GENERATOR_VERSION
    config: DataConfig = field(default_factory=DataConfig)

    def filter(self, domain=None, split=None):
        out = self.records
        if domain is not None:
            doms = (domain,) if isinstance(domain, str) else tuple(domain)
            out = [r for r in out if r.domain in doms]
        if split is not None:
            out = [r for r in out if r.split == split]
        return out

    def save(self, root):
        root = Path(root)
        with open(root / "manifest.jsonl", "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps({"id": r.id, "path": r.path, "domain": r.domain,
                                     "split": r.split, "beta": r.beta,
                                     "airlight": list(r.airlight) if r.airlight else None})
                         + "\n")
        with open(root / "meta.json", "w", encoding="utf-8") as fh:
            json.dump({"seed": self.seed, "version": self.version,
                       "config": asdict(self.config)}, fh, indent=2)

    @classmethod
    def load(cls, root):
        root = Path(root)
        with open(root / "meta.json", encoding="utf-8") as fh:
            meta = json.load(fh)
        cfg_d = meta["config"]
        for k in ("syn_beta", "syn_airlight", "real_beta", "real_airlight_bias",
                  "real_color_gain"):
            cfg_d[k] = tuple(cfg_d[k])
        records = []
        with open(root / "manifest.jsonl", encoding="utf-8") as fh:
            for line in fh:
                d = json.loads(line)
                records.append(ManifestRecord(
                    id=d["id"], path=d["path"], domain=d["domain"], split=d["split"],
                    beta=d["beta"],
                    airlight=tuple(d["airlight"]) if d["airlight"] else None))
        return cls(records=records, seed=meta["seed"], version=meta["version"],
                   config=DataConfig(**cfg_d))


# -- identity and rendering ---------------------------------------------------

def generate_identity(ident_id, rng):
    """Draw one identity's attribute tuple from its dedicated stream."""
    return Identity(
        id=ident_id,
        body_hue=float(rng.uniform(0, 1)),
        saturation=float(rng.uniform(0.5, 1.0)),
        aspect=float(rng.uniform(1.6, 2.6)),
        wheel_layout=int(rng.integers(2, 4)),
        marking_pattern=int(rng.integers(0, 4)),
    )


def generate_identities(count, seed, start_id=0):
    """Sequential ids with collision resampling on the coarse attribute grid."""
    seen, out = set(), []
    for ident_id in range(start_id, start_id + count):
        rng = np.random.default_rng([seed, _TAG_IDENTITY, ident_id])
        ident = generate_identity(ident_id, rng)
        while ident.signature() in seen:
            ident = generate_identity(ident_id, rng)
        seen.add(ident.signature())
        out.append(ident)
    return out


def render_instance(identity, view_rng, size=64, jitter=True):
    """Render one view of a toy vehicle; returns (image (3,H,W), depth (H,W)).

    The scene is a ground-plane gradient with a 2D vehicle silhouette: body
    rectangle, cabin trapezoid, wheel discs and an identity-specific marking
    pattern. Depth: background recedes from 0.6 (bottom) to 1.0 (top); the
    vehicle sits at a strictly nearer constant depth.
    """
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    u, v = xx / w, yy / h  # v grows downward

    if jitter:
        dx = float(view_rng.uniform(-0.08, 0.08))
        dy = float(view_rng.uniform(-0.05, 0.05))
        scl = float(view_rng.uniform(0.9, 1.1))
        illum = float(view_rng.uniform(0.85, 1.15))
        hue_j = float(view_rng.uniform(-0.02, 0.02))
    else:
        dx = dy = hue_j = 0.0
        scl = illum = 1.0

    # background: sky-to-ground vertical gradient, slightly lit by illum
    img = np.zeros((3, h, w))
    sky = np.array([0.55, 0.62, 0.70])
    ground = np.array([0.35, 0.33, 0.30])
    bg = sky[:, None, None] * (1 - v)[None] + ground[:, None, None] * v[None]
    img[:] = np.clip(bg * illum, 0, 1)

    # vehicle geometry in normalized coords, centered with per-view jitter
    cx, cy = 0.5 + dx, 0.62 + dy
    half_w = 0.30 * scl
    half_h = half_w / identity.aspect
    body = (np.abs(u - cx) < half_w) & (np.abs(v - cy) < half_h)

    cab_top = cy - half_h - 0.10 * scl
    cab = ((v >= cab_top) & (v < cy - half_h + 1e-9)
           & (np.abs(u - cx) < half_w * (0.55 - 1.2 * (cy - half_h - v))))

    wheel_r = 0.06 * scl
    wheel_y = cy + half_h
    if identity.wheel_layout == 2:
        wheel_xs = [cx - half_w * 0.6, cx + half_w * 0.6]
    else:
        wheel_xs = [cx - half_w * 0.65, cx, cx + half_w * 0.65]
    wheels = np.zeros_like(body)
    for wx in wheel_xs:
        wheels |= (u - wx) ** 2 + (v - wheel_y) ** 2 < wheel_r ** 2

    hue = (identity.body_hue + hue_j) % 1.0
    body_rgb = np.array(colorsys.hsv_to_rgb(hue, identity.saturation, 0.8))
    cab_rgb = np.clip(body_rgb * 0.6 + 0.25, 0, 1)

    for c in range(3):
        img[c][body] = body_rgb[c] * illum
        img[c][cab] = cab_rgb[c] * illum
        img[c][wheels] = 0.08 * illum

    # marking pattern on the body: stripes or dots, identity-specific
    if identity.marking_pattern == 1:
        mark = body & (np.floor((u - cx) / 0.08) % 2 == 0)
    elif identity.marking_pattern == 2:
        mark = body & (np.floor((v - cy) / 0.05) % 2 == 0)
    elif identity.marking_pattern == 3:
        mark = body & ((np.sin(u * 40) * np.sin(v * 40)) > 0.4)
    else:
        mark = np.zeros_like(body)
    for c in range(3):
        img[c][mark] = np.clip(body_rgb[c] * 0.5 * illum, 0, 1)

    img = np.clip(img, 0, 1)

    vehicle = body | cab | wheels
    depth = 0.6 + 0.4 * (1 - v)  # bottom near (0.6), top far (1.0)
    depth[vehicle] = 0.35
    return img, depth


# -- 8-bit codec --------------------------------------------------------------

def to_uint8(img):
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def from_uint8(arr):
    return arr.astype(np.float64) / 255.0


def save_png(img, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(to_uint8(img).transpose(1, 2, 0)).save(path)


def load_png(path):
    arr = np.asarray(PILImage.open(path).convert("RGB"))
    return from_uint8(arr.transpose(2, 0, 1))


# -- haze rendering per domain ------------------------------------------------

def _syn_haze(clear, depth, rng, cfg):
    beta = float(rng.uniform(*cfg.syn_beta))
    a = float(rng.uniform(*cfg.syn_airlight))
    params = HazeParams(beta=beta, airlight=(a, a, a))
    t = transmission_from_depth(depth, beta)
    return synthesize_haze(clear, t, params), beta, params.airlight


def _real_camera(img, cfg):
    """Apply the real domain's per-channel sensor gain."""
    gain = np.asarray(cfg.real_color_gain, dtype=np.float64)
    return np.clip(img * gain[:, None, None], 0.0, 1.0)


def _real_haze(clear, depth, rng, cfg):
    beta = float(rng.uniform(*cfg.real_beta))
    base = float(rng.uniform(*cfg.syn_airlight))
    jit = rng.uniform(-cfg.real_airlight_jitter, cfg.real_airlight_jitter, 3)
    a = np.clip(base + np.asarray(cfg.real_airlight_bias) + jit, 0.0, 1.0)
    t = transmission_from_depth(depth, beta)
    # mild horizontal airlight gradient, a sensor-noise floor, gamma jitter
    g = float(rng.uniform(-0.2, 0.2))
    w = clear.shape[2]
    grad = 1.0 + g * (np.arange(w) / w - 0.5)
    a_field = np.clip(a[:, None, None] * grad[None, None, :], 0.0, 1.0)
    hazy = clear * t[None] + a_field * (1.0 - t[None])
    hazy = hazy + rng.normal(0.0, cfg.real_noise_sigma, hazy.shape)
    gamma = 1.0 + float(rng.uniform(-cfg.real_gamma_jitter, cfg.real_gamma_jitter))
    hazy = np.clip(hazy, 0.0, 1.0) ** gamma
    return _real_camera(hazy, cfg), beta, tuple(float(x) for x in a)


# -- dataset generation -------------------------------------------------------

def generate_dataset(cfg, seed, out_dir):
    """Write the full corpus (PNGs + manifest) under ``out_dir``.

    Identity ranges: syn [0, S), real-train [S, S+R), real-eval [S+R, S+R+E).
    Synthetic hazy images are rendered from the already-quantized stored clear
    image so the pair reproduces the stored haze within codec tolerance.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    s, r, e = cfg.syn_identities, cfg.real_identities, cfg.eval_identities
    syn_ids = generate_identities(s, seed, start_id=0)
    real_ids = generate_identities(r, seed, start_id=s)
    eval_ids = generate_identities(e, seed, start_id=s + r)
    id_sets = [set(i.id for i in grp) for grp in (syn_ids, real_ids, eval_ids)]
    if id_sets[0] & id_sets[1] or (id_sets[0] | id_sets[1]) & id_sets[2]:
        raise ValueError("identity ranges overlap between domains")

    records = []

    def emit(img, ident_id, domain, view, split, beta=None, airlight=None):
        rel = f"{domain}/{ident_id}/{view}.png"
        save_png(img, out_dir / rel)
        records.append(ManifestRecord(id=ident_id, path=rel, domain=domain,
                                      split=split, beta=beta, airlight=airlight))

    for ident in syn_ids:
        for view in range(cfg.syn_views):
            vrng = np.random.default_rng([seed, _TAG_VIEW, ident.id, view])
            clear, depth = render_instance(ident, vrng, size=cfg.image_size)
            emit(clear, ident.id, "syn_clear", view, "train")
            stored_clear = from_uint8(to_uint8(clear))
            hrng = np.random.default_rng([seed, _TAG_HAZE, ident.id, view])
            hazy, beta, airlight = _syn_haze(stored_clear, depth, hrng, cfg)
            emit(hazy, ident.id, "syn_hazy", view, "train", beta, airlight)

    for ident in real_ids:
        for view in range(cfg.real_views):
            vrng = np.random.default_rng([seed, _TAG_VIEW, ident.id, view])
            clear, depth = render_instance(ident, vrng, size=cfg.image_size)
            emit(_real_camera(clear, cfg), ident.id, "real_clear", view, "train")
            # unpaired: the hazy views are different renders of the identity
            vrng2 = np.random.default_rng([seed, _TAG_VIEW, ident.id, view + 10000])
            clear2, depth2 = render_instance(ident, vrng2, size=cfg.image_size)
            hrng = np.random.default_rng([seed, _TAG_HAZE, ident.id, view])
            hazy, beta, airlight = _real_haze(clear2, depth2, hrng, cfg)
            emit(hazy, ident.id, "real_hazy", view, "train", beta, airlight)

    for ident in eval_ids:
        for view in range(cfg.eval_views):
            vrng = np.random.default_rng([seed, _TAG_VIEW, ident.id, view])
            clear, depth = render_instance(ident, vrng, size=cfg.image_size)
            hrng = np.random.default_rng([seed, _TAG_HAZE, ident.id, view])
            hazy, beta, airlight = _real_haze(clear, depth, hrng, cfg)
            emit(hazy, ident.id, "real_hazy", view, "eval", beta, airlight)
            # clear gallery views use independent renders (cross-domain
            # retrieval: hazy probes against a mixed hazy/clear gallery)
            vrng2 = np.random.default_rng([seed, _TAG_VIEW, ident.id,
                                           view + 20000])
            clear2, _ = render_instance(ident, vrng2, size=cfg.image_size)
            emit(_real_camera(clear2, cfg), ident.id, "real_clear",
                 view + 20000, "eval")

    manifest = DatasetManifest(records=records, seed=seed, config=cfg)
    split_probe_gallery(manifest, sorted(id_sets[2]),
                        np.random.default_rng([seed, _TAG_SPLIT]))
    manifest.save(out_dir)
    return manifest


def split_probe_gallery(manifest, eval_identities, rng):
    """Assign exactly one hazy image per eval identity to the probe set.

    All remaining images of those identities go to the gallery; other records
    are untouched. Deterministic for a given rng state.
    """
    eval_set = set(eval_identities)
    hazy_by_id, others = {}, []
    for rec in manifest.records:
        if rec.id not in eval_set:
            continue
        if rec.domain.endswith("hazy"):
            hazy_by_id.setdefault(rec.id, []).append(rec)
        else:
            others.append(rec)
    short = [i for i in eval_identities if len(hazy_by_id.get(i, [])) < 2]
    if short:
        raise ValueError(f"identities with < 2 hazy images cannot be split: {short}")
    for ident_id in sorted(hazy_by_id):
        recs = hazy_by_id[ident_id]
        probe_idx = int(rng.integers(len(recs)))
        for k, rec in enumerate(recs):
            rec.split = "probe" if k == probe_idx else "gallery"
    for rec in others:
        rec.split = "gallery"
    return manifest


# -- loading and augmentation -------------------------------------------------

@dataclass
class Sample:
    image: np.ndarray
    identity: int
    domain: str
    split: str
    pair: np.ndarray | None = None
    haze: HazeParams | None = None


def load_samples(manifest, root, domain=None, split=None):
    """Materialize manifest records as Samples; syn_hazy carries its pair."""
    root = Path(root)
    out = []
    for rec in manifest.filter(domain=domain, split=split):
        img = load_png(root / rec.path)
        pair = None
        if rec.domain == "syn_hazy":
            pair = load_png(root / rec.path.replace("syn_hazy", "syn_clear"))
        params = None
        if rec.beta is not None:
            params = HazeParams(beta=rec.beta, airlight=rec.airlight)
        out.append(Sample(image=img, identity=rec.id, domain=rec.domain,
                          split=rec.split, pair=pair, haze=params))
    return out


def augment(image, rng, pad=4, flip_prob=0.5):
    """Random crop with reflection pad plus horizontal flip; pair-consistent
    when called with the same rng state."""
    c, h, w = image.shape
    padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad)), mode="reflect")
    oy = int(rng.integers(0, 2 * pad + 1))
    ox = int(rng.integers(0, 2 * pad + 1))
    out = padded[:, oy:oy + h, ox:ox + w]
    if rng.random() < flip_prob:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)
