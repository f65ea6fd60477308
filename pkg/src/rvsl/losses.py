"""The full loss suite as differentiable scalar graphs.

Supervised domain-transformation L1, cycle rendering consistency, the
monotonously-increasing dark channel loss with its gradient-stopped binary
mask, the colinear relation constraint on RGB haze lines, the saturating
GAN loss pair, the dark-channel and total-variation priors on dehazed
output, batch-hard triplet, ID cross-entropy, and embedding consistency --
plus the stage composer that enforces the exact per-stage loss sets.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import autograd as ag
from .haze import DarkChannelConfig, estimate_airlight


@dataclass(frozen=True)
class LossWeights:
    w_dts: float = 1.0
    w_rc: float = 1.0
    w_midc: float = 1.0
    w_cr: float = 1.0
    w_dis: float = 1.0
    w_dc: float = 1.0
    w_tv: float = 1.0
    w_tri: float = 1.0
    w_id: float = 1.0
    w_ec: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")


@dataclass(frozen=True)
class TripletConfig:
    margin: float = 0.3

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError(f"margin must be positive, got {self.margin}")


LOG_CLAMP = 1e-7


def _check_batch(x, name):
    if x.data.ndim != 4 or x.data.shape[0] < 1:
        raise ValueError(f"{name} must be a non-empty NCHW batch, got {x.data.shape}")


def l_domain_transform(pred, target):
    """Mean per-image L1 between predictions and ground truth."""
    _check_batch(pred, "pred")
    if pred.data.shape != target.data.shape:
        raise ag.ShapeError(f"shape mismatch {pred.data.shape} vs {target.data.shape}")
    return ag.total_mean(ag.absolute(pred - target))


def l_render_consistency(inputs, cycled):
    """L1 between an input image and its two-hop cycle reconstruction."""
    return l_domain_transform(cycled, inputs)


def batch_dark_channel(images, cfg=DarkChannelConfig()):
    """Differentiable dark channel of an NCHW batch -> (N,H,W) tensor."""
    return ag.window_min(ag.channel_min(images), cfg.patch)


def l_midc(clear, rendered_hazy, cfg=DarkChannelConfig()):
    """Penalize pixels whose dark channel decreased under rendered haze.

    The binary map selecting those pixels is a gradient-stopped constant;
    gradients flow through both dark channels via the min subgradients.
    """
    _check_batch(clear, "clear")
    if clear.data.shape != rendered_hazy.data.shape:
        raise ag.ShapeError(f"shape mismatch {clear.data.shape} vs {rendered_hazy.data.shape}")
    dc_clear = batch_dark_channel(clear, cfg)
    dc_hazy = batch_dark_channel(rendered_hazy, cfg)
    mask = ag.tensor((dc_hazy.data < dc_clear.data).astype(np.float64))
    return ag.total_mean(mask * ag.absolute(dc_hazy - dc_clear))


def midc_mask_fraction(clear, rendered_hazy, cfg=DarkChannelConfig()):
    dc_c = batch_dark_channel(clear, cfg).data
    dc_h = batch_dark_channel(rendered_hazy, cfg).data
    return float((dc_h < dc_c).mean())


def l_colinear(clear, rendered_hazy, cfg=DarkChannelConfig(), eps=1e-6,
               airlights=None):
    """Mean over valid pixels of 1 - cos(clear - A, hazy - A).

    The airlight A is estimated per image from the rendered hazy image and
    treated as a gradient-stopped constant (pass ``airlights`` to pin it,
    e.g. for finite-difference verification). Pixels whose offset from A
    has norm < eps are excluded; an image with no valid pixel contributes 0.
    """
    _check_batch(clear, "clear")
    if clear.data.shape != rendered_hazy.data.shape:
        raise ag.ShapeError(f"shape mismatch {clear.data.shape} vs {rendered_hazy.data.shape}")
    n = clear.data.shape[0]
    if airlights is None:
        airlights = np.stack([estimate_airlight(rendered_hazy.data[i], cfg)
                              for i in range(n)])
    else:
        airlights = np.asarray(airlights, dtype=np.float64)
    a = ag.tensor(np.broadcast_to(airlights[:, :, None, None], clear.data.shape).copy())
    u = clear - a
    v = rendered_hazy - a
    dot = ag.axis_sum(u * v, axis=1)
    nu2 = ag.axis_sum(u * u, axis=1)
    nv2 = ag.axis_sum(v * v, axis=1)
    cos = dot / ag.sqrt(ag.add_scalar(nu2 * nv2, 1e-24))

    nu = np.sqrt(nu2.data)
    nv = np.sqrt(nv2.data)
    valid = (nu >= eps) & (nv >= eps)
    counts = valid.reshape(n, -1).sum(axis=1)
    weights = valid / np.maximum(counts, 1)[:, None, None] / n
    one = ag.tensor(np.ones_like(cos.data))
    return ag.total_sum(ag.tensor(weights) * (one - cos))


def l_discriminative(disc, real, fake):
    """Saturating GAN loss pair: (d_loss, g_loss).

    d_loss = -E[log D(real)] - E[log(1 - D(stopgrad(fake)))]
    g_loss =  E[log(1 - D(fake))]   (the generator minimizes this)
    Probabilities are clamped to [1e-7, 1 - 1e-7] before the log.
    """
    if real.data.shape[0] < 1 or fake.data.shape[0] < 1:
        raise ValueError("discriminative loss needs non-empty real and fake batches")
    p_real = ag.clip(disc(real), LOG_CLAMP, 1.0 - LOG_CLAMP)
    p_fake_d = ag.clip(disc(ag.stopgrad(fake)), LOG_CLAMP, 1.0 - LOG_CLAMP)
    one_r = ag.tensor(np.ones_like(p_fake_d.data))
    d_loss = -ag.total_mean(ag.log(p_real)) - ag.total_mean(ag.log(one_r - p_fake_d))
    p_fake_g = ag.clip(disc(fake), LOG_CLAMP, 1.0 - LOG_CLAMP)
    one_g = ag.tensor(np.ones_like(p_fake_g.data))
    g_loss = ag.total_mean(ag.log(one_g - p_fake_g))
    return d_loss, g_loss


def l_dark_channel(rendered_clear, cfg=DarkChannelConfig()):
    """Mean dark channel of the dehazed output; drives residual haze to zero."""
    _check_batch(rendered_clear, "rendered_clear")
    return ag.total_mean(batch_dark_channel(rendered_clear, cfg))


def l_total_variation(images):
    """Anisotropic TV with forward differences, per-image normalized by the
    full element count so the value is resolution independent."""
    _check_batch(images, "images")
    n, c, h, w = images.data.shape
    if h < 2 or w < 2:
        raise ValueError(f"total variation needs spatial dims >= 2, got {h}x{w}")
    dx = ag.narrow(images, 3, 1, w - 1) - ag.narrow(images, 3, 0, w - 1)
    dy = ag.narrow(images, 2, 1, h - 1) - ag.narrow(images, 2, 0, h - 1)
    scale = 1.0 / (n * c * h * w)
    return (ag.total_sum(ag.absolute(dx)) + ag.total_sum(ag.absolute(dy))) * scale


def pairwise_distances(embeddings):
    """Dense Euclidean distance matrix on raw data (mining only, no grads)."""
    e = embeddings.data if isinstance(embeddings, ag.Tensor) else embeddings
    sq = (e * e).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * e @ e.T, 0.0)
    return np.sqrt(d2)


def l_triplet_batch_hard(embeddings, labels, cfg=TripletConfig()):
    """Batch-hard triplet: hardest positive / hardest negative per anchor.

    Mining picks indices on the forward values; gradients flow through the
    selected Euclidean distances only (the standard batch-hard subgradient).
    """
    labels = np.asarray(labels)
    n = embeddings.data.shape[0]
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {n}")
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same
    if not pos_mask.any(axis=1).all():
        bad = sorted(set(labels[~pos_mask.any(axis=1)].tolist()))
        raise ValueError(f"labels with a single sample: {bad}")
    if not neg_mask.any(axis=1).all():
        raise ValueError("triplet loss needs at least 2 distinct labels in the batch")

    dist = pairwise_distances(embeddings)
    hardest_pos = np.argmax(np.where(pos_mask, dist, -np.inf), axis=1)
    hardest_neg = np.argmin(np.where(neg_mask, dist, np.inf), axis=1)

    anchors = embeddings
    pos = ag.take_rows(embeddings, hardest_pos)
    neg = ag.take_rows(embeddings, hardest_neg)
    d_pos = ag.sqrt(ag.add_scalar(ag.axis_sum((anchors - pos) * (anchors - pos), axis=1), 1e-16))
    d_neg = ag.sqrt(ag.add_scalar(ag.axis_sum((anchors - neg) * (anchors - neg), axis=1), 1e-16))
    hinge = ag.relu(ag.add_scalar(d_pos - d_neg, cfg.margin))
    return ag.total_mean(hinge)


def l_id_cross_entropy(logits, labels):
    """Softmax cross-entropy with max-shift stabilization."""
    labels = np.asarray(labels)
    n, c = logits.data.shape
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels outside [0, {c})")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    logp = ag.log_softmax(logits, axis=1)
    return -ag.total_sum(ag.tensor(onehot) * logp) * (1.0 / n)


def l_embedding_consistency(emb_a, emb_b):
    """Mean per-row L1 between embeddings of the same vehicle in two domains."""
    if emb_a.data.shape != emb_b.data.shape:
        raise ag.ShapeError(f"shape mismatch {emb_a.data.shape} vs {emb_b.data.shape}")
    return ag.total_mean(ag.absolute(emb_a - emb_b))


STAGE_PARTS = {
    "supervised": ("dts", "tri", "id"),
    "unsup_clear": ("rc", "midc", "cr", "dis", "ec"),
    "unsup_hazy": ("rc", "dis", "dc", "tv", "ec"),
}


def compose_stage_loss(stage, parts, weights=LossWeights()):
    """Weighted sum of exactly the stage's required losses.

    ``parts`` maps short loss names (e.g. "rc", "dis") to scalar graphs; a
    missing or extra entry is a contract violation (guards schedule drift).
    The "dis" entry is the generator-side g_loss; the discriminator's d_loss
    is optimized separately and must not appear here.
    """
    if stage not in STAGE_PARTS:
        raise ValueError(f"unknown stage {stage!r}")
    required = STAGE_PARTS[stage]
    got = tuple(sorted(parts))
    if got != tuple(sorted(required)):
        raise ValueError(f"stage {stage} requires parts {sorted(required)}, got {sorted(got)}")
    wmap = {"dts": weights.w_dts, "rc": weights.w_rc, "midc": weights.w_midc,
            "cr": weights.w_cr, "dis": weights.w_dis, "dc": weights.w_dc,
            "tv": weights.w_tv, "tri": weights.w_tri, "id": weights.w_id,
            "ec": weights.w_ec}
    total = None
    for name in required:
        term = parts[name] * wmap[name]
        total = term if total is None else total + term
    return total
