"""Finite-difference verification suite for every loss graph and the
representative network paths. Shared between the command-line `gradcheck`
command and the test suite.

Inputs are drawn away from non-smooth points (relu kinks, |x| at zero,
window-min ties) so central differences are valid; biases are jittered off
zero for the same reason.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from . import losses as L
from . import nets
from .haze import DarkChannelConfig

LOSS_TOL = 1e-4
NET_TOL = 1e-3


def _jitter_biases(module, rng):
    for name, p in module.named_parameters().items():
        if name.endswith("bias") or name.endswith("beta"):
            p.data = rng.uniform(0.01, 0.1, p.data.shape)


def _img_param(rng, shape):
    return ag.parameter(rng.uniform(0.2, 0.8, shape))


def _loss_checks(rng):
    shape = (2, 3, 8, 8)
    cfg5 = DarkChannelConfig(patch=5)
    checks = []

    a, b = _img_param(rng, shape), _img_param(rng, shape)
    checks.append(("loss/domain_transform",
                   lambda: L.l_domain_transform(a, b), [a, b], LOSS_TOL))

    c, d = _img_param(rng, shape), _img_param(rng, shape)
    checks.append(("loss/render_consistency",
                   lambda: L.l_render_consistency(c, d), [c, d], LOSS_TOL))

    e, f = _img_param(rng, shape), _img_param(rng, shape)
    checks.append(("loss/increasing_dark_channel",
                   lambda: L.l_midc(e, f, cfg5), [e, f], LOSS_TOL))

    g, h = _img_param(rng, shape), _img_param(rng, shape)
    pinned = rng.uniform(0.85, 0.95, (2, 3))
    checks.append(("loss/colinear",
                   lambda: L.l_colinear(g, h, cfg5, airlights=pinned),
                   [g, h], LOSS_TOL))

    k = _img_param(rng, shape)
    checks.append(("loss/dark_channel_prior",
                   lambda: L.l_dark_channel(k, cfg5), [k], LOSS_TOL))

    m = _img_param(rng, shape)
    checks.append(("loss/total_variation",
                   lambda: L.l_total_variation(m), [m], LOSS_TOL))

    emb = ag.parameter(rng.normal(0, 1.0, (8, 4)))
    labels = np.repeat([0, 1, 2, 3], 2)
    checks.append(("loss/triplet_batch_hard",
                   lambda: L.l_triplet_batch_hard(emb, labels), [emb], LOSS_TOL))

    logits = ag.parameter(rng.normal(0, 1.0, (6, 5)))
    lab2 = np.array([0, 1, 2, 3, 4, 0])
    checks.append(("loss/id_cross_entropy",
                   lambda: L.l_id_cross_entropy(logits, lab2), [logits], LOSS_TOL))

    ea, eb = (ag.parameter(rng.normal(0, 1.0, (4, 6))),
              ag.parameter(rng.normal(0, 1.0, (4, 6))))
    checks.append(("loss/embedding_consistency",
                   lambda: L.l_embedding_consistency(ea, eb), [ea, eb], LOSS_TOL))

    cfg = nets.NetConfig(image_size=8, base_channels=2, encoder_blocks=1,
                         embedding_dim=8, discriminator_channels=2)
    models = nets.build_models(cfg, seed=17)
    _jitter_biases(models.disc_h, rng)
    real = _img_param(rng, shape)
    fake = _img_param(rng, shape)

    def build_d():
        d_loss, _ = L.l_discriminative(models.disc_h, real, fake)
        return d_loss
    checks.append(("loss/discriminative_d",
                   build_d, models.disc_h.parameters(), LOSS_TOL))

    def build_g():
        _, g_loss = L.l_discriminative(models.disc_h, real, fake)
        return g_loss
    checks.append(("loss/discriminative_g", build_g, [fake], LOSS_TOL))

    return checks


def _net_checks(rng):
    cfg = nets.NetConfig(image_size=8, base_channels=2, encoder_blocks=1,
                         embedding_dim=8, num_classes=3,
                         discriminator_channels=2)
    models = nets.build_models(cfg, seed=23)
    for blk in models.blocks().values():
        _jitter_biases(blk, rng)
    x = ag.tensor(rng.uniform(0.2, 0.8, (2, 3, 8, 8)))
    checks = [
        ("net/encoder",
         lambda: ag.total_mean(models.e_h(x, training=True).deep),
         models.e_h.parameters(), NET_TOL),
        ("net/encoder_decoder",
         lambda: ag.total_mean(ag.absolute(
             models.d_c(models.e_h(x, training=True), training=True))),
         models.e_h.parameters() + models.d_c.parameters(), NET_TOL),
        ("net/reid_head",
         lambda: _reid_scalar(models, x),
         models.d_reid.parameters(), NET_TOL),
        ("net/discriminator",
         lambda: ag.total_mean(models.disc_h(x)),
         models.disc_h.parameters(), NET_TOL),
    ]
    return checks


def _reid_scalar(models, x):
    emb, logits = models.d_reid(models.e_h(x, training=True), training=True,
                                with_logits=True)
    return ag.total_mean(logits * logits) + ag.total_mean(ag.absolute(emb))


def run_suite(seed=0):
    """Run every check; returns a list of dicts with name/ok/max_rel_err."""
    rng = np.random.default_rng(seed)
    results = []
    for name, build, params, tol in _loss_checks(rng) + _net_checks(rng):
        ok, err = ag.grad_check(build, params, tolerance=tol)
        results.append({"name": name, "ok": bool(ok),
                        "max_rel_err": float(err), "tolerance": tol})
    return results
