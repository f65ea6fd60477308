"""Semi-supervised training schedule.

Per iteration: a supervised step on paired synthetic data, an unsupervised
step on real clear data (forward cycle clear -> hazy -> clear), and an
unsupervised step on real hazy data (hazy -> clear -> hazy), each with its
exact loss set. Discriminators get one update per generator update. Stage
toggles reproduce the training-data ablation; the F variant adds triplet and
ID supervision to the real stages.

Every RNG stream is derived from (seed, stage tag) so disabling a stage
leaves the remaining streams untouched and supervised-only runs are
bit-identical whether or not the real stages exist in the config.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import losses as L
from . import nets, toydata

ALL_STAGES = ("supervised", "unsup_clear", "unsup_hazy")

_TAG_SUP, _TAG_UC, _TAG_UH = 10, 11, 12


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_p: int = 4                  # identities per batch
    batch_k: int = 4                  # views per identity
    lr_init: float = 1.09e-5
    lr_peak: float = 1e-4
    warmup_epochs: int = 10
    lr_decay: float = 0.6
    decay_interval: int = 10
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    triplet: L.TripletConfig = field(default_factory=L.TripletConfig)
    stages: tuple = ALL_STAGES
    f_variant: bool = False
    augment: bool = True

    def __post_init__(self):
        if self.batch_p < 2 or self.batch_k < 2:
            raise ValueError("batch needs P >= 2 identities and K >= 2 views "
                             "(triplet mining precondition)")
        unknown = set(self.stages) - set(ALL_STAGES)
        if unknown:
            raise ValueError(f"unknown stages {sorted(unknown)}")
        if "supervised" not in self.stages:
            raise ValueError("the supervised synthetic stage is mandatory")

    @property
    def batch_size(self):
        return self.batch_p * self.batch_k


def lr_schedule(epoch, cfg):
    """Linear warm-up to the peak rate, then stepwise decay."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if epoch < cfg.warmup_epochs:
        frac = epoch / cfg.warmup_epochs
        return cfg.lr_init + (cfg.lr_peak - cfg.lr_init) * frac
    steps = (epoch - cfg.warmup_epochs) // cfg.decay_interval
    return cfg.lr_peak * cfg.lr_decay ** steps


class Adam:
    """Plain Adam over an explicit parameter list."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        ag.zero_grads(self.params)


@dataclass
class StepLog:
    iteration: int
    stage: str
    losses: dict
    lr: float
    grad_norm: float

    def to_json(self):
        return json.dumps({"iter": self.iteration, "stage": self.stage,
                           "losses": self.losses, "lr": self.lr,
                           "grad_norm": self.grad_norm})


def _grad_norm(params):
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return float(np.sqrt(total))


def _check_finite(log_values, stage):
    for k, v in log_values.items():
        if not np.isfinite(v):
            raise FloatingPointError(f"non-finite {k} in {stage} step")


class BatchSampler:
    """P x K identity-balanced sampling over a list of samples."""

    def __init__(self, samples, rng):
        self.samples = samples
        self.rng = rng
        self.by_id = {}
        for i, s in enumerate(samples):
            self.by_id.setdefault(s.identity, []).append(i)

    def draw_pk(self, p, k):
        ids = [i for i, v in self.by_id.items() if len(v) >= k]
        if len(ids) < p:
            raise ValueError(f"need {p} identities with >= {k} views, have {len(ids)}")
        chosen = self.rng.choice(sorted(ids), size=p, replace=False)
        out = []
        for ident in chosen:
            views = self.rng.choice(self.by_id[ident], size=k, replace=False)
            out.extend(int(v) for v in views)
        return [self.samples[i] for i in out]

    def draw(self, m):
        idx = self.rng.choice(len(self.samples), size=m, replace=len(self.samples) < m)
        return [self.samples[int(i)] for i in idx]


def _images(samples, rng=None, use_pairs=False):
    """Stack sample images (and optionally their pairs with identical crops)."""
    imgs, pairs = [], []
    for s in samples:
        if rng is not None:
            state = rng.integers(0, 2 ** 31)
            imgs.append(toydata.augment(s.image, np.random.default_rng(state)))
            if use_pairs:
                pairs.append(toydata.augment(s.pair, np.random.default_rng(state)))
        else:
            imgs.append(s.image)
            if use_pairs:
                pairs.append(s.pair)
    x = ag.tensor(np.stack(imgs))
    return (x, ag.tensor(np.stack(pairs))) if use_pairs else x


class Trainer:
    def __init__(self, models, cfg, class_of_identity):
        self.models = models
        self.cfg = cfg
        self.class_of_identity = class_of_identity
        self.gen_opt = Adam(models.generator_parameters(),
                            cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        self.disc_h_opt = Adam(models.disc_h.parameters(),
                               cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        self.disc_c_opt = Adam(models.disc_c.parameters(),
                               cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        self.iteration = 0

    # -- stage steps ----------------------------------------------------------

    def supervised_step(self, samples, lr, rng):
        m = self.models
        for s in samples:
            if s.pair is None:
                raise ValueError("supervised step needs paired synthetic samples")
        labels = np.array([self.class_of_identity[s.identity] for s in samples])
        aug_rng = rng if self.cfg.augment else None
        hazy, clear = _images(samples, aug_rng, use_pairs=True)

        enc_h = m.e_h(hazy, training=True)
        enc_c = m.e_c(clear, training=True)
        pred_clear = m.d_c(enc_h, training=True)
        pred_hazy = m.d_h(enc_c, training=True)
        l_dts = (L.l_domain_transform(pred_clear, clear)
                 + L.l_domain_transform(pred_hazy, hazy))

        emb_h, logit_h = m.d_reid(enc_h, training=True, with_logits=True)
        emb_c, logit_c = m.d_reid(enc_c, training=True, with_logits=True)
        both_emb = _vcat(emb_h, emb_c)
        both_logits = _vcat(logit_h, logit_c)
        both_labels = np.concatenate([labels, labels])
        l_tri = L.l_triplet_batch_hard(both_emb, both_labels, self.cfg.triplet)
        l_id = L.l_id_cross_entropy(both_logits, both_labels)

        total = L.compose_stage_loss("supervised",
                                     {"dts": l_dts, "tri": l_tri, "id": l_id},
                                     self.cfg.weights)
        self.gen_opt.zero_grad()
        ag.backward(total)
        gn = _grad_norm(self.gen_opt.params)
        self.gen_opt.step(lr)
        vals = {"dts": float(l_dts.data), "tri": float(l_tri.data),
                "id": float(l_id.data), "total": float(total.data)}
        _check_finite(vals, "supervised")
        return StepLog(self.iteration, "supervised", vals, lr, gn)

    def unsupervised_clear_step(self, samples, hazy_pool, lr, rng):
        m = self.models
        aug_rng = rng if self.cfg.augment else None
        x_c = _images(samples, aug_rng)

        enc_c = m.e_c(x_c, training=True)
        k_h1 = m.d_h(enc_c, training=True)           # rendered hazy
        enc_h1 = m.e_h(k_h1, training=True)
        k_c2 = m.d_c(enc_h1, training=True)          # cycled clear

        l_rc = L.l_render_consistency(x_c, k_c2)
        l_midc = L.l_midc(x_c, k_h1)
        l_cr = L.l_colinear(x_c, k_h1)
        real = _images(hazy_pool)
        d_loss, g_loss = L.l_discriminative(m.disc_h, real, k_h1)
        emb_c, _ = m.d_reid(enc_c, training=True)
        emb_h1, _ = m.d_reid(enc_h1, training=True)
        l_ec = L.l_embedding_consistency(emb_c, emb_h1)

        total = L.compose_stage_loss(
            "unsup_clear",
            {"rc": l_rc, "midc": l_midc, "cr": l_cr, "dis": g_loss, "ec": l_ec},
            self.cfg.weights)
        vals = {"rc": float(l_rc.data), "midc": float(l_midc.data),
                "cr": float(l_cr.data), "dis": float(g_loss.data),
                "ec": float(l_ec.data),
                "dm_fraction": L.midc_mask_fraction(x_c, k_h1)}
        total = self._maybe_add_reid_supervision(total, samples, (emb_c, emb_h1),
                                                 (enc_c, enc_h1), vals)
        vals["total"] = float(total.data)
        self.gen_opt.zero_grad()
        ag.backward(total)
        gn = _grad_norm(self.gen_opt.params)
        self.gen_opt.step(lr)

        self.disc_h_opt.zero_grad()
        ag.backward(d_loss)
        self.disc_h_opt.step(lr)
        vals["d_loss"] = float(d_loss.data)
        _check_finite(vals, "unsup_clear")
        return StepLog(self.iteration, "unsup_clear", vals, lr, gn)

    def unsupervised_hazy_step(self, samples, clear_pool, lr, rng):
        m = self.models
        aug_rng = rng if self.cfg.augment else None
        x_h = _images(samples, aug_rng)

        enc_h = m.e_h(x_h, training=True)
        k_c1 = m.d_c(enc_h, training=True)           # dehazed
        enc_c1 = m.e_c(k_c1, training=True)
        k_h2 = m.d_h(enc_c1, training=True)          # cycled hazy

        l_rc = L.l_render_consistency(x_h, k_h2)
        l_dc = L.l_dark_channel(k_c1)
        l_tv = L.l_total_variation(k_c1)
        real = _images(clear_pool)
        d_loss, g_loss = L.l_discriminative(m.disc_c, real, k_c1)
        emb_h, _ = m.d_reid(enc_h, training=True)
        emb_c1, _ = m.d_reid(enc_c1, training=True)
        l_ec = L.l_embedding_consistency(emb_h, emb_c1)

        total = L.compose_stage_loss(
            "unsup_hazy",
            {"rc": l_rc, "dis": g_loss, "dc": l_dc, "tv": l_tv, "ec": l_ec},
            self.cfg.weights)
        vals = {"rc": float(l_rc.data), "dis": float(g_loss.data),
                "dc": float(l_dc.data), "tv": float(l_tv.data),
                "ec": float(l_ec.data)}
        total = self._maybe_add_reid_supervision(total, samples, (emb_h, emb_c1),
                                                 (enc_h, enc_c1), vals)
        vals["total"] = float(total.data)
        self.gen_opt.zero_grad()
        ag.backward(total)
        gn = _grad_norm(self.gen_opt.params)
        self.gen_opt.step(lr)

        self.disc_c_opt.zero_grad()
        ag.backward(d_loss)
        self.disc_c_opt.step(lr)
        vals["d_loss"] = float(d_loss.data)
        _check_finite(vals, "unsup_hazy")
        return StepLog(self.iteration, "unsup_hazy", vals, lr, gn)

    def _maybe_add_reid_supervision(self, total, samples, embs, encs, vals):
        """F variant: triplet + ID supervision with real identity labels."""
        if not self.cfg.f_variant:
            return total
        labels = np.array([self.class_of_identity[s.identity] for s in samples])
        m = self.models
        _, logit_a = m.d_reid(encs[0], training=True, with_logits=True)
        _, logit_b = m.d_reid(encs[1], training=True, with_logits=True)
        both_emb = _vcat(embs[0], embs[1])
        both_logits = _vcat(logit_a, logit_b)
        both_labels = np.concatenate([labels, labels])
        l_tri = L.l_triplet_batch_hard(both_emb, both_labels, self.cfg.triplet)
        l_id = L.l_id_cross_entropy(both_logits, both_labels)
        vals["tri"] = float(l_tri.data)
        vals["id"] = float(l_id.data)
        return (total + l_tri * self.cfg.weights.w_tri
                + l_id * self.cfg.weights.w_id)


def _vcat(a, b):
    """Stack two (N,D) tensors along rows, keeping gradient flow."""
    n = a.data.shape[0]
    out = ag._make(np.concatenate([a.data, b.data]), (a, b), None)

    def bwd(g):
        ag._accum(a, g[:n])
        ag._accum(b, g[n:])
    out._backward = bwd
    return out


def fit(models, manifest, data_root, cfg, out_dir=None, progress=None):
    """Run the full schedule; returns (step logs, checkpoint path or None)."""
    syn_hazy = toydata.load_samples(manifest, data_root, domain="syn_hazy",
                                    split="train")
    real_clear = toydata.load_samples(manifest, data_root, domain="real_clear",
                                      split="train")
    real_hazy = toydata.load_samples(manifest, data_root, domain="real_hazy",
                                     split="train")
    syn_clear_pool = [toydata.Sample(image=s.pair, identity=s.identity,
                                     domain="syn_clear", split="train")
                      for s in syn_hazy]
    if not syn_hazy:
        raise ValueError("empty synthetic training split")
    use_uc = "unsup_clear" in cfg.stages
    use_uh = "unsup_hazy" in cfg.stages
    if use_uc and not real_clear:
        raise ValueError("empty real_clear training split")
    if use_uh and not real_hazy:
        raise ValueError("empty real_hazy training split")

    ids = sorted({s.identity for s in syn_hazy}
                 | {s.identity for s in real_clear}
                 | {s.identity for s in real_hazy})
    class_of_identity = {ident: i for i, ident in enumerate(ids)}

    trainer = Trainer(models, cfg, class_of_identity)
    rng_sup = np.random.default_rng([cfg.seed, _TAG_SUP])
    rng_uc = np.random.default_rng([cfg.seed, _TAG_UC])
    rng_uh = np.random.default_rng([cfg.seed, _TAG_UH])
    sampler_sup = BatchSampler(syn_hazy, rng_sup)
    sampler_uc = BatchSampler(real_clear, rng_uc)
    sampler_uh = BatchSampler(real_hazy, rng_uh)
    pool_hazy = BatchSampler(syn_hazy + real_hazy, rng_uc)
    pool_clear = BatchSampler(syn_clear_pool + real_clear, rng_uh)

    m_batch = cfg.batch_size
    iters_per_epoch = max(1, len(syn_hazy) // m_batch)
    logs = []
    t0 = time.time()
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        for _ in range(iters_per_epoch):
            trainer.iteration += 1
            batch = sampler_sup.draw_pk(cfg.batch_p, cfg.batch_k)
            logs.append(trainer.supervised_step(batch, lr, rng_sup))
            if use_uc:
                if cfg.f_variant:
                    uc_batch = sampler_uc.draw_pk(cfg.batch_p, cfg.batch_k)
                else:
                    uc_batch = sampler_uc.draw(m_batch)
                logs.append(trainer.unsupervised_clear_step(
                    uc_batch, pool_hazy.draw(m_batch), lr, rng_uc))
            if use_uh:
                if cfg.f_variant:
                    uh_batch = sampler_uh.draw_pk(cfg.batch_p, cfg.batch_k)
                else:
                    uh_batch = sampler_uh.draw(m_batch)
                logs.append(trainer.unsupervised_hazy_step(
                    uh_batch, pool_clear.draw(m_batch), lr, rng_uh))
        if progress is not None:
            progress(epoch, logs[-1], time.time() - t0)

    ckpt_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt_path = out_dir / "model.ckpt"
        nets.save_checkpoint(models, ckpt_path)
        with open(out_dir / "train_log.jsonl", "w", encoding="utf-8") as fh:
            for entry in logs:
                fh.write(entry.to_json() + "\n")
    return logs, ckpt_path


def num_training_classes(manifest):
    """Identity count across all train domains (sizes the FC classifier)."""
    ids = {r.id for r in manifest.records if r.split == "train"}
    return len(ids)
