"""Retrieval evaluation: embedding extraction, ranking, mAP and CMC.

Hazy images are encoded by the hazy-domain encoder, clear images by the
clear-domain encoder; both feed the shared re-identification head with
batch norm in inference mode. Image decoders and discriminators play no
role at evaluation time.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import toydata

DEFAULT_RANKS = (1, 5, 10)


class ProtocolError(ValueError):
    """Probe/gallery split violates the retrieval protocol (usage error)."""


def extract_embeddings(models, samples, batch_size=32):
    """Embed a list of samples -> (N, embedding_dim) array, order preserved."""
    if not samples:
        raise ValueError("no samples to embed")
    chunks = []
    for start in range(0, len(samples), batch_size):
        batch = samples[start:start + batch_size]
        for domain in {s.domain for s in batch}:
            if domain not in ("syn_hazy", "real_hazy", "syn_clear", "real_clear"):
                raise ValueError(f"unknown domain {domain!r}")
        hazy = np.array([s.domain.endswith("hazy") for s in batch])
        embs = np.empty((len(batch), models.d_reid.cfg.embedding_dim))
        for use_hazy, encoder in ((True, models.e_h), (False, models.e_c)):
            idx = np.flatnonzero(hazy == use_hazy)
            if idx.size == 0:
                continue
            x = ag.tensor(np.stack([batch[i].image for i in idx]))
            feat = encoder(x, training=False)
            emb, _ = models.d_reid(feat, training=False)
            embs[idx] = emb.data
        chunks.append(embs)
    return np.concatenate(chunks)


def distance_matrix(probe_emb, gallery_emb):
    """Euclidean distances, shape (num_probes, num_gallery)."""
    p = np.asarray(probe_emb, dtype=np.float64)
    g = np.asarray(gallery_emb, dtype=np.float64)
    if p.ndim != 2 or g.ndim != 2 or p.shape[1] != g.shape[1]:
        raise ValueError(f"bad embedding shapes {p.shape} vs {g.shape}")
    d2 = (p * p).sum(1)[:, None] + (g * g).sum(1)[None, :] - 2.0 * p @ g.T
    return np.sqrt(np.maximum(d2, 0.0))


def rank_gallery(distances):
    """Ascending order; equal distances break toward the lower gallery index."""
    return np.argsort(distances, kind="stable")


def average_precision(relevance):
    """Non-interpolated AP over a ranked 0/1 relevance list.

    AP = (1/R) * sum over relevant ranks k of precision@k. Returns None when
    the list has no relevant entry (the probe must then be excluded).
    """
    rel = np.asarray(relevance, dtype=bool)
    total = int(rel.sum())
    if total == 0:
        return None
    ranks = np.flatnonzero(rel) + 1
    precision = np.arange(1, total + 1) / ranks
    return float(precision.mean())


def cmc_curve(first_hit_ranks, max_rank):
    """CMC@r = fraction of probes whose first correct match has rank <= r."""
    hits = np.asarray(first_hit_ranks)
    return np.array([(hits <= r).mean() for r in range(1, max_rank + 1)])


def check_protocol(probes, gallery):
    """Enforce the single-hazy-probe-per-identity protocol."""
    probe_ids = [s.identity for s in probes]
    if len(set(probe_ids)) != len(probe_ids):
        dupes = sorted({i for i in probe_ids if probe_ids.count(i) > 1})
        raise ProtocolError(f"identities with multiple probes: {dupes}")
    for s in probes:
        if not s.domain.endswith("hazy"):
            raise ProtocolError(f"probe for identity {s.identity} is not hazy")
    gallery_ids = {s.identity for s in gallery}
    missing = sorted(set(probe_ids) - gallery_ids)
    if missing:
        raise ProtocolError(f"probe identities absent from gallery: {missing}")


def evaluate(models, probes, gallery, ranks=DEFAULT_RANKS, top_k=10):
    """Full retrieval run -> report dict.

    Probes without any same-identity gallery entry are excluded from the
    averages and counted in ``excluded_probes``.
    """
    check_protocol(probes, gallery)
    p_emb = extract_embeddings(models, probes)
    g_emb = extract_embeddings(models, gallery)
    dist = distance_matrix(p_emb, g_emb)
    g_ids = np.array([s.identity for s in gallery])

    aps, first_hits, ranking = [], [], []
    excluded = 0
    for i, probe in enumerate(probes):
        order = rank_gallery(dist[i])
        rel = g_ids[order] == probe.identity
        ap = average_precision(rel)
        if ap is None:
            excluded += 1
            continue
        aps.append(ap)
        first_hits.append(int(np.flatnonzero(rel)[0]) + 1)
        ranking.append({
            "probe_id": int(probe.identity),
            "top": [int(g_ids[j]) for j in order[:top_k]],
            "ap": ap,
        })
    if not aps:
        raise ValueError("every probe was excluded; gallery has no matches")

    max_rank = min(max(ranks), len(gallery))
    cmc = cmc_curve(first_hits, max_rank)
    return {
        "mAP": float(np.mean(aps)),
        "cmc": {str(r): float(cmc[r - 1]) for r in ranks if r <= max_rank},
        "excluded_probes": excluded,
        "num_probes": len(probes),
        "num_gallery": len(gallery),
        "ranking": ranking,
        "cmc_curve": [float(v) for v in cmc],
    }


def evaluate_manifest(models, manifest, data_root, ranks=DEFAULT_RANKS):
    """Load probe/gallery splits from a manifest and evaluate."""
    probes = toydata.load_samples(manifest, data_root, split="probe")
    gallery = toydata.load_samples(manifest, data_root, split="gallery")
    if not probes or not gallery:
        raise ValueError("manifest has empty probe or gallery split")
    return evaluate(models, probes, gallery, ranks=ranks)


def write_report(report, out_dir):
    """Write report.json plus a delimited per-probe summary (report.csv)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "report.json"
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    csv_path = out_dir / "report.csv"
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("probe_id,ap,top1\n")
        for row in report["ranking"]:
            fh.write(f"{row['probe_id']},{row['ap']:.6f},{row['top'][0]}\n")
    return json_path, csv_path
