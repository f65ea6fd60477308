"""Command-line entry point.

Subcommands: synth, train, eval, render, dehaze, gradcheck, ablate.
Exit codes: 0 success, 1 runtime failure, 2 configuration/usage error.
Every run directory receives an echo of the fully resolved configuration.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import config as cfgmod
from . import evaluation, gradsuite, nets, plotting, toydata, training
from .haze import HazeParams, synthesize_haze, transmission_from_depth


def _apply_thread_cap():
    """RVSL_THREADS caps numeric worker threads (0 or unset = automatic)."""
    raw = os.environ.get("RVSL_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise cfgmod.ConfigError(f"RVSL_THREADS must be an integer, got {raw!r}")
    if n < 0:
        raise cfgmod.ConfigError(f"RVSL_THREADS must be >= 0, got {n}")
    if n > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(n))
    return n


def _load_config(path):
    return cfgmod.load(path) if path else cfgmod.RunConfig()


def _load_manifest(data_dir):
    data_dir = Path(data_dir)
    if not (data_dir / "manifest.jsonl").exists():
        raise cfgmod.ConfigError(f"no manifest.jsonl under {data_dir}")
    return toydata.DatasetManifest.load(data_dir)


def _load_image(path):
    img = toydata.load_png(path)
    if img.shape[0] != 3:
        raise cfgmod.ConfigError(f"{path}: expected a 3-channel image")
    return img


def _build_for_training(cfg, manifest):
    net_cfg = dataclasses.replace(
        cfg.net, num_classes=training.num_training_classes(manifest))
    return nets.build_models(net_cfg, seed=cfg.train.seed), net_cfg


def _restore(cfg, ckpt_path, num_classes):
    net_cfg = dataclasses.replace(cfg.net, num_classes=num_classes)
    models = nets.build_models(net_cfg, seed=0)
    # the classifier head is training-only; inference restores may drop it
    nets.load_checkpoint(models, ckpt_path, strict=num_classes is not None)
    return models


# -- subcommands --------------------------------------------------------------

def cmd_synth(args):
    cfg = _load_config(args.config)
    out = Path(args.out)
    manifest = toydata.generate_dataset(cfg.data, seed=args.seed, out_dir=out)
    cfgmod.write_resolved(cfg, out)
    print(f"synth: {len(manifest.records)} images under {out}")
    return 0


def cmd_train(args):
    cfg = _load_config(args.config)
    manifest = _load_manifest(args.data)
    models, net_cfg = _build_for_training(cfg, manifest)
    out = Path(args.out)

    def progress(epoch, last, elapsed):
        print(f"epoch {epoch + 1}/{cfg.train.epochs} "
              f"last={last.stage}:{last.losses['total']:.4f} "
              f"lr={last.lr:.2e} [{elapsed:.1f}s]", flush=True)

    logs, ckpt = training.fit(models, manifest, args.data, cfg.train,
                              out_dir=out, progress=progress)
    cfgmod.write_resolved(dataclasses.replace(cfg, net=net_cfg), out)
    plotting.loss_figure(out / "train_log.jsonl", out / "loss_curves.png")
    print(f"train: {len(logs)} steps, checkpoint {ckpt}")
    return 0


def cmd_eval(args):
    cfg = _load_config(args.config)
    manifest = _load_manifest(args.data)
    models = _restore(cfg, args.ckpt, training.num_training_classes(manifest))
    report = evaluation.evaluate_manifest(models, manifest, args.data,
                                          ranks=cfg.eval.ranks)
    out = Path(args.report)
    json_path, csv_path = evaluation.write_report(report, out)
    plotting.cmc_figure(report, out / "cmc.png")
    cfgmod.write_resolved(cfg, out)
    print(f"eval: mAP={report['mAP']:.4f} "
          f"cmc={report['cmc']} -> {json_path}")
    return 0


def cmd_render(args):
    clear = _load_image(args.image)
    h, w = clear.shape[1:]
    if args.depth:
        depth = toydata.load_png(args.depth).mean(axis=0)
        if depth.shape != (h, w):
            raise cfgmod.ConfigError(
                f"depth map {depth.shape} does not match image {(h, w)}")
    else:
        depth = np.ones((h, w))
    airlight = tuple(float(v) for v in args.airlight.split(","))
    if len(airlight) != 3:
        raise cfgmod.ConfigError(f"airlight needs 3 components, got {args.airlight!r}")
    if args.beta == 0.0:
        hazy = clear  # zero scattering: transmission is identically one
    else:
        params = HazeParams(beta=args.beta, airlight=airlight)
        t = transmission_from_depth(depth, params.beta)
        hazy = synthesize_haze(clear, t, params)
    toydata.save_png(hazy, args.out)
    print(f"render: beta={args.beta} -> {args.out}")
    return 0


def cmd_dehaze(args):
    cfg = _load_config(args.config)
    hazy = _load_image(args.image)
    if hazy.shape[1] != cfg.net.image_size or hazy.shape[2] != cfg.net.image_size:
        raise cfgmod.ConfigError(
            f"image is {hazy.shape[1]}x{hazy.shape[2]}, "
            f"model expects {cfg.net.image_size}")
    models = _restore(cfg, args.ckpt, num_classes=None)
    x = ag.tensor(hazy[None])
    out_img = models.d_c(models.e_h(x, training=False), training=False)
    toydata.save_png(out_img.data[0], args.out)
    print(f"dehaze: {args.image} -> {args.out}")
    return 0


def cmd_gradcheck(args):
    results = gradsuite.run_suite(seed=args.seed)
    failed = [r for r in results if not r["ok"]]
    for r in results:
        status = "ok" if r["ok"] else "FAIL"
        print(f"{status:4s} {r['name']:32s} "
              f"rel_err={r['max_rel_err']:.3e} tol={r['tolerance']:.0e}")
    if failed:
        print(f"gradcheck: {len(failed)}/{len(results)} checks failed")
        return 1
    print(f"gradcheck: all {len(results)} checks passed")
    return 0


STAGE_MATRIX = {
    "syn": ("supervised",),
    "syn_rc": ("supervised", "unsup_clear"),
    "syn_rh": ("supervised", "unsup_hazy"),
    "full": training.ALL_STAGES,
}

LOSS_MATRIX = {
    "full": {},
    "no_cr_midc": {"w_cr": 0.0, "w_midc": 0.0},
    "no_dc_tv": {"w_dc": 0.0, "w_tv": 0.0},
}


def run_variant(cfg, manifest, data_dir, stages, weight_overrides,
                f_variant=False, seed=None):
    """One independent train+eval run; returns the evaluation report."""
    train_cfg = dataclasses.replace(
        cfg.train,
        stages=stages,
        weights=dataclasses.replace(cfg.train.weights, **weight_overrides),
        f_variant=f_variant,
        seed=cfg.train.seed if seed is None else seed)
    models, _ = _build_for_training(
        dataclasses.replace(cfg, train=train_cfg), manifest)
    training.fit(models, manifest, data_dir, train_cfg)
    return evaluation.evaluate_manifest(models, manifest, data_dir,
                                        ranks=cfg.eval.ranks)


def cmd_ablate(args):
    cfg = _load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.data:
        data_dir = Path(args.data)
        manifest = _load_manifest(data_dir)
    else:
        data_dir = out / "dataset"
        manifest = toydata.generate_dataset(cfg.data, seed=cfg.train.seed,
                                            out_dir=data_dir)
    cfgmod.write_resolved(cfg, out)

    results = {}
    for name, stages in STAGE_MATRIX.items():
        print(f"ablate: stage variant {name}", flush=True)
        results[f"stage/{name}"] = run_variant(cfg, manifest, data_dir,
                                               stages, {})
    for name, overrides in LOSS_MATRIX.items():
        if name == "full":
            continue  # already covered by the stage matrix
        print(f"ablate: loss variant {name}", flush=True)
        results[f"loss/{name}"] = run_variant(cfg, manifest, data_dir,
                                              training.ALL_STAGES, overrides)

    table = {k: {"mAP": v["mAP"], "cmc": v["cmc"]} for k, v in results.items()}
    with open(out / "ablation.json", "w", encoding="utf-8") as fh:
        json.dump(table, fh, indent=2)
        fh.write("\n")
    with open(out / "ablation.csv", "w", encoding="utf-8") as fh:
        fh.write("variant,mAP,cmc1\n")
        for k, v in table.items():
            cmc1 = v["cmc"].get("1", "")
            fh.write(f"{k},{v['mAP']:.6f},{cmc1}\n")
    plotting.comparison_figure(results, out / "ablation.png",
                               title="stage and loss ablations")
    for k, v in table.items():
        print(f"{k:18s} mAP={v['mAP']:.4f}")
    return 0


# -- argument parsing ---------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="rvsl",
        description="Semi-supervised hazy vehicle re-identification toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the procedural dataset")
    p.add_argument("--config", "-c", help="run-config JSON")
    p.add_argument("--out", "-o", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fit the model")
    p.add_argument("--config", "-c")
    p.add_argument("--data", "-d", required=True, help="dataset directory")
    p.add_argument("--out", "-o", required=True, help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="retrieval evaluation")
    p.add_argument("--config", "-c")
    p.add_argument("--ckpt", required=True, help="model checkpoint")
    p.add_argument("--data", "-d", required=True)
    p.add_argument("--report", "-r", required=True, help="report directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="apply the haze model to a clear image")
    p.add_argument("--image", required=True)
    p.add_argument("--depth", help="grayscale depth map PNG (default: 1.0)")
    p.add_argument("--beta", type=float, required=True)
    p.add_argument("--airlight", default="0.9,0.9,0.9",
                   help="comma-separated RGB in [0,1]")
    p.add_argument("--out", "-o", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("dehaze", help="run the hazy encoder + clear decoder")
    p.add_argument("--config", "-c")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", "-o", required=True)
    p.set_defaults(func=cmd_dehaze)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="stage and loss ablation matrix")
    p.add_argument("--config", "-c")
    p.add_argument("--data", "-d", help="existing dataset (default: generate)")
    p.add_argument("--out", "-o", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors already; preserve success for -h
        return int(exc.code or 0)
    try:
        _apply_thread_cap()
        return args.func(args)
    except (cfgmod.ConfigError, evaluation.ProtocolError) as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc}", file=sys.stderr)
        return 2
    except (ValueError, ag.ShapeError, FloatingPointError, OSError) as exc:
        print(f"error: runtime: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
