"""Command-line surface.

Subcommands: train, eval, condense, ablate, gradcheck, synth, bench.
Exit codes: 0 success, 1 contract/config error, 2 verification failure.
``PSF_THREADS`` caps the worker pool (default: machine parallelism).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .attention import euclidean_attention, dot_product_attention
from .condensation import attention_condense, fps
from .config import load_train_config
from .data import (CLASS_NAMES, SEG_PART_NAMES, DatasetManifest, PointCloud,
                   read_points, synth_classification, synth_segmentation,
                   write_manifest, write_points)
from .errors import ContractError, PSFormerError
from .gradcheck import format_report, run_suite
from .model import (build, forward, forward_classify, load_checkpoint)
from .tensor import Tensor
from .train import (accuracy, instance_mean_iou, load_datasets, per_class_iou,
                    resolve_workers, run_training)
import psformer.tensor as tc


def _echo(message):
    print(message, flush=True)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args):
    cfg = load_train_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out_dir = Path(args.out)
    history, ckpt = run_training(cfg, out_dir, log=_echo)
    best = max(m.test_acc for m in history)
    _echo(f"done: best test metric {best:.4f}; checkpoint {ckpt}; "
          f"metrics {out_dir / 'metrics.jsonl'}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args):
    cfg = load_train_config(args.config)
    model = load_checkpoint(args.checkpoint)
    if model.config != cfg.model:
        raise ContractError("checkpoint model config does not match the config file")
    _, test_data = load_datasets(cfg)

    task = model.config.task
    n_test = len(test_data)
    if task == "classify":
        preds = np.empty(n_test, dtype=np.int64)
        for i in range(n_test):
            preds[i] = int(np.argmax(forward(model, test_data.points[i]).data))
        acc = accuracy(preds, test_data.labels)
        _echo(json.dumps({"samples": n_test, "accuracy": acc}))
    else:
        preds = np.empty((n_test, model.config.n_points), dtype=np.int64)
        for i in range(n_test):
            preds[i] = np.argmax(forward(model, test_data.points[i]).data, axis=1)
        miou = instance_mean_iou(preds, test_data.point_labels)
        table = per_class_iou(preds, test_data.point_labels, model.config.n_classes)
        names = test_data.class_names or list(SEG_PART_NAMES)
        per_class = {names[c] if c < len(names) else str(c):
                     (None if v is None else round(v, 6))
                     for c, v in table.items()}
        _echo(json.dumps({"samples": n_test, "instance_miou": miou,
                          "per_class_iou": per_class}))
    return 0


# ---------------------------------------------------------------------------
# condense
# ---------------------------------------------------------------------------

def _features_for_condense(cloud_pts, checkpoint):
    """Learned features when a checkpoint is supplied, else raw coordinates
    (with a warning, matching the fallback contract)."""
    if checkpoint is None:
        _echo("warning: no checkpoint given; condensing on raw coordinates")
        return Tensor(cloud_pts)
    model = load_checkpoint(checkpoint)
    trunk = model.trunks[0]
    if cloud_pts.shape[1] != model.config.input_channels:
        _echo("warning: checkpoint input channels do not match the cloud; "
              "condensing on raw coordinates")
        return Tensor(cloud_pts)
    x = trunk.embed.apply(Tensor(cloud_pts))
    for sa in (trunk.sa1, trunk.sa2):
        out, _ = dot_product_attention(x, sa)
        x = tc.add(x, out)
    return x


def cmd_condense(args):
    cloud = read_points(args.input)
    pts = cloud.points
    n = pts.shape[0]
    if not 1 <= args.t <= n:
        raise ContractError(f"T={args.t} outside [1, {n}]")

    if args.method == "fps":
        selected = fps(pts[:, :3], args.t, start=args.start)
    else:
        feats = _features_for_condense(pts, args.checkpoint)
        mask = np.eye(n, dtype=bool)
        result = euclidean_attention(feats, feats, mask=mask)
        selected = attention_condense(result.A_prime, args.t)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ext = "pcp" if args.format == "binary" else "txt"
    centers = PointCloud(points=pts[selected])
    write_points(out_dir / f"centers_{args.method}.{ext}", centers, fmt=args.format)
    write_points(out_dir / f"cloud.{ext}", cloud, fmt=args.format)
    _echo(f"selected {args.t} of {n} centers by {args.method} -> "
          f"{out_dir / f'centers_{args.method}.{ext}'}")
    return 0


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

def _ps_stage_seconds(model, points, passes=5):
    """Mean seconds spent in the layer stack per forward pass."""
    timer = {}
    for i in range(min(passes, points.shape[0])):
        forward(model, points[i], timer=timer)
    return timer.get("ps_layers", 0.0) / min(passes, points.shape[0])


def cmd_ablate(args):
    cfg = load_train_config(args.config)
    seeds = [int(s) for s in args.seeds.split(",") if s]
    if not seeds:
        raise ContractError("ablate requires at least one seed")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.condense_counts:
        rows = [("T=" + t, {"n_condensed": int(t)})
                for t in args.condense_counts.split(",") if t]
    elif args.variants:
        rows = [(v, {"variant": v}) for v in args.variants.split(",") if v]
    else:
        raise ContractError("ablate needs --variants or --condense-counts")

    table = []
    for name, overrides in rows:
        accs = []
        stage_seconds = None
        for seed in seeds:
            run_cfg = load_train_config(args.config)
            for key, value in overrides.items():
                setattr(run_cfg.model, key, value)
            run_cfg.seed = seed
            run_dir = out_dir / "runs" / f"{name.replace('=', '')}_seed{seed}"
            history, ckpt = run_training(run_cfg, run_dir, log=None)
            accs.append(max(m.test_acc for m in history))
            if stage_seconds is None:
                model = load_checkpoint(ckpt)
                _, test_data = load_datasets(run_cfg)
                stage_seconds = _ps_stage_seconds(model, test_data.points)
            _echo(f"{name} seed {seed}: best {accs[-1]:.4f}")
        table.append({"config": name, "mean_acc": float(np.mean(accs)),
                      "std_acc": float(np.std(accs)),
                      "accs": [round(a, 6) for a in accs],
                      "ps_stage_seconds": stage_seconds})

    report_path = out_dir / "ablation.jsonl"
    with open(report_path, "w") as fh:
        for row in table:
            fh.write(json.dumps(row) + "\n")
    _echo(f"{'config':<20} {'mean':>8} {'std':>8} {'ps-stage s/pass':>16}")
    for row in table:
        _echo(f"{row['config']:<20} {row['mean_acc']:>8.4f} {row['std_acc']:>8.4f} "
              f"{row['ps_stage_seconds']:>16.4f}")
    _echo(f"report: {report_path}")
    return 0


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def cmd_gradcheck(args):
    started = time.perf_counter()
    results = run_suite(instances=args.instances, seed=args.seed or 0)
    _echo(format_report(results))
    elapsed = time.perf_counter() - started
    failing = [r for r in results if not r.passed]
    _echo(f"{len(results) - len(failing)}/{len(results)} checks passed "
          f"in {elapsed:.1f}s")
    return 2 if failing else 0


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args):
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ext = "pcp" if args.format == "binary" else "txt"
    seed = args.seed or 0

    if args.kind == "classification":
        train, test = synth_classification(seed, args.n_per_class, args.n_points)
        for split, ds in (("train", train), ("test", test)):
            entries = []
            for i in range(len(ds)):
                name = f"{split}_{i:05d}.{ext}"
                write_points(out_dir / name, ds.cloud(i), fmt=args.format)
                entries.append((name, int(ds.labels[i])))
            write_manifest(out_dir / f"{split}.tsv",
                           DatasetManifest(entries=entries, split=split,
                                           class_names=list(CLASS_NAMES)))
        _echo(f"wrote {len(train)} train + {len(test)} test clouds to {out_dir}")
    else:
        ds = synth_segmentation(seed, args.n_samples, args.n_points)
        for i in range(len(ds)):
            write_points(out_dir / f"seg_{i:05d}.{ext}", ds.cloud(i), fmt=args.format)
        _echo(f"wrote {len(ds)} labeled composite clouds to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def cmd_bench(args):
    cfg = load_train_config(args.config)
    model = build(cfg.model, seed=cfg.seed)
    rng = rngmod.stream(cfg.seed, rngmod.GENERIC)
    clouds = rng.normal(size=(args.passes, cfg.model.n_points, cfg.model.input_channels))

    forward(model, clouds[0])  # warm up
    timer = {}
    started = time.perf_counter()
    for i in range(args.passes):
        forward(model, clouds[i], timer=timer)
    total = time.perf_counter() - started

    _echo(f"{args.passes} forward passes, {total / args.passes * 1e3:.2f} ms each")
    for stage, seconds in sorted(timer.items(), key=lambda kv: -kv[1]):
        _echo(f"  {stage:<16} {seconds / args.passes * 1e3:8.2f} ms/pass")
    _echo(json.dumps({"passes": args.passes, "seconds_per_pass": total / args.passes,
                      "stage_seconds_per_pass":
                      {k: v / args.passes for k, v in timer.items()}}))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def make_parser():
    parser = argparse.ArgumentParser(
        prog="psformer",
        description="Train and probe the point-cloud recognition model.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the training loop")
    p.add_argument("--config", required=True, help="key = value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="runs/latest")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("condense", help="extract condensation centers")
    p.add_argument("--input", required=True, help="point file (text or binary)")
    p.add_argument("--t", type=int, required=True, help="number of centers")
    p.add_argument("--method", choices=("attention", "fps"), default="attention")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--start", type=int, default=0, help="fps start index")
    p.add_argument("--out", default="runs/condense")
    p.add_argument("--format", choices=("text", "binary"), default="text")
    p.set_defaults(fn=cmd_condense)

    p = sub.add_parser("ablate", help="train a suite of variants")
    p.add_argument("--config", required=True)
    p.add_argument("--variants", default="",
                   help="comma list, e.g. full,no_structure,combined")
    p.add_argument("--condense-counts", default="",
                   help="comma list of condensation sizes to sweep")
    p.add_argument("--seeds", default="0")
    p.add_argument("--out", default="runs/ablate")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference verification suite")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("synth", help="generate synthetic datasets")
    p.add_argument("--kind", choices=("classification", "segmentation"),
                   default="classification")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-per-class", type=int, default=50)
    p.add_argument("--n-samples", type=int, default=150)
    p.add_argument("--n-points", type=int, default=256)
    p.add_argument("--format", choices=("text", "binary"), default="binary")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("bench", help="time forward passes per pipeline stage")
    p.add_argument("--config", required=True)
    p.add_argument("--passes", type=int, default=10)
    p.set_defaults(fn=cmd_bench)

    return parser


def main(argv=None):
    args = make_parser().parse_args(argv)
    try:
        return args.fn(args)
    except PSFormerError as err:
        print(f"error: {err}", file=sys.stderr, flush=True)
        return 1
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr, flush=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
