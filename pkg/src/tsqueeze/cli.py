"""Command-line entry point: ``tsqueeze {squeeze,train,eval,gradcheck,gen-data}``.

Errors are reported on stderr as a single ``error: <category>: <message>``
line with exit status 1.
"""

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import data as D
from .errors import ConfigError, DataError, TSQError
from .gradcheck import check_network, check_ts_layer, small_network_config
from .network import fuse_streams, load_config, predict
from .tensor import precision_name, resolve_dtype
from .train import (
    Checkpoint,
    TrainConfig,
    evaluate,
    load_param_file,
    minimize_projection,
    save_param_file,
    train,
)
from .tspool import INIT_BASES, TSLayerParams, ts_forward


class _Formatter(argparse.ArgumentDefaultsHelpFormatter):
    """Append defaults, except for required flags and unset (None) defaults."""

    def _get_help_string(self, action):
        text = action.help or ""
        if action.required or action.default in (None, argparse.SUPPRESS) or "%(default)" in text:
            return text
        return text + " (default: %(default)s)"


def _add_synthetic_flags(p):
    g = p.add_argument_group("synthetic data (used when --manifest is not given)")
    g.add_argument("--classes", type=int, default=2, help="number of motion classes (even)")
    g.add_argument("--videos-per-class", type=int, default=125, help="videos generated per class")
    g.add_argument("--frames", type=int, default=8, help="frames per video")
    g.add_argument("--height", type=int, default=16, help="frame height")
    g.add_argument("--width", type=int, default=16, help="frame width")
    g.add_argument("--channels", type=int, default=1, help="channels per frame")
    g.add_argument("--noise", type=float, default=0.0, help="Gaussian noise std")
    g.add_argument("--data-seed", type=int, default=0, help="generator seed")


def _synthetic_spec(args):
    return D.SyntheticSpec(
        num_classes=args.classes, frames_per_video=args.frames, height=args.height,
        width=args.width, channels=args.channels, noise_std=args.noise, seed=args.data_seed,
    )


def _load_dataset(args):
    if args.manifest:
        return D.load_manifest(args.manifest)
    return D.generate(_synthetic_spec(args), args.videos_per_class)


def build_parser():
    parser = argparse.ArgumentParser(prog="tsqueeze", description=__doc__.splitlines()[0],
                                     formatter_class=_Formatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("squeeze", help="squeeze K frames into D images", formatter_class=_Formatter)
    p.add_argument("--frames", required=True, help="frame directory or TSQ1 clip file")
    p.add_argument("--k", type=int, required=True, help="clip length")
    p.add_argument("--d", type=int, required=True, help="number of squeezed frames")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--weights", default=None, help="parameter/checkpoint file holding <layer>.w1/.w2")
    p.add_argument("--layer", default="ts0", help="parameter prefix inside --weights")
    p.add_argument("--optimize-steps", type=int, default=0,
                   help="descend the projection residual for N steps before emitting")
    p.add_argument("--lr", type=float, default=0.1, help="step size for --optimize-steps")
    p.add_argument("--momentum", type=float, default=0.9, help="momentum for --optimize-steps")
    p.add_argument("--start", type=int, default=0, help="index of the first frame used")
    p.add_argument("--init", choices=INIT_BASES, default="segment", help="initial hyperplane basis")
    p.add_argument("--seed", type=int, default=0, help="seed for the initial weights")
    p.add_argument("--precision", choices=("f32", "f64"), default=None,
                   help="scalar precision; unset means $TSQ_PRECISION, else f32")

    p = sub.add_parser("train", help="train the temporal-squeeze classifier", formatter_class=_Formatter)
    p.add_argument("--config", required=True, help="network config JSON path or built-in name")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--manifest", default=None, help="dataset manifest JSON")
    _add_synthetic_flags(p)
    p.add_argument("--epochs", type=int, default=30, help="training epochs")
    p.add_argument("--batch-size", type=int, default=8, help="clips per SGD step")
    p.add_argument("--lr", type=float, default=0.03, help="initial learning rate")
    p.add_argument("--momentum", type=float, default=0.9, help="SGD momentum")
    p.add_argument("--lr-decay", type=float, default=0.1, help="factor applied when validation accuracy plateaus")
    p.add_argument("--patience", type=int, default=3, help="epochs without improvement before decay")
    p.add_argument("--beta", type=float, default=10.0, help="weight of the projection loss")
    p.add_argument("--lambda", dest="lam", type=float, default=4e-5, help="weight decay")
    p.add_argument("--seed", type=int, default=0, help="seed for init, split and clip sampling")
    p.add_argument("--eval-clips", type=int, default=20, help="clips per video at evaluation")
    p.add_argument("--workers", type=int, default=1, help="threads per batch; 1 is bit-reproducible")
    p.add_argument("--precision", choices=("f32", "f64"), default=None,
                   help="scalar precision; unset means $TSQ_PRECISION, else f32")

    p = sub.add_parser("eval", help="clip-averaged top-1 evaluation", formatter_class=_Formatter)
    p.add_argument("--checkpoint", required=True, help="checkpoint written by train")
    p.add_argument("--manifest", default=None, help="dataset manifest JSON")
    _add_synthetic_flags(p)
    p.add_argument("--split", choices=("all", "test"), default="all",
                   help="'test' re-creates the training run's held-out split")
    p.add_argument("--clips", type=int, default=20, help="clips per video")
    p.add_argument("--scores-out", default=None, help="write per-video scores CSV")
    p.add_argument("--fuse-scores", default=None,
                   help="per-video scores CSV of another stream to average with")

    p = sub.add_parser("gradcheck", help="finite-difference gradient check", formatter_class=_Formatter)
    p.add_argument("--target", choices=("ts", "network"), default="ts", help="what to check")
    p.add_argument("--k", type=int, default=4, help="clip length")
    p.add_argument("--d", type=int, default=2, help="squeezed length")
    p.add_argument("--height", type=int, default=2, help="frame height (network target uses at least 4)")
    p.add_argument("--width", type=int, default=2, help="frame width (network target uses at least 4)")
    p.add_argument("--channels", type=int, default=1, help="channels (ts target only)")
    p.add_argument("--instances", type=int, default=1, help="number of random instances")
    p.add_argument("--seed", type=int, default=0, help="seed of the first instance")
    p.add_argument("--step", type=float, default=1e-5, help="finite-difference step")
    p.add_argument("--tol", type=float, default=1e-5, help="relative error tolerance")

    p = sub.add_parser("gen-data", help="write a synthetic dataset", formatter_class=_Formatter)
    p.add_argument("--out", required=True, help="dataset root directory")
    _add_synthetic_flags(p)
    return parser


def _print_config(args):
    resolved = {k: v for k, v in vars(args).items()}
    print("config: " + json.dumps(resolved, sort_keys=True), flush=True)


def cmd_squeeze(args):
    if not 1 <= args.d <= args.k:
        raise ConfigError(f"need 1 <= D <= K, got K={args.k}, D={args.d}")
    dtype = resolve_dtype(args.precision)
    frames = D.load_frames(args.frames)
    if len(frames) < args.start + args.k:
        raise DataError(f"{args.frames} has {len(frames)} frames, need {args.start + args.k}")
    clip = frames[args.start:args.start + args.k].astype(dtype)
    if args.weights:
        _, params = load_param_file(args.weights)
        try:
            w1, w2 = params[f"{args.layer}.w1"], params[f"{args.layer}.w2"]
        except KeyError:
            raise ConfigError(f"{args.weights} has no {args.layer}.w1/.w2")
        if w1.shape != (args.k, args.k) or w2.shape != (args.k * args.d, args.k):
            raise ConfigError(f"weights {w1.shape}/{w2.shape} do not match K={args.k}, D={args.d}")
        tsp = TSLayerParams(w1.astype(dtype), w2.astype(dtype), args.k, args.d)
    else:
        tsp = TSLayerParams.init(args.k, args.d, np.random.default_rng(args.seed), dtype=dtype, basis=args.init)
    history = []
    if args.optimize_steps > 0:
        tsp, history = minimize_projection(clip, tsp, args.optimize_steps, args.lr, args.momentum)
    out = ts_forward(clip, tsp)
    os.makedirs(args.out, exist_ok=True)
    pngs = D.save_squeezed(out, args.out)
    save_param_file(os.path.join(args.out, "ts_params.tsqp"), {"ts0.w1": tsp.w1, "ts0.w2": tsp.w2},
                    {"k": args.k, "d": args.d})
    mean_norm = float(np.mean(np.linalg.norm(clip.reshape(args.k, -1).astype(np.float64), axis=0)))
    report = {
        "k": args.k,
        "d": args.d,
        "residual": float(out.residual),
        "mean_pixel_norm": mean_norm,
        "relative_residual": float(out.residual) / mean_norm if mean_norm > 0 else 0.0,
        "optimize_steps": args.optimize_steps,
        "precision": precision_name(dtype),
        "images": [os.path.basename(p) for p in pngs],
    }
    with open(os.path.join(args.out, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    if history:
        with open(os.path.join(args.out, "residual_history.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "residual"])
            w.writerows((i, repr(r)) for i, r in enumerate(history))
    print(f"residual {report['residual']:.6g} relative {report['relative_residual']:.6g}")
    print(f"wrote {len(pngs)} images to {args.out}")
    return 0


def cmd_train(args):
    net_cfg = load_config(args.config)
    precision = args.precision or precision_name(resolve_dtype(None))
    tcfg = TrainConfig(
        batch_size=args.batch_size, momentum=args.momentum, lr=args.lr, lr_decay_factor=args.lr_decay,
        epochs=args.epochs, beta=args.beta, lam=args.lam, seed=args.seed,
        eval_clips_per_video=args.eval_clips, patience=args.patience, workers=args.workers,
        precision=precision,
    )
    dataset = _load_dataset(args)
    result = train(dataset, net_cfg, tcfg, out_dir=args.out)
    with open(os.path.join(args.out, "split.json"), "w") as fh:
        json.dump({"train": [v.id for v in result.train_set], "test": [v.id for v in result.test_set]}, fh)
    acc = result.metrics[-1]["val_acc"] if result.metrics else evaluate(
        result.test_set, result.checkpoint, tcfg.eval_clips_per_video).accuracy
    print(f"test_acc {acc:.4f}")
    return 0


def _read_scores(path):
    scores = {}
    try:
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                vals = [float(row[k]) for k in row if k.startswith("score_")]
                scores[row["id"]] = (int(row["label"]), np.array(vals))
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot read scores file {path}: {exc}")
    return scores


def cmd_eval(args):
    ckpt = Checkpoint.load(args.checkpoint)
    dataset = _load_dataset(args)
    if args.split == "test":
        _, dataset = D.split_dataset(dataset, ckpt.train_config.seed, ckpt.train_config.test_fraction)
    res = evaluate(dataset, ckpt, args.clips)
    ids = [v.id for v in dataset]
    if args.scores_out:
        ncls = ckpt.network_config.num_classes
        with open(args.scores_out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "label", "pred"] + [f"score_{c}" for c in range(ncls)])
            for vid in ids:
                w.writerow([vid, res.labels[vid], res.predictions[vid]] + [repr(float(s)) for s in res.video_scores[vid]])
    print(f"accuracy {res.accuracy:.4f} videos {len(ids)}")
    if args.fuse_scores:
        other = _read_scores(args.fuse_scores)
        missing = [vid for vid in ids if vid not in other]
        if missing:
            raise ConfigError(f"{args.fuse_scores} lacks scores for {missing[:3]}")
        fused = fuse_streams(np.stack([res.video_scores[v] for v in ids]), np.stack([other[v][1] for v in ids]))
        acc = float(np.mean(predict(fused) == np.array([res.labels[v] for v in ids])))
        print(f"fused_accuracy {acc:.4f}")
    return 0


def cmd_gradcheck(args):
    ok = True
    for i in range(args.instances):
        seed = args.seed + i
        if args.target == "ts":
            rep = check_ts_layer(args.k, args.d, args.height, args.width, args.channels, seed, args.step, args.tol)
        else:
            cfg = small_network_config(args.k, args.d)
            rep = check_network(cfg, h=max(args.height, 4), w=max(args.width, 4), seed=seed,
                                step=args.step, tol=args.tol)
        if args.instances > 1:
            print(f"# instance {i} seed {seed}")
        for line in rep.lines():
            print(line)
        ok &= rep.passed
    if args.instances > 1:
        print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_gen_data(args):
    records = D.generate(_synthetic_spec(args), args.videos_per_class)
    path = D.write_dataset(records, args.out)
    print(f"wrote {len(records)} videos; manifest {path}")
    return 0


COMMANDS = {
    "squeeze": cmd_squeeze,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "gen-data": cmd_gen_data,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _print_config(args)
    try:
        return COMMANDS[args.command](args)
    except TSQError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
