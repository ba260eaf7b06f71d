"""SGD training, clip-averaged evaluation and checkpoints for the temporal-squeeze classifier."""

import csv
import json
import logging
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import sample_clip, split_dataset, uniform_starts
from .errors import ConfigError, SingularityError, TrainingDiverged, TSQIOError
from .grad import ParamSet, backprop
from .network import LossBreakdown, NetworkConfig, TeSNet, is_weight, predict
from .tensor import dumps_tensor, loads_tensor, resolve_dtype
from .tspool import ts_backward, ts_forward

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"TSQC"


@dataclass
class TrainConfig:
    batch_size: int = 8
    momentum: float = 0.9
    lr: float = 0.001
    lr_decay_factor: float = 0.1
    epochs: int = 30
    beta: float = 10.0
    lam: float = 4e-5
    seed: int = 0
    eval_clips_per_video: int = 20
    patience: int = 3
    test_fraction: float = 0.2
    workers: int = 1
    precision: str = "f32"

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if not self.lr >= 0:
            raise ConfigError("lr must be >= 0")
        if self.batch_size < 1 or self.epochs < 0 or self.eval_clips_per_video < 1:
            raise ConfigError("batch_size, eval_clips_per_video must be >= 1 and epochs >= 0")
        if self.workers < 1 or self.patience < 1:
            raise ConfigError("workers and patience must be >= 1")
        resolve_dtype(self.precision)

    def to_dict(self):
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad train config: {exc}")


def sgd_step(params, grads, velocity, lr, momentum):
    """Heavy-ball update in place: ``v = momentum*v + g``; ``p -= lr*v``."""
    for name in params:
        v = velocity[name]
        v *= momentum
        v += grads[name]
        params[name] -= lr * v
    return params, velocity


# -- checkpoints --------------------------------------------------------------
# "TSQC" | u32 header length | UTF-8 JSON header | one TSQ1 blob per parameter,
# in the order listed under header["params"].


@dataclass
class Checkpoint:
    network_config: NetworkConfig
    train_config: TrainConfig
    params: ParamSet
    epoch: int = 0
    lr: float = None
    rng_state: dict = None
    extra: dict = field(default_factory=dict)

    def header(self):
        return {
            "network_config": self.network_config.to_dict(),
            "train_config": self.train_config.to_dict() if self.train_config else None,
            "epoch": self.epoch,
            "lr": self.lr,
            "rng_state": self.rng_state,
            "extra": self.extra,
            "params": list(self.params),
        }

    def to_bytes(self):
        head = json.dumps(self.header(), sort_keys=True).encode()
        blobs = b"".join(dumps_tensor(self.params[k]) for k in self.params)
        return CHECKPOINT_MAGIC + struct.pack("<I", len(head)) + head + blobs

    def save(self, path):
        tmp = path + ".tmp"
        with open(tmp, "wb") as fh:
            fh.write(self.to_bytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path):
        header, params = load_param_file(path)
        try:
            net_cfg = NetworkConfig.from_dict(header["network_config"])
            tc = header.get("train_config")
            train_cfg = TrainConfig.from_dict(tc) if tc else TrainConfig()
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"checkpoint {path} has an unusable header: {exc}")
        return cls(net_cfg, train_cfg, params, header.get("epoch", 0), header.get("lr"),
                   header.get("rng_state"), header.get("extra") or {})

    def network(self):
        return TeSNet(self.network_config, params=self.params)


def save_param_file(path, params, header=None):
    header = dict(header or {})
    header["params"] = list(params)
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<I", len(head)) + head)
        for k in params:
            fh.write(dumps_tensor(params[k]))


def load_param_file(path):
    """Read a checkpoint/parameter file; returns ``(header, ParamSet)``."""
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc.strerror}")
    if buf[:4] != CHECKPOINT_MAGIC or len(buf) < 8:
        raise ConfigError(f"{path} is not a checkpoint file")
    (hlen,) = struct.unpack_from("<I", buf, 4)
    try:
        header = json.loads(buf[8:8 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"checkpoint {path} has a corrupt header: {exc}")
    pos = 8 + hlen
    params = ParamSet()
    try:
        for name in header.get("params", []):
            params[name], pos = loads_tensor(buf, pos, source=path)
    except TSQIOError as exc:
        raise ConfigError(str(exc))
    return header, params


# -- evaluation ---------------------------------------------------------------


@dataclass
class EvalResult:
    accuracy: float
    video_scores: dict      # id -> averaged class scores
    predictions: dict       # id -> predicted class
    labels: dict


def video_scores(net, videos, clips_per_video, batch_size=32):
    """Average softmax scores over ``clips_per_video`` evenly spaced clips per video."""
    k = net.config.k
    jobs = []
    for v in videos:
        starts = uniform_starts(len(v.frames), k, clips_per_video)
        # identical starts give identical clips; score each distinct clip once
        uniq, counts = np.unique(starts, return_counts=True)
        for s, c in zip(uniq, counts):
            jobs.append((v.id, int(s), int(c)))
    sums = {}
    frames = {v.id: v.frames for v in videos}
    for i in range(0, len(jobs), batch_size):
        chunk = jobs[i:i + batch_size]
        batch = np.stack([frames[vid][s:s + k] for vid, s, _ in chunk])
        scores, _, _ = net.forward(batch)
        for (vid, _, c), sc in zip(chunk, scores):
            sums[vid] = sums.get(vid, 0.0) + c * sc.astype(np.float64)
    return {v.id: sums[v.id] / clips_per_video for v in videos}


def evaluate(dataset, checkpoint, eval_clips_per_video=20):
    if not dataset:
        raise ConfigError("cannot evaluate on an empty dataset")
    net = checkpoint if isinstance(checkpoint, TeSNet) else checkpoint.network()
    shape = dataset[0].frames.shape
    if shape[-1] != net.config.channels:
        raise ConfigError(f"videos have {shape[-1]} channels, checkpoint expects {net.config.channels}")
    if any(v.label >= net.config.num_classes for v in dataset):
        raise ConfigError("dataset labels exceed the checkpoint's class count")
    scores = video_scores(net, dataset, eval_clips_per_video)
    preds = {vid: int(predict(s)) for vid, s in scores.items()}
    labels = {v.id: v.label for v in dataset}
    acc = float(np.mean([preds[v.id] == v.label for v in dataset]))
    return EvalResult(acc, scores, preds, labels)


# -- training -----------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list
    train_set: list
    test_set: list


def _shard_grads(net, clips, labels, params, workers, beta):
    """Per-shard forward/backward in threads, reduced in fixed shard order."""
    bsz = len(labels)
    bounds = np.linspace(0, bsz, min(workers, bsz) + 1).astype(int)
    shards = [(bounds[i], bounds[i + 1]) for i in range(len(bounds) - 1)]

    def run(lo_hi):
        lo, hi = lo_hi
        _, lb, st = net.forward(clips[lo:hi], labels[lo:hi], params=params, beta=beta,
                                include_l2=False)
        return lb, net.backward(st, 1.0, include_l2=False), hi - lo

    with ThreadPoolExecutor(max_workers=len(shards)) as pool:
        parts = list(pool.map(run, shards))
    grads = params.zeros_like()
    classif = 0.0
    proj = None
    for lb, g, n in parts:
        w = n / bsz
        classif += w * lb.classif
        proj = [w * p for p in lb.proj_terms] if proj is None else [a + w * p for a, p in zip(proj, lb.proj_terms)]
        for name in grads:
            grads[name] += (w * g[name]).astype(grads[name].dtype)
    return classif, proj, grads


def _batch_step(net, clips, labels, params, cfg):
    if cfg.workers == 1:
        _, lb, st = net.forward(clips, labels, params=params, beta=cfg.beta, lam=cfg.lam)
        return lb, backprop(st)
    classif, proj, grads = _shard_grads(net, clips, labels, params, cfg.workers, cfg.beta)
    l2 = sum(0.5 * np.sum(np.square(v, dtype=np.float64)) for k, v in params.items() if is_weight(k))
    for name in params:
        if is_weight(name):
            grads[name] += (cfg.lam * params[name]).astype(grads[name].dtype)
    return LossBreakdown.compose(classif, proj, l2, cfg.beta, cfg.lam), grads


def metrics_header(num_proj):
    return ["epoch", "classif"] + [f"proj_{i + 1}" for i in range(num_proj)] + ["l2", "total", "val_acc", "lr"]


def write_metrics_csv(path, rows, num_proj):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(metrics_header(num_proj))
        for r in rows:
            w.writerow([r["epoch"], repr(r["classif"])] + [repr(p) for p in r["proj"]]
                       + [repr(r["l2"]), repr(r["total"]), repr(r["val_acc"]), repr(r["lr"])])


def train(dataset, net_cfg, train_cfg, out_dir=None, test_set=None):
    """Train on an 80/20 seeded split of ``dataset`` (or on all of it when
    ``test_set`` is given). The test split doubles as the validation set that
    drives learning-rate decay.
    """
    if not dataset:
        raise ConfigError("training dataset is empty")
    cfg = train_cfg
    if test_set is None:
        train_set, test_set = split_dataset(dataset, cfg.seed, cfg.test_fraction)
    else:
        train_set = list(dataset)
    if not train_set or not test_set:
        raise ConfigError("split produced an empty train or test set")
    k = net_cfg.k
    too_short = [v.id for v in train_set + test_set if len(v.frames) < k]
    if too_short:
        raise ConfigError(f"videos shorter than K={k}: {too_short[:3]}")

    # beta / lambda of the run come from the training config
    net_cfg = replace(net_cfg, beta=cfg.beta, lam=cfg.lam)
    dtype = resolve_dtype(cfg.precision)
    rng = np.random.default_rng(cfg.seed)
    net = TeSNet(net_cfg, rng=rng, dtype=dtype)
    params = net.params
    velocity = params.zeros_like()
    lr = cfg.lr
    m = net.num_proj_terms

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, "checkpoint.tsqc") if out_dir else None

    def snapshot(epoch):
        return Checkpoint(net_cfg, cfg, params.copy(), epoch, lr, rng.bit_generator.state)

    last_good = snapshot(0)
    metrics = []
    best_acc = -1.0
    stale = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_set))
        sums = {"classif": 0.0, "proj": np.zeros(m), "l2": 0.0, "total": 0.0}
        seen = 0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            clips = np.stack([sample_clip(train_set[j], k, "random", rng) for j in idx]).astype(dtype)
            labels = np.array([train_set[j].label for j in idx])
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    lb, grads = _batch_step(net, clips, labels, params, cfg)
                finite = math.isfinite(lb.total) and grads.all_finite()
            except SingularityError:
                finite = False
            if not finite:
                if ckpt_path:
                    last_good.save(ckpt_path)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", last_good, ckpt_path)
            sgd_step(params, grads, velocity, lr, cfg.momentum)
            n = len(idx)
            seen += n
            sums["classif"] += n * lb.classif
            sums["proj"] += n * np.asarray(lb.proj_terms, dtype=np.float64)
            sums["l2"] += n * lb.l2
            sums["total"] += n * lb.total
        val = evaluate(test_set, net, cfg.eval_clips_per_video).accuracy
        row = {
            "epoch": epoch,
            "classif": float(sums["classif"] / seen),
            "proj": [float(p / seen) for p in sums["proj"]],
            "l2": float(sums["l2"] / seen),
            "total": float(sums["total"] / seen),
            "val_acc": val,
            "lr": lr,
        }
        metrics.append(row)
        log.info("epoch %d total %.4f classif %.4f val_acc %.3f lr %g",
                 epoch, row["total"], row["classif"], val, lr)
        last_good = snapshot(epoch + 1)
        if out_dir:
            last_good.save(ckpt_path)
            write_metrics_csv(os.path.join(out_dir, "metrics.csv"), metrics, m)
        if val > best_acc:
            best_acc, stale = val, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                lr *= cfg.lr_decay_factor
                stale = 0
    final = snapshot(cfg.epochs)
    if out_dir:
        final.save(ckpt_path)
        write_metrics_csv(os.path.join(out_dir, "metrics.csv"), metrics, m)
    return TrainResult(final, metrics, train_set, test_set)


def minimize_projection(clip, ts_params, steps, lr=0.1, momentum=0.9):
    """Descend the projection residual alone over W1 and W2.

    Returns the updated layer parameters and the residual before each step.
    """
    w = ParamSet({"w1": ts_params.w1.copy(), "w2": ts_params.w2.copy()})
    velocity = w.zeros_like()
    history = []
    for _ in range(steps):
        out = ts_forward(clip, ts_params.with_weights(w["w1"], w["w2"]))
        if not np.isfinite(out.residual):
            raise TrainingDiverged("projection residual became non-finite")
        history.append(float(out.residual))
        _, g1, g2 = ts_backward(out.cache, np.zeros_like(out.y), 1.0)
        sgd_step(w, ParamSet({"w1": g1, "w2": g2}), velocity, lr, momentum)
    return ts_params.with_weights(w["w1"], w["w2"]), history
