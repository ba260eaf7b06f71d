"""A small 2-D CNN with temporal squeeze layers at configurable depths.

Layout: activations are channels-last. Before the last temporal layer a batch
is ``(B, T, H, W, C)`` and conv blocks run frame-wise with shared weights.
Right after the last temporal layer the remaining frames are concatenated
along channels, giving ``(B, H, W, T*C)``. The head is global average
pooling followed by a linear classifier.

A placement ``(b, D)`` inserts a temporal layer in front of conv block ``b``;
``b == len(conv_blocks)`` puts it after the last block.
"""

import json
import os
import warnings
from dataclasses import asdict, dataclass, field, replace
from importlib import resources

import numpy as np

from .errors import ConfigError, ShapeError, StateError
from .grad import ParamSet
from .tspool import (
    DEFAULT_LEAKY_SLOPE,
    DEFAULT_RIDGE_EPS,
    DEFAULT_RIDGE_REL,
    INIT_BASES,
    TSLayerParams,
    ts_backward,
    ts_forward,
)

FRAME_MERGE = "concat"
POOLING_KINDS = ("ts", "mean")


@dataclass
class NetworkConfig:
    k: int
    num_classes: int
    ts_placements: list
    conv_blocks: list = field(default_factory=lambda: [(8, 3, 2), (16, 3, 2)])
    channels: int = 1
    beta: float = 10.0
    lam: float = 4e-5
    pooling: str = "ts"
    leaky_slope: float = DEFAULT_LEAKY_SLOPE
    ridge_eps: float = DEFAULT_RIDGE_EPS
    ridge_rel: float = DEFAULT_RIDGE_REL
    init_basis: str = "segment"
    allow_non_pyramidal: bool = False
    frame_merge: str = FRAME_MERGE

    def __post_init__(self):
        self.ts_placements = [tuple(int(v) for v in p) for p in self.ts_placements]
        self.conv_blocks = [tuple(int(v) for v in b) for b in self.conv_blocks]
        self.validate()

    def validate(self):
        if self.k < 1 or self.channels < 1:
            raise ConfigError("k and channels must be >= 1")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be a positive integer")
        if self.pooling not in POOLING_KINDS:
            raise ConfigError(f"pooling must be one of {POOLING_KINDS}, got {self.pooling!r}")
        if self.init_basis not in INIT_BASES:
            raise ConfigError(f"init_basis must be one of {INIT_BASES}, got {self.init_basis!r}")
        if self.frame_merge != FRAME_MERGE:
            raise ConfigError(f"only frame_merge={FRAME_MERGE!r} is supported")
        if not self.ts_placements:
            raise ConfigError("at least one temporal layer placement is required")
        for out, ksize, stride in self.conv_blocks:
            if out < 1 or ksize < 1 or stride < 1:
                raise ConfigError(f"bad conv block {(out, ksize, stride)}")
        prev_block = 0
        t = self.k
        ds = []
        for block, d in self.ts_placements:
            if not 0 <= block <= len(self.conv_blocks):
                raise ConfigError(f"placement block index {block} outside 0..{len(self.conv_blocks)}")
            if block < prev_block:
                raise ConfigError("placements must be ordered by block index")
            prev_block = block
            if self.pooling == "mean":
                t = 1
                continue
            if not 1 <= d <= t:
                raise ConfigError(f"placement at block {block} needs 1 <= D <= {t}, got D={d}")
            ds.append(d)
            t = d
        if any(b >= a for a, b in zip(ds, ds[1:])):
            msg = f"D values {ds} are not strictly decreasing (pyramidal rule)"
            if not self.allow_non_pyramidal:
                raise ConfigError(msg)
            warnings.warn(msg)

    def head_frames(self):
        """Temporal length that reaches the frame merge in front of the head."""
        return 1 if self.pooling == "mean" else self.ts_placements[-1][1]

    def to_dict(self):
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        d["ts_placements"] = [list(p) for p in self.ts_placements]
        d["conv_blocks"] = [list(b) for b in self.conv_blocks]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.pop("description", None)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad network config: {exc}")

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                return cls.from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read network config {path}: {exc}")


@dataclass
class LossBreakdown:
    classif: float
    proj_terms: list
    l2: float
    total: float
    beta: float
    lam: float

    @classmethod
    def compose(cls, classif, proj_terms, l2, beta, lam):
        total = classif + beta * sum(proj_terms) + lam * l2
        return cls(classif, list(proj_terms), l2, total, beta, lam)

    def recomposed(self):
        return self.classif + self.beta * sum(self.proj_terms) + self.lam * self.l2


# -- conv helpers ------------------------------------------------------------


def _im2col(x, ksize, stride):
    n, h, w, c = x.shape
    pad = ksize // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ho = (h + 2 * pad - ksize) // stride + 1
    wo = (w + 2 * pad - ksize) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"input {h}x{w} too small for kernel {ksize}")
    sn, sh, sw, sc = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (n, ho, wo, ksize, ksize, c), (sn, sh * stride, sw * stride, sh, sw, sc), writeable=False
    )
    return win.reshape(n * ho * wo, ksize * ksize * c), xp.shape, (ho, wo)


def _col2im(gcols, padded_shape, out_hw, ksize, stride, in_hw):
    n, _, _, c = padded_shape
    ho, wo = out_hw
    pad = ksize // 2
    gxp = np.zeros(padded_shape, dtype=gcols.dtype)
    g = gcols.reshape(n, ho, wo, ksize, ksize, c)
    for i in range(ksize):
        for j in range(ksize):
            gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += g[:, :, :, i, j, :]
    h, w = in_hw
    return gxp[:, pad:pad + h, pad:pad + w, :]


def conv_relu_forward(x, w, b, stride):
    ksize = w.shape[0]
    cols, padded_shape, (ho, wo) = _im2col(x, ksize, stride)
    pre = cols @ w.reshape(-1, w.shape[-1]) + b
    out = np.maximum(pre, 0)
    cache = (cols, padded_shape, (ho, wo), x.shape, pre > 0)
    return out.reshape(x.shape[0], ho, wo, w.shape[-1]), cache


def conv_relu_backward(g, cache, w, stride, need_input_grad=True):
    cols, padded_shape, out_hw, in_shape, mask = cache
    gpre = g.reshape(-1, w.shape[-1]) * mask
    gw = (cols.T @ gpre).reshape(w.shape)
    gb = gpre.sum(axis=0)
    gx = None
    if need_input_grad:
        gcols = gpre @ w.reshape(-1, w.shape[-1]).T
        gx = _col2im(gcols, padded_shape, out_hw, w.shape[0], stride, in_shape[1:3])
    return gx, gw, gb


# -- network -----------------------------------------------------------------


@dataclass
class ForwardState:
    network: "TeSNet"
    params: ParamSet
    caches: list
    feat: np.ndarray
    scores: np.ndarray
    labels: np.ndarray
    beta: float
    lam: float


def is_weight(name):
    """Names subject to the L2 term (kernels and TS weights; biases are excluded)."""
    return name.endswith((".w", ".w1", ".w2"))


class TeSNet:
    def __init__(self, config, params=None, rng=None, dtype=np.float32):
        self.config = config
        self.stages = self._plan()
        if params is None:
            rng = np.random.default_rng(0) if rng is None else rng
            params = self.init_params(rng, dtype)
        self.check_params(params)
        self.params = params

    def _plan(self):
        cfg = self.config
        stages = []
        c, t = cfg.channels, cfg.k
        temporal = True
        last = len(cfg.ts_placements) - 1
        pos = 0
        for block in range(len(cfg.conv_blocks) + 1):
            while pos <= last and cfg.ts_placements[pos][0] == block:
                d = cfg.ts_placements[pos][1]
                if cfg.pooling == "mean":
                    stages.append(("mean", pos, t))
                    t = 1
                else:
                    stages.append(("ts", pos, t, d))
                    t = d
                if pos == last:
                    stages.append(("merge", t, c))
                    c, temporal = t * c, False
                pos += 1
            if block < len(cfg.conv_blocks):
                out, ksize, stride = cfg.conv_blocks[block]
                stages.append(("conv", block, c, out, ksize, stride, temporal))
                c = out
        self.feature_dim = c
        return stages

    def param_shapes(self):
        shapes = {}
        for st in self.stages:
            if st[0] == "ts":
                _, i, t, d = st
                shapes[f"ts{i}.w1"] = (t, t)
                shapes[f"ts{i}.w2"] = (t * d, t)
            elif st[0] == "conv":
                _, b, cin, out, ksize, _, _ = st
                shapes[f"conv{b}.w"] = (ksize, ksize, cin, out)
                shapes[f"conv{b}.b"] = (out,)
        shapes["fc.w"] = (self.feature_dim, self.config.num_classes)
        shapes["fc.b"] = (self.config.num_classes,)
        return shapes

    def check_params(self, params):
        shapes = self.param_shapes()
        if set(params) != set(shapes):
            raise ConfigError(f"parameter names {sorted(params)} do not match config {sorted(shapes)}")
        for name, shape in shapes.items():
            if params[name].shape != shape:
                raise ConfigError(f"{name} has shape {params[name].shape}, config expects {shape}")

    def init_params(self, rng, dtype=np.float32):
        cfg = self.config
        p = ParamSet()
        for st in self.stages:
            if st[0] == "ts":
                _, i, t, d = st
                tsp = TSLayerParams.init(t, d, rng, dtype=np.float64, basis=cfg.init_basis,
                                         leaky_slope=cfg.leaky_slope)
                p[f"ts{i}.w1"] = tsp.w1
                p[f"ts{i}.w2"] = tsp.w2
            elif st[0] == "conv":
                _, b, cin, out, ksize, _, _ = st
                std = np.sqrt(2.0 / (ksize * ksize * cin))
                p[f"conv{b}.w"] = rng.normal(0.0, std, size=(ksize, ksize, cin, out))
                p[f"conv{b}.b"] = np.zeros(out)
        p["fc.w"] = rng.normal(0.0, 1.0 / np.sqrt(self.feature_dim), size=(self.feature_dim, cfg.num_classes))
        p["fc.b"] = np.zeros(cfg.num_classes)
        return p.astype(dtype)

    def ts_params(self, i, params=None):
        params = self.params if params is None else params
        cfg = self.config
        t = params[f"ts{i}.w1"].shape[0]
        d = params[f"ts{i}.w2"].shape[0] // t
        return TSLayerParams(params[f"ts{i}.w1"], params[f"ts{i}.w2"], t, d,
                             cfg.leaky_slope, cfg.ridge_eps, cfg.ridge_rel)

    @property
    def num_proj_terms(self):
        return sum(1 for st in self.stages if st[0] == "ts")

    def forward(self, clips, labels=None, params=None, beta=None, lam=None, include_l2=True):
        """Run a batch ``(B, K, H, W, C)``.

        Returns ``(scores, breakdown, state)``; ``breakdown`` is None without labels.
        """
        cfg = self.config
        params = self.params if params is None else params
        beta = cfg.beta if beta is None else beta
        lam = cfg.lam if lam is None else lam
        dtype = params["fc.w"].dtype
        # loss accumulation is at least 64-bit; extended precision passes through
        acc = np.promote_types(dtype, np.float64)
        x = np.asarray(clips, dtype=dtype)
        if x.ndim != 5 or x.shape[1] != cfg.k or x.shape[4] != cfg.channels:
            raise ConfigError(
                f"batch shape {x.shape} incompatible with K={cfg.k}, C={cfg.channels}"
            )
        bsz = x.shape[0]
        caches = []
        proj_terms = []
        for st in self.stages:
            kind = st[0]
            if kind == "ts":
                tsp = self.ts_params(st[1], params)
                outs = [ts_forward(x[i], tsp) for i in range(bsz)]
                x = np.stack([o.y for o in outs])
                proj_terms.append(np.mean(np.array([o.residual for o in outs], dtype=acc)))
                caches.append([o.cache for o in outs])
            elif kind == "mean":
                caches.append(x.shape)
                x = x.mean(axis=1, keepdims=True)
            elif kind == "merge":
                caches.append(x.shape)
                b_, t, h, w, c = x.shape
                x = x.transpose(0, 2, 3, 1, 4).reshape(b_, h, w, t * c)
            else:
                _, blk, _, _, _, stride, temporal = st
                w, b = params[f"conv{blk}.w"], params[f"conv{blk}.b"]
                if temporal:
                    b_, t = x.shape[:2]
                    y, cache = conv_relu_forward(x.reshape((b_ * t,) + x.shape[2:]), w, b, stride)
                    x = y.reshape((b_, t) + y.shape[1:])
                else:
                    x, cache = conv_relu_forward(x, w, b, stride)
                caches.append(cache)
        caches.append(x.shape)
        feat = x.mean(axis=(1, 2))
        logits = feat @ params["fc.w"] + params["fc.b"]
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        scores = np.exp(logp)
        state = ForwardState(self, params, caches, feat, scores, None, beta, lam)
        if labels is None:
            return scores, None, state
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (bsz,) or labels.min() < 0 or labels.max() >= cfg.num_classes:
            raise ConfigError(f"labels must be {bsz} class indices in [0, {cfg.num_classes})")
        state.labels = labels
        classif = -np.mean(logp[np.arange(bsz), labels].astype(acc))
        l2 = acc.type(0)
        if include_l2:
            l2 = sum(0.5 * np.sum(np.square(v, dtype=acc)) for k, v in params.items() if is_weight(k))
        return scores, LossBreakdown.compose(classif, proj_terms, l2, beta, lam), state

    def backward(self, state, cotangent=1.0, residual_path=True, include_l2=True):
        params = state.params
        grads = params.zeros_like()
        bsz = state.scores.shape[0]
        if state.labels is None:
            raise StateError("backward needs a forward pass that was given labels")
        g_logits = state.scores.copy()
        g_logits[np.arange(bsz), state.labels] -= 1.0
        g_logits *= cotangent / bsz
        grads["fc.w"] = state.feat.T @ g_logits
        grads["fc.b"] = g_logits.sum(axis=0)
        g_feat = g_logits @ params["fc.w"].T
        caches = state.caches
        b_, h, w, c = caches[-1]
        g = np.broadcast_to(g_feat[:, None, None, :] / (h * w), (b_, h, w, c)).copy()
        g_res = state.beta * cotangent / bsz
        for idx in range(len(self.stages) - 1, -1, -1):
            st = self.stages[idx]
            kind = st[0]
            cache = caches[idx]
            if kind == "ts":
                i = st[1]
                gw1 = np.zeros_like(params[f"ts{i}.w1"])
                gw2 = np.zeros_like(params[f"ts{i}.w2"])
                gx = []
                for j in range(bsz):
                    gc, g1, g2 = ts_backward(cache[j], g[j], g_res, residual_path=residual_path)
                    gx.append(gc)
                    gw1 += g1
                    gw2 += g2
                grads[f"ts{i}.w1"] = gw1
                grads[f"ts{i}.w2"] = gw2
                g = np.stack(gx)
            elif kind == "mean":
                t = cache[1]
                g = np.broadcast_to(g / t, cache).copy()
            elif kind == "merge":
                b_, t, hh, ww, c = cache
                g = g.reshape(b_, hh, ww, t, c).transpose(0, 3, 1, 2, 4)
            else:
                _, blk, _, _, _, stride, temporal = st
                wt = params[f"conv{blk}.w"]
                need = idx > 0
                if temporal:
                    b_, t = g.shape[:2]
                    gx, gw, gb = conv_relu_backward(g.reshape((b_ * t,) + g.shape[2:]), cache, wt, stride, need)
                    if gx is not None:
                        gx = gx.reshape((b_, t) + gx.shape[1:])
                else:
                    gx, gw, gb = conv_relu_backward(g, cache, wt, stride, need)
                grads[f"conv{blk}.w"] = gw
                grads[f"conv{blk}.b"] = gb
                g = gx
        if include_l2:
            for name in params:
                if is_weight(name):
                    grads[name] = grads[name] + (state.lam * cotangent) * params[name]
        for name in params:
            grads[name] = grads[name].astype(params[name].dtype, copy=False)
        return grads

    def with_config(self, **changes):
        return TeSNet(replace(self.config, **changes), params=self.params)


def fuse_streams(scores_a, scores_b):
    """Average per-video class scores of two streams (e.g. RGB and optical flow)."""
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"stream score shapes differ: {a.shape} vs {b.shape}")
    return (a + b) / 2.0


def predict(scores):
    """Arg-max class per row; ties resolve to the lowest class index."""
    return np.argmax(np.asarray(scores), axis=-1)


def builtin_configs():
    root = resources.files("tsqueeze") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_config(name_or_path):
    """Load a network config from a JSON path or by built-in name (see ``builtin_configs``)."""
    if os.path.exists(name_or_path):
        return NetworkConfig.load(name_or_path)
    res = resources.files("tsqueeze") / "configs" / f"{name_or_path}.json"
    if not res.is_file():
        raise ConfigError(f"no config file or built-in config named {name_or_path!r}")
    return NetworkConfig.from_dict(json.loads(res.read_text()))
