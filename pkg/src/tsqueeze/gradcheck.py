"""Ready-made finite-difference checks for the TS layer and the full network."""

import numpy as np

from .grad import ParamSet, backprop, fd_check
from .network import NetworkConfig, TeSNet
from .tspool import TSLayerParams, ts_backward, ts_forward


def random_ts_instance(rng, k, d, h, w, c):
    """Random weights and clip with a residual bounded away from zero."""
    params = TSLayerParams(rng.normal(size=(k, k)), rng.normal(size=(k * d, k)), k, d)
    clip = rng.uniform(size=(k, h, w, c))
    return params, clip


def check_ts_layer(k=4, d=2, h=2, w=2, c=1, seed=0, step=1e-5, tol=1e-5, oracle_dtype=np.longdouble):
    """FD check of ``ts_backward`` against the scalar ``<gy, y> + gr * residual``."""
    rng = np.random.default_rng(seed)
    prm, clip = random_ts_instance(rng, k, d, h, w, c)
    gy = rng.normal(size=(d, h, w, c))
    gr = float(rng.normal())
    out = ts_forward(clip, prm)
    g_clip, g_w1, g_w2 = ts_backward(out.cache, gy, gr)

    def objective(p):
        o = ts_forward(p["clip"], prm.with_weights(p["w1"], p["w2"]))
        return np.sum(o.y * gy) + gr * o.residual

    point = ParamSet({"clip": clip, "w1": prm.w1, "w2": prm.w2})
    grads = ParamSet({"clip": g_clip, "w1": g_w1, "w2": g_w2})
    return fd_check(objective, point, grads, step, tol, oracle_dtype)


def small_network_config(k=4, d=2, num_classes=3):
    """Two TS layers around one conv block; exercises every block type."""
    return NetworkConfig(k=k, num_classes=num_classes, ts_placements=[(0, d), (1, 1)],
                         conv_blocks=[(2, 3, 2)], channels=1)


def check_network(config=None, batch=2, h=4, w=4, seed=0, step=1e-5, tol=1e-5, oracle_dtype=np.longdouble):
    config = small_network_config() if config is None else config
    rng = np.random.default_rng(seed)
    net = TeSNet(config, rng=rng, dtype=np.float64)
    clips = rng.uniform(size=(batch, config.k, h, w, config.channels))
    labels = rng.integers(0, config.num_classes, size=batch)
    _, _, state = net.forward(clips, labels)
    grads = backprop(state)

    def objective(p):
        return net.forward(clips, labels, params=p)[1].total

    return fd_check(objective, net.params, grads, step, tol, oracle_dtype)
