"""Independent reference implementations used by the tests.

Nothing here calls into the package's linear algebra; the least-squares
oracle goes through ``np.linalg.solve`` and the rest are scalar loops.
"""

import math

import numpy as np

from tsqueeze.tspool import TSLayerParams, build_hyperplane


def layer(k, d, ridge_eps=1e-8, ridge_rel=0.0):
    """TS params with zero weights; only k, d and the ridge matter here."""
    return TSLayerParams(np.zeros((k, k)), np.zeros((k * d, k)), k, d,
                         ridge_eps=ridge_eps, ridge_rel=ridge_rel)


def hyperplane(a, ridge_eps=1e-8):
    a = np.asarray(a, dtype=np.float64)
    return build_hyperplane(a, layer(a.shape[0], a.shape[1], ridge_eps))


def random_a(rng, k, d):
    """K x D with full column rank and singular values in [0.5, 2]."""
    u, _ = np.linalg.qr(rng.normal(size=(k, d)))
    v, _ = np.linalg.qr(rng.normal(size=(d, d)))
    return (u * rng.uniform(0.5, 2.0, size=d)) @ v.T


def normal_equations(a, clip, eps):
    """Brute-force per-pixel least squares: (y, x_hat, residual)."""
    k, d = a.shape
    x = clip.reshape(k, -1)
    gram = a.T @ a + eps * np.eye(d)
    ys, xh, norms = [], [], []
    for i in range(x.shape[1]):
        yi = np.linalg.solve(gram, a.T @ x[:, i])
        hi = a @ yi
        ys.append(yi)
        xh.append(hi)
        norms.append(math.sqrt(sum((x[j, i] - hi[j]) ** 2 for j in range(k))))
    y = np.stack(ys, axis=1).reshape((d,) + clip.shape[1:])
    return y, np.stack(xh, axis=1).reshape(clip.shape), sum(norms) / len(norms)


def frame_means(clip):
    k, h, w, c = clip.shape
    out = []
    for t in range(k):
        acc = 0.0
        for i in range(h):
            for j in range(w):
                for ch in range(c):
                    acc += clip[t, i, j, ch]
        out.append(acc / (h * w * c))
    return np.array(out)


def excitation_loop(z, w1, w2, k, d, slope=0.2):
    s = [1.0 / (1.0 + math.exp(-sum(w1[i, j] * z[j] for j in range(k)))) for i in range(k)]
    flat = []
    for r in range(k * d):
        p = sum(w2[r, j] * s[j] for j in range(k))
        flat.append(p if p >= 0 else slope * p)
    return np.array([[flat[t * d + j] for j in range(d)] for t in range(k)])
