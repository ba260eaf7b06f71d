"""Temporal squeeze pooling.

A clip of K frames (K x H x W x C) is reduced to a K-vector of per-frame
means, passed through two bias-free fully connected layers (sigmoid, then
leaky ReLU) and reshaped into a K x D matrix ``A``. Every pixel's temporal
trajectory is then least-squares projected onto the column space of ``A``;
the D coefficients per pixel, reshaped back to D x H x W x C, are the layer
output. The mean Euclidean norm of the projection residual is the layer's
auxiliary loss.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, StateError
from .tensor import cho_solve, cholesky, matmul, reduce_mean

DEFAULT_LEAKY_SLOPE = 0.2
DEFAULT_RIDGE_EPS = 1e-8
DEFAULT_RIDGE_REL = 1e-8
# The (K*D,) excitation output is read as A[k, d] = a[k * D + d].
RESHAPE_ORDER = "frame-major"
INIT_BASES = ("segment", "dct")


def sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def leaky_relu(x, slope):
    return np.where(x >= 0, x, slope * x)


def dct_basis(k, d):
    """First ``d`` columns of the orthonormal K-point DCT-II basis (K x d)."""
    n = np.arange(k)[:, None] + 0.5
    j = np.arange(d)[None, :]
    basis = np.cos(np.pi * n * j / k) * np.sqrt(2.0 / k)
    basis[:, 0] = 1.0 / np.sqrt(k)
    return basis


def segment_basis(k, d):
    """Orthonormal indicators of ``d`` contiguous, near-equal temporal segments (K x d)."""
    basis = np.zeros((k, d))
    for j, idx in enumerate(np.array_split(np.arange(k), d)):
        basis[idx, j] = 1.0 / np.sqrt(len(idx))
    return basis


def init_basis(kind, k, d):
    if kind == "segment":
        return segment_basis(k, d)
    if kind == "dct":
        return dct_basis(k, d)
    raise ValueError(f"unknown init basis {kind!r}; expected one of {INIT_BASES}")


@dataclass
class TSLayerParams:
    w1: np.ndarray
    w2: np.ndarray
    k: int
    d: int
    leaky_slope: float = DEFAULT_LEAKY_SLOPE
    ridge_eps: float = DEFAULT_RIDGE_EPS
    ridge_rel: float = DEFAULT_RIDGE_REL

    def __post_init__(self):
        if not 1 <= self.d <= self.k:
            raise ShapeError(f"need 1 <= D <= K, got K={self.k}, D={self.d}")
        if np.shape(self.w1) != (self.k, self.k):
            raise ShapeError(f"w1 must be {self.k}x{self.k}, got {np.shape(self.w1)}")
        if np.shape(self.w2) != (self.k * self.d, self.k):
            raise ShapeError(f"w2 must be {self.k * self.d}x{self.k}, got {np.shape(self.w2)}")
        if not self.ridge_eps > 0 or self.ridge_rel < 0:
            raise ValueError("ridge_eps must be > 0 and ridge_rel >= 0")

    @classmethod
    def init(cls, k, d, rng, dtype=np.float64, basis="segment", noise=1e-2, **kw):
        """Random W1; W2 chosen so that a zero descriptor yields ``basis`` as A.

        W2 is rank one plus uniform noise of scale ``noise``: at sigmoid output
        0.5 everywhere, ``W2 @ s`` equals the leaky-ReLU preimage of the
        flattened basis.
        """
        slope = kw.get("leaky_slope", DEFAULT_LEAKY_SLOPE)
        bound = 1.0 / np.sqrt(k)
        w1 = rng.uniform(-bound, bound, size=(k, k))
        target = init_basis(basis, k, d).reshape(k * d)
        pre = np.where(target >= 0, target, target / slope)
        w2 = np.outer(pre, np.full(k, 2.0 / k))
        w2 = w2 + rng.uniform(-noise, noise, size=w2.shape)
        return cls(w1.astype(dtype), w2.astype(dtype), k, d, **kw)

    def with_weights(self, w1, w2):
        return TSLayerParams(w1, w2, self.k, self.d, self.leaky_slope, self.ridge_eps, self.ridge_rel)


@dataclass
class Hyperplane:
    a: np.ndarray      # K x D
    gram: np.ndarray   # A^T A + eps I
    chol: np.ndarray   # lower Cholesky factor of gram
    eps: float


@dataclass
class TSCache:
    clip_shape: tuple
    x: np.ndarray       # K x N flattened clip
    z: np.ndarray
    s: np.ndarray       # sigmoid output
    p: np.ndarray       # leaky-ReLU pre-activation
    hyperplane: Hyperplane
    y: np.ndarray       # D x N
    err: np.ndarray     # K x N, x - x_hat
    norms: np.ndarray   # N per-pixel residual norms
    params: TSLayerParams


@dataclass
class SqueezedClip:
    y: np.ndarray
    x_hat: np.ndarray
    residual: float
    cache: TSCache = field(default=None, repr=False, compare=False)


def check_clip(clip):
    clip = np.asarray(clip)
    if clip.ndim != 4 or min(clip.shape) < 1:
        raise ShapeError(f"clip must be K x H x W x C with all dims >= 1, got {clip.shape}")
    return clip


def squeeze_frames(clip):
    clip = check_clip(clip)
    return reduce_mean(clip, (1, 2, 3))


def _excite(z, params):
    if np.shape(z) != (params.k,):
        raise ShapeError(f"descriptor length {np.shape(z)} does not match K={params.k}")
    s = sigmoid(params.w1 @ z)
    p = params.w2 @ s
    a = leaky_relu(p, params.leaky_slope).reshape(params.k, params.d)
    return s, p, a


def excitation(z, params):
    return _excite(np.asarray(z), params)[2]


def ridge_for(a, params):
    d = a.shape[1]
    return params.ridge_eps + params.ridge_rel * float(np.sum(a * a)) / d


def build_hyperplane(a_prime, params):
    a = np.asarray(a_prime)
    if a.shape != (params.k, params.d):
        raise ShapeError(f"A' must be {params.k}x{params.d}, got {a.shape}")
    eps = ridge_for(a, params)
    gram = matmul(a.T, a) + eps * np.eye(params.d, dtype=a.dtype)
    return Hyperplane(a=a, gram=gram, chol=cholesky(gram), eps=eps)


def _residual_norms(x, x_hat):
    err = x - x_hat
    return err, np.sqrt(np.sum(err * err, axis=0))


def project_clip(clip, h):
    clip = check_clip(clip)
    k = clip.shape[0]
    if h.a.shape[0] != k:
        raise ShapeError(f"clip has K={k} frames but hyperplane has {h.a.shape[0]} rows")
    x = clip.reshape(k, -1)
    y = cho_solve(h.chol, matmul(h.a.T, x))
    x_hat = matmul(h.a, y)
    out = SqueezedClip(
        y=y.reshape((h.a.shape[1],) + clip.shape[1:]),
        x_hat=x_hat.reshape(clip.shape),
        residual=0.0,
    )
    out.residual = proj_loss(clip, out)
    return out


def proj_loss(clip, squeezed):
    """Mean over pixels of the L2 norm of each pixel's temporal residual."""
    clip = check_clip(clip)
    x_hat = np.asarray(squeezed.x_hat)
    if x_hat.shape != clip.shape:
        raise ShapeError(f"projection shape {x_hat.shape} != clip shape {clip.shape}")
    k = clip.shape[0]
    _, norms = _residual_norms(clip.reshape(k, -1), x_hat.reshape(k, -1))
    return np.mean(norms)


def ts_forward(clip, params):
    clip = check_clip(clip)
    if clip.shape[0] != params.k:
        raise ShapeError(f"clip has K={clip.shape[0]} frames, layer expects K={params.k}")
    x = clip.reshape(params.k, -1)
    z = squeeze_frames(clip)
    s, p, a = _excite(z, params)
    h = build_hyperplane(a, params)
    y = cho_solve(h.chol, matmul(a.T, x))
    x_hat = matmul(a, y)
    err, norms = _residual_norms(x, x_hat)
    cache = TSCache(clip.shape, x, z, s, p, h, y, err, norms, params)
    return SqueezedClip(
        y=y.reshape((params.d,) + clip.shape[1:]),
        x_hat=x_hat.reshape(clip.shape),
        residual=np.mean(norms),
        cache=cache,
    )


def ts_backward(cache, grad_y, grad_residual, residual_path=True):
    """Reverse pass of ``ts_forward``.

    Returns ``(grad_clip, grad_w1, grad_w2)`` for the scalar
    ``<grad_y, y> + grad_residual * residual``. With ``residual_path=False``
    (or a zero ``grad_residual``) the residual branch is skipped entirely.
    """
    if cache is None:
        raise StateError("ts_backward needs the cache produced by ts_forward")
    prm = cache.params
    h = cache.hyperplane
    a, y, x = h.a, cache.y, cache.x
    k, n = x.shape
    gy = np.asarray(grad_y).reshape(prm.d, n)

    ga = np.zeros_like(a)
    gx = np.zeros_like(x)
    if residual_path and grad_residual != 0:
        # d/dx_hat of mean_i ||x_i - x_hat_i||; zero-norm pixels get a zero subgradient
        norms = cache.norms
        scale = np.divide(grad_residual / n, norms, out=np.zeros_like(norms), where=norms > 0)
        g_err = cache.err * scale
        gx += g_err
        g_xhat = -g_err
        ga += g_xhat @ y.T
        gy = gy + a.T @ g_xhat

    # y = G^{-1} R with R = A^T x; dG^{-1} = -G^{-1} dG G^{-1}
    g_r = cho_solve(h.chol, gy)
    g_gram = -(g_r @ y.T)
    ga += x @ g_r.T
    gx += a @ g_r
    ga += a @ (g_gram + g_gram.T)
    # eps = ridge_eps + ridge_rel * tr(A^T A) / D
    ga += (2.0 * prm.ridge_rel / prm.d * np.trace(g_gram)) * a

    g_p = ga.reshape(-1) * np.where(cache.p >= 0, 1.0, prm.leaky_slope)
    grad_w2 = np.outer(g_p, cache.s)
    g_u = (prm.w2.T @ g_p) * cache.s * (1.0 - cache.s)
    grad_w1 = np.outer(g_u, cache.z)
    g_z = prm.w1.T @ g_u
    gx += g_z[:, None] / n
    return gx.reshape(cache.clip_shape), grad_w1.astype(prm.w1.dtype), grad_w2.astype(prm.w2.dtype)
