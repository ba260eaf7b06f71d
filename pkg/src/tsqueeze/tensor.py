"""Dense array kernels and the TSQ1 binary tensor format.

Tensors are plain row-major ``numpy.ndarray`` objects. The helpers here add
the shape discipline the rest of the package relies on: no broadcasting,
explicit errors on mismatched dimensions, and a Cholesky solver that reports
the failing pivot.
"""

import os
import struct

import numpy as np

from .errors import ShapeError, SingularityError, TSQIOError

MAGIC = b"TSQ1"

_PRECISIONS = {"f32": np.float32, "f64": np.float64}
_TAG_TO_DTYPE = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def resolve_dtype(precision=None):
    """Map ``"f32"``/``"f64"`` (or a numpy dtype) to a numpy float type.

    ``None`` falls back to the ``TSQ_PRECISION`` environment variable and then
    to 32-bit.
    """
    if precision is None:
        precision = os.environ.get("TSQ_PRECISION", "f32")
    if isinstance(precision, str):
        try:
            return _PRECISIONS[precision]
        except KeyError:
            raise ValueError(f"precision must be one of {sorted(_PRECISIONS)}, got {precision!r}")
    dt = np.dtype(precision)
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dt}")
    return dt.type


def precision_name(dtype):
    return "f64" if np.dtype(dtype) == np.float64 else "f32"


def matmul(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def cholesky(m):
    """Lower-triangular factor ``L`` with ``L @ L.T == m``.

    Only the lower triangle of ``m`` is read. Raises SingularityError with the
    index of the first non-positive pivot.
    """
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"cholesky expects a square matrix, got {m.shape}")
    d = m.shape[0]
    L = np.zeros_like(m)
    for j in range(d):
        row = L[j, :j]
        piv = m[j, j] - row @ row
        if not piv > 0:  # catches NaN too
            raise SingularityError(j, float(piv))
        ljj = np.sqrt(piv)
        L[j, j] = ljj
        if j + 1 < d:
            L[j + 1:, j] = (m[j + 1:, j] - L[j + 1:, :j] @ row) / ljj
    return L


def cho_solve(L, rhs):
    """Solve ``(L L^T) s = rhs`` by forward then backward substitution."""
    L = np.asarray(L)
    rhs = np.asarray(rhs)
    d = L.shape[0]
    if rhs.ndim != 2 or rhs.shape[0] != d:
        raise ShapeError(f"right-hand side {rhs.shape} does not match factor {L.shape}")
    y = np.empty(rhs.shape, dtype=np.result_type(L, rhs))
    for i in range(d):
        y[i] = (rhs[i] - L[i, :i] @ y[:i]) / L[i, i]
    s = np.empty_like(y)
    for i in range(d - 1, -1, -1):
        s[i] = (y[i] - L[i + 1:, i] @ s[i + 1:]) / L[i, i]
    return s


def solve_spd(m, rhs):
    """Solve ``m @ s = rhs`` for symmetric positive definite ``m`` (d x d), rhs (d x n)."""
    m = np.asarray(m)
    rhs = np.asarray(rhs)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"solve_spd expects a square matrix, got {m.shape}")
    if rhs.ndim != 2 or rhs.shape[0] != m.shape[0]:
        raise ShapeError(f"right-hand side {rhs.shape} does not match matrix {m.shape}")
    return cho_solve(cholesky(m), rhs)


def reduce_mean(t, axes):
    t = np.asarray(t)
    axes = [axes] if isinstance(axes, (int, np.integer)) else list(axes)
    norm = []
    for ax in axes:
        if not isinstance(ax, (int, np.integer)) or not -t.ndim <= ax < t.ndim:
            raise ShapeError(f"invalid axis {ax!r} for rank-{t.ndim} tensor")
        norm.append(int(ax) % t.ndim)
    if len(set(norm)) != len(norm):
        raise ShapeError(f"duplicate axes {axes}")
    return np.mean(t, axis=tuple(norm))


# -- TSQ1 binary format ------------------------------------------------------
# magic "TSQ1" | u32 rank | rank x u32 dims | u8 precision tag (4|8) | LE payload


def dumps_tensor(arr):
    arr = np.asarray(arr)
    if arr.dtype not in (np.float32, np.float64):
        raise ShapeError(f"TSQ1 stores float32/float64 only, got {arr.dtype}")
    if any(n < 1 for n in arr.shape):
        raise ShapeError(f"tensor dimensions must be >= 1, got {arr.shape}")
    tag = arr.dtype.itemsize
    head = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    head += struct.pack("<B", tag)
    payload = np.ascontiguousarray(arr, dtype=_TAG_TO_DTYPE[tag]).tobytes()
    return head + payload


def loads_tensor(buf, offset=0, source=None):
    """Parse one TSQ1 tensor from ``buf`` at ``offset``; returns ``(array, end_offset)``."""
    view = memoryview(buf)
    try:
        if bytes(view[offset:offset + 4]) != MAGIC:
            raise TSQIOError("bad TSQ1 magic", source)
        pos = offset + 4
        (rank,) = struct.unpack_from("<I", view, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", view, pos)
        pos += 4 * rank
        (tag,) = struct.unpack_from("<B", view, pos)
        pos += 1
    except struct.error:
        raise TSQIOError("truncated TSQ1 header", source)
    if tag not in _TAG_TO_DTYPE:
        raise TSQIOError(f"bad TSQ1 precision tag {tag}", source)
    if any(n < 1 for n in dims):
        raise TSQIOError(f"TSQ1 dimension < 1 in {dims}", source)
    dt = _TAG_TO_DTYPE[tag]
    count = int(np.prod(dims, dtype=np.int64))
    nbytes = count * dt.itemsize
    if len(view) - pos < nbytes:
        raise TSQIOError("truncated TSQ1 payload", source)
    arr = np.frombuffer(view[pos:pos + nbytes], dtype=dt).reshape(dims)
    return arr.astype(dt.newbyteorder("="), copy=True), pos + nbytes


def save_tensor(path, arr):
    with open(path, "wb") as fh:
        fh.write(dumps_tensor(arr))


def load_tensor(path):
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise TSQIOError(f"cannot read tensor ({exc.strerror})", path)
    arr, end = loads_tensor(buf, source=path)
    if end != len(buf):
        raise TSQIOError("trailing bytes after TSQ1 payload", path)
    return arr
