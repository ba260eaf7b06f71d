"""Synthetic moving-square videos, clip sampling and frame/tensor I/O.

Classes come in (forward, reversed) pairs: class ``2p`` moves a square along
direction ``p`` and class ``2p + 1`` is the exact time reversal of the same
video, noise included. Each pair therefore shares its multiset of frames, so
anything that ignores frame order cannot tell the two classes apart.
"""

import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import DataError, TSQIOError
from .tensor import load_tensor, save_tensor

# (dy, dx) unit steps of the forward class of each pair
DIRECTIONS = (
    ("left_to_right", (0, 1)),
    ("top_left_to_bottom_right", (1, 1)),
    ("top_to_bottom", (1, 0)),
    ("bottom_left_to_top_right", (-1, 1)),
)
FRAME_PATTERN = "frame_{:05d}.png"
IMAGE_EXTS = (".png", ".pgm", ".ppm", ".pnm")


@dataclass
class VideoRecord:
    frames: np.ndarray   # L x H x W x C
    label: int
    id: str
    group: str = None    # videos sharing a group are kept on one side of a split

    def __post_init__(self):
        if np.ndim(self.frames) != 4 or len(self.frames) < 1:
            raise DataError(f"video {self.id}: frames must be L x H x W x C with L >= 1")
        if self.label < 0:
            raise DataError(f"video {self.id}: negative label")


@dataclass
class SyntheticSpec:
    num_classes: int = 2
    frames_per_video: int = 8
    height: int = 16
    width: int = 16
    channels: int = 1
    noise_std: float = 0.0
    seed: int = 0
    min_size: int = 3
    max_size: int = 5

    def __post_init__(self):
        if self.num_classes < 2 or self.num_classes % 2 or self.num_classes > 2 * len(DIRECTIONS):
            raise DataError(f"num_classes must be even and in 2..{2 * len(DIRECTIONS)}")
        if self.frames_per_video < 1 or min(self.height, self.width, self.channels) < 1:
            raise DataError("frame count and dimensions must be >= 1")
        if not 1 <= self.min_size <= self.max_size <= min(self.height, self.width):
            raise DataError("square size range does not fit the frame")
        if self.noise_std < 0:
            raise DataError("noise_std must be >= 0")

    @property
    def class_names(self):
        names = []
        for name, _ in DIRECTIONS[: self.num_classes // 2]:
            names += [name, name + "_reversed"]
        return names


def _axis_track(rng, extent, size, length, moving):
    """Start coordinate and per-frame velocity along one axis."""
    if not moving or length == 1:
        return rng.uniform(0, extent - size), 0.0
    room = extent - size
    vmax = min(2.0, room / (length - 1))
    v = rng.uniform(0.5 * vmax, vmax)
    start = rng.uniform(0, max(room - v * (length - 1), 0.0))
    return start, v


def _render(spec, rng, step):
    L, H, W, C = spec.frames_per_video, spec.height, spec.width, spec.channels
    size = int(rng.integers(spec.min_size, spec.max_size + 1))
    background = rng.uniform(0.0, 0.2, size=C)
    colour = rng.uniform(0.6, 1.0, size=C)
    dy, dx = step
    y0, vy = _axis_track(rng, H, size, L, dy != 0)
    x0, vx = _axis_track(rng, W, size, L, dx != 0)
    if dy < 0:
        y0 = H - size - y0
    frames = np.empty((L, H, W, C))
    frames[:] = background
    for t in range(L):
        top = int(round(y0 + np.sign(dy) * vy * t))
        left = int(round(x0 + vx * t))
        frames[t, top:top + size, left:left + size, :] = colour
    if spec.noise_std > 0:
        frames += rng.normal(0.0, spec.noise_std, size=frames.shape)
    return np.clip(frames, 0.0, 1.0)


def generate(spec, n_per_class):
    """``n_per_class`` videos of each class; deterministic for ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    records = []
    for pair, (_, step) in enumerate(DIRECTIONS[: spec.num_classes // 2]):
        for n in range(n_per_class):
            fwd = _render(spec, rng, step)
            group = f"p{pair}_{n:05d}"
            records.append(VideoRecord(fwd, 2 * pair, f"c{2 * pair}_{n:05d}", group))
            records.append(VideoRecord(fwd[::-1].copy(), 2 * pair + 1, f"c{2 * pair + 1}_{n:05d}", group))
    return records


def split_dataset(records, seed, test_fraction=0.2):
    """Seeded shuffle then split; records sharing a ``group`` stay together."""
    groups = {}
    for r in records:
        groups.setdefault(r.group or r.id, []).append(r)
    keys = sorted(groups)
    order = np.random.default_rng(seed).permutation(len(keys))
    n_test = int(round(len(keys) * test_fraction))
    test_keys = {keys[i] for i in order[:n_test]}
    train = [r for k in (keys[i] for i in order[n_test:]) for r in groups[k]]
    test = [r for k in sorted(test_keys) for r in groups[k]]
    return train, test


def uniform_starts(length, k, n):
    if length < k:
        raise DataError(f"video has {length} frames, clip needs {k}")
    if n < 1:
        raise DataError("number of clips must be >= 1")
    if n == 1:
        return [0]
    return [((length - k) * i) // (n - 1) for i in range(n)]


def sample_clip(video, k, mode="random", rng=None, index=0, count=1):
    """Return ``k`` consecutive frames of ``video``.

    ``mode="random"`` draws the start uniformly from ``rng``; ``mode="uniform"``
    takes the ``index``-th of ``count`` evenly spaced starts.
    """
    frames = video.frames if isinstance(video, VideoRecord) else np.asarray(video)
    length = len(frames)
    if length < k:
        raise DataError(f"video has {length} frames, clip needs {k}")
    if mode == "random":
        if rng is None:
            raise DataError("random clip sampling needs an rng")
        start = int(rng.integers(0, length - k + 1))
    elif mode == "uniform":
        if not 0 <= index < count:
            raise DataError(f"clip index {index} outside 0..{count - 1}")
        start = uniform_starts(length, k, count)[index]
    else:
        raise DataError(f"unknown sampling mode {mode!r}")
    return frames[start:start + k]


# -- image / tensor I/O -------------------------------------------------------


def _read_image(path):
    try:
        with Image.open(path) as img:
            if img.mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(img, dtype=np.float64) / 65535.0
            else:
                if img.mode not in ("L", "RGB"):
                    img = img.convert("RGB")
                arr = np.asarray(img, dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise TSQIOError(f"cannot read image ({exc})", path)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def load_frames(path):
    """Load a clip from a directory of equally sized images or a TSQ1 file."""
    if os.path.isdir(path):
        names = sorted(n for n in os.listdir(path) if n.lower().endswith(IMAGE_EXTS))
        if not names:
            raise TSQIOError("no PNG/PGM frames found", path)
        frames = []
        for name in names:
            fp = os.path.join(path, name)
            arr = _read_image(fp)
            if frames and arr.shape != frames[0].shape:
                raise TSQIOError(f"frame size {arr.shape} differs from {frames[0].shape}", fp)
            frames.append(arr)
        return np.stack(frames)
    if not os.path.exists(path):
        raise TSQIOError("no such file or directory", path)
    arr = load_tensor(path)
    if arr.ndim != 4:
        raise TSQIOError(f"expected a rank-4 tensor, got shape {arr.shape}", path)
    return arr


def to_uint8(frame):
    """Min-max normalise one frame to 0..255; a zero range maps to 0."""
    lo, hi = float(np.min(frame)), float(np.max(frame))
    if hi > lo:
        scaled = (np.asarray(frame, dtype=np.float64) - lo) / (hi - lo) * 255.0
    else:
        scaled = np.zeros(np.shape(frame))
    return np.round(scaled).astype(np.uint8), lo, hi


def _write_png(arr_u8, path):
    if arr_u8.shape[-1] == 1:
        Image.fromarray(arr_u8[:, :, 0], mode="L").save(path)
    else:
        Image.fromarray(arr_u8, mode="RGB").save(path)


def save_squeezed(squeezed, path):
    """Write squeezed frames as ``squeezed.tsq`` plus one normalised PNG per frame.

    ``normalization.txt`` records the min/max used for each PNG. Returns the
    list of PNG paths.
    """
    y = np.asarray(getattr(squeezed, "y", squeezed))
    os.makedirs(path, exist_ok=True)
    save_tensor(os.path.join(path, "squeezed.tsq"), y)
    written = []
    lines = ["# file channel min max"]
    for i, frame in enumerate(y):
        if frame.shape[-1] in (1, 3):
            parts = [(FRAME_PATTERN.format(i), None, frame)]
        else:
            parts = [(f"frame_{i:05d}_c{c}.png", c, frame[:, :, c:c + 1]) for c in range(frame.shape[-1])]
        for name, chan, img in parts:
            u8, lo, hi = to_uint8(img)
            _write_png(u8, os.path.join(path, name))
            written.append(os.path.join(path, name))
            lines.append(f"{name} {'all' if chan is None else chan} {lo!r} {hi!r}")
    with open(os.path.join(path, "normalization.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return written


def save_video_frames(frames, path):
    """Write a clip as 8-bit PNGs ``frame_%05d.png`` (values clipped to [0, 1])."""
    os.makedirs(path, exist_ok=True)
    for t, frame in enumerate(np.asarray(frames)):
        u8 = np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)
        _write_png(u8, os.path.join(path, FRAME_PATTERN.format(t)))


def write_dataset(records, root):
    """Write every record under ``root/<id>/`` and a ``manifest.json``."""
    os.makedirs(root, exist_ok=True)
    manifest = []
    for r in records:
        save_video_frames(r.frames, os.path.join(root, r.id))
        entry = {"id": r.id, "path": r.id, "label": int(r.label)}
        if r.group is not None:
            entry["group"] = r.group
        manifest.append(entry)
    mpath = os.path.join(root, "manifest.json")
    with open(mpath, "w") as fh:
        json.dump(manifest, fh, indent=1)
    return mpath


def load_manifest(path):
    """Load the videos listed in a JSON manifest; paths are relative to it."""
    try:
        with open(path) as fh:
            entries = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise TSQIOError(f"cannot read manifest ({exc})", path)
    base = os.path.dirname(os.path.abspath(path))
    records = []
    for e in entries:
        try:
            vid, vpath, label = e["id"], e["path"], int(e["label"])
        except (KeyError, TypeError, ValueError):
            raise DataError(f"bad manifest entry {e!r} in {path}")
        frames = load_frames(os.path.join(base, vpath))
        records.append(VideoRecord(frames, label, vid, e.get("group")))
    return records
