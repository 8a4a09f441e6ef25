"""Synthetic camouflaged-blob datasets, netpbm I/O, resizing and batching.

On-disk layout of a dataset root::

    <root>/images/<id>.ppm   binary P6, maxval 255
    <root>/masks/<id>.pgm    binary P5, 0/255
    <root>/index.tsv         id <TAB> split <TAB> height <TAB> width
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

SCALES = (0.75, 1.0, 1.25)


@dataclass
class SynthConfig:
    n_images: int = 10
    height: int = 64
    width: int = 64
    blobs_min: int = 1
    blobs_max: int = 3
    # full ellipse axis lengths as a fraction of the image extent
    axis_min: float = 0.1
    axis_max: float = 0.35
    delta: float = 0.08
    noise: float = 0.15
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.height % 32 or self.width % 32 or self.height < 32 or self.width < 32:
            raise ValueError("synthetic extents must be positive multiples of 32")
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.n_images < 1:
            raise ValueError("n_images must be >= 1")
        if not 1 <= self.blobs_min <= self.blobs_max:
            raise ValueError("need 1 <= blobs_min <= blobs_max")
        if not 0 < self.axis_min <= self.axis_max:
            raise ValueError("need 0 < axis_min <= axis_max")


@dataclass
class Sample:
    id: str
    image: Tensor  # [3, H, W] in [0, 1]
    mask: Tensor   # [1, H, W] in {0, 1}

    def __post_init__(self):
        ish, msh = self.image.shape, self.mask.shape
        if len(ish) != 3 or ish[0] != 3 or len(msh) != 3 or msh[0] != 1 or ish[1:] != msh[1:]:
            raise ValueError(f"{self.id}: image {ish} and mask {msh} are inconsistent")
        m = self.mask.data
        if not np.all((m == 0) | (m == 1)):
            raise ValueError(f"{self.id}: mask is not binary")
        if self.image.data.min() < 0 or self.image.data.max() > 1:
            raise ValueError(f"{self.id}: image values outside [0, 1]")


@dataclass
class DatasetIndex:
    root: Path
    ids: list[str]
    split: str = "all"
    seed: int = 0
    _cache: dict[str, Sample] = field(default_factory=dict, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.ids)

    def load(self, sid: str) -> Sample:
        s = self._cache.get(sid)
        if s is None:
            s = Sample(sid, read_ppm(self.root / "images" / f"{sid}.ppm"),
                       read_pgm(self.root / "masks" / f"{sid}.pgm"))
            self._cache[sid] = s
        return s

    def samples(self) -> list[Sample]:
        return [self.load(i) for i in self.ids]


# ---------------------------------------------------------------- netpbm

def _read_header(buf: bytes, path) -> tuple[bytes, int, int, int, int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(buf):
            raise ValueError(f"{path}: truncated header")
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise ValueError(f"{path}: malformed header")
    magic = tokens[0]
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ValueError(f"{path}: malformed header") from exc
    if w < 1 or h < 1 or maxval != 255:
        raise ValueError(f"{path}: unsupported header (w={w}, h={h}, maxval={maxval})")
    return magic, w, h, maxval, pos + 1


def _read_netpbm(path, magic_expected: bytes, channels: int) -> np.ndarray:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:2] != magic_expected:
        raise ValueError(f"{path}: expected {magic_expected.decode()} file, found {buf[:2]!r}")
    _, w, h, _, off = _read_header(buf, path)
    n = w * h * channels
    if len(buf) - off < n:
        raise ValueError(f"{path}: truncated payload ({len(buf) - off} of {n} bytes)")
    return np.frombuffer(buf, dtype=np.uint8, count=n, offset=off).reshape(h, w, channels)


def _to_bytes(a: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(a * 255.0 + 0.5), 0, 255).astype(np.uint8)


def read_ppm(path) -> Tensor:
    raw = _read_netpbm(path, b"P6", 3)
    return Tensor(raw.transpose(2, 0, 1) / 255.0)


def write_ppm(t: Tensor, path) -> None:
    a = t.data
    if a.ndim != 3 or a.shape[0] != 3:
        raise T.ShapeError(f"write_ppm expects [3,H,W], got {a.shape}")
    _, h, w = a.shape
    payload = _to_bytes(a).transpose(1, 2, 0).tobytes()
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + payload)


def read_pgm(path) -> Tensor:
    raw = _read_netpbm(path, b"P5", 1)
    return Tensor((raw.transpose(2, 0, 1) >= 128).astype(float))


def write_pgm(t: Tensor, path) -> None:
    a = t.data
    if a.ndim == 3:
        if a.shape[0] != 1:
            raise T.ShapeError(f"write_pgm expects [1,H,W], got {a.shape}")
        a = a[0]
    h, w = a.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + _to_bytes(a).tobytes())


# ---------------------------------------------------------------- resizing

def _as4(t: Tensor) -> tuple[Tensor, bool]:
    if t.data.ndim == 3:
        return Tensor(t.data[None]), True
    return t, False


def resize_image(t: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of [C,H,W] or [N,C,H,W]."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target extents must be positive, got {out_h}x{out_w}")
    if t.shape[-2:] == (out_h, out_w):
        return Tensor(t.data.copy())
    x, squeeze = _as4(t)
    with T.no_grad():
        out = T.upsample_bilinear(x, out_h, out_w).data
    return Tensor(out[0] if squeeze else out)


def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    return np.minimum(((np.arange(n_out) + 0.5) * n_in / n_out).astype(int), n_in - 1)


def resize_mask(m: Tensor, out_h: int, out_w: int) -> Tensor:
    """Nearest-neighbour resize (half-pixel centres); keeps masks binary."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target extents must be positive, got {out_h}x{out_w}")
    h, w = m.shape[-2:]
    rows = _nearest_index(h, out_h)
    cols = _nearest_index(w, out_w)
    return Tensor(m.data[..., rows, :][..., cols])


def multiscale_pick(step: int, base_h: int, base_w: int) -> tuple[int, int]:
    """Cycle through 0.75x/1x/1.25x, snapped to the nearest multiple of 32 (ties down)."""
    s = SCALES[step % len(SCALES)]
    return snap32(base_h * s), snap32(base_w * s)


def snap32(v: float) -> int:
    q = v / 32.0
    lo = math.floor(q)
    n = lo + 1 if q - lo > 0.5 else lo
    return max(32, 32 * n)


# ---------------------------------------------------------------- batching

@dataclass
class Batch:
    ids: list[str]
    images: Tensor  # [B, 3, H, W]
    masks: Tensor   # [B, 1, H, W]


def stack(samples: list[Sample]) -> Batch:
    return Batch([s.id for s in samples],
                 Tensor(np.stack([s.image.data for s in samples])),
                 Tensor(np.stack([s.mask.data for s in samples])))


def batch_iter(index: DatasetIndex, batch_size: int, epoch_seed: int) -> Iterator[Batch]:
    """Seeded shuffle of the index, then consecutive batches (last one may be short)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not index.ids:
        raise ValueError("cannot iterate over an empty index")
    order = list(index.ids)
    np.random.default_rng(epoch_seed).shuffle(order)
    for k in range(0, len(order), batch_size):
        yield stack([index.load(i) for i in order[k : k + batch_size]])


# ---------------------------------------------------------------- synthesis

def _value_noise(rng: np.random.Generator, h: int, w: int, cells: int) -> np.ndarray:
    """Smoothstep-interpolated lattice noise in [0, 1]."""
    lattice = rng.random((cells + 1, cells + 1))
    y = (np.arange(h) + 0.5) / h * cells
    x = (np.arange(w) + 0.5) / w * cells
    y0, x0 = np.floor(y).astype(int), np.floor(x).astype(int)
    fy, fx = y - y0, x - x0
    sy, sx = fy * fy * (3 - 2 * fy), fx * fx * (3 - 2 * fx)
    a = lattice[np.ix_(y0, x0)]
    b = lattice[np.ix_(y0, x0 + 1)]
    c = lattice[np.ix_(y0 + 1, x0)]
    d = lattice[np.ix_(y0 + 1, x0 + 1)]
    top = a + (b - a) * sx[None, :]
    bot = c + (d - c) * sx[None, :]
    return top + (bot - top) * sy[:, None]


def synth_sample(cfg: SynthConfig, rng: np.random.Generator, sid: str) -> Sample:
    h, w = cfg.height, cfg.width
    base = rng.uniform(0.3, 0.6, size=3)
    texture = 0.6 * _value_noise(rng, h, w, 4) + 0.4 * _value_noise(rng, h, w, 12)
    tint = rng.uniform(0.7, 1.0, size=3)
    img = base[:, None, None] + cfg.noise * (2.0 * texture[None] - 1.0) * tint[:, None, None]

    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    mask = np.zeros((h, w), dtype=bool)
    for _ in range(int(rng.integers(cfg.blobs_min, cfg.blobs_max + 1))):
        ay = 0.5 * rng.uniform(cfg.axis_min, cfg.axis_max) * h
        ax = 0.5 * rng.uniform(cfg.axis_min, cfg.axis_max) * w
        cy = rng.uniform(ay, h - ay)
        cx = rng.uniform(ax, w - ax)
        th = rng.uniform(0.0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(th) + dy * np.sin(th)
        v = -dx * np.sin(th) + dy * np.cos(th)
        blob = (u / ax) ** 2 + (v / ay) ** 2 <= 1.0
        # the pixel nearest the centre is always inside
        blob[min(int(cy), h - 1), min(int(cx), w - 1)] = True
        mask |= blob
    img = np.clip(img + cfg.delta * mask[None], 0.0, 1.0)
    # quantise now so the in-memory sample equals what read_ppm returns
    img = _to_bytes(img) / 255.0
    return Sample(sid, Tensor(img), Tensor(mask[None].astype(float)))


def split_ids(ids: list[str], val_fraction: float, seed: int) -> tuple[list[str], list[str]]:
    """Deterministic ratio split; val gets round(n * fraction) ids, original order kept."""
    n_val = int(round(len(ids) * val_fraction))
    perm = np.random.default_rng(seed).permutation(len(ids))
    val = set(perm[:n_val].tolist())
    return ([s for k, s in enumerate(ids) if k not in val],
            [s for k, s in enumerate(ids) if k in val])


def synth_generate(cfg: SynthConfig, out_dir) -> DatasetIndex:
    root = Path(out_dir)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {root}: {exc}") from exc
    rng = np.random.default_rng(cfg.seed)
    ids = [f"synth_{k:04d}" for k in range(cfg.n_images)]
    for sid in ids:
        s = synth_sample(cfg, rng, sid)
        write_ppm(s.image, root / "images" / f"{sid}.ppm")
        write_pgm(s.mask, root / "masks" / f"{sid}.pgm")
    train, val = split_ids(ids, cfg.val_fraction, cfg.seed)
    val_set = set(val)
    lines = [f"{sid}\t{'val' if sid in val_set else 'train'}\t{cfg.height}\t{cfg.width}\n" for sid in ids]
    (root / "index.tsv").write_text("".join(lines))
    return DatasetIndex(root, ids, "all", cfg.seed)


def load_index(root, split: str = "all") -> DatasetIndex:
    """Read ``index.tsv``; ``split`` is train, val or all."""
    root = Path(root)
    path = root / "index.tsv"
    if not path.exists():
        raise FileNotFoundError(f"{path}: dataset index not found")
    ids = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields")
        if split in ("all", parts[1]):
            ids.append(parts[0])
    return DatasetIndex(root, ids, split)
