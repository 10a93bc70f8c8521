"""Image/mask ingestion, preprocessing, multi-scale augmentation and a
synthetic polyp-like dataset."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .functional import interpolation_matrix
from .rng import Rng

MULTISCALE_SIDES = (192, 224, 256, 288, 320)
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
SPLITS = ("train", "val", "test")


class DataError(Exception):
    """Unreadable, malformed or inconsistent input data."""


@dataclass
class SegSample:
    """One image/mask pair; ``image`` is [3,H,W] in [0,1], ``mask`` [1,H,W] in {0,1}."""

    image: np.ndarray
    mask: np.ndarray | None
    id: str = ""

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise DataError(f"sample {self.id!r}: image must be [3,H,W], got {list(self.image.shape)}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=np.float32)
            if self.mask.shape != (1,) + self.image.shape[1:]:
                raise DataError(
                    f"sample {self.id!r}: mask {list(self.mask.shape)} does not match image "
                    f"{list(self.image.shape)}"
                )
            if not np.isin(self.mask, (0.0, 1.0)).all():
                raise DataError(f"sample {self.id!r}: mask is not binary")

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]


# ---------------------------------------------------------------------------
# PNG I/O
# ---------------------------------------------------------------------------

def _open(path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except (OSError, UnidentifiedImageError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if img.mode not in ("L", "RGB", "RGBA", "P", "1", "LA"):
        raise DataError(f"{path}: unsupported pixel format {img.mode!r} (8-bit grayscale or RGB expected)")
    return img


def load_png(path, mask: bool = False) -> np.ndarray:
    """Read an 8-bit image as float32 [C,H,W] in [0,1].

    Images come back with 3 channels (grayscale is replicated). With
    ``mask=True`` the result is [1,H,W] binarized at ``value > 127``.
    """
    img = _open(path)
    if mask:
        arr = np.asarray(img.convert("L"))
        return (arr > 127).astype(np.float32)[None]
    arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_png(array, path) -> None:
    """Write [C,H,W] or [H,W] data in [0,1] as an 8-bit PNG.

    Binary maps become exactly {0, 255}, so saving and reloading a mask
    is lossless.
    """
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim == 3:
        if arr.shape[0] == 1:
            arr = arr[0]
        elif arr.shape[0] == 3:
            arr = arr.transpose(1, 2, 0)
        else:
            raise DataError(f"save_png expects 1 or 3 channels, got {arr.shape[0]}")
    elif arr.ndim != 2:
        raise DataError(f"save_png expects [C,H,W] or [H,W], got {list(arr.shape)}")
    out = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    try:
        Image.fromarray(out).save(path, format="PNG")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resize of [C,H,W] with half-pixel centres."""
    _, h, w = arr.shape
    if (h, w) == (out_h, out_w):
        return arr.copy()
    mh = interpolation_matrix(h, out_h)
    mw = interpolation_matrix(w, out_w)
    return (mh @ arr.astype(np.float64) @ mw.T).astype(arr.dtype)


def resize_nearest(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    _, h, w = arr.shape
    rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
    return arr[:, rows][:, :, cols]


def square_padding(h: int, w: int) -> tuple[int, int, int]:
    """``(square side, top pad, left pad)`` for symmetric zero-padding.

    An odd difference puts the extra row/column at the bottom/right.
    """
    side = max(h, w)
    return side, (side - h) // 2, (side - w) // 2


def _pad_square(arr: np.ndarray) -> np.ndarray:
    c, h, w = arr.shape
    side, top, left = square_padding(h, w)
    if side == h == w:
        return arr
    out = np.zeros((c, side, side), dtype=arr.dtype)
    out[:, top : top + h, left : left + w] = arr
    return out


def pad_to_square_resize(s: SegSample, side: int = 256) -> SegSample:
    """Zero-pad the short axis symmetrically, then resize to ``side x side``
    (bilinear for the image, nearest for the mask)."""
    image = resize_bilinear(_pad_square(s.image), side, side)
    mask = None if s.mask is None else resize_nearest(_pad_square(s.mask), side, side)
    return SegSample(np.clip(image, 0.0, 1.0), mask, s.id)


def restore_geometry(prob: np.ndarray, orig_h: int, orig_w: int) -> np.ndarray:
    """Invert :func:`pad_to_square_resize` for a [C,S,S] map: resize back
    to the padded square, then crop the padding away."""
    sq, top, left = square_padding(orig_h, orig_w)
    full = resize_bilinear(np.asarray(prob, dtype=np.float32), sq, sq)
    return full[:, top : top + orig_h, left : left + orig_w]


def draw_scale(rng: Rng) -> int:
    return MULTISCALE_SIDES[int(rng.integers(0, len(MULTISCALE_SIDES)))]


def multiscale_resize(s: SegSample, rng: Rng | None = None, side: int | None = None) -> SegSample:
    """Resize a canonical sample to a side drawn from :data:`MULTISCALE_SIDES`
    (or to ``side`` when given, so a batch can share one draw)."""
    if side is None:
        if rng is None:
            raise ValueError("multiscale_resize needs an rng or an explicit side")
        side = draw_scale(rng)
    if side % 32:
        raise ValueError(f"multiscale side must be a multiple of 32, got {side}")
    image = np.clip(resize_bilinear(s.image, side, side), 0.0, 1.0)
    mask = None if s.mask is None else resize_nearest(s.mask, side, side)
    return SegSample(image, mask, s.id)


def stack_batch(samples) -> tuple[np.ndarray, np.ndarray | None]:
    images = np.stack([s.image for s in samples])
    if any(s.mask is None for s in samples):
        return images, None
    return images, np.stack([s.mask for s in samples])


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def _background(rng: Rng, side: int, yy, xx) -> np.ndarray:
    base = rng.uniform(3, low=0.35, high=0.65)
    img = np.broadcast_to(base[:, None, None], (3, side, side)).copy()
    for _ in range(4):
        fy, fx = rng.uniform(2, low=1.0, high=6.0) / side
        phase = rng.uniform((), high=2 * np.pi)
        amp = rng.uniform(3, low=0.02, high=0.06)
        wave = np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
        img += amp[:, None, None] * wave[None]
    img += rng.normal((3, side, side), std=0.02)
    return img


def _ellipse(rng: Rng, side: int, yy, xx):
    cy, cx = rng.uniform(2, low=0.2 * side, high=0.8 * side)
    ry, rx = rng.uniform(2, low=0.06 * side, high=0.25 * side)
    theta = rng.uniform((), high=np.pi)
    c, s = np.cos(theta), np.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    r2 = u * u + v * v
    return r2 <= 1.0, r2


def synth_sample(rng: Rng, side: int = 256, sample_id: str = "", max_tries: int = 100) -> SegSample:
    """Textured background with 1-3 shaded ellipses; mask is their union.

    Draws are rejected until the foreground fraction lies in [2%, 40%].
    """
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64) + 0.5
    for _ in range(max_tries):
        img = _background(rng, side, yy, xx)
        mask = np.zeros((side, side), dtype=bool)
        for _ in range(int(rng.integers(1, 4))):
            inside, r2 = _ellipse(rng, side, yy, xx)
            tint = rng.uniform(3, low=0.55, high=0.95)
            shade = 1.0 - 0.35 * np.clip(r2, 0.0, 1.0)  # brighter centre, darker rim
            img = np.where(inside[None], tint[:, None, None] * shade[None], img)
            mask |= inside
        frac = mask.mean()
        if 0.02 <= frac <= 0.40:
            return SegSample(np.clip(img, 0.0, 1.0), mask[None].astype(np.float32), sample_id)
    raise DataError(f"could not draw a sample with foreground in [2%, 40%] after {max_tries} tries")


def synth_dataset(n: int, side: int = 256, rng: Rng | None = None) -> list[SegSample]:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = rng or Rng(0)
    return [synth_sample(rng.spawn(f"synth/{i}"), side, f"synth_{i:04d}") for i in range(n)]


def write_dataset(samples, root) -> Path:
    """Write samples in the images/ + masks/ layout and a manifest; return the manifest path."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        save_png(s.image, root / "images" / f"{s.id}.png")
        save_png(s.mask, root / "masks" / f"{s.id}.png")
        entries.append(ManifestEntry(s.id, f"images/{s.id}.png", f"masks/{s.id}.png"))
    manifest = DatasetManifest(root, entries)
    return manifest.write(root / "manifest.tsv")


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    id: str
    image: str
    mask: str | None


def split_of(sample_id: str) -> str:
    """Deterministic 80/10/10 split keyed by a hash of the id."""
    bucket = int.from_bytes(hashlib.blake2b(sample_id.encode("utf-8"), digest_size=8).digest(), "little") % 10
    return "train" if bucket < 8 else ("val" if bucket == 8 else "test")


@dataclass
class DatasetManifest:
    root: Path
    entries: list = field(default_factory=list)
    split: str | None = None

    def __post_init__(self):
        self.root = Path(self.root)
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise DataError(f"duplicate sample ids in manifest: {dup[:5]}")

    def __len__(self):
        return len(self.entries)

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        entries = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) not in (2, 3):
                raise DataError(f"{path}:{lineno}: expected id<TAB>image<TAB>mask")
            entries.append(ManifestEntry(cols[0], cols[1], cols[2] if len(cols) == 3 and cols[2] else None))
        return cls(path.parent, entries)

    def write(self, path) -> Path:
        path = Path(path)
        lines = [f"{e.id}\t{e.image}\t{e.mask or ''}" for e in self.entries]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    @classmethod
    def scan(cls, root) -> "DatasetManifest":
        """Pair ``root/images/<name>`` with ``root/masks/<name>`` by file stem."""
        root = Path(root)
        img_dir, mask_dir = root / "images", root / "masks"
        if not img_dir.is_dir():
            raise DataError(f"{root} has no images/ directory")
        masks = {}
        if mask_dir.is_dir():
            masks = {p.stem: p for p in mask_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}
        entries = []
        for p in sorted(img_dir.iterdir()):
            if p.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            m = masks.get(p.stem)
            entries.append(
                ManifestEntry(p.stem, os.path.relpath(p, root), None if m is None else os.path.relpath(m, root))
            )
        if not entries:
            raise DataError(f"no images found under {img_dir}")
        return cls(root, entries)

    @classmethod
    def open(cls, path) -> "DatasetManifest":
        """A manifest file, or a directory holding ``manifest.tsv`` or images/ + masks/."""
        path = Path(path)
        if path.is_dir():
            if (path / "manifest.tsv").is_file():
                return cls.read(path / "manifest.tsv")
            return cls.scan(path)
        return cls.read(path)

    def select(self, split: str | None) -> "DatasetManifest":
        if split is None or split == "all":
            return self
        if split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS} or 'all', got {split!r}")
        return DatasetManifest(self.root, [e for e in self.entries if split_of(e.id) == split], split)

    def load(self, side: int | None = 256, require_masks: bool = True) -> list[SegSample]:
        """Load every entry, optionally canonicalised with :func:`pad_to_square_resize`."""
        out = []
        for e in self.entries:
            if e.mask is None and require_masks:
                raise DataError(f"sample {e.id!r} has no mask")
            image = load_png(self.root / e.image)
            mask = None if e.mask is None else load_png(self.root / e.mask, mask=True)
            if mask is not None and mask.shape[1:] != image.shape[1:]:
                raise DataError(f"sample {e.id!r}: mask size {mask.shape[1:]} != image size {image.shape[1:]}")
            s = SegSample(image, mask, e.id)
            out.append(pad_to_square_resize(s, side) if side else s)
        return out
