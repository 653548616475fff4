"""Grayscale and binary image containers, PNM/PNG I/O and synthetic scenes."""

from __future__ import annotations

import os
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, EmptyImageError, ImageLoadError, UnsupportedFormatError

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
SCALE_MAX = {"raw": 255.0, "unit": 1.0}


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GrayImage:
    """An m x n intensity grid on the ``raw`` [0, 255] or ``unit`` [0, 1] scale.

    Pixels are stored as a read-only float64 array.
    """

    pixels: np.ndarray
    scale: str = "raw"

    def __post_init__(self):
        if self.scale not in SCALE_MAX:
            raise ValueError(f"unknown scale {self.scale!r}")
        px = _frozen(self.pixels, np.float64)
        if px.ndim != 2:
            raise DimensionError(f"expected a 2-D pixel grid, got shape {px.shape}")
        if px.size and (not np.all(np.isfinite(px)) or px.min() < 0 or px.max() > SCALE_MAX[self.scale]):
            raise ValueError(f"pixel values outside the {self.scale} range [0, {SCALE_MAX[self.scale]:g}]")
        object.__setattr__(self, "pixels", px)

    @property
    def rows(self):
        return self.pixels.shape[0]

    @property
    def cols(self):
        return self.pixels.shape[1]

    @property
    def shape(self):
        return self.pixels.shape

    @property
    def scale_max(self):
        return SCALE_MAX[self.scale]


@dataclass(frozen=True)
class BinaryImage:
    """Foreground mask: 1 marks foreground (dark objects), 0 background."""

    mask: np.ndarray

    def __post_init__(self):
        raw = np.asarray(self.mask)
        if raw.ndim != 2:
            raise DimensionError(f"expected a 2-D mask, got shape {raw.shape}")
        if raw.dtype != bool and not np.all((raw == 0) | (raw == 1)):
            raise ValueError("mask values must be 0 or 1")
        object.__setattr__(self, "mask", _frozen(raw, np.uint8))

    @property
    def rows(self):
        return self.mask.shape[0]

    @property
    def cols(self):
        return self.mask.shape[1]

    @property
    def shape(self):
        return self.mask.shape

    def as_bool(self):
        return self.mask.astype(bool)


def normalize(img: GrayImage) -> GrayImage:
    if img.scale == "unit":
        return img
    return GrayImage(img.pixels / 255.0, "unit")


def denormalize(img: GrayImage) -> GrayImage:
    if img.scale == "raw":
        return img
    return GrayImage(img.pixels * 255.0, "raw")


def invert(img: GrayImage) -> GrayImage:
    """Flip polarity so that light objects on dark ground become dark on light."""
    return GrayImage(img.scale_max - img.pixels, img.scale)


def to_luma(rgb):
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = LUMA_WEIGHTS
    return r * rgb[..., 0] + g * rgb[..., 1] + b * rgb[..., 2]


# -- PNM ---------------------------------------------------------------------

_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*(\S+)")


def _pnm_header(data, count):
    """Read `count` whitespace-separated header tokens, skipping comments."""
    pos = 2
    tokens = []
    for _ in range(count):
        match = _TOKEN.match(data, pos)
        if match is None:
            raise ImageLoadError("truncated PNM header")
        tokens.append(match.group(1))
        pos = match.end()
    # exactly one whitespace byte separates the header from binary samples
    return [int(t) for t in tokens], pos + 1


def _read_pgm(data):
    magic = data[:2]
    if magic == b"P5":
        (w, h, maxval), start = _pnm_header(data, 3)
        if not 0 < maxval <= 65535:
            raise ImageLoadError(f"invalid PGM maxval {maxval}")
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        need = w * h * dtype.itemsize
        if len(data) - start < need:
            raise ImageLoadError("truncated PGM pixel data")
        samples = np.frombuffer(data, dtype=dtype, count=w * h, offset=start)
    elif magic == b"P2":
        fields = re.sub(rb"#[^\n]*", b" ", data[2:]).split()
        w, h, maxval = (int(t) for t in fields[:3])
        samples = np.array([int(t) for t in fields[3:3 + w * h]])
        if samples.size < w * h:
            raise ImageLoadError("truncated PGM pixel data")
    else:
        raise UnsupportedFormatError(f"not a PGM file (magic {magic!r})")
    return samples.reshape(h, w), maxval


def _read_pbm(data):
    if data[:2] != b"P4":
        raise UnsupportedFormatError(f"not a binary PBM file (magic {data[:2]!r})")
    (w, h), start = _pnm_header(data, 2)
    row_bytes = (w + 7) // 8
    if len(data) - start < row_bytes * h:
        raise ImageLoadError("truncated PBM pixel data")
    packed = np.frombuffer(data, np.uint8, row_bytes * h, start).reshape(h, row_bytes)
    return np.unpackbits(packed, axis=1)[:, :w]


def _read_bytes(path):
    path = Path(path)
    try:
        return path.read_bytes()
    except FileNotFoundError as exc:
        raise ImageLoadError(f"no such file: {path}") from exc
    except OSError as exc:
        raise ImageLoadError(f"cannot read {path}: {exc}") from exc


def _read_png(path):
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("RGB", "RGBA"):
                return to_luma(np.asarray(im.convert("RGB"))), 255
            if mode == "L":
                return np.asarray(im, dtype=np.float64), 255
            if mode in ("I;16", "I;16B", "I"):
                return np.asarray(im, dtype=np.float64), 65535
            if mode == "1":
                return np.asarray(im, dtype=np.float64) * 255.0, 255
            if mode in ("P", "LA"):
                return to_luma(np.asarray(im.convert("RGB"))), 255
            raise UnsupportedFormatError(f"unsupported PNG mode {mode}")
    except UnidentifiedImageError as exc:
        raise UnsupportedFormatError(f"cannot identify image {path}") from exc


def load_image(path) -> GrayImage:
    """Load a PGM (P5/P2) or PNG file as a raw-scale [0, 255] `GrayImage`.

    Samples with maxval other than 255 are rescaled to 0..255; colour PNGs
    are reduced to luma with weights 0.299/0.587/0.114.
    """
    path = Path(path)
    data = _read_bytes(path)
    if data[:2] in (b"P5", b"P2"):
        samples, maxval = _read_pgm(data)
    elif data[:8] == b"\x89PNG\r\n\x1a\n":
        samples, maxval = _read_png(path)
    else:
        raise UnsupportedFormatError(f"unsupported image format: {path}")
    if samples.size == 0:
        raise EmptyImageError(f"zero-sized image: {path}")
    pixels = np.asarray(samples, dtype=np.float64)
    if maxval != 255:
        pixels = pixels * (255.0 / maxval)
    return GrayImage(np.clip(pixels, 0.0, 255.0), "raw")


def load_mask(path) -> BinaryImage:
    """Load a ground-truth or predicted mask; foreground is black.

    PBM bits are used as-is (1 = black); gray images are split at half range.
    """
    path = Path(path)
    data = _read_bytes(path)
    if data[:2] == b"P4":
        return BinaryImage(_read_pbm(data))
    img = load_image(path)
    return BinaryImage(img.pixels < 127.5)


def _atomic_write(path, payload):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def pgm_bytes(samples, maxval=255):
    samples = np.asarray(samples)
    h, w = samples.shape
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    return header + samples.astype(dtype).tobytes()


def save_image(img: GrayImage, path, maxval=255):
    """Write `img` as PGM (P5, big-endian when 16-bit) or 8-bit PNG."""
    raw = denormalize(img).pixels
    samples = np.clip(np.rint(raw * (maxval / 255.0)), 0, maxval)
    suffix = Path(path).suffix.lower()
    if suffix in (".pgm", ".pnm"):
        _atomic_write(path, pgm_bytes(samples, maxval))
    elif suffix == ".png":
        from PIL import Image

        Image.fromarray(np.clip(np.rint(raw), 0, 255).astype(np.uint8)).save(path)
    else:
        raise UnsupportedFormatError(f"cannot write images as {suffix!r}")


def save_mask(mask: BinaryImage, path):
    """Write a mask as PBM (P4) or PNG; foreground pixels come out black."""
    bits = mask.mask.astype(np.uint8)
    suffix = Path(path).suffix.lower()
    if suffix == ".pbm":
        h, w = bits.shape
        payload = f"P4\n{w} {h}\n".encode("ascii") + np.packbits(bits, axis=1).tobytes()
        _atomic_write(path, payload)
    elif suffix in (".png", ".pgm"):
        gray = GrayImage(np.where(bits == 1, 0.0, 255.0), "raw")
        save_image(gray, path)
    else:
        raise UnsupportedFormatError(f"cannot write masks as {suffix!r}")


# -- synthetic scenes ----------------------------------------------------------


@dataclass(frozen=True)
class Ellipse:
    """Dark elliptical object; centre and radii are in pixels."""

    cy: float
    cx: float
    ry: float
    rx: float
    depth: float


@dataclass(frozen=True)
class SceneSpec:
    """Synthetic scene: separable smooth background, dark ellipses, Gaussian noise.

    `background` holds up to three ``(row_coeffs, col_coeffs)`` pairs; each is
    a polynomial of degree <= 3 in normalized coordinates t in [0, 1],
    coefficients in increasing order, and the background is the sum of the
    row-times-column products.
    """

    rows: int
    cols: int
    background: tuple = (((0.8,), (1.0,)),)
    objects: tuple = ()
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if len(self.background) > 3:
            raise ValueError("at most 3 separable background terms")
        for row_c, col_c in self.background:
            if len(row_c) > 4 or len(col_c) > 4:
                raise ValueError("background polynomials must have degree <= 3")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")


def scene_background(spec: SceneSpec):
    ti = np.linspace(0.0, 1.0, spec.rows)
    tj = np.linspace(0.0, 1.0, spec.cols)
    bg = np.zeros((spec.rows, spec.cols))
    for row_c, col_c in spec.background:
        bg += np.outer(np.polynomial.polynomial.polyval(ti, row_c),
                       np.polynomial.polynomial.polyval(tj, col_c))
    return bg


def scene_depth(spec: SceneSpec):
    """Per-pixel foreground depth; overlapping objects take the deepest."""
    ii, jj = np.mgrid[0:spec.rows, 0:spec.cols]
    depth = np.zeros((spec.rows, spec.cols))
    for obj in spec.objects:
        if obj.ry <= 0 or obj.rx <= 0 or obj.depth <= 0:
            raise ValueError(f"object needs positive radii and depth: {obj}")
        if (obj.cy - obj.ry < 0 or obj.cy + obj.ry > spec.rows - 1
                or obj.cx - obj.rx < 0 or obj.cx + obj.rx > spec.cols - 1):
            raise ValueError(f"object out of bounds: {obj}")
        inside = ((ii - obj.cy) / obj.ry) ** 2 + ((jj - obj.cx) / obj.rx) ** 2 <= 1.0
        depth[inside] = np.maximum(depth[inside], obj.depth)
    return depth


def synth_image(spec: SceneSpec):
    """Render `spec` into ``(noisy image, ground-truth mask, ground-truth background)``.

    Images are unit-scale.  Noise is drawn from ``numpy.random.default_rng(seed)``
    and the noisy image is clipped to [0, 1].
    """
    bg = scene_background(spec)
    if bg.min() < 0 or bg.max() > 1:
        raise ValueError(f"background range [{bg.min():.3g}, {bg.max():.3g}] leaves [0, 1]")
    depth = scene_depth(spec)
    clean = bg - depth
    if clean.min() < 0:
        raise ValueError("foreground depth exceeds the background intensity")
    noisy = clean
    if spec.sigma > 0:
        rng = np.random.default_rng(spec.seed)
        noisy = np.clip(clean + rng.normal(0.0, spec.sigma, clean.shape), 0.0, 1.0)
    return GrayImage(noisy, "unit"), BinaryImage(depth > 0), GrayImage(bg, "unit")
