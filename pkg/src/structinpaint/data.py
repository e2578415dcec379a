"""Image I/O, geometry, center masking and synthetic structured images.

Images are ``(H, W, 3)`` float64 arrays with values in ``[0, 1]``.
"""
from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

ImageRgb = np.ndarray

FILL_CONTEXT_MEAN = "context-mean"
FILL_GRAY = "fixed-gray"
SYNTH_KINDS = ("stripes", "checker", "wedge", "two-tone-junction")


class ImageFormatError(ValueError):
    """Unreadable or malformed image file."""


# I/O ----------------------------------------------------------------------------

def _as_image(values) -> ImageRgb:
    img = np.asarray(values, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {img.shape}")
    return np.clip(img, 0.0, 1.0)


def _quantize(img: ImageRgb) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def quantize8(img: ImageRgb) -> ImageRgb:
    """The values ``img`` takes after an 8-bit write and reload."""
    return _quantize(img).astype(np.float64) / 255.0


def _parse_ppm(buf: bytes) -> ImageRgb:
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(buf) and (buf[pos : pos + 1].isspace() or buf[pos : pos + 1] == b"#"):
            if buf[pos : pos + 1] == b"#":
                end = buf.find(b"\n", pos)
                pos = len(buf) if end < 0 else end + 1
            else:
                pos += 1
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageFormatError(f"PPM header: expected a number at offset {start}")
        fields.append(int(buf[start:pos]))
    width, height, maxval = fields
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise ImageFormatError(f"PPM header: expected whitespace at offset {pos}")
    pos += 1
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise ImageFormatError(f"PPM header: invalid size {width}x{height} or maxval {maxval}")
    depth = 1 if maxval < 256 else 2
    need = width * height * 3 * depth
    if len(buf) - pos < need:
        raise ImageFormatError(f"PPM data truncated: {need} bytes expected from offset {pos}, {len(buf) - pos} present")
    dtype = np.uint8 if depth == 1 else np.dtype(">u2")
    raw = np.frombuffer(buf, dtype=dtype, count=width * height * 3, offset=pos)
    return raw.reshape(height, width, 3).astype(np.float64) / maxval


def load_image(path) -> ImageRgb:
    """Decode an 8-bit RGB PNG or a binary PPM (P6) file."""
    buf = Path(path).read_bytes()
    if not buf:
        raise ImageFormatError(f"{path}: empty file (offset 0)")
    if buf.startswith(b"P6"):
        try:
            return _parse_ppm(buf)
        except ImageFormatError as exc:
            raise ImageFormatError(f"{path}: {exc}") from None
    if buf.startswith(b"\x89PNG\r\n\x1a\n"):
        from PIL import Image

        try:
            with Image.open(io.BytesIO(buf)) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        except Exception as exc:  # PIL raises a variety of types for corrupt data
            raise ImageFormatError(f"{path}: corrupt PNG data after offset 8: {exc}") from None
        return arr
    raise ImageFormatError(f"{path}: unrecognized image signature at offset 0")


def write_image(path, img: ImageRgb) -> None:
    """Write 8-bit RGB; ``.ppm`` gives binary P6, anything else PNG."""
    path = Path(path)
    q = _quantize(_as_image(img))
    if path.suffix.lower() == ".ppm":
        h, w, _ = q.shape
        path.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + q.tobytes())
        return
    from PIL import Image

    Image.fromarray(q, mode="RGB").save(path, format="PNG")


def read_manifest(path) -> list[Path]:
    """Newline-separated paths, relative to the manifest's directory."""
    path = Path(path)
    base = path.parent
    lines = path.read_text(encoding="utf-8").splitlines()
    return [base / line.strip() for line in lines if line.strip()]


# geometry -----------------------------------------------------------------------

def _resize_axis(img: np.ndarray, new: int, axis: int) -> np.ndarray:
    old = img.shape[axis]
    if new == old:
        return img
    pos = (np.arange(new) + 0.5) * (old / new) - 0.5
    pos = np.clip(pos, 0.0, old - 1)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, old - 1)
    frac = pos - i0
    shape = [1] * img.ndim
    shape[axis] = new
    frac = frac.reshape(shape)
    return np.take(img, i0, axis=axis) * (1.0 - frac) + np.take(img, i1, axis=axis) * frac


def resize_bilinear(img: ImageRgb, height: int, width: int) -> ImageRgb:
    return _as_image(_resize_axis(_resize_axis(img, height, 0), width, 1))


def resize_smaller_dim(img: ImageRgb, target: int) -> ImageRgb:
    """Bilinear resize so the smaller extent equals ``target``, keeping aspect ratio."""
    h, w = img.shape[:2]
    if h <= w:
        nh, nw = target, max(target, int(round(w * target / h)))
    else:
        nh, nw = max(target, int(round(h * target / w))), target
    return resize_bilinear(img, nh, nw)


def random_crop(img: ImageRgb, size: int, rng: np.random.Generator) -> ImageRgb:
    h, w = img.shape[:2]
    if h < size or w < size:
        raise ValueError(f"cannot crop {size}x{size} from a {h}x{w} image")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return img[top : top + size, left : left + size].copy()


def center_crop(img: ImageRgb, size: int) -> ImageRgb:
    h, w = img.shape[:2]
    if h < size or w < size:
        raise ValueError(f"cannot crop {size}x{size} from a {h}x{w} image")
    top, left = (h - size) // 2, (w - size) // 2
    return img[top : top + size, left : left + size].copy()


def fit_square(img: ImageRgb, size: int) -> ImageRgb:
    """Resize the smaller side to ``size`` and take the central square; exact-size images pass through."""
    if img.shape[:2] == (size, size):
        return img
    return center_crop(resize_smaller_dim(img, size), size)


# masking ------------------------------------------------------------------------

@dataclass(frozen=True)
class MaskSpec:
    input_size: int
    prediction_size: int
    hole_size: int
    fill_mode: str = FILL_CONTEXT_MEAN

    def __post_init__(self):
        if self.prediction_size * 2 != self.input_size:
            raise ValueError("prediction size must be half the input size")
        if self.hole_size <= 0 or self.hole_size > self.prediction_size or (self.prediction_size - self.hole_size) % 2:
            raise ValueError(f"hole {self.hole_size} must be centered in prediction {self.prediction_size}")
        if self.fill_mode not in (FILL_CONTEXT_MEAN, FILL_GRAY):
            raise ValueError(f"unknown fill mode {self.fill_mode!r}")

    @classmethod
    def from_config(cls, config, fill_mode: str = FILL_CONTEXT_MEAN) -> "MaskSpec":
        return cls(config.input_size, config.prediction_size, config.hole_size, fill_mode)

    @property
    def band_width(self) -> int:
        return (self.prediction_size - self.hole_size) // 2

    @property
    def hole_offset(self) -> int:
        return (self.input_size - self.hole_size) // 2

    @property
    def center_offset(self) -> int:
        return (self.input_size - self.prediction_size) // 2

    @property
    def max_context(self) -> int:
        return (self.input_size - self.hole_size) // 2

    @property
    def hole(self) -> tuple[slice, slice]:
        o = self.hole_offset
        return slice(o, o + self.hole_size), slice(o, o + self.hole_size)

    @property
    def center(self) -> tuple[slice, slice]:
        o = self.center_offset
        return slice(o, o + self.prediction_size), slice(o, o + self.prediction_size)

    @property
    def hole_in_center(self) -> tuple[slice, slice]:
        b = self.band_width
        return slice(b, b + self.hole_size), slice(b, b + self.hole_size)

    def hole_mask(self) -> np.ndarray:
        m = np.zeros((self.input_size, self.input_size), dtype=bool)
        m[self.hole] = True
        return m

    def distance_to_hole(self) -> np.ndarray:
        """Chebyshev distance of each pixel to the hole (0 inside it)."""
        idx = np.arange(self.input_size)
        lo, hi = self.hole_offset, self.hole_offset + self.hole_size - 1
        d = np.maximum(lo - idx, 0) + np.maximum(idx - hi, 0)
        return np.maximum(d[:, None], d[None, :])


@dataclass
class ImageSample:
    full: ImageRgb
    center: ImageRgb
    masked: ImageRgb
    spec: MaskSpec
    fill: np.ndarray


def validate_sample(sample: ImageSample, context_masked: bool = False) -> None:
    """Raise ``AssertionError`` when a sample breaks its geometric contract.

    With ``context_masked``, pixels outside the hole may also hold the fill value.
    """
    spec = sample.spec
    m = spec.input_size
    assert sample.full.shape == (m, m, 3), "full image has wrong size"
    assert sample.masked.shape == (m, m, 3), "masked image has wrong size"
    assert sample.center.shape == (spec.prediction_size,) * 2 + (3,), "center has wrong size"
    assert np.array_equal(sample.center, sample.full[spec.center]), "center is not the central crop"
    outside = ~spec.hole_mask()
    ok = np.all(sample.masked == sample.full, axis=2)
    if context_masked:
        ok |= np.all(sample.masked == sample.fill, axis=2)
    assert np.all(ok[outside]), "masked differs from full outside the hole"
    inside = sample.masked[spec.hole]
    assert np.all(inside == inside[0, 0]), "hole is not constant"


def context_fill(full: ImageRgb, spec: MaskSpec) -> np.ndarray:
    if spec.fill_mode == FILL_GRAY:
        return np.full(3, 0.5)
    return full[~spec.hole_mask()].mean(axis=0)


def mask_center(full: ImageRgb, spec: MaskSpec) -> ImageSample:
    """Replace the central hole by the context mean (or gray) and extract the center crop."""
    full = np.asarray(full, dtype=np.float64)
    m = spec.input_size
    if full.shape != (m, m, 3):
        raise ValueError(f"mask_center expects a {m}x{m}x3 image, got {full.shape}")
    fill = context_fill(full, spec)
    masked = full.copy()
    masked[spec.hole] = fill
    return ImageSample(full.copy(), full[spec.center].copy(), masked, spec, fill)


def mask_context_beyond(sample: ImageSample, k: int) -> ImageSample:
    """Keep only context within Chebyshev distance ``k`` of the hole; fill the rest."""
    spec = sample.spec
    if not 0 < k <= spec.max_context:
        raise ValueError(f"context extent {k} outside (0, {spec.max_context}]")
    far = spec.distance_to_hole() > k
    masked = sample.masked.copy()
    masked[far] = sample.fill
    return ImageSample(sample.full, sample.center, masked, spec, sample.fill)


def paste_hole(image: ImageRgb, prediction: ImageRgb, spec: MaskSpec) -> ImageRgb:
    """Insert the hole part of a center prediction into ``image``; other pixels are untouched."""
    out = np.array(image, dtype=np.float64, copy=True)
    out[spec.hole] = np.asarray(prediction)[spec.hole_in_center]
    return out


# synthetic images ---------------------------------------------------------------

def _distinct_colors(rng: np.random.Generator, n: int) -> np.ndarray:
    while True:
        colors = rng.uniform(0.0, 1.0, size=(n, 3))
        gaps = [np.abs(colors[i] - colors[j]).max() for i in range(n) for j in range(i + 1, n)]
        if min(gaps) > 0.25:
            return colors


def synth_structured(kind: str, size: int, rng: np.random.Generator, angle: float | None = None) -> ImageRgb:
    """Piecewise-constant test image with edges crossing the image center.

    ``angle`` (radians) overrides the drawn orientation; for stripes at angle 0
    every row is constant.
    """
    if kind not in SYNTH_KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}; choose from {SYNTH_KINDS}")
    theta = rng.uniform(0.0, np.pi) if angle is None else float(angle)
    c = np.arange(size) + 0.5 - size / 2.0
    yy, xx = np.meshgrid(c, c, indexing="ij")
    u = xx * np.sin(theta) + yy * np.cos(theta)
    v = xx * np.cos(theta) - yy * np.sin(theta)

    if kind == "stripes":
        colors = _distinct_colors(rng, 2)
        period = rng.uniform(size / 6.0, size / 3.0)
        phase = rng.uniform(0.0, period)
        labels = np.floor((u + phase) / (period / 2.0)).astype(int) % 2
    elif kind == "checker":
        colors = _distinct_colors(rng, 2)
        period = rng.uniform(size / 5.0, size / 2.5)
        pu, pv = rng.uniform(0.0, period, size=2)
        labels = (np.floor((u + pu) / period) + np.floor((v + pv) / period)).astype(int) % 2
    elif kind == "wedge":
        colors = _distinct_colors(rng, 2)
        cy, cx = rng.uniform(-size / 8.0, size / 8.0, size=2)
        opening = rng.uniform(np.pi / 6.0, np.pi)
        ang = np.mod(np.arctan2(yy - cy, xx - cx) - theta, 2 * np.pi)
        labels = (ang < opening).astype(int)
    else:  # two-tone-junction: a dividing edge with a bar of a third tone meeting it
        colors = _distinct_colors(rng, 3)
        offset = rng.uniform(-size / 8.0, size / 8.0)
        half_width = rng.uniform(size / 16.0, size / 6.0)
        shift = rng.uniform(-size / 8.0, size / 8.0)
        labels = (u > offset).astype(int)
        bar = (u <= offset) & (np.abs(v - shift) < half_width)
        labels[bar] = 2
    return colors[labels]


def synth_dataset(kinds: Sequence[str], count: int, size: int, seed: int) -> list[ImageRgb]:
    """``count`` images cycling through ``kinds``, reproducible from ``seed``."""
    rng = np.random.default_rng(seed)
    return [synth_structured(kinds[i % len(kinds)], size, rng) for i in range(count)]


# dataset ------------------------------------------------------------------------

class Dataset:
    """Deterministic batch source: the samples of step ``t`` depend only on ``(seed, t)``."""

    def __init__(self, images: Sequence[ImageRgb], spec: MaskSpec, seed: int = 0):
        if not images:
            raise ValueError("dataset is empty")
        for i, img in enumerate(images):
            if img.shape[0] < spec.input_size or img.shape[1] < spec.input_size:
                raise ValueError(f"image {i} ({img.shape[0]}x{img.shape[1]}) smaller than {spec.input_size}")
        self.images = list(images)
        self.spec = spec
        self.seed = seed

    def __len__(self) -> int:
        return len(self.images)

    def batch(self, step: int, batch_size: int) -> list[ImageSample]:
        rng = np.random.default_rng([self.seed, step])
        idx = rng.integers(0, len(self.images), size=batch_size)
        return [mask_center(random_crop(self.images[i], self.spec.input_size, rng), self.spec) for i in idx]

    def channel_mean(self) -> np.ndarray:
        return np.mean([img.reshape(-1, 3).mean(axis=0) for img in self.images], axis=0)
