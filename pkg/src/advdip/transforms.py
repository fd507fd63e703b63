"""Image transforms used to probe attack robustness: rotation, scaling, JPEG."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# ITU T.81 Annex K tables
LUMA_Q = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)

CHROMA_Q = np.array([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
], dtype=np.float64)


def _image(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    return (x[0], True) if x.ndim == 4 else (x, False)


def _restore(out: np.ndarray, batched: bool, dtype) -> np.ndarray:
    out = out.astype(dtype)
    return out[None] if batched else out


def bilinear_sample(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample (C, H, W) at float coordinates with clamp-to-edge borders."""
    _, h, w = img.shape
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = ys - y0
    wx = xs - x0
    top = img[:, y0, x0] * (1 - wx) + img[:, y0, x1] * wx
    bot = img[:, y1, x0] * (1 - wx) + img[:, y1, x1] * wx
    return top * (1 - wy) + bot * wy


def _warp(x, inverse) -> np.ndarray:
    img, batched = _image(x)
    _, h, w = img.shape
    cy, cx = (h - 1) / 2, (w - 1) / 2
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    sy, sx = inverse(yy - cy, xx - cx)
    out = bilinear_sample(img.astype(np.float64), sy + cy, sx + cx)
    return _restore(np.clip(out, 0, 1), batched, img.dtype)


def rotate(x, degrees: float) -> np.ndarray:
    """Rotate about the image center (counter-clockwise for positive angles)."""
    if abs(degrees) > 180:
        raise ValueError(f"rotation must be within +-180 degrees, got {degrees}")
    if degrees == 0:
        return np.array(x, copy=True)
    t = np.deg2rad(degrees)
    c, s = np.cos(t), np.sin(t)
    # output (dy, dx) pulls from the source point rotated by -t
    return _warp(x, lambda dy, dx: (c * dy + s * dx, -s * dy + c * dx))


def scale(x, factor: float) -> np.ndarray:
    """Center-anchored zoom; the output keeps the input shape."""
    if not 0.5 <= factor <= 2:
        raise ValueError(f"scale factor must be in [0.5, 2], got {factor}")
    if factor == 1:
        return np.array(x, copy=True)
    return _warp(x, lambda dy, dx: (dy / factor, dx / factor))


def resize(x, height: int, width: int) -> np.ndarray:
    """Bilinear resampling to a new size with pixel centers aligned."""
    if height < 1 or width < 1:
        raise ValueError(f"target size must be positive, got {height}x{width}")
    img, batched = _image(x)
    _, h, w = img.shape
    if (h, w) == (height, width):
        return np.array(x, copy=True)
    ys = (np.arange(height) + 0.5) * h / height - 0.5
    xs = (np.arange(width) + 0.5) * w / width - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    out = bilinear_sample(img.astype(np.float64), yy, xx)
    return _restore(np.clip(out, 0, 1), batched, img.dtype)


def quality_table(base: np.ndarray, quality: int) -> np.ndarray:
    """IJG quality scaling of a base quantization table."""
    if not 1 <= quality <= 100:
        raise ValueError(f"JPEG quality must be in [1, 100], got {quality}")
    s = 5000 / quality if quality < 50 else 200 - 2 * quality
    return np.clip(np.floor((base * s + 50) / 100), 1, 255)


def dct_matrix(n: int = 8) -> np.ndarray:
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos((2 * i + 1) * k * np.pi / (2 * n)) * np.sqrt(2 / n)
    m[0] /= np.sqrt(2)
    return m


_D = dct_matrix()


def rgb_to_ycbcr(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168736 * r - 0.331264 * g + 0.5 * b + 128
    cr = 0.5 * r - 0.418688 * g - 0.081312 * b + 128
    return np.stack([y, cb, cr])


def ycbcr_to_rgb(ycc: np.ndarray) -> np.ndarray:
    y, cb, cr = ycc[0], ycc[1] - 128, ycc[2] - 128
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return np.stack([r, g, b])


def jpeg_roundtrip(x, quality: int = 80) -> np.ndarray:
    """Lossy JPEG-style round trip without entropy coding.

    Full-resolution chroma (4:4:4), 8x8 orthonormal DCT, IJG-scaled standard
    tables, and 8-bit output as a decoder would produce.
    """
    img, batched = _image(x)
    if img.shape[0] != 3:
        raise ValueError("JPEG round trip needs a 3-channel image")
    tables = [quality_table(LUMA_Q, quality)] + [quality_table(CHROMA_Q, quality)] * 2
    _, h, w = img.shape
    ph, pw = -h % 8, -w % 8
    px = np.round(np.clip(img.astype(np.float64), 0, 1) * 255)
    px = np.pad(px, ((0, 0), (0, ph), (0, pw)), mode="edge")
    ycc = rgb_to_ycbcr(px) - 128
    H, W = ycc.shape[1:]
    blocks = ycc.reshape(3, H // 8, 8, W // 8, 8).transpose(0, 1, 3, 2, 4)
    coef = _D @ blocks @ _D.T
    q = np.stack(tables)[:, None, None]
    coef = np.round(coef / q) * q
    rec = (_D.T @ coef @ _D).transpose(0, 1, 3, 2, 4).reshape(3, H, W)
    rgb = np.clip(np.round(ycbcr_to_rgb(rec + 128)), 0, 255)[:, :h, :w]
    return _restore(rgb / 255.0, batched, img.dtype)


def quantize8(x) -> np.ndarray:
    x = np.asarray(x)
    return (np.round(np.clip(x, 0, 1) * 255) / 255).astype(x.dtype)


@dataclass(frozen=True)
class TransformSpec:
    """A transform family and its magnitude.

    ``magnitude`` is degrees for rotate, the deviation from 1 for scale and the
    quality for jpeg. With ``sampling="uniform"`` rotate/scale draw uniformly
    within +-magnitude; ``"fixed"`` applies +magnitude.
    """

    kind: str  # none | rotate | scale | jpeg
    magnitude: float = 0.0
    sampling: str = "uniform"
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("none", "rotate", "scale", "jpeg"):
            raise ValueError(f"unknown transform {self.kind!r}")
        if self.kind == "jpeg" and not 1 <= self.magnitude <= 100:
            raise ValueError("jpeg quality must be in [1, 100]")
        if self.kind == "scale" and not 0 <= self.magnitude < 1:
            raise ValueError("scale deviation must be in [0, 1)")
        if not self.name:
            object.__setattr__(self, "name", self.kind if self.kind == "none"
                               else f"{self.kind}{self.magnitude:g}")

    def sample(self, gen: np.random.Generator) -> float:
        if self.kind in ("none", "jpeg"):
            return self.magnitude
        m = self.magnitude
        if self.sampling == "fixed":
            return m if self.kind == "rotate" else 1 + m
        u = gen.uniform(-m, m) if m > 0 else 0.0
        return u if self.kind == "rotate" else 1 + u

    def apply(self, x, value: float) -> np.ndarray:
        """Apply with a sampled value; identity values return ``x`` untouched."""
        if self.kind == "none" or (self.kind == "rotate" and value == 0) or \
                (self.kind == "scale" and value == 1):
            return np.array(x, copy=True)
        if self.kind == "rotate":
            out = rotate(x, value)
        elif self.kind == "scale":
            out = scale(x, value)
        else:
            out = jpeg_roundtrip(x, int(value))
        return quantize8(out)


def standard_transforms() -> list[TransformSpec]:
    """Desk-scale analogs of the small/large rotation and scale ranges plus JPEG 80."""
    return [
        TransformSpec("none", name="none"),
        TransformSpec("rotate", 0.4, name="rot-S"),
        TransformSpec("rotate", 2.0, name="rot-L"),
        TransformSpec("scale", 0.004, name="scale-S"),
        TransformSpec("scale", 0.02, name="scale-L"),
        TransformSpec("jpeg", 80, name="jpeg"),
    ]


def parse_transform(text: str) -> TransformSpec:
    """Parse ``kind[:magnitude[:sampling]]`` or a standard name such as ``rot-L``."""
    for t in standard_transforms():
        if t.name == text:
            return t
    parts = text.split(":")
    kind = parts[0]
    mag = float(parts[1]) if len(parts) > 1 else (80.0 if kind == "jpeg" else 0.0)
    sampling = parts[2] if len(parts) > 2 else "uniform"
    return TransformSpec(kind, mag, sampling, name=text)
