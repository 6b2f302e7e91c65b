"""Grayscale image container, PGM/PPM/PNG codecs and key-point overlays."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

OVERLAY_COLOR = (0, 255, 0)
LUMA = (0.299, 0.587, 0.114)


class ImageIOError(Exception):
    pass


class UnreadableFileError(ImageIOError):
    pass


class UnsupportedFormatError(ImageIOError):
    pass


class UnsupportedBitDepthError(UnsupportedFormatError):
    pass


class MalformedHeaderError(ImageIOError):
    pass


class MalformedPayloadError(ImageIOError):
    pass


@dataclass(frozen=True, eq=False)
class GrayImage:
    """Real-valued intensities, shape (height, width), row-major.

    Values are nominally in [0, 255] but are never clamped, so affine
    intensity changes a*I + b stay exact.
    """

    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        a = np.array(self.data, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
            raise ValueError(f"image data must be a non-empty 2-D array, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("image intensities must be finite")
        a.setflags(write=False)
        object.__setattr__(self, "data", a)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @classmethod
    def from_flat(cls, width: int, height: int, values) -> "GrayImage":
        values = np.asarray(values, dtype=np.float64)
        if values.size != width * height:
            raise ValueError(f"expected {width * height} values, got {values.size}")
        return cls(values.reshape(height, width))

    def affine(self, a: float, b: float) -> "GrayImage":
        return GrayImage(a * self.data + b)


def rgb_to_luma(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    return LUMA[0] * rgb[..., 0] + LUMA[1] * rgb[..., 1] + LUMA[2] * rgb[..., 2]


def _netpbm_header(buf: bytes, count: int) -> tuple[list[bytes], int]:
    """Read the magic plus ``count`` integer header fields, skipping comments.

    Returns the tokens and the offset just past the single whitespace byte
    that terminates the last field.
    """
    tokens: list[bytes] = []
    i, n = 0, len(buf)
    while len(tokens) < count + 1:
        while i < n and buf[i:i + 1].isspace():
            i += 1
        if i < n and buf[i:i + 1] == b"#":
            while i < n and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        if i >= n:
            raise MalformedHeaderError("header ended early")
        j = i
        while j < n and not buf[j:j + 1].isspace() and buf[j:j + 1] != b"#":
            j += 1
        tokens.append(buf[i:j])
        i = j
    if i >= n or not buf[i:i + 1].isspace():
        raise MalformedHeaderError("header not terminated by whitespace")
    return tokens, i + 1


def _parse_dims(tokens: list[bytes]) -> tuple[int, int, int]:
    try:
        w, h, maxval = (int(t) for t in tokens[1:4])
    except ValueError as exc:
        raise MalformedHeaderError(f"non-integer header field: {exc}") from None
    if w < 1 or h < 1:
        raise MalformedHeaderError(f"bad dimensions {w}x{h}")
    if not 1 <= maxval <= 255:
        raise UnsupportedBitDepthError(f"maxval {maxval} is not 8-bit")
    return w, h, maxval


def decode_netpbm(buf: bytes) -> GrayImage:
    magic = buf[:2]
    if magic not in (b"P2", b"P5", b"P6"):
        raise UnsupportedFormatError(f"unknown netpbm magic {magic!r}")
    tokens, offset = _netpbm_header(buf, 3)
    w, h, _ = _parse_dims(tokens)
    if magic == b"P2":
        body = buf[offset:].split()
        if len(body) < w * h:
            raise MalformedPayloadError(f"expected {w * h} samples, found {len(body)}")
        try:
            values = np.array([int(t) for t in body[:w * h]], dtype=np.float64)
        except ValueError:
            raise MalformedPayloadError("non-integer sample in P2 body") from None
        return GrayImage(values.reshape(h, w))
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    payload = buf[offset:offset + need]
    if len(payload) < need:
        raise MalformedPayloadError(f"expected {need} payload bytes, found {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).astype(np.float64)
    if channels == 3:
        return GrayImage(rgb_to_luma(arr.reshape(h, w, 3)))
    return GrayImage(arr.reshape(h, w))


def decode_png(buf: bytes) -> GrayImage:
    from PIL import Image

    try:
        im = Image.open(io.BytesIO(buf))
        im.load()
    except Exception as exc:  # Pillow raises a zoo of types for broken files
        raise MalformedPayloadError(f"cannot decode PNG: {exc}") from None
    if im.mode == "L":
        return GrayImage(np.asarray(im, dtype=np.float64))
    if im.mode == "RGB":
        return GrayImage(rgb_to_luma(np.asarray(im)))
    raise UnsupportedBitDepthError(f"PNG mode {im.mode!r} is not 8-bit gray or RGB")


def load_image(path) -> GrayImage:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise UnreadableFileError(f"{path}: {exc.strerror or exc}") from None
    if buf.startswith(b"\x89PNG"):
        return decode_png(buf)
    if buf[:1] == b"P":
        return decode_netpbm(buf)
    raise UnsupportedFormatError(f"{path}: not a PGM/PPM/PNG file")


def to_uint8(a: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(a, dtype=np.float64) + 0.5), 0, 255).astype(np.uint8)


def encode_pgm(img: GrayImage) -> bytes:
    return f"P5\n{img.width} {img.height}\n255\n".encode() + to_uint8(img.data).tobytes()


def encode_ppm(rgb: np.ndarray) -> bytes:
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes()


def _write(path, payload: bytes) -> None:
    try:
        Path(path).write_bytes(payload)
    except OSError as exc:
        raise ImageIOError(f"{path}: {exc.strerror or exc}") from None


def save_image(img: GrayImage, path) -> None:
    """Write as 8-bit PGM (P5), or PNG when the suffix is ``.png``."""
    if Path(path).suffix.lower() == ".png":
        from PIL import Image

        bio = io.BytesIO()
        Image.fromarray(to_uint8(img.data)).save(bio, format="PNG")
        _write(path, bio.getvalue())
    else:
        _write(path, encode_pgm(img))


def midpoint_circle(cx: int, cy: int, r: int) -> list[tuple[int, int]]:
    """Pixel coordinates (x, y) of a rasterized circle, sorted, without duplicates."""
    if r <= 0:
        return [(cx, cy)]
    pts = set()
    x, y = 0, r
    p = 1 - r
    while x <= y:
        for dx, dy in ((x, y), (y, x), (-x, y), (-y, x), (x, -y), (y, -x), (-x, -y), (-y, -x)):
            pts.add((cx + dx, cy + dy))
        x += 1
        if p < 0:
            p += 2 * x + 1
        else:
            y -= 1
            p += 2 * (x - y) + 1
    return sorted(pts)


def render_overlay(img: GrayImage, kps) -> np.ndarray:
    """RGB uint8 array with one green circle per key-point."""
    gray = to_uint8(img.data)
    rgb = np.repeat(gray[:, :, None], 3, axis=2)
    for kp in kps:
        if not (0 <= kp.x < img.width and 0 <= kp.y < img.height):
            raise ValueError(f"key-point ({kp.x}, {kp.y}) lies outside the {img.width}x{img.height} image")
        r = int(np.floor(kp.size + 0.5))
        for px, py in midpoint_circle(int(kp.x), int(kp.y), r):
            if 0 <= px < img.width and 0 <= py < img.height:
                rgb[py, px] = OVERLAY_COLOR
    return rgb


def write_overlay(img: GrayImage, kps, path) -> None:
    rgb = render_overlay(img, kps)
    if Path(path).suffix.lower() == ".png":
        from PIL import Image

        bio = io.BytesIO()
        Image.fromarray(rgb).save(bio, format="PNG")
        _write(path, bio.getvalue())
    else:
        _write(path, encode_ppm(rgb))
