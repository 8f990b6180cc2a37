"""PPM image I/O, channel staging and 64-level quantization."""
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument, OutOfRange, ParseError, UnsupportedFormat

CHANNELS = ("R", "G", "B")
_WS = b" \t\r\n\v\f"


@dataclass(eq=False)
class RgbImage:
    width: int
    height: int
    pixels: np.ndarray  # (height, width, 3) uint8, row-major

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.shape != (self.height, self.width, 3):
            raise InvalidArgument(f"pixel array shape {px.shape} != ({self.height}, {self.width}, 3)")
        if px.dtype != np.uint8:
            if px.size and (px.min() < 0 or px.max() > 255):
                raise InvalidArgument("channel values must lie in [0, 255]")
            px = px.astype(np.uint8)
        self.pixels = px

    def __eq__(self, other):
        return (isinstance(other, RgbImage) and self.width == other.width
                and self.height == other.height and np.array_equal(self.pixels, other.pixels))


@dataclass(eq=False)
class ChannelMatrix:
    width: int
    height: int
    words: np.ndarray  # (height, width) uint8
    channel: str = "R"
    bits: int = 6

    def __post_init__(self):
        w = np.asarray(self.words)
        if w.shape != (self.height, self.width):
            raise InvalidArgument(f"word array shape {w.shape} != ({self.height}, {self.width})")
        if w.size and (w.min() < 0 or w.max() >= 1 << self.bits):
            raise InvalidArgument(f"words must fit in {self.bits} bits")
        if self.channel not in CHANNELS:
            raise InvalidArgument(f"unknown channel tag {self.channel!r}")
        self.words = w.astype(np.uint8)

    def __eq__(self, other):
        return (isinstance(other, ChannelMatrix) and self.channel == other.channel
                and np.array_equal(self.words, other.words))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def skip_ws(self):
        d = self.data
        while self.pos < len(d):
            ch = d[self.pos:self.pos + 1]
            if ch == b"#":
                while self.pos < len(d) and d[self.pos:self.pos + 1] not in (b"\n", b"\r"):
                    self.pos += 1
            elif ch in _WS:
                self.pos += 1
            else:
                break

    def token(self, what):
        self.skip_ws()
        start = self.pos
        d = self.data
        while self.pos < len(d) and d[self.pos:self.pos + 1] not in _WS and d[self.pos:self.pos + 1] != b"#":
            self.pos += 1
        if start == self.pos:
            raise ParseError(f"expected {what}, found end of data", start)
        return d[start:self.pos], start

    def integer(self, what):
        tok, at = self.token(what)
        if not tok.isdigit():
            raise ParseError(f"expected {what}, found {tok[:16]!r}", at)
        return int(tok), at


def parse_ppm(data):
    """Parse P3 or P6 bytes with maxval 255."""
    r = _Reader(bytes(data))
    magic, _ = r.token("magic number")
    if magic in (b"P1", b"P2", b"P4", b"P5", b"P7"):
        raise UnsupportedFormat(f"unsupported netpbm variant {magic.decode()}", 0)
    if magic not in (b"P3", b"P6"):
        raise ParseError(f"bad magic {magic[:8]!r}", 0)
    width, at = r.integer("width")
    if width < 1:
        raise ParseError("width must be positive", at)
    height, at = r.integer("height")
    if height < 1:
        raise ParseError("height must be positive", at)
    maxval, at = r.integer("maxval")
    if maxval != 255:
        raise ParseError(f"maxval {maxval} unsupported, need 255", at)
    n = width * height * 3
    if magic == b"P6":
        if r.pos >= len(r.data) or r.data[r.pos:r.pos + 1] not in _WS:
            raise ParseError("missing separator before raster", r.pos)
        start = r.pos + 1
        raw = r.data[start:start + n]
        if len(raw) < n:
            raise ParseError(f"short raster: {len(raw)} of {n} bytes", start + len(raw))
        vals = np.frombuffer(raw, dtype=np.uint8).copy()
    else:
        vals = np.empty(n, dtype=np.uint8)
        for i in range(n):
            v, at = r.integer("sample")
            if v > 255:
                raise ParseError(f"sample {v} exceeds maxval", at)
            vals[i] = v
    return RgbImage(width, height, vals.reshape(height, width, 3))


def format_ppm(img, binary=True):
    head = f"P{6 if binary else 3}\n{img.width} {img.height}\n255\n".encode()
    if binary:
        return head + img.pixels.tobytes()
    rows = [" ".join(str(int(v)) for v in row.ravel()) for row in img.pixels]
    return head + ("\n".join(rows) + "\n").encode()


def load_ppm(path):
    with open(path, "rb") as fh:
        return parse_ppm(fh.read())


def save_ppm(img, path, binary=True):
    from .fsutil import atomic_write

    atomic_write(path, format_ppm(img, binary))


def decompose_rgb(img):
    """Split into three 8-bit staging matrices."""
    return tuple(ChannelMatrix(img.width, img.height, img.pixels[:, :, i], ch, bits=8)
                 for i, ch in enumerate(CHANNELS))


def reassemble(r, g, b):
    if not (r.words.shape == g.words.shape == b.words.shape):
        raise InvalidArgument("channel dimensions differ")
    px = np.stack([r.words, g.words, b.words], axis=-1)
    return RgbImage(r.width, r.height, px)


def quantize64(v):
    """8-bit sample(s) to 6-bit level: floor(v/4)."""
    a = np.asarray(v)
    if a.size and (a.min() < 0 or a.max() > 255):
        raise OutOfRange("8-bit value outside [0, 255]")
    out = a.astype(np.int64) // 4
    return int(out) if out.ndim == 0 else out.astype(np.uint8)


def dequantize(k):
    """6-bit level(s) back to the bin midpoint."""
    a = np.asarray(k)
    if a.size and (a.min() < 0 or a.max() > 63):
        raise OutOfRange("level outside [0, 63]")
    out = a.astype(np.int64) * 4 + 2
    return int(out) if out.ndim == 0 else out.astype(np.uint8)


def quantize_channel(m):
    return ChannelMatrix(m.width, m.height, quantize64(m.words), m.channel)


def dequantize_channel(m):
    return ChannelMatrix(m.width, m.height, dequantize(m.words), m.channel, bits=8)


def demo_pattern(width=128, height=128):
    """Deterministic smooth-plus-structured RGB picture for demos and tests.

    Channels are strongly correlated with position, which makes the
    plaintext/cipher correlation check meaningful.
    """
    yy, xx = np.mgrid[0:height, 0:width].astype(float)
    u, v = xx / max(width - 1, 1), yy / max(height - 1, 1)
    r = 255 * u
    g = 255 * (0.5 + 0.5 * np.sin(2 * np.pi * (u + v)))
    rad = np.hypot(u - 0.5, v - 0.5)
    b = 255 * np.clip(1 - 1.6 * rad, 0, 1)
    px = np.stack([r, g, b], axis=-1)
    px[(xx // 16 + yy // 16) % 2 == 0] *= 0.8
    return RgbImage(width, height, np.clip(np.rint(px), 0, 255).astype(np.uint8))
