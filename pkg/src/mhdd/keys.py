"""SplitMix64 key matrices, 6-bit XOR words and the key/word file format."""
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument, OutOfRange, ParseError
from .image import CHANNELS, ChannelMatrix

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB


def splitmix64(seed):
    """Infinite generator of 64-bit outputs."""
    state = seed & MASK64
    while True:
        state = (state + GOLDEN) & MASK64
        z = state
        z = ((z ^ (z >> 30)) * MIX1) & MASK64
        z = ((z ^ (z >> 27)) * MIX2) & MASK64
        yield z ^ (z >> 31)


def splitmix64_block(seed, n):
    """Vectorised equivalent of the first n outputs of splitmix64(seed)."""
    with np.errstate(over="ignore"):
        k = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(seed & MASK64) + k * np.uint64(GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
        return z ^ (z >> np.uint64(31))


@dataclass(eq=False)
class KeyMatrix:
    r: ChannelMatrix
    g: ChannelMatrix
    b: ChannelMatrix
    seed: int = 0

    def __post_init__(self):
        if not (self.r.words.shape == self.g.words.shape == self.b.words.shape):
            raise InvalidArgument("key channel dimensions differ")

    @property
    def width(self):
        return self.r.width

    @property
    def height(self):
        return self.r.height

    def channels(self):
        return (self.r, self.g, self.b)

    def __eq__(self, other):
        return isinstance(other, KeyMatrix) and all(a == b for a, b in zip(self.channels(), other.channels()))


def gen_key(seed, width, height):
    if width < 1 or height < 1:
        raise InvalidArgument("key dimensions must be positive")
    n = width * height
    words = (splitmix64_block(seed, 3 * n) & np.uint64(0x3F)).astype(np.uint8)
    mats = [ChannelMatrix(width, height, words[i * n:(i + 1) * n].reshape(height, width), ch)
            for i, ch in enumerate(CHANNELS)]
    return KeyMatrix(*mats, seed=seed & MASK64)


def xor_word(a, b):
    for v in (a, b):
        if not 0 <= v <= 63:
            raise OutOfRange(f"word {v} outside 0..63")
    return a ^ b


def word_bits(v, nbits=6):
    """MSB-first bit list."""
    return [(v >> (nbits - 1 - i)) & 1 for i in range(nbits)]


def bits_word(bits):
    v = 0
    for b in bits:
        v = (v << 1) | (b & 1)
    return v


def to_bitstring(v, nbits=6):
    return format(v, f"0{nbits}b")


def _blocks(mats):
    out = []
    for m in mats:
        out.append("\n".join(" ".join(f"{int(w):02x}" for w in row) for row in m.words))
    return "\n\n".join(out) + "\n"


def format_key(key):
    return f"MHDDKEY 1 {key.width} {key.height} {key.seed:016x}\n" + _blocks(key.channels())


def format_words(mats):
    return _blocks(mats)


def _parse_blocks(text, width, height):
    blocks = [b for b in text.strip("\n").split("\n\n")]
    if len(blocks) != 3:
        raise ParseError(f"expected 3 channel blocks, found {len(blocks)}")
    mats = []
    for ch, block in zip(CHANNELS, blocks):
        lines = block.split("\n")
        if height is not None and len(lines) != height:
            raise ParseError(f"channel {ch}: expected {height} rows, found {len(lines)}")
        try:
            rows = [[int(t, 16) for t in ln.split()] for ln in lines]
        except ValueError as e:
            raise ParseError(f"channel {ch}: bad hex word ({e})") from None
        w = width if width is not None else len(rows[0])
        if any(len(r) != w for r in rows):
            raise ParseError(f"channel {ch}: ragged rows")
        try:
            mats.append(ChannelMatrix(w, len(rows), np.array(rows, dtype=np.int64).reshape(len(rows), w), ch))
        except InvalidArgument as e:
            raise ParseError(f"channel {ch}: {e}") from None
    return mats


def parse_key(text):
    head, _, rest = text.partition("\n")
    parts = head.split()
    if len(parts) != 5 or parts[0] != "MHDDKEY":
        raise ParseError("missing MHDDKEY header")
    if parts[1] != "1":
        raise ParseError(f"unsupported key file version {parts[1]}")
    try:
        w, h, seed = int(parts[2]), int(parts[3]), int(parts[4], 16)
    except ValueError:
        raise ParseError("malformed key header") from None
    return KeyMatrix(*_parse_blocks(rest, w, h), seed=seed)


def parse_words(text):
    return tuple(_parse_blocks(text, None, None))
