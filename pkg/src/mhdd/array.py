"""Addressable rows x cols x channels array of storage units with text persistence."""
import re
import zlib
from dataclasses import dataclass

import numpy as np

from . import codec as cd
from . import device as dev
from .errors import DecodeFailure, FormatError, InvalidArgument, OutOfRange, ProgramFailure
from .fsutil import atomic_write
from .image import CHANNELS

FORMAT_VERSION = 1


@dataclass(frozen=True)
class ArrayGeometry:
    rows: int
    cols: int
    channels: int = 3
    bits_per_unit: int = 6

    def __post_init__(self):
        for name in ("rows", "cols", "channels", "bits_per_unit"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise InvalidArgument(f"{name} must be a positive integer, got {v}")

    @property
    def units(self):
        return self.rows * self.cols * self.channels

    def index(self, addr):
        row, col, ch = addr
        if isinstance(ch, str):
            if ch not in CHANNELS[:self.channels]:
                raise OutOfRange(f"unknown channel {ch!r}")
            ch = CHANNELS.index(ch)
        if not (0 <= row < self.rows and 0 <= col < self.cols and 0 <= ch < self.channels):
            raise OutOfRange(f"address {addr} outside {self.rows}x{self.cols}x{self.channels}")
        return (int(row) * self.cols + int(col)) * self.channels + int(ch)

    def address(self, index):
        if not 0 <= index < self.units:
            raise OutOfRange(f"unit index {index} outside 0..{self.units - 1}")
        pix, ch = divmod(int(index), self.channels)
        row, col = divmod(pix, self.cols)
        return row, col, ch


@dataclass(frozen=True)
class WordReading:
    value: int
    G: float
    residual: float
    unwritten: bool


def device_seed(master_seed, index):
    return [int(master_seed) & ((1 << 64) - 1), int(index)]


class MolecularArray:
    """Dense unit state: oxidation fraction x, anion displacement c, device factor f.

    ``levels`` holds the last written word per unit, -1 where nothing was
    written yet.  c (not the internal coordinate u) is the stored quantity so
    that a saved and reloaded array reads bit-identically.
    """

    def __init__(self, geometry, params, codec, master_seed, x, c, f, levels):
        n = geometry.units
        for name, a in (("x", x), ("c", c), ("f", f), ("levels", levels)):
            if np.shape(a) != (n,):
                raise InvalidArgument(f"{name} has shape {np.shape(a)}, expected ({n},)")
        self.geometry = geometry
        self.params = params
        self.codec = codec
        self.master_seed = int(master_seed)
        self.x = np.asarray(x, dtype=float)
        self.c = np.asarray(c, dtype=float)
        self.f = np.asarray(f, dtype=float)
        self.levels = np.asarray(levels, dtype=int)

    def __len__(self):
        return self.geometry.units

    def unit(self, addr):
        i = self.geometry.index(addr)
        return dev.UnitState(float(self.x[i]), float(self.c[i]), float(self.f[i]))

    def u(self, idx=slice(None)):
        return dev._u_of_c(self.c[idx], self.params)

    # bulk paths, used by the encryption pipeline

    def read_indices(self, idx, rng=None):
        """(values, G, residual) for unit indices; raises DecodeFailure off the ladder."""
        idx = np.asarray(idx, dtype=int)
        g = cd.read_batch(self.x[idx], self.u(idx), self.f[idx], self.params, self.codec, rng)
        t = cd.targets(self.codec)
        vals = cd._decode(self.codec, g)
        res = np.abs(g - t[vals]) / t[vals]
        gaps = np.array([cd.half_gap(self.codec, k) for k in range(self.codec.n_used)])
        bad = (res > gaps[vals]) & (self.levels[idx] >= 0)
        if bad.any():
            i = int(idx[np.argmax(bad)])
            raise DecodeFailure(f"read {g[np.argmax(bad)]:.4g} S is off the level ladder",
                                self.geometry.address(i))
        return vals, g, res

    def write_indices(self, idx, values, rng=None, polarity_log=None):
        """Program many units; returns the per-unit waveform count."""
        idx = np.asarray(idx, dtype=int)
        values = np.asarray(values, dtype=int)
        if values.size and (values.min() < 0 or values.max() >= self.codec.n_used):
            raise OutOfRange(f"word outside 0..{self.codec.n_used - 1}")
        x, u, ok, g, iters = cd.program_batch(self.x[idx], self.u(idx), self.f[idx], values,
                                              self.codec, self.params, rng, polarity_log=polarity_log)
        moved = iters > 0
        self.x[idx[moved]] = x[moved]
        self.c[idx[moved]] = dev._c_of_u(u[moved], self.params)
        self.levels[idx[ok]] = values[ok]
        if not ok.all():
            k = int(np.argmin(ok))
            lvl, res = cd.nearest_level(self.codec, g[k])
            raise ProgramFailure(f"verify failed for word {values[k]}", cd.LevelReading(lvl, float(g[k]), res),
                                 self.geometry.address(int(idx[k])))
        return iters


def allocate(geometry, params, codec, master_seed):
    n = geometry.units
    f = np.array([dev.spawn_unit(params, device_seed(master_seed, i)).device_factor for i in range(n)])
    return MolecularArray(geometry, params, codec, master_seed, np.full(n, dev.X_PRISTINE),
                          np.zeros(n), f, np.full(n, -1))


def _rng(noise_seed):
    return None if noise_seed is None else np.random.default_rng(noise_seed)


def write_word(array, addr, value, noise_seed=None, polarity_log=None):
    """Program-and-verify one word; returns the number of waveforms issued (0 if already stored)."""
    i = array.geometry.index(addr)
    if int(value) != value or not 0 <= value < array.codec.n_used:
        raise OutOfRange(f"word {value} outside 0..{array.codec.n_used - 1}")
    return int(array.write_indices([i], [value], _rng(noise_seed), polarity_log)[0])


def read_word_detail(array, addr, noise_seed=None):
    i = array.geometry.index(addr)
    vals, g, res = array.read_indices([i], _rng(noise_seed))
    return WordReading(int(vals[0]), float(g[0]), float(res[0]), bool(array.levels[i] < 0))


def read_word(array, addr, noise_seed=None):
    """Stored word, or None for a unit that was never written."""
    r = read_word_detail(array, addr, noise_seed)
    return None if r.unwritten else r.value


def capacity_report(geometry):
    mol = geometry.rows * geometry.cols * 3
    binary = mol * geometry.bits_per_unit
    return mol, binary, mol / binary


# ---------------------------------------------------------------- persistence

def format_array(array):
    g = array.geometry
    lines = [f"MHDD {FORMAT_VERSION} {g.rows} {g.cols} {g.channels}",
             f"SEED {array.master_seed}"]
    for i in range(g.units):
        lvl = "-" if array.levels[i] < 0 else str(int(array.levels[i]))
        lines.append(f"{i} {array.x[i]:.17g} {array.c[i]:.17g} {array.f[i]:.17g} {lvl}")
    body = "\n".join(lines) + "\n"
    return body + f"CRC32 {zlib.crc32(body.encode()):08x}\n"


def save(array, path):
    atomic_write(path, format_array(array))


_HEADER = re.compile(r"MHDD (\d+) (\d+) (\d+) (\d+)\n")


def parse_array(text, params, codec):
    """Inverse of format_array.  Any damage raises before an array is built."""
    if not text.startswith("MHDD "):
        raise FormatError("not an array file")
    end = text.rfind("CRC32 ")
    if end < 0 or not text.endswith("\n"):
        raise FormatError("missing CRC32 trailer (truncated file?)")
    body, trailer = text[:end], text[end:].strip()
    try:
        want = int(trailer.split()[1], 16)
    except (IndexError, ValueError):
        raise FormatError("malformed CRC32 line") from None
    if zlib.crc32(body.encode()) != want:
        raise FormatError("checksum mismatch")
    m = _HEADER.match(body)
    if not m:
        raise FormatError("malformed header")
    version, rows, cols, chans = map(int, m.groups())
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported array format version {version}")
    geometry = ArrayGeometry(rows, cols, chans)
    lines = body[m.end():].splitlines()
    if not lines or not lines[0].startswith("SEED "):
        raise FormatError("missing SEED line")
    seed = int(lines[0].split()[1])
    rec = lines[1:]
    n = geometry.units
    if len(rec) != n:
        raise FormatError(f"expected {n} unit lines, found {len(rec)}")
    x, c, f = np.empty(n), np.empty(n), np.empty(n)
    levels = np.empty(n, dtype=int)
    for i, line in enumerate(rec):
        parts = line.split()
        if len(parts) != 5 or parts[0] != str(i):
            raise FormatError(f"bad unit line {i}: {line!r}")
        x[i], c[i], f[i] = float(parts[1]), float(parts[2]), float(parts[3])
        levels[i] = -1 if parts[4] == "-" else int(parts[4])
    if (x < 0).any() or (x > 1).any() or (np.abs(c) > 1).any() or (f <= 0).any():
        raise FormatError("unit state out of range")
    return MolecularArray(geometry, params, codec, seed, x, c, f, levels)


def load(path, params, codec):
    with open(path) as fh:
        return parse_array(fh.read(), params, codec)
