"""In-situ XOR encryption of an image stored in a unit array.

Every stored word is XORed with its key word one bit at a time on a
scratch unit (reset to logic 0 between bits), and the storage unit is then
reprogrammed to the resulting cipher word.  Decryption is the same pass.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import array as ar
from . import codec as cd
from . import device as dev
from . import logic as lg
from .errors import GateFailure, InvalidArgument, ResetFailure
from .image import CHANNELS, ChannelMatrix, dequantize, reassemble
from .keys import bits_word, word_bits

WORD_BITS = 6


def _check_dims(array, width, height):
    g = array.geometry
    if (g.rows, g.cols) != (height, width) or g.channels != 3:
        raise InvalidArgument(f"{width}x{height} image does not match the {g.cols}x{g.rows}x{g.channels} array")


def interleave(r, g, b):
    """Three channel matrices as one vector in unit-index order (row, col, channel)."""
    return np.stack([r.words, g.words, b.words], axis=-1).reshape(-1).astype(int)


def split(words, width, height, bits=6):
    w = np.asarray(words, dtype=np.uint8).reshape(height, width, 3)
    return tuple(ChannelMatrix(width, height, w[:, :, i], ch, bits) for i, ch in enumerate(CHANNELS))


def store_plaintext(array, r, g, b, rng=None):
    """Write every channel word to its unit; returns per-unit waveform counts."""
    _check_dims(array, r.width, r.height)
    words = interleave(r, g, b)
    return array.write_indices(np.arange(len(array)), words, rng)


def read_channels(array, rng=None):
    vals, _, _ = array.read_indices(np.arange(len(array)), rng)
    return split(vals, array.geometry.cols, array.geometry.rows)


class ScratchBank:
    """Logic-0 scratch units, one per concurrently processed address."""

    def __init__(self, n, params, seed=0):
        self.f = np.array([dev.spawn_unit(params, ar.device_seed(seed, i)).device_factor for i in range(n)])
        self.x = np.full(n, dev.X_PRISTINE)
        self.u = np.zeros(n)

    def __len__(self):
        return len(self.f)


@dataclass
class CryptoReport:
    before: np.ndarray
    after: np.ndarray
    gate_waveforms: int
    program_waveforms: np.ndarray
    polarity: list = field(default_factory=list)


def xor_words_on_device(words, key, bank, params, codec, rng=None, addresses=None):
    """Bitwise XOR of word vectors, MSB first, executed on the scratch bank.

    Returns (cipher words, number of gate pulses).  Raises GateFailure if a
    device result disagrees with the arithmetic XOR, ResetFailure if a
    scratch unit will not return to logic 0.
    """
    words = np.asarray(words, dtype=int)
    key = np.asarray(key, dtype=int)
    n = len(words)
    if len(bank) < n:
        raise InvalidArgument("scratch bank smaller than the word batch")
    x, u, f = bank.x[:n].copy(), bank.u[:n].copy(), bank.f[:n]
    out = np.zeros(n, dtype=int)
    pulses = 0
    for b in range(WORD_BITS - 1, -1, -1):
        p = (words >> b) & 1
        q = (key >> b) & 1
        x, u, _, bit = lg.xor_batch(x, u, f, p, q, params, rng, codec)
        pulses += n
        out = (out << 1) | bit
        x, u, ok = lg.reset_batch(x, u, f, params, rng, codec)
        if not ok.all():
            k = int(np.argmin(ok))
            where = addresses[k] if addresses is not None else k
            raise ResetFailure(f"scratch unit for {where} did not return to logic 0")
    bank.x[:n], bank.u[:n] = x, u
    bad = out != (words ^ key)
    if bad.any():
        k = int(np.argmax(bad))
        raise GateFailure(f"device XOR gave {out[k]:06b}, expected {words[k] ^ key[k]:06b}",
                          addresses[k] if addresses is not None else k)
    return out, pulses


def encrypt_in_situ(array, key, rng=None, bank=None, scratch_seed=0):
    """XOR every stored word with its key word in place.  Decryption is the same call."""
    _check_dims(array, key.width, key.height)
    idx = np.arange(len(array))
    bank = bank or ScratchBank(len(array), array.params, scratch_seed)
    before, _, _ = array.read_indices(idx, rng)
    kw = interleave(*key.channels())
    addrs = [array.geometry.address(i) for i in idx] if len(idx) <= 4096 else None
    cipher, pulses = xor_words_on_device(before, kw, bank, array.params, array.codec, rng, addrs)
    log = []
    iters = array.write_indices(idx, cipher, rng, polarity_log=log)
    return CryptoReport(before, cipher, pulses, iters, log)


decrypt_in_situ = encrypt_in_situ


@dataclass(frozen=True)
class WordTrace:
    """Per-address record of the single-scratch-unit path."""
    plain: int
    key: int
    cipher: int
    gate_G: tuple
    polarity: tuple
    target_voltage: float


def encrypt_word(array, addr, key_word, scratch, rng=None):
    """One address through a single scratch unit: six xor_gate calls with resets between.

    Returns (WordTrace, scratch unit after the final reset).
    """
    plain = ar.read_word_detail(array, addr, None if rng is None else int(rng.integers(2**63))).value
    bits, gs = [], []
    for p, q in zip(word_bits(plain), word_bits(key_word)):
        res = lg.xor_gate(scratch, p, q, array.params, rng)
        bits.append(res.output)
        gs.append(res.G)
        scratch = lg.reset_to_logic0(res.unit, array.params, rng)
    cipher = bits_word(bits)
    if cipher != plain ^ key_word:
        raise GateFailure(f"device XOR gave {cipher:06b}, expected {plain ^ key_word:06b}", addr)
    log = []
    array.write_indices([array.geometry.index(addr)], [cipher], rng, polarity_log=log)
    pol = tuple(int(e[0]) for e in log if e[0] != 0)
    trace = WordTrace(plain, key_word, cipher, tuple(gs), pol, cd.level_to_voltage(array.codec, cipher))
    return trace, scratch


def render_cipher_image(array, rng=None):
    """(RgbImage of dequantized words, per-pixel decode-failure mask)."""
    g = array.geometry
    idx = np.arange(len(array))
    x, u, f = array.x, array.u(), array.f
    G = cd.read_batch(x, u, f, array.params, array.codec, rng)
    vals = cd._decode(array.codec, G)
    t = cd.targets(array.codec)
    gaps = np.array([cd.half_gap(array.codec, k) for k in range(array.codec.n_used)])
    bad = (np.abs(G - t[vals]) / t[vals] > gaps[vals]) | (array.levels[idx] < 0)
    img = reassemble(*split(dequantize(vals), g.cols, g.rows, bits=8))
    return img, bad.reshape(g.rows, g.cols, 3).any(axis=-1)


# ------------------------------------------------------------- statistics

def chi2_uniformity(words, n_bins=64, alpha=0.01):
    """(statistic, critical value at 1 - alpha, passes) for a flat word histogram."""
    counts = np.bincount(np.asarray(words, dtype=int).ravel(), minlength=n_bins)
    exp = counts.sum() / n_bins
    stat = float(((counts - exp) ** 2 / exp).sum())
    crit = float(stats.chi2.ppf(1 - alpha, n_bins - 1))
    return stat, crit, stat <= crit


def correlation(a, b):
    return float(np.corrcoef(np.asarray(a, float).ravel(), np.asarray(b, float).ravel())[0, 1])
