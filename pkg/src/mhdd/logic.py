"""In-memory logic on single units.

Binary XOR is one square pulse whose sign is the difference of the two
input voltages; the result is read back against a 1 nS threshold.
Multi-valued gates (MAX, MIN, threshold) are built from the level codec's
programming primitives.
"""
import functools
import math
import re
from dataclasses import dataclass, replace

import numpy as np

from . import codec as cd
from . import device as dev
from .errors import (DecodeFailure, InvalidArgument, ParseError, PoolExhausted,
                     PreconditionViolation, ResetFailure)

XOR_V = 2.5
XOR_THRESHOLD = 1e-9
# logic-1 read levels for (p, q) = (1, 0) and (0, 1)
XOR_ONE_LEVELS = (63.8e-12, 92.8e-12)

# reset controller
RESET_ITERS = 6
X_TOL = 0.01
G_TOL = 0.015
EPS_TOL = 0.10
V_RELAX = 1e-4
V_REDUCE = 0.3
V_OXIDIZE = -0.05


# ------------------------------------------------------------------ XOR

def xor_read(x, u, f, params, codec=None, rng=None):
    """min(|G(+0.1)|, |G(-0.1)|): a charged unit reads low on one probe polarity."""
    codec = codec or cd.LevelCodec()
    gp = np.abs(cd._probe(x, u, f, params, codec, rng, cd.READ_V) / cd.READ_V)
    gm = np.abs(cd._probe(x, u, f, params, codec, rng, -cd.READ_V) / cd.READ_V)
    return np.minimum(gp, gm)


def _pulse_response(params, width):
    x0 = np.array([dev.X_PRISTINE, dev.X_PRISTINE])
    u0 = np.zeros(2)
    x, u = dev.advance_kernel(x0, u0, np.array([XOR_V, -XOR_V]), width, params)
    return xor_read(x, u, 1.0, params)


@functools.lru_cache(maxsize=32)
def xor_pulse_width(params):
    """Pulse width that centres both logic-1 rows on their levels in log space.

    The (1, 0) row oxidises the unit and reads lower than (0, 1), so the
    width is chosen where ln(G10/63.8 pS) + ln(G01/92.8 pS) = 0 on a nominal
    pristine unit.  Below the crossing both reads fall monotonically with
    width, so bisection applies.
    """
    def h(w):
        g = _pulse_response(params, w)
        return math.log(g[0] / XOR_ONE_LEVELS[0]) + math.log(g[1] / XOR_ONE_LEVELS[1])

    def vbi(w):
        _, u = dev.advance_kernel(np.array([dev.X_PRISTINE]), np.zeros(1), XOR_V, w, params)
        return params.kappa * u[0]

    # upper end: the width at which the build-in potential reaches the read voltage
    hi = 1e-4
    while vbi(hi) < cd.READ_V:
        hi *= 2
        if hi > 100.0:
            raise InvalidArgument("XOR pulse never charges the unit to the read voltage")
    lo = 0.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if vbi(mid) < cd.READ_V else (lo, mid)
    lo, hi = 1e-6, lo
    if h(lo) < 0:
        raise InvalidArgument("XOR pulse cannot reach the logic-1 levels with these parameters")
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if h(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def xor_waveform(p, q, params):
    return dev.pulse((int(p) - int(q)) * XOR_V, xor_pulse_width(params), label=f"xor {p}{q}")


def _bits(a, name):
    a = np.asarray(a)
    if not np.isin(a, (0, 1)).all():
        raise InvalidArgument(f"{name} must be 0 or 1")
    return a.astype(int)


def xor_batch(x, u, f, p, q, params, rng=None, codec=None):
    """One XOR evaluation per unit; returns (x, u, G_read, output bits)."""
    p = _bits(p, "p")
    q = _bits(q, "q")
    V = (p - q) * XOR_V
    x, u = dev.advance_kernel(x, u, V * np.ones(np.shape(x)), xor_pulse_width(params), params)
    g = xor_read(x, u, f, params, codec, rng)
    return x, u, g, (g < XOR_THRESHOLD).astype(int)


@dataclass(frozen=True)
class GateResult:
    output: int
    G: float
    unit: dev.UnitState
    waveforms: tuple


def xor_gate(unit, p, q, params, rng=None):
    """Single-unit XOR on a logic-0 unit (pristine or reset)."""
    wf = xor_waveform(_bits(p, "p"), _bits(q, "q"), params)
    _check_logic0(unit, params)
    x, u, f = cd._arrays(unit, params)
    x, u, g, out = xor_batch(x, u, f, [p], [q], params, rng)
    new = replace(unit, x=float(x[0]), c=float(dev._c_of_u(u[0], params)),
                  elapsed_s=unit.elapsed_s + wf.duration())
    return GateResult(int(out[0]), float(g[0]), new, (wf,))


# ------------------------------------------------------------------ reset

def _reads(x, u, f, params, codec, rng):
    eps = params.eps_read
    return (cd._probe(x, u, f, params, codec, rng, cd.READ_V) / cd.READ_V,
            cd._probe(x, u, f, params, codec, rng, eps) / eps,
            cd._probe(x, u, f, params, codec, rng, -eps) / -eps)


def logic0_reference(f, params):
    """Noise-free (G(0.1), G(+eps), G(-eps)) of a pristine unit with device factor f."""
    f = np.asarray(f, dtype=float)
    x = np.full(f.shape, dev.X_PRISTINE)
    u = np.zeros(f.shape)
    return _reads(x, u, f, params, cd.LevelCodec(), None)


def is_logic0(x, u, f, params, rng=None, codec=None):
    """Read-only check that units look pristine.

    Both eps-probe currents must follow the probe sign (|V_bi| < eps) and
    sit within EPS_TOL of the pristine reference, and G(0.1) within G_TOL.
    """
    codec = codec or cd.LevelCodec()
    g1, gp, gm = _reads(x, u, f, params, codec, rng)
    r1, rp, rm = logic0_reference(f, params)
    return ((gp > 0) & (gm > 0) & (np.abs(g1 / r1 - 1) <= G_TOL)
            & (np.abs(gp / rp - 1) <= EPS_TOL) & (np.abs(gm / rm - 1) <= EPS_TOL))


def _relax_time(u, V, params):
    # exponential approach from the estimate to 2e-5 of the hold target
    d = np.abs(u - V / params.V_c)
    return params.tau_hold * np.log(np.maximum(d, 2e-5) / 2e-5) + 0.05


def _estimate_x(probes, f, params):
    gm, uh = cd.estimate_state(probes, params)
    xh = (1.0 - gm / (np.asarray(f) * params.G_red)) / params.alpha_ox
    return np.clip(xh, 0.0, 1.0), uh


def _plan_hold(x, u, V, params, x_goal, t_max=30.0):
    """Hold time at V after which relaxing at V_RELAX leaves x at x_goal (nominal model).

    The relaxation's own redox shift is estimated from the charge reached
    after a short settling hold; the verify loop absorbs what that misses.
    """
    ch = params.dwell
    n = np.size(x)
    _, u_set = cd.apply_pulse(x, u, V, np.full(n, 1.0), params)
    vr = np.sign(u_set) * V_RELAX
    xr, _ = cd.apply_pulse(np.full(n, dev.X_PRISTINE), u_set, vr, _relax_time(u_set, vr, params), params)
    goal = x_goal - (xr - dev.X_PRISTINE)
    rising = V < 0
    t = np.full(n, t_max)
    done = np.where(rising, x >= goal, x <= goal)
    t[done] = 0.0
    xs, us = x.copy(), u.copy()
    for k in range(1, int(t_max / ch) + 1):
        if done.all():
            break
        xs, us = dev.advance_kernel(xs, us, V, ch, params)
        hit = ~done & np.where(rising, xs >= goal, xs <= goal)
        t[hit] = k * ch
        done |= hit
    return t


def reset_batch(x, u, f, params, rng=None, codec=None, max_iters=RESET_ITERS, waveforms=None):
    """Drive units back to logic 0 (x near pristine, no stored charge).

    Per round: estimate (x, u) from probe reads; if x is off, hold at a
    small bias whose over-screened equilibrium reduces (positive) or
    oxidises (negative) the layer; then relax the charge at a sub-millivolt
    bias.  Stops when the read-only logic-0 check passes.
    Returns (x, u, ok).  ``waveforms`` (a list) receives per-round
    (hold_V, hold_s, relax_V, relax_s) arrays.
    """
    codec = codec or cd.LevelCodec()
    x = np.array(x, dtype=float, copy=True)
    u = np.array(u, dtype=float, copy=True)
    f = np.broadcast_to(np.asarray(f, dtype=float), x.shape)
    todo = ~is_logic0(x, u, f, params, rng, codec)
    for _ in range(max_iters):
        if not todo.any():
            break
        idx = np.nonzero(todo)[0]
        xs, us, fs = x[idx], u[idx], f[idx]
        probes = [cd._probe(xs, us, fs, params, codec, rng, v) for v in cd.PROBES]
        xh, uh = _estimate_x(probes, fs, params)
        dx = xh - dev.X_PRISTINE
        fix = np.abs(dx) > X_TOL / 2
        vh = np.where(fix, np.where(dx > 0, V_REDUCE, V_OXIDIZE), 0.0)
        th = np.zeros(len(idx))
        d_u = np.abs(uh)
        if fix.any():
            th[fix] = _plan_hold(xh[fix], uh[fix], vh[fix], params, np.full(fix.sum(), dev.X_PRISTINE))
            xs, us = cd.apply_pulse(xs, us, np.where(th > 0, vh, 0.0), th, params)
            d_u = np.where(fix, np.maximum(d_u, np.abs(vh) / params.V_c), d_u)
        # the eps probe facing the stored potential reads the smaller current
        eps = params.eps_read
        ip = np.abs(cd._probe(xs, us, fs, params, codec, rng, eps))
        im = np.abs(cd._probe(xs, us, fs, params, codec, rng, -eps))
        vr = np.where(im >= ip, V_RELAX, -V_RELAX)
        tr = _relax_time(d_u * np.sign(vr), vr, params)
        xs, us = cd.apply_pulse(xs, us, vr, tr, params)
        if waveforms is not None:
            waveforms.append((vh, th, vr, tr))
        x[idx], u[idx] = xs, us
        todo[idx] = ~is_logic0(xs, us, fs, params, rng, codec)
    return x, u, ~todo


def reset_to_logic0(unit, params, rng=None):
    x, u, f = cd._arrays(unit, params)
    log = []
    x, u, ok = reset_batch(x, u, f, params, rng, waveforms=log)
    spent = sum(float(th[0] + tr[0]) for _, th, _, tr in log)
    if not ok[0]:
        raise ResetFailure(f"unit did not return to logic 0 after {RESET_ITERS} rounds")
    return replace(unit, x=float(x[0]), c=float(dev._c_of_u(u[0], params)),
                   elapsed_s=unit.elapsed_s + spent)


def _check_logic0(unit, params):
    x, u, f = cd._arrays(unit, params)
    if not is_logic0(x, u, f, params)[0]:
        raise PreconditionViolation("unit is not in the logic-0 state; reset it first")


# ------------------------------------------------------------------ multi-valued logic

@dataclass(frozen=True)
class LogicValue:
    radix: int
    value: int

    def __post_init__(self):
        if self.radix not in (2, 3, 4):
            raise InvalidArgument(f"radix {self.radix} not in 2..4")
        if int(self.value) != self.value or not 0 <= self.value < self.radix:
            raise InvalidArgument(f"value {self.value} outside 0..{self.radix - 1}")

    def __int__(self):
        return self.value


def logic_levels(radix, codec):
    """Codec levels carrying each logic value: ends plus evenly spaced interior points."""
    if radix not in (2, 3, 4):
        raise InvalidArgument(f"radix {radix} not in 2..4")
    top = codec.n_used - 1
    if radix == 3:
        return (0, codec.n_used // 2, top)
    return tuple(int(round(k * top / (radix - 1))) for k in range(radix))


def decode_logic(G, radix, codec):
    """Nearest logic value by relative distance to the levels' target conductances."""
    t = np.array([cd.level_to_conductance(codec, lv) for lv in logic_levels(radix, codec)])
    return LogicValue(radix, int(np.argmin(np.abs(abs(G) - t) / t)))


def _pair(p, q):
    if p.radix != q.radix:
        raise InvalidArgument(f"radix mismatch: {p.radix} vs {q.radix}")
    return p.radix


def load_value(unit, v, codec, params, rng=None):
    """Program the level encoding logic value ``v``."""
    return cd.program_level(unit, logic_levels(v.radix, codec)[v.value], codec, params, rng)


def read_value(unit, radix, codec, params, rng=None):
    x, u, f = cd._arrays(unit, params)
    g = float(cd.read_batch(x, u, f, params, codec, rng)[0])
    return decode_logic(g, radix, codec), g


def _conditional(unit, p, q, codec, params, rng, raise_only):
    radix = _pair(p, q)
    stored, _ = read_value(unit, radix, codec, params, rng)
    if stored.value != p.value:
        raise PreconditionViolation(f"unit stores {stored.value}, expected {p.value}")
    if (q.value > p.value) if raise_only else (q.value < p.value):
        unit = load_value(unit, q, codec, params, rng)
    out, g = read_value(unit, radix, codec, params, rng)
    return GateResult(out, g, unit, ())


def mvl_max(unit, p, q, codec, params, rng=None):
    """max(p, q): the unit holds p; it is written toward q only if that raises it.

    A raising write starts with a positive-branch sweep, so the stored level
    can only go up.
    """
    return _conditional(unit, p, q, codec, params, rng, raise_only=True)


def mvl_min(unit, p, q, codec, params, rng=None):
    """min(p, q): dual of mvl_max; only a lowering (negative-branch) write is issued."""
    return _conditional(unit, p, q, codec, params, rng, raise_only=False)


def mvl_threshold(unit, x, k, codec, params, rng=None):
    """radix-1 when the stored value equals k, else 0; the unit is rewritten with the answer."""
    radix = _pair(x, k)
    stored, g = read_value(unit, radix, codec, params, rng)
    t = np.array([cd.level_to_conductance(codec, lv) for lv in logic_levels(radix, codec)])
    near = t[stored.value]
    # the read must sit within half the gap to the neighbouring logic levels
    gaps = np.diff(t)
    lo = near - 0.5 * (gaps[stored.value - 1] if stored.value > 0 else gaps[0])
    hi = near + 0.5 * (gaps[stored.value] if stored.value < radix - 1 else gaps[-1])
    if not lo <= abs(g) <= hi:
        raise DecodeFailure(f"stored conductance {abs(g):.4g} S is not a logic level")
    out = LogicValue(radix, radix - 1 if stored.value == k.value else 0)
    unit = load_value(unit, out, codec, params, rng)
    res, g = read_value(unit, radix, codec, params, rng)
    return GateResult(res, g, unit, ())


def mvl_not(unit, x, codec, params, rng=None):
    """radix-1-x, read from the unit and written back."""
    stored, _ = read_value(unit, x.radix, codec, params, rng)
    out = LogicValue(x.radix, x.radix - 1 - stored.value)
    unit = load_value(unit, out, codec, params, rng)
    res, g = read_value(unit, x.radix, codec, params, rng)
    return GateResult(res, g, unit, ())


# ------------------------------------------------------------------ gate specs

STEP_KINDS = ("load", "raise", "lower", "pulse")


@dataclass(frozen=True)
class GateSpec:
    """A one- or two-step gate on a single unit.

    ``encode`` maps each input terminal ("p", "q") to volts per logic
    value.  Level steps ("load", "raise", "lower") write the codec level
    whose stop voltage equals the encoded volts; "pulse" applies
    V(p) - V(q) for ``pulse_width`` seconds (0 means the calibrated XOR
    width).  The final read (|G(0.1)| or, with read="min", the smaller of
    the two probe polarities) is decoded by ascending ``thresholds`` into
    ``outputs``.
    """
    name: str
    radix: int
    encode: tuple
    steps: tuple
    thresholds: tuple
    outputs: tuple
    init: str = "logic0"
    read: str = "abs"
    pulse_width: float = 0.0
    note: str = ""

    def __post_init__(self):
        if self.radix not in (2, 3, 4):
            raise InvalidArgument("radix must be 2..4")
        if not 1 <= len(self.steps) <= 2:
            raise InvalidArgument("a gate has one or two steps")
        enc = dict(self.encode)
        for kind, *terms in self.steps:
            if kind not in STEP_KINDS:
                raise InvalidArgument(f"unknown step kind {kind!r}")
            want = 2 if kind == "pulse" else 1
            if len(terms) != want or any(t not in enc for t in terms):
                raise InvalidArgument(f"step {kind} needs {want} encoded terminal(s)")
        for term, table in self.encode:
            if sorted(v for v, _ in table) != list(range(self.radix)):
                raise InvalidArgument(f"terminal {term} must encode every value once")
        th = list(self.thresholds)
        if any(b <= a for a, b in zip(th, th[1:])) or any(t <= 0 for t in th):
            raise InvalidArgument("decode thresholds must be positive and strictly increasing")
        if len(self.outputs) != len(th) + 1 or any(not 0 <= o < self.radix for o in self.outputs):
            raise InvalidArgument("need one output per decode band")
        if self.read not in ("abs", "min"):
            raise InvalidArgument("read must be 'abs' or 'min'")
        if self.init != "logic0":
            raise InvalidArgument("only the logic0 initial state is supported")

    def volts(self, term, value):
        return dict(dict(self.encode)[term])[value]

    @property
    def inputs(self):
        return tuple(t for t, _ in self.encode)

    def to_text(self):
        out = [f"name = {self.name}", f"radix = {self.radix}", f"init = {self.init}",
               f"read = {self.read}"]
        for term, table in self.encode:
            out.append(f"encode.{term} = " + ", ".join(f"{v}:{volt:.17g}" for v, volt in table))
        for i, (kind, *terms) in enumerate(self.steps, 1):
            out.append(f"step{i} = {kind} {' '.join(terms)}")
        out.append("thresholds = " + ", ".join(f"{t:.17g}" for t in self.thresholds))
        out.append("outputs = " + ", ".join(str(o) for o in self.outputs))
        if self.pulse_width:
            out.append(f"pulse_width = {self.pulse_width:.17g}")
        if self.note:
            out.append(f"note = {self.note}")
        return "\n".join(out) + "\n"

    @classmethod
    def from_text(cls, text):
        kv = {}
        offset = 0
        for raw in text.splitlines(keepends=True):
            line = raw.split("#", 1)[0].strip()
            if line:
                k, sep, v = line.partition("=")
                if not sep:
                    raise ParseError(f"expected key = value, got {line!r}", offset)
                kv[k.strip()] = v.strip()
            offset += len(raw.encode())
        try:
            radix = int(kv.pop("radix"))
            name = kv.pop("name")
            encode, steps = [], []
            for key in sorted(k for k in kv if k.startswith("encode.")):
                table = []
                for item in kv.pop(key).split(","):
                    v, _, volt = item.partition(":")
                    table.append((int(v), float(volt)))
                encode.append((key[len("encode."):], tuple(table)))
            for key in sorted(k for k in kv if k.startswith("step")):
                steps.append(tuple(kv.pop(key).split()))
            thresholds = tuple(float(t) for t in kv.pop("thresholds").split(","))
            outputs = tuple(int(o) for o in kv.pop("outputs").split(","))
            spec = cls(name, radix, tuple(encode), tuple(steps), thresholds, outputs,
                       init=kv.pop("init", "logic0"), read=kv.pop("read", "abs"),
                       pulse_width=float(kv.pop("pulse_width", 0.0)), note=kv.pop("note", ""))
        except KeyError as e:
            raise ParseError(f"missing key {e.args[0]!r}", offset) from None
        except ValueError as e:
            raise ParseError(str(e), offset) from None
        if kv:
            raise ParseError(f"unknown keys: {', '.join(sorted(kv))}", offset)
        return spec


def _level_spec(name, steps, invert_p=False, invert_q=False, codec=None):
    codec = codec or cd.LevelCodec()
    lo, hi = (cd.level_to_voltage(codec, lv) for lv in logic_levels(2, codec))
    g_lo, g_hi = (cd.level_to_conductance(codec, lv) for lv in logic_levels(2, codec))
    enc = lambda inv: ((0, hi), (1, lo)) if inv else ((0, lo), (1, hi))  # noqa: E731
    terms = {t for _, t in steps}
    encode = tuple((t, enc(invert_p if t == "p" else invert_q)) for t in ("p", "q") if t in terms)
    return GateSpec(name, 2, encode, tuple(steps), (float(np.sqrt(g_lo * g_hi)),), (0, 1),
                    note="reference construction")


def default_specs(codec=None):
    """Reference Boolean constructions; logic 0/1 are the lowest and highest codec levels."""
    xor = GateSpec("xor", 2, (("p", ((0, 0.0), (1, XOR_V))), ("q", ((0, 0.0), (1, XOR_V)))),
                   (("pulse", "p", "q"),), (XOR_THRESHOLD,), (1, 0), read="min",
                   note="reference construction")
    return {
        "and": _level_spec("and", (("load", "p"), ("lower", "q")), codec=codec),
        "or": _level_spec("or", (("load", "p"), ("raise", "q")), codec=codec),
        "not": _level_spec("not", (("load", "p"),), invert_p=True, codec=codec),
        "nand": _level_spec("nand", (("load", "p"), ("raise", "q")), True, True, codec),
        "nor": _level_spec("nor", (("load", "p"), ("lower", "q")), True, True, codec),
        "imp": _level_spec("imp", (("load", "p"), ("raise", "q")), invert_p=True, codec=codec),
        "xor": xor,
    }


def _voltage_level(codec, volts):
    k = (volts - codec.V_base) / codec.V_step
    if abs(k - round(k)) > 1e-6:
        raise InvalidArgument(f"{volts} V is not a codec stop voltage")
    return int(round(k))


def boolean_gate(spec, unit, p, q, params, codec=None, rng=None):
    """Run ``spec`` on a logic-0 unit; returns a GateResult with the decoded output."""
    codec = codec or cd.LevelCodec()
    vals = {"p": int(p), "q": int(q)}
    for t in spec.inputs:
        if not 0 <= vals[t] < spec.radix:
            raise InvalidArgument(f"input {t}={vals[t]} outside radix {spec.radix}")
    _check_logic0(unit, params)
    wfs = []
    for kind, *terms in spec.steps:
        if kind == "pulse":
            V = spec.volts(terms[0], vals[terms[0]]) - spec.volts(terms[1], vals[terms[1]])
            width = spec.pulse_width or xor_pulse_width(params)
            wf = dev.pulse(V, width, label=f"{spec.name} pulse")
            x, u, f = cd._arrays(unit, params)
            x, u = dev.advance_kernel(x, u, V, width, params)
            unit = replace(unit, x=float(x[0]), c=float(dev._c_of_u(u[0], params)),
                           elapsed_s=unit.elapsed_s + width)
            wfs.append(wf)
            continue
        level = _voltage_level(codec, spec.volts(terms[0], vals[terms[0]]))
        x, u, f = cd._arrays(unit, params)
        now = cd.nearest_level(codec, cd.read_batch(x, u, f, params, codec, rng)[0])[0]
        if kind == "load" or (kind == "raise" and level > now) or (kind == "lower" and level < now):
            unit = cd.program_level(unit, level, codec, params, rng)
    x, u, f = cd._arrays(unit, params)
    if spec.read == "min":
        g = float(xor_read(x, u, f, params, codec, rng)[0])
    else:
        g = float(cd.read_batch(x, u, f, params, codec, rng)[0])
    band = int(np.searchsorted(spec.thresholds, g, side="right"))
    return GateResult(spec.outputs[band], g, unit, tuple(wfs))


# ------------------------------------------------------------------ cascades

_OPS = {"MAX": 2, "MIN": 2, "XOR": 2, "XNOR": 2, "NOT": 1, "THRESHOLD": 1}


def parse_cascade(text):
    """Parse prefix notation such as ``MAX(MIN(2, x), THRESHOLD_1(y))``.

    The s-expression form ``(max (min 2 x) (threshold 1 y))`` is accepted
    too.  Returns nested tuples: (op, *children), ("THRESHOLD", k, child),
    ("CONST", v) or ("VAR", name).  XNOR(a, b) expands to NOT(XOR(a, b)).
    """
    if text.lstrip().startswith("("):
        return _parse_sexpr(text)
    pos = 0

    def err(msg):
        raise ParseError(msg, pos)

    def skip():
        nonlocal pos
        while pos < len(text) and text[pos].isspace():
            pos += 1

    def token():
        nonlocal pos
        skip()
        start = pos
        while pos < len(text) and (text[pos].isalnum() or text[pos] == "_"):
            pos += 1
        if start == pos:
            err("expected a name or number")
        return text[start:pos]

    def expect(ch):
        nonlocal pos
        skip()
        if pos >= len(text) or text[pos] != ch:
            err(f"expected {ch!r}")
        pos += 1

    def node():
        nonlocal pos
        at = pos
        tok = token()
        if tok.isdigit():
            return ("CONST", int(tok))
        up = tok.upper()
        k = None
        if up.startswith("THRESHOLD_") or (up.startswith("THR") and up[3:].lstrip("_").isdigit()):
            digits = up.split("_", 1)[1] if "_" in up else up[3:]
            if not digits.isdigit():
                err(f"bad threshold operator {tok!r}")
            up, k = "THRESHOLD", int(digits)
        if up not in _OPS:
            skip()
            if pos < len(text) and text[pos] == "(":
                pos = at
                err(f"unknown operator {tok!r}")
            return ("VAR", tok)
        expect("(")
        kids = [node()]
        for _ in range(_OPS[up] - 1):
            expect(",")
            kids.append(node())
        expect(")")
        if up == "XNOR":
            return ("NOT", ("XOR", *kids))
        if up == "THRESHOLD":
            return ("THRESHOLD", k, kids[0])
        return (up, *kids)

    tree = node()
    skip()
    if pos != len(text):
        err("trailing input")
    return tree


_SEXPR_TOKEN = re.compile(r"\s*(?:(\()|(\))|([A-Za-z0-9_]+))")


def _parse_sexpr(text):
    toks = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _SEXPR_TOKEN.match(text, pos)
        if not m:
            at = len(text) - len(text[pos:].lstrip())
            raise ParseError(f"unexpected character {text[at]!r}", at)
        toks.append((m.group(m.lastindex), m.start(m.lastindex)))
        pos = m.end()
    i = 0

    def node():
        nonlocal i
        if i >= len(toks):
            raise ParseError("unexpected end of expression", len(text))
        tok, at = toks[i]
        i += 1
        if tok == ")":
            raise ParseError("unexpected ')'", at)
        if tok != "(":
            if tok.isdigit():
                return ("CONST", int(tok))
            if tok.upper() in _OPS:
                raise ParseError(f"operator {tok!r} outside parentheses", at)
            return ("VAR", tok)
        if i >= len(toks):
            raise ParseError("unexpected end of expression", len(text))
        op, at = toks[i]
        i += 1
        up = op.upper()
        k = None
        m = re.fullmatch(r"(?:THRESHOLD|THR)_?(\d+)", up)
        if m:
            up, k = "THRESHOLD", int(m.group(1))
        elif up == "THRESHOLD":
            kt = node()
            if kt[0] != "CONST":
                raise ParseError("threshold level must be a number", at)
            k = kt[1]
        if up not in _OPS:
            raise ParseError(f"unknown operator {op!r}", at)
        kids = []
        while i < len(toks) and toks[i][0] != ")":
            kids.append(node())
        if i >= len(toks):
            raise ParseError("missing ')'", len(text))
        i += 1
        if len(kids) != _OPS[up]:
            raise ParseError(f"{op} takes {_OPS[up]} operand(s), got {len(kids)}", at)
        if up == "XNOR":
            return ("NOT", ("XOR", *kids))
        if up == "THRESHOLD":
            return ("THRESHOLD", k, kids[0])
        return (up, *kids)

    tree = node()
    if i != len(toks):
        raise ParseError("trailing input", toks[i][1])
    return tree


def format_cascade(expr):
    op = expr[0]
    if op == "CONST":
        return str(expr[1])
    if op == "VAR":
        return expr[1]
    if op == "THRESHOLD":
        return f"THRESHOLD_{expr[1]}({format_cascade(expr[2])})"
    return f"{op}({', '.join(format_cascade(e) for e in expr[1:])})"


def eval_arith(expr, radix, env=None):
    """Reference arithmetic evaluation (no devices)."""
    env = env or {}
    op = expr[0]
    if op == "CONST":
        return expr[1]
    if op == "VAR":
        return env[expr[1]]
    if op == "THRESHOLD":
        return radix - 1 if eval_arith(expr[2], radix, env) == expr[1] else 0
    vals = [eval_arith(e, radix, env) for e in expr[1:]]
    if op == "MAX":
        return max(vals)
    if op == "MIN":
        return min(vals)
    if op == "NOT":
        return radix - 1 - vals[0]
    if op == "XOR":
        return vals[0] ^ vals[1]
    raise InvalidArgument(f"unknown operator {op}")


class UnitPool:
    """Units handed out one per gate evaluation; used units are reset before reuse."""

    def __init__(self, units, reuse=False):
        self.units = list(units)
        self.reuse = reuse
        self._next = 0

    def take(self, params, rng=None):
        if self._next >= len(self.units):
            if not self.reuse or not self.units:
                raise PoolExhausted(f"unit pool of {len(self.units)} exhausted")
            self._next = 0
        i = self._next
        self._next += 1
        self.units[i] = reset_to_logic0(self.units[i], params, rng)
        return i

    def put(self, i, unit):
        self.units[i] = unit


def cascade_eval(expr, pool, codec, params, radix=3, env=None, rng=None):
    """Evaluate ``expr`` bottom-up, one pool unit per operator node."""
    if isinstance(expr, str):
        expr = parse_cascade(expr)
    env = env or {}

    def lv(v):
        return LogicValue(radix, v)

    def run(e):
        op = e[0]
        if op == "CONST":
            return lv(e[1]).value
        if op == "VAR":
            if e[1] not in env:
                raise InvalidArgument(f"unbound variable {e[1]!r}")
            return lv(env[e[1]]).value
        if op == "THRESHOLD":
            kids = [run(e[2])]
        else:
            kids = [run(c) for c in e[1:]]
        i = pool.take(params, rng)
        unit = pool.units[i]
        if op == "XOR":
            if radix != 2:
                raise InvalidArgument("XOR is binary")
            res = xor_gate(unit, kids[0], kids[1], params, rng)
            out = res.output
        else:
            unit = load_value(unit, lv(kids[0]), codec, params, rng)
            if op == "MAX":
                res = mvl_max(unit, lv(kids[0]), lv(kids[1]), codec, params, rng)
            elif op == "MIN":
                res = mvl_min(unit, lv(kids[0]), lv(kids[1]), codec, params, rng)
            elif op == "NOT":
                res = mvl_not(unit, lv(kids[0]), codec, params, rng)
            else:
                res = mvl_threshold(unit, lv(kids[0]), lv(e[1]), codec, params, rng)
            out = res.output.value
        pool.put(i, res.unit)
        return out

    return lv(run(expr))


# ------------------------------------------------------------------ truth tables

def truth_table(gate, radix, params, codec=None, seed=0, noise=True):
    """All radix**2 input pairs, each on a fresh unit: rows of (p, q, G_final, output).

    ``gate`` is "max", "min", "threshold" (q plays k), or a Boolean spec
    name for radix 2.
    """
    codec = codec or cd.LevelCodec()
    rng = np.random.default_rng(seed) if noise else None
    name = gate.lower()
    specs = default_specs(codec)
    rows = []
    for p in range(radix):
        for q in range(radix):
            unit = dev.spawn_unit(params, seed * 1000 + p * radix + q) if noise else \
                dev.UnitState(dev.X_PRISTINE, 0.0)
            if name in ("max", "min", "threshold", "not"):
                a, b = LogicValue(radix, p), LogicValue(radix, q)
                unit = load_value(unit, a, codec, params, rng)
                fn = {"max": mvl_max, "min": mvl_min, "threshold": mvl_threshold}.get(name)
                res = fn(unit, a, b, codec, params, rng) if fn else mvl_not(unit, a, codec, params, rng)
                rows.append((p, q, res.G, res.output.value))
            elif name in specs:
                if radix != 2:
                    raise InvalidArgument(f"{name} is a Boolean gate")
                res = boolean_gate(specs[name], unit, p, q, params, codec, rng)
                rows.append((p, q, res.G, res.output))
            else:
                raise InvalidArgument(f"unknown gate {gate!r}")
    return rows


def truth_table_csv(rows):
    lines = ["p,q,G_final_S,output"]
    lines += [f"{p},{q},{g:.12g},{o}" for p, q, g, o in rows]
    return "\n".join(lines) + "\n"
