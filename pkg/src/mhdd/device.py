"""Two-variable compact model of one molecular storage unit.

State is the Ru oxidation fraction ``x`` and the normalized chloride
displacement ``c``.  Accumulated anions set a build-in potential that
subtracts from the applied bias; the molecular channel saturates in the
net bias while a smaller ion-assisted leak stays ohmic.

The scalar API (``UnitState`` in, ``UnitState`` out) is a thin wrapper
over array kernels that advance many units in lockstep.
"""
import csv
import io
import math
from dataclasses import dataclass, fields, replace

import numpy as np

from .errors import InvalidArgument, OutOfRange, ParseError

X_PRISTINE = 0.511
MOLECULES_PER_CONTACT = 235
DRIFT_BOUND = 3.0  # retention excursions clipped at this many stationary sigmas
_U_MAX = 18.0  # artanh cap keeps c strictly inside (-c_sat, c_sat)


@dataclass(frozen=True)
class UnitState:
    x: float
    c: float
    device_factor: float = 1.0
    elapsed_s: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.x <= 1.0:
            raise InvalidArgument(f"x={self.x} outside [0, 1]")
        if not -1.0 <= self.c <= 1.0:
            raise InvalidArgument(f"c={self.c} outside [-1, 1]")
        if not self.device_factor > 0:
            raise InvalidArgument("device_factor must be positive")


@dataclass(frozen=True)
class ModelParams:
    G_red: float = 1.01323e-08
    alpha_ox: float = 0.704668
    V_decay: float = 0.0189957
    G_leak: float = 1.94776e-16
    G_ion: float = 1.64988e-10
    kappa: float = 2.47034
    c_sat: float = 1.0
    V_c: float = 1.49605
    tau_c: float = 0.808363
    tau_r: float = 0.312861
    u_trap: float = 5.88413
    V_hold: float = 0.599984
    tau_hold: float = 0.1734
    k_ox: float = 4.17627
    k_red: float = 0.125953
    sigma_c2c: float = 0.0141
    sigma_d2d: float = 0.0305
    drift_sigma: float = 0.007847
    drift_tau: float = 500.0
    eps_read: float = 5e-3
    dwell: float = 0.02
    substeps: int = 4

    def __post_init__(self):
        positive = ("G_red", "V_decay", "G_leak", "kappa", "V_c", "tau_c", "tau_r", "u_trap",
                    "tau_hold", "k_ox", "k_red", "drift_tau", "eps_read", "dwell")
        for name in positive:
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise InvalidArgument(f"{name} must be finite and > 0, got {v}")
        for name in ("sigma_c2c", "sigma_d2d", "drift_sigma", "G_ion", "V_hold"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise InvalidArgument(f"{name} must be finite and >= 0, got {v}")
        if not 0 < self.c_sat <= 1:
            raise InvalidArgument("c_sat must lie in (0, 1]")
        if not 0 <= self.alpha_ox < 1:
            raise InvalidArgument("alpha_ox must lie in [0, 1)")
        if int(self.substeps) != self.substeps or self.substeps < 1:
            raise InvalidArgument("substeps must be a positive integer")

    def with_(self, **kw):
        return replace(self, **kw)

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={v}" if isinstance(v, int) else f"{f.name}={v:.17g}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text, base=None):
        """Parse key=value lines; missing keys fall back to ``base`` (or defaults)."""
        known = {f.name: f.type for f in fields(cls)}
        kw = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            key = key.strip()
            if not sep or key not in known:
                raise ParseError(f"line {n}: unknown or malformed entry {raw!r}")
            try:
                kw[key] = int(val) if key == "substeps" else float(val)
            except ValueError:
                raise ParseError(f"line {n}: bad number {val.strip()!r}") from None
        return replace(base, **kw) if base is not None else cls(**kw)


def load_params(path):
    with open(path) as fh:
        return ModelParams.from_text(fh.read())


def save_params(params, path):
    from .fsutil import atomic_write

    atomic_write(path, params.to_text())


# ---------------------------------------------------------------- waveforms

@dataclass(frozen=True)
class Waveform:
    """Piecewise ramp: from ``start`` through each (target, step, dwell) segment.

    Every segment contributes round(|target - previous| / step) + 1 samples,
    so junction voltages are held twice (once per leg).
    """
    start: float
    segments: tuple
    label: str = ""

    def __post_init__(self):
        if not math.isfinite(self.start):
            raise InvalidArgument("non-finite start voltage")
        segs = tuple(tuple(float(v) for v in s) for s in self.segments)
        for target, step, dwell in segs:
            if not (math.isfinite(target) and math.isfinite(step) and math.isfinite(dwell)):
                raise InvalidArgument("non-finite waveform segment")
            if step <= 0 or dwell <= 0:
                raise InvalidArgument("ramp step and dwell must be > 0")
        object.__setattr__(self, "segments", segs)

    def samples(self):
        """Arrays (V, dt, is_forward) with one entry per sample."""
        vs, dts, fwd = [], [], []
        prev = self.start
        for target, step, dwell in self.segments:
            n = int(round(abs(target - prev) / step))
            leg = np.linspace(prev, target, n + 1)
            leg[np.abs(leg) < 1e-12] = 0.0
            vs.append(leg)
            dts.append(np.full(n + 1, dwell))
            fwd.append(np.full(n + 1, abs(target) >= abs(prev)))
            prev = target
        if not vs:
            return np.zeros(0), np.zeros(0), np.zeros(0, dtype=bool)
        return np.concatenate(vs), np.concatenate(dts), np.concatenate(fwd)

    @property
    def end(self):
        return self.segments[-1][0] if self.segments else self.start

    def duration(self):
        return float(self.samples()[1].sum())


def make_sweep(start, stop, step, dwell=0.02, return_to_start=True, label=""):
    for v in (start, stop, step, dwell):
        if not math.isfinite(v):
            raise InvalidArgument("non-finite sweep argument")
    if step <= 0:
        raise InvalidArgument("step must be > 0")
    if start == stop:
        raise InvalidArgument("start and stop coincide")
    if step > abs(stop - start) * (1 + 1e-12):
        raise InvalidArgument("step larger than the sweep span")
    segs = [(stop, step, dwell)]
    if return_to_start:
        segs.append((start, step, dwell))
    return Waveform(start, tuple(segs), label or f"sweep {start:g}->{stop:g}")


def dual_sweep(amplitude, step, dwell=0.02):
    """0 -> +A -> 0 -> -A -> 0, the positive half first."""
    a = abs(amplitude)
    return Waveform(0.0, ((a, step, dwell), (0.0, step, dwell), (-a, step, dwell), (0.0, step, dwell)),
                    f"dual sweep +-{a:g}")


def pulse(voltage, duration, dwell=0.02, label=""):
    """Square pulse held for ``duration``, sampled in dwell-sized chunks plus a remainder."""
    if not (math.isfinite(voltage) and math.isfinite(duration)):
        raise InvalidArgument("non-finite pulse argument")
    if duration <= 0 or dwell <= 0:
        raise InvalidArgument("pulse duration and dwell must be > 0")
    n = int(math.floor(duration / dwell))
    rem = duration - n * dwell
    segs = [(voltage, 1.0, dwell)] * n
    if rem > 1e-12:
        segs.append((voltage, 1.0, rem))
    return Waveform(voltage, tuple(segs), label or f"pulse {voltage:g} V")


# ------------------------------------------------------------------ kernels

def _u_of_c(c, p):
    r = np.clip(np.asarray(c, dtype=float) / p.c_sat, -1.0, 1.0)
    return np.clip(np.arctanh(np.clip(r, -math.tanh(_U_MAX), math.tanh(_U_MAX))), -_U_MAX, _U_MAX)


def _c_of_u(u, p):
    return p.c_sat * np.tanh(u)


def current_kernel(x, u, f, V, p):
    """Deterministic current for arrays of (x, u, device_factor) at bias V."""
    vn = V - p.kappa * u
    gm = f * p.G_red * (1.0 - p.alpha_ox * x)
    gl = p.G_leak + p.G_ion * np.abs(u)
    return gm * p.V_decay * np.sign(vn) * -np.expm1(-np.abs(vn) / p.V_decay) + gl * vn


def advance_kernel(x, u, V, dt, p):
    """Advance arrays (x, u) for dt under bias V (scalar or array).

    u = artanh(c / c_sat) is the potential-like ion coordinate; it relaxes
    toward V / V_c.  Drift along the field uses tau_c.  Relaxation against
    the stored charge uses tau_hold below V_hold and a trap-slowed
    tau_r * exp(|u| / u_trap) above it.  Zero bias freezes both variables.
    """
    V = np.broadcast_to(np.asarray(V, dtype=float), np.shape(u))
    live = V != 0.0
    if not np.any(live):
        return x, u
    x = np.array(x, dtype=float, copy=True)
    u = np.array(u, dtype=float, copy=True)
    h = dt / p.substeps
    uss = V / p.V_c
    weak = np.abs(V) < p.V_hold
    for _ in range(p.substeps):
        d = uss - u
        tau_rel = np.where(weak, p.tau_hold, p.tau_r * np.exp(np.abs(u) / p.u_trap))
        tau = np.where(d * V > 0, p.tau_c, tau_rel)
        u = np.where(live, u - d * np.expm1(-h / tau), u)
        vn = V - p.kappa * u
        dx = p.k_ox * np.maximum(vn, 0.0) * (1.0 - x) - p.k_red * np.maximum(-vn, 0.0) * x
        x = np.where(live, np.clip(x + h * dx, 0.0, 1.0), x)
    return x, np.clip(u, -_U_MAX, _U_MAX)


# ---------------------------------------------------------------- scalar API

def builtin_potential(state, params):
    return float(params.kappa * _u_of_c(state.c, params))


def instantaneous_current(state, V, params):
    if not math.isfinite(V):
        raise InvalidArgument("non-finite bias")
    return float(current_kernel(state.x, _u_of_c(state.c, params), state.device_factor, V, params))


def step_dynamics(state, V, dt, params):
    if not dt > 0:
        raise InvalidArgument("dt must be > 0")
    if V == 0:
        return replace(state, elapsed_s=state.elapsed_s + dt)
    x, u = advance_kernel(np.array([state.x]), _u_of_c(np.array([state.c]), params), V, dt, params)
    return replace(state, x=float(x[0]), c=float(_c_of_u(u[0], params)), elapsed_s=state.elapsed_s + dt)


def effective_read_voltage(V, params):
    if V == 0:
        return params.eps_read
    return math.copysign(max(abs(V), params.eps_read), V)


@dataclass(eq=False)
class IVTrace:
    time_s: np.ndarray
    voltage: np.ndarray
    current: np.ndarray
    conductance: np.ndarray
    forward: np.ndarray

    def __len__(self):
        return len(self.time_s)

    def __eq__(self, other):
        return isinstance(other, IVTrace) and all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("time_s", "voltage", "current", "conductance", "forward"))

    def to_csv(self):
        buf = io.StringIO()
        buf.write("time_s,voltage_V,current_A,conductance_S,branch\n")
        for t, v, i, g, f in zip(self.time_s, self.voltage, self.current, self.conductance, self.forward):
            buf.write(f"{t:.12g},{v:.12g},{i:.12g},{g:.12g},{'fwd' if f else 'bwd'}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != ["time_s", "voltage_V", "current_A", "conductance_S", "branch"]:
            raise ParseError("bad IV trace header")
        cols = list(zip(*rows[1:])) if len(rows) > 1 else [(), (), (), (), ()]
        try:
            arr = [np.array(cols[k], dtype=float) for k in range(4)]
        except ValueError as e:
            raise ParseError(f"bad number in trace: {e}") from None
        if any(b not in ("fwd", "bwd") for b in cols[4]):
            raise ParseError("branch must be fwd or bwd")
        return cls(*arr, np.array([b == "fwd" for b in cols[4]], dtype=bool))


def apply_waveform(state, wf, params, noise_seed=None):
    """Step through every sample of ``wf``; current is sampled at the end of each dwell."""
    vs, dts, fwd = wf.samples()
    n = len(vs)
    x = np.array([state.x])
    u = _u_of_c(np.array([state.c]), params)
    f = state.device_factor
    cur = np.empty(n)
    for k in range(n):
        x, u = advance_kernel(x, u, vs[k], dts[k], params)
        cur[k] = current_kernel(x[0], u[0], f, vs[k], params)
    if noise_seed is not None and n:
        rng = np.random.default_rng(noise_seed)
        cur = cur * np.exp(params.sigma_c2c * rng.standard_normal(n))
    t = state.elapsed_s + np.cumsum(dts)
    veff = np.array([effective_read_voltage(v, params) for v in vs])
    out = replace(state, x=float(x[0]), c=float(_c_of_u(u[0], params)),
                  elapsed_s=state.elapsed_s + float(dts.sum()))
    return out, IVTrace(t, vs.copy(), cur, cur / veff if n else cur.copy(), fwd)


def read_conductance(state, params, V_read=0.1, rng=None):
    """Signed I/V at V_read; V_read = 0 means the eps_read convention."""
    veff = effective_read_voltage(V_read, params)
    i = instantaneous_current(state, veff, params)
    if rng is not None:
        i *= math.exp(params.sigma_c2c * rng.standard_normal())
    return i / veff


def _branch_value(v, g, V_read):
    order = np.argsort(v, kind="stable")
    v, g = v[order], g[order]
    if V_read < v[0] - 1e-12 or V_read > v[-1] + 1e-12:
        raise OutOfRange(f"read voltage {V_read} outside branch range [{v[0]}, {v[-1]}]")
    return float(np.interp(V_read, v, g))


def memory_window(trace, V_read):
    """G_forward(V_read) - G_backward(V_read) on the half matching V_read's sign."""
    if V_read == 0:
        raise InvalidArgument("window read voltage must be nonzero")
    side = np.sign(trace.voltage) == np.sign(V_read)
    fw = side & trace.forward
    bw = side & ~trace.forward
    if not fw.any() or not bw.any():
        raise OutOfRange("trace lacks forward/backward samples at that polarity")
    gf = _branch_value(trace.voltage[fw], trace.conductance[fw], V_read)
    gb = _branch_value(trace.voltage[bw], trace.conductance[bw], V_read)
    return gf - gb


def peak_power(trace):
    """(peak |I V| in W, per-molecule share)."""
    if len(trace) == 0:
        raise InvalidArgument("empty trace")
    pk = float(np.max(np.abs(trace.current * trace.voltage)))
    return pk, pk / MOLECULES_PER_CONTACT


def reversal_voltage(trace, positive=True):
    """First back-branch bias where the current changes sign (linear interpolation)."""
    sel = (~trace.forward) & ((trace.voltage > 0) if positive else (trace.voltage < 0))
    v, i = trace.voltage[sel], trace.current[sel]
    s = 1.0 if positive else -1.0
    for k in range(len(v) - 1):
        if s * i[k] > 0 and s * i[k + 1] <= 0:
            return float(v[k] + (v[k + 1] - v[k]) * i[k] / (i[k] - i[k + 1]))
    if len(v) and s * i[0] <= 0:
        return float(v[0])
    return None


def spawn_unit(params, device_seed):
    """Pristine unit with a lognormal device factor fixed by the seed."""
    if params.sigma_d2d == 0:
        f = 1.0
    else:
        f = math.exp(params.sigma_d2d * np.random.default_rng(device_seed).standard_normal())
    return UnitState(X_PRISTINE, 0.0, f, 0.0)


def retention_evolve(state, duration, params, seed, record=False):
    """Bounded Ornstein-Uhlenbeck wander of (x, u) around the stored values.

    ``drift_sigma`` is the stationary spread of u (and of x, scaled by 0.1),
    ``drift_tau`` the reversion time.  Excursions are clipped at three
    stationary sigmas, which caps the read-conductance excursion.  With
    ``record`` the per-step states are returned as well.
    """
    if duration < 0:
        raise InvalidArgument("duration must be >= 0")
    if duration == 0 or params.drift_sigma == 0:
        return (state, [state]) if record else state
    n = max(1, int(math.ceil(duration / (params.drift_tau / 10))))
    h = duration / n
    a = math.exp(-h / params.drift_tau)
    b = math.sqrt(1 - a * a)
    rng = np.random.default_rng(seed)
    u0 = float(_u_of_c(state.c, params))
    x0 = state.x
    du = dx = 0.0
    bu = DRIFT_BOUND * params.drift_sigma
    hist = []
    z = rng.standard_normal((n, 2))
    for k in range(n):
        du = min(max(a * du + b * params.drift_sigma * z[k, 0], -bu), bu)
        dx = min(max(a * dx + b * 0.1 * params.drift_sigma * z[k, 1], -0.1 * bu), 0.1 * bu)
        if record:
            hist.append(replace(state, x=min(max(x0 + dx, 0.0), 1.0),
                                c=float(_c_of_u(u0 + du, params)), elapsed_s=state.elapsed_s + (k + 1) * h))
    out = replace(state, x=min(max(x0 + dx, 0.0), 1.0), c=float(_c_of_u(u0 + du, params)),
                  elapsed_s=state.elapsed_s + duration)
    return (out, hist) if record else out
