"""Measurement protocols: dc sweeps, window family, staircase, uniformity, retention."""
from dataclasses import dataclass

import numpy as np

from . import codec as cd
from . import device as dev

CAL_AMPLITUDE = 3.0
CAL_STEP = 0.05
WINDOW_READ = 0.5
FAMILY_STOPS = (0.5, 5.5, 10.0)
RETENTION_STOPS = tuple(float(v) for v in range(1, 11))
RETENTION_TIME = 1e4


@dataclass(frozen=True)
class SweepObservables:
    G_01: float  # forward-branch G at +0.1 V
    G_05: float
    G_3: float
    reversal_V: float
    window_pos: float  # +0.5 V
    window_neg: float  # -0.5 V, forward minus backward
    peak_power: float
    peak_power_per_molecule: float
    zero_bias: tuple  # pristine +eps, after + half at +eps and -eps, after - half at -eps

    def as_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "zero_bias"}
        for i, v in enumerate(self.zero_bias, 1):
            d[f"zero_bias_{i}"] = v
        return d


def _fwd_value(trace, V):
    sel = trace.forward & (np.abs(trace.voltage - V) < 1e-9)
    return float(trace.conductance[sel][0])


def sweep_observables(params, amplitude=CAL_AMPLITUDE, step=CAL_STEP, unit=None, noise_seed=None):
    """Positive half sweep then negative half on one unit; returns (observables, trace)."""
    s0 = unit or dev.UnitState(dev.X_PRISTINE, 0.0, 1.0)
    eps = params.eps_read
    z1 = dev.read_conductance(s0, params, eps)
    s1, tp = dev.apply_waveform(s0, dev.make_sweep(0.0, amplitude, step), params, noise_seed)
    z2 = dev.read_conductance(s1, params, eps)
    z3 = dev.read_conductance(s1, params, -eps)
    seed2 = None if noise_seed is None else noise_seed + 1
    s2, tn = dev.apply_waveform(s1, dev.make_sweep(0.0, -amplitude, step), params, seed2)
    z4 = dev.read_conductance(s2, params, -eps)
    trace = _concat(tp, tn)
    rev = dev.reversal_voltage(tp)
    pk, per = dev.peak_power(trace)
    obs = SweepObservables(
        _fwd_value(tp, 0.1), _fwd_value(tp, 0.5), _fwd_value(tp, amplitude),
        float("nan") if rev is None else rev,
        dev.memory_window(tp, WINDOW_READ), dev.memory_window(tn, -WINDOW_READ),
        pk, per, (z1, z2, z3, z4))
    return obs, trace


def _concat(a, b):
    return dev.IVTrace(*(np.concatenate([getattr(a, k), getattr(b, k)])
                         for k in ("time_s", "voltage", "current", "conductance", "forward")))


def window_family(params, stops=FAMILY_STOPS, step=0.1, V_read=WINDOW_READ):
    """Memory window at V_read after a single 0 -> stop -> 0 sweep of a fresh unit."""
    out = []
    for a in stops:
        s = dev.UnitState(dev.X_PRISTINE, 0.0, 1.0)
        _, tr = dev.apply_waveform(s, dev.make_sweep(0.0, a, step), params)
        out.append(dev.memory_window(tr, V_read))
    return out


def staircase(params, codec, noise_seed=None, n_states=None):
    """Fresh units swept to 0.5, 0.6, ... V; rows (state, stop_V, G_target, |G(0.1)|).

    Targets beyond the codec's 64 used levels extend the same linear ladder.
    """
    n = n_states or codec.n_states
    stops = np.round(codec.V_base + codec.V_step * np.arange(n), 12)
    x = np.full(n, dev.X_PRISTINE)
    u = np.zeros(n)
    x, u = cd.run_schedule(x, u, cd.sweep_matrix(stops, codec.sweep_step, 1.0), params)
    rng = None if noise_seed is None else np.random.default_rng(noise_seed)
    g = cd.read_batch(x, u, np.ones(n), params, codec, rng)
    slope = (codec.G_hi - codec.G_lo) / (codec.n_used - 1)
    return [(k, float(stops[k]), codec.G_lo + k * slope, float(g[k])) for k in range(n)]


def staircase_span(rows):
    """(G at the first state, G at the last state, r2 of G against stop voltage)."""
    v = np.array([r[1] for r in rows])
    g = np.array([r[3] for r in rows])
    r = np.corrcoef(v, g)[0, 1]
    return float(g[0]), float(g[-1]), float(r * r)


def _pooled_uniformity(runs):
    """100 * (1 - pooled coefficient of variation) over points of repeated traces.

    ``runs`` is (n_repeats, n_points); each point contributes its own
    spread relative to its own mean, so the curve shape cancels.
    """
    g = np.asarray(runs, dtype=float)
    keep = np.all(np.abs(g) > 0, axis=0)
    g = g[:, keep]
    cv2 = g.var(axis=0, ddof=1) / g.mean(axis=0) ** 2
    return 100.0 * (1.0 - float(np.sqrt(cv2.mean())))


def c2c_uniformity(params, n_sweeps=3, seed=0, amplitude=CAL_AMPLITUDE, step=CAL_STEP):
    """Repeated noisy sweeps of one unit from the same starting state."""
    s0 = dev.UnitState(dev.X_PRISTINE, 0.0, 1.0)
    wf = dev.dual_sweep(amplitude, step)
    runs = [dev.apply_waveform(s0, wf, params, noise_seed=seed + k)[1].conductance for k in range(n_sweeps)]
    return _pooled_uniformity(runs)


def d2d_uniformity(params, n_devices=5, seed=0, amplitude=CAL_AMPLITUDE, step=CAL_STEP, V_read=0.1):
    """Noise-free sweeps of devices spawned from seeds seed .. seed + n_devices - 1.

    Compared at the forward-branch read point, where the molecular channel
    (the part the device factor scales) carries the current.
    """
    wf = dev.dual_sweep(amplitude, step)
    g = [_fwd_value(dev.apply_waveform(dev.spawn_unit(params, seed + k), wf, params)[1], V_read)
         for k in range(n_devices)]
    return cd.uniformity(g)


# ---------------------------------------------------------------- retention

def retention_states(params, stops=RETENTION_STOPS, step=0.1):
    s0 = dev.UnitState(dev.X_PRISTINE, 0.0, 1.0)
    return [dev.apply_waveform(s0, dev.make_sweep(0.0, a, step), params)[0] for a in stops]


@dataclass(frozen=True)
class RetentionResult:
    G0: tuple
    traces: tuple  # per state, |G(0.1)| at each recorded step
    max_fluctuation: float
    distinguishable: bool


def retention(params, stops=RETENTION_STOPS, duration=RETENTION_TIME, seed=0):
    """Evolve written states and track |G(0.1)|.

    A state stays distinguishable while every reading is closer (in log
    conductance) to its own initial value than to any other state's.
    """
    states = retention_states(params, stops)
    g0 = np.array([abs(dev.read_conductance(s, params)) for s in states])
    traces = []
    for k, s in enumerate(states):
        _, hist = dev.retention_evolve(s, duration, params, seed + k, record=True)
        traces.append(np.array([abs(dev.read_conductance(h, params)) for h in hist]))
    fluct = max(float(np.max(np.abs(t - g) / g)) for t, g in zip(traces, g0))
    lg0 = np.log(g0)
    ok = all(np.all(np.argmin(np.abs(np.log(t)[:, None] - lg0[None, :]), axis=1) == k)
             for k, t in enumerate(traces))
    return RetentionResult(tuple(g0), tuple(traces), fluct, bool(ok))


def drift_sigma_for_levels(params, stops=RETENTION_STOPS, margin=0.9, h=1e-4):
    """Largest drift_sigma whose bounded excursion keeps every state within its log half-gap.

    Uses the linearised read sensitivity to u and x at each written state,
    scaled by ``margin``.
    """
    states = retention_states(params, stops)
    lg = []
    worst = []
    for s in states:
        u = float(dev._u_of_c(s.c, params))
        g = abs(dev.read_conductance(s, params))
        gu = abs(dev.read_conductance(dev.UnitState(s.x, float(dev._c_of_u(u + h, params)), 1.0), params))
        gx = abs(dev.read_conductance(dev.UnitState(min(1.0, s.x + h), s.c, 1.0), params))
        lg.append(np.log(g))
        worst.append(abs(np.log(gu / g)) / h + 0.1 * abs(np.log(gx / g)) / h)
    lg = np.array(lg)
    sig = []
    for k in range(len(lg)):
        others = np.delete(lg, k)
        half = 0.5 * np.min(np.abs(others - lg[k]))
        sig.append(half / (dev.DRIFT_BOUND * worst[k]))
    return margin * float(min(sig))
