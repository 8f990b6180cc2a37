"""Derivative-free fit of ModelParams to measured sweep observables."""
import csv
import io
import math
from dataclasses import dataclass, fields

import numpy as np
from scipy.optimize import minimize

from . import codec as cd
from . import device as dev
from . import experiments as ex
from .errors import InvalidArgument, ParseError

SIGN_PENALTY = 25.0
VOLTAGE_OBSERVABLES = ("reversal_V",)
# parameters moved by default; the rest stay at their starting values
FREE = ("G_red", "alpha_ox", "V_decay", "G_ion", "kappa", "V_c", "tau_c", "tau_r", "u_trap",
        "tau_hold", "k_ox", "k_red")


@dataclass(frozen=True)
class Target:
    name: str
    observable: str
    value: float
    weight: float = 1.0


def default_targets():
    t = [("G drop 0.1 V", "G_01", 1.20e-9, 1.0),
         ("G drop 0.5 V", "G_05", 0.24e-9, 1.0),
         ("G drop 3 V", "G_3", 0.06e-9, 0.5),
         ("back-branch reversal", "reversal_V", 2.9, 1.0),
         ("window +0.5 V", "window_pos", 640e-12, 1.0),
         ("window -0.5 V", "window_neg", 660e-12, 1.0),
         ("peak power", "peak_power", 690e-12, 0.5),
         ("window stop 0.5 V", "W0.5", 222e-12, 0.5),
         ("window stop 5.5 V", "W5.5", 1697e-12, 1.0),
         ("window stop 10 V", "W10", 2907e-12, 1.0),
         ("staircase low end", "stair_lo", 0.4e-9, 1.0),
         ("staircase high end", "stair_hi", 7.3e-9, 1.0),
         ("zero bias #1", "zero_bias_1", 14.5e-9, 0.1),
         ("zero bias #2", "zero_bias_2", -36.18e-9, 0.1),
         ("zero bias #3", "zero_bias_3", 22.14e-9, 0.1),
         ("zero bias #4", "zero_bias_4", -23.47e-9, 0.1)]
    return [Target(*r) for r in t]


def parse_targets(text):
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or [c.strip() for c in rows[0]] != ["name", "observable", "value", "weight"]:
        raise ParseError("targets header must be name,observable,value,weight")
    out = []
    for n, r in enumerate(rows[1:], 2):
        if not r or not "".join(r).strip():
            continue
        if len(r) != 4:
            raise ParseError(f"line {n}: expected 4 fields")
        try:
            out.append(Target(r[0].strip(), r[1].strip(), float(r[2]), float(r[3])))
        except ValueError:
            raise ParseError(f"line {n}: bad number") from None
    return out


def format_targets(targets):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", "observable", "value", "weight"])
    for t in targets:
        w.writerow([t.name, t.observable, repr(t.value), repr(t.weight)])
    return buf.getvalue()


def observables(params, codec=None):
    """Every observable a target may name, computed noise-free."""
    obs, _ = ex.sweep_observables(params)
    d = obs.as_dict()
    for a, w in zip(ex.FAMILY_STOPS, ex.window_family(params)):
        d[f"W{a:g}"] = w
    rows = ex.staircase(params, codec or cd.LevelCodec())
    d["stair_lo"], d["stair_hi"], d["stair_r2"] = ex.staircase_span(rows)
    return d


def residual(target, value):
    """Signed error: log ratio for conductances/powers, relative error for voltages."""
    if target.observable in VOLTAGE_OBSERVABLES:
        return (value - target.value) / abs(target.value) if math.isfinite(value) else 10.0
    if value == 0 or not math.isfinite(value) or (value > 0) != (target.value > 0):
        return float("inf")
    return math.log(value / target.value)


def objective(params, targets, codec=None):
    d = observables(params, codec)
    total = 0.0
    for t in targets:
        if t.observable not in d:
            raise InvalidArgument(f"unknown observable {t.observable!r}")
        r = residual(t, d[t.observable])
        total += t.weight * (SIGN_PENALTY if math.isinf(r) else r * r)
    return total


@dataclass(frozen=True)
class CalibrationResult:
    params: dev.ModelParams
    cost: float
    converged: bool
    evaluations: int
    report: tuple  # (name, observable, target, simulated, residual)


def report(params, targets, codec=None):
    d = observables(params, codec)
    return tuple((t.name, t.observable, t.value, d[t.observable], residual(t, d[t.observable]))
                 for t in targets)


def calibrate(targets, start=None, free=FREE, max_iter=400, step=0.1, codec=None):
    """Nelder-Mead in log space of the free parameters.

    The initial simplex is fixed (each vertex scales one parameter by
    e**step), so the fit is deterministic.  Hitting ``max_iter`` returns
    the best point found with ``converged`` False.
    """
    if len(targets) < 6:
        raise InvalidArgument("need at least 6 targets")
    start = start or dev.ModelParams()
    names = {f.name for f in fields(start)}
    for n in free:
        if n not in names:
            raise InvalidArgument(f"unknown parameter {n!r}")
    known = set(observables(start, codec))
    for t in targets:
        if t.observable not in known:
            raise InvalidArgument(f"unknown observable {t.observable!r}")
    z0 = np.log([getattr(start, n) for n in free])

    def build(z):
        return start.with_(**{n: float(math.exp(v)) for n, v in zip(free, z)})

    def cost(z):
        try:
            return objective(build(z), targets, codec)
        except InvalidArgument:
            return 1e6

    simplex = np.vstack([z0] + [z0 + step * e for e in np.eye(len(z0))])
    res = minimize(cost, z0, method="Nelder-Mead",
                   options={"initial_simplex": simplex, "maxiter": max_iter, "xatol": 1e-4, "fatol": 1e-6})
    best = build(res.x)
    return CalibrationResult(best, float(res.fun), bool(res.success), int(res.nfev), report(best, targets, codec))
