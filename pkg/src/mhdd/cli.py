"""Command-line entry point.

Exit status: 0 success, 1 domain failure (program, decode, verify, I/O),
2 usage or parse error.
"""
import argparse
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import array as ar
from . import calibration as cal
from . import codec as cd
from . import crypto as cr
from . import device as dev
from . import experiments as ex
from . import image as im
from . import keys as ky
from . import logic as lg
from .errors import InvalidArgument, MhddError, ParseError
from .fsutil import atomic_write

OUT_DIR_ENV = "MHDD_OUT_DIR"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


@dataclass
class CliConfig:
    params_path: str = None
    codec_path: str = None
    seed: int = 0
    out_dir: str = None
    noise: bool = True
    dry_run: bool = False


_CONFIG_KEYS = {"params": "params_path", "codec": "codec_path", "seed": "seed",
                "out_dir": "out_dir", "noise": "noise"}


def read_config(path):
    cfg = {}
    with open(path) as fh:
        for n, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            k, sep, v = line.partition("=")
            k, v = k.strip(), v.strip()
            if not sep or k not in _CONFIG_KEYS:
                raise ParseError(f"{path}:{n}: unknown or malformed entry {raw.strip()!r}")
            if k == "seed":
                v = int(v, 0)
            elif k == "noise":
                if v.lower() not in ("on", "off", "true", "false", "1", "0"):
                    raise ParseError(f"{path}:{n}: noise must be on or off")
                v = v.lower() in ("on", "true", "1")
            cfg[_CONFIG_KEYS[k]] = v
    return cfg


class Context:
    def __init__(self, args):
        cfg = CliConfig()
        if args.config:
            for k, v in read_config(args.config).items():
                setattr(cfg, k, v)
        for k in ("params_path", "codec_path", "seed", "out_dir"):
            v = getattr(args, k)
            if v is not None:
                setattr(cfg, k, v)
        if args.noise is not None:
            cfg.noise = args.noise
        cfg.dry_run = args.dry_run
        cfg.out_dir = cfg.out_dir or os.environ.get(OUT_DIR_ENV) or "."
        self.cfg = cfg
        # both files are parsed before any simulation runs
        self.params = dev.load_params(cfg.params_path) if cfg.params_path else dev.ModelParams()
        if cfg.codec_path:
            with open(cfg.codec_path) as fh:
                self.codec = cd.LevelCodec.from_text(fh.read())
        else:
            self.codec = cd.LevelCodec()
        self.out = sys.stdout

    def rng(self, offset=0):
        return np.random.default_rng(self.cfg.seed + offset) if self.cfg.noise else None

    def path(self, p):
        return p if os.path.isabs(p) else os.path.join(self.cfg.out_dir, p)

    def write(self, p, data):
        target = self.path(p)
        if self.cfg.dry_run:
            self.say(f"dry run: would write {target}")
            return
        atomic_write(target, data)

    def save_array(self, path, array):
        if self.cfg.dry_run:
            self.say(f"dry run: would save array {path}")
            return
        ar.save(array, path)

    def say(self, msg):
        print(msg, file=self.out)


# ------------------------------------------------------------------ commands

def cmd_sweep(ctx, a):
    s0 = dev.UnitState(dev.X_PRISTINE, 0.0, 1.0)
    wf = (dev.dual_sweep(a.stop, a.step, a.dwell) if a.dual
          else dev.make_sweep(a.start, a.stop, a.step, a.dwell))
    seed = ctx.cfg.seed if ctx.cfg.noise else None
    _, trace = dev.apply_waveform(s0, wf, ctx.params, seed)
    if a.out:
        ctx.write(a.out, trace.to_csv())
    else:
        ctx.out.write(trace.to_csv())
    pk, per = dev.peak_power(trace)
    print(f"samples {len(trace)}  peak power {pk:.4g} W ({per:.4g} W per molecule)", file=sys.stderr)


def cmd_calibrate(ctx, a):
    if a.targets:
        with open(a.targets) as fh:
            targets = cal.parse_targets(fh.read())
    else:
        targets = cal.default_targets()
    res = cal.calibrate(targets, ctx.params, max_iter=a.max_iter, codec=ctx.codec)
    for name, obs, want, got, r in res.report:
        ctx.say(f"{name:24s} {obs:12s} target {want:.4g}  simulated {got:.4g}  residual {r:+.3f}")
    ctx.say(f"cost {res.cost:.6g}  evaluations {res.evaluations}  converged {res.converged}")
    if a.out:
        ctx.write(a.out, res.params.to_text())


def cmd_levels(ctx, a):
    rows = ex.staircase(ctx.params, ctx.codec, ctx.cfg.seed if ctx.cfg.noise else None, a.states)
    lo, hi, r2 = ex.staircase_span(rows)
    ctx.say(f"states {len(rows)}  G {lo:.4g} .. {hi:.4g} S  linear fit r2 {r2:.4f}")
    text = cd.staircase_csv(rows)
    if a.out:
        ctx.write(a.out, text)
    else:
        ctx.out.write(text)


def _env(pairs):
    env = {}
    for item in pairs or ():
        k, sep, v = item.partition("=")
        if not sep or not v.strip().isdigit():
            raise ParseError(f"bad variable binding {item!r}; expected name=value")
        env[k.strip()] = int(v)
    return env


def cmd_logic(ctx, a):
    if bool(a.expr) == bool(a.gate):
        raise UsageError("logic: give exactly one of --gate or --expr")
    if a.gate:
        radix = a.radix or (2 if a.gate.lower() not in ("max", "min", "threshold") else 3)
        rows = lg.truth_table(a.gate, radix, ctx.params, ctx.codec, seed=ctx.cfg.seed, noise=ctx.cfg.noise)
        text = lg.truth_table_csv(rows)
        if a.out:
            ctx.write(a.out, text)
        if a.table or not a.out:
            ctx.say(f"{'p':>2} {'q':>2} {'G (S)':>12} out")
            for p, q, g, o in rows:
                ctx.say(f"{p:>2} {q:>2} {g:12.4g} {o:>3}")
        return
    radix = a.radix or 3
    expr = lg.parse_cascade(a.expr)
    env = _env(a.var)
    units = [dev.spawn_unit(ctx.params, ctx.cfg.seed * 7919 + i) for i in range(a.units)]
    got = lg.cascade_eval(expr, lg.UnitPool(units, reuse=True), ctx.codec, ctx.params, radix, env, ctx.rng())
    want = lg.eval_arith(expr, radix, env)
    ctx.say(f"{lg.format_cascade(expr)} = {got.value} (arithmetic {want})")
    if got.value != want:
        raise MhddError("device evaluation disagrees with arithmetic")


def cmd_array(ctx, a):
    if a.action == "capacity":
        mol, binary, ratio = ar.capacity_report(ar.ArrayGeometry(a.rows, a.cols))
        ctx.say(f"molecular units {mol}  binary units {binary}  ratio {ratio:.4f}")
        return
    if not a.array:
        raise UsageError(f"array {a.action}: --array is required")
    if a.action == "alloc":
        arr = ar.allocate(ar.ArrayGeometry(a.rows, a.cols), ctx.params, ctx.codec, ctx.cfg.seed)
        ctx.save_array(a.array, arr)
        ctx.say(f"allocated {a.rows}x{a.cols}x3 = {len(arr)} units")
        return
    arr = ar.load(a.array, ctx.params, ctx.codec)
    g = arr.geometry
    written = int((arr.levels >= 0).sum())
    mol, binary, ratio = ar.capacity_report(g)
    ctx.say(f"geometry {g.rows}x{g.cols}x{g.channels}  units {len(arr)}  written {written}  seed {arr.master_seed}")
    ctx.say(f"molecular units {mol}  binary units {binary}  ratio {ratio:.4f}")


def _load_or_alloc(ctx, path, width, height):
    if os.path.exists(path):
        arr = ar.load(path, ctx.params, ctx.codec)
        if (arr.geometry.rows, arr.geometry.cols) != (height, width):
            raise InvalidArgument(f"array is {arr.geometry.cols}x{arr.geometry.rows}, image is {width}x{height}")
        return arr
    return ar.allocate(ar.ArrayGeometry(height, width), ctx.params, ctx.codec, ctx.cfg.seed)


def _store(ctx, arr_path, image_path):
    img = im.load_ppm(image_path)
    arr = _load_or_alloc(ctx, arr_path, img.width, img.height)
    chans = [im.quantize_channel(m) for m in im.decompose_rgb(img)]
    cr.store_plaintext(arr, *chans, rng=ctx.rng(1))
    return arr


def cmd_store(ctx, a):
    arr = _store(ctx, a.array, a.image)
    ctx.save_array(a.array, arr)
    ctx.say(f"stored {len(arr)} words")


def _key(ctx, a, arr):
    g = arr.geometry
    if (a.key_seed is None) == (a.key is None):
        raise UsageError("give exactly one of --key-seed or --key")
    if a.key is not None:
        with open(a.key) as fh:
            key = ky.parse_key(fh.read())
    else:
        key = ky.gen_key(a.key_seed, g.cols, g.rows)
    if (key.width, key.height) != (g.cols, g.rows):
        raise InvalidArgument("key dimensions do not match the array")
    return key


def _crypt(ctx, a, arr, label):
    key = _key(ctx, a, arr)
    if getattr(a, "key_out", None):
        ctx.write(a.key_out, ky.format_key(key))
    rep = cr.encrypt_in_situ(arr, key, rng=ctx.rng(2 if label == "encrypt" else 3))
    ctx.save_array(a.array, arr)
    stat, crit, ok = cr.chi2_uniformity(rep.after)
    ctx.say(f"{label}ed {len(arr)} words  gate pulses {rep.gate_waveforms}  "
            f"programming waveforms {int(rep.program_waveforms.sum())}")
    ctx.say(f"output histogram chi2 {stat:.1f} (99% bound {crit:.1f})  "
            f"correlation with input {cr.correlation(rep.before, rep.after):+.4f}")
    return rep


def _render(ctx, arr, out):
    img, bad = cr.render_cipher_image(arr, ctx.rng(4))
    ctx.write(out, im.format_ppm(img))
    if bad.any():
        ctx.say(f"warning: {int(bad.sum())} pixels failed to decode")


def cmd_encrypt(ctx, a):
    if a.image:
        arr = _store(ctx, a.array, a.image)
    else:
        arr = ar.load(a.array, ctx.params, ctx.codec)
    _crypt(ctx, a, arr, "encrypt")
    if a.cipher_out:
        _render(ctx, arr, a.cipher_out)


def cmd_decrypt(ctx, a):
    arr = ar.load(a.array, ctx.params, ctx.codec)
    _crypt(ctx, a, arr, "decrypt")
    if a.out:
        _render(ctx, arr, a.out)


def cmd_render(ctx, a):
    arr = ar.load(a.array, ctx.params, ctx.codec)
    _render(ctx, arr, a.out)


def cmd_stats(ctx, a):
    what = set(a.what.split(",")) if a.what != "all" else {"windows", "power", "uniformity", "retention"}
    unknown = what - {"windows", "power", "uniformity", "retention"}
    if unknown:
        raise UsageError(f"stats: unknown report(s) {', '.join(sorted(unknown))}")
    p = ctx.params
    if what & {"windows", "power"}:
        obs, _ = ex.sweep_observables(p)
    if "windows" in what:
        ctx.say(f"window +0.5 V {obs.window_pos:.4g} S   -0.5 V {obs.window_neg:.4g} S")
        fam = ex.window_family(p)
        ctx.say("window family " + "  ".join(f"{s:g} V: {w:.4g} S" for s, w in zip(ex.FAMILY_STOPS, fam)))
    if "power" in what:
        ctx.say(f"peak power {obs.peak_power:.4g} W  per molecule {obs.peak_power_per_molecule:.4g} W")
    if "uniformity" in what:
        ctx.say(f"uniformity cycle-to-cycle {ex.c2c_uniformity(p, seed=ctx.cfg.seed):.2f} %  "
                f"device-to-device {ex.d2d_uniformity(p, seed=ctx.cfg.seed):.2f} %")
    if "retention" in what:
        r = ex.retention(p, seed=ctx.cfg.seed)
        ctx.say(f"retention max fluctuation {100 * r.max_fluctuation:.2f} %  distinguishable {r.distinguishable}")


# ------------------------------------------------------------------ parser

def build_parser():
    P = _Parser(prog="mhdd", description="Molecular storage unit simulator and in-situ encryption workflow.")
    P.add_argument("--config", help="key=value file with defaults for the global flags")
    P.add_argument("--params", dest="params_path", help="model parameter file (key=value)")
    P.add_argument("--codec", dest="codec_path", help="level codec file (key=value)")
    P.add_argument("--seed", type=int, help="seed for noise and device sampling (default 0)")
    P.add_argument("--out-dir", dest="out_dir", help=f"directory for relative outputs (default ${OUT_DIR_ENV} or .)")
    g = P.add_mutually_exclusive_group()
    g.add_argument("--noise", dest="noise", action="store_true", default=None)
    g.add_argument("--no-noise", dest="noise", action="store_false")
    P.add_argument("--dry-run", action="store_true", help="run everything but write no files")
    sub = P.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("sweep", help="dc sweep trace as CSV")
    s.add_argument("--stop", type=float, required=True)
    s.add_argument("--start", type=float, default=0.0)
    s.add_argument("--step", type=float, default=0.05)
    s.add_argument("--dwell", type=float, default=0.02)
    s.add_argument("--dual", action="store_true", help="0 -> +stop -> 0 -> -stop -> 0")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_sweep)

    s = sub.add_parser("calibrate", help="fit model parameters to targets")
    s.add_argument("--targets", help="CSV name,observable,value,weight (default: built-in set)")
    s.add_argument("--max-iter", type=int, default=200)
    s.add_argument("--out", help="write fitted parameters here")
    s.set_defaults(fn=cmd_calibrate)

    s = sub.add_parser("levels", help="staircase of written states and its metrics")
    s.add_argument("--states", type=int)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_levels)

    s = sub.add_parser("logic", help="truth tables and cascade evaluation")
    s.add_argument("--gate", help="xor, and, or, nand, nor, not, imp, max, min, threshold")
    s.add_argument("--table", action="store_true", help="print the truth table")
    s.add_argument("--expr", help="prefix expression, e.g. '(max (min 2 p) q)'")
    s.add_argument("--radix", type=int)
    s.add_argument("--var", action="append", help="variable binding name=value (repeatable)")
    s.add_argument("--units", type=int, default=16, help="gate units in the cascade pool")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_logic)

    s = sub.add_parser("array", help="allocate, inspect or size an array")
    s.add_argument("action", choices=("alloc", "inspect", "capacity"))
    s.add_argument("--array")
    s.add_argument("--rows", type=int, default=128)
    s.add_argument("--cols", type=int, default=128)
    s.set_defaults(fn=cmd_array)

    s = sub.add_parser("store", help="quantize an image and write it into an array")
    s.add_argument("--image", required=True)
    s.add_argument("--array", required=True)
    s.set_defaults(fn=cmd_store)

    for name, fn in (("encrypt", cmd_encrypt), ("decrypt", cmd_decrypt)):
        s = sub.add_parser(name, help=f"{name} the stored words in place")
        s.add_argument("--array", required=True)
        s.add_argument("--key-seed", type=lambda v: int(v, 0))
        s.add_argument("--key", help="key file")
        if name == "encrypt":
            s.add_argument("--image", help="store this image first")
            s.add_argument("--key-out", help="write the key file here")
            s.add_argument("--cipher-out", help="render the cipher image here")
        else:
            s.add_argument("--out", help="render the recovered image here")
        s.set_defaults(fn=fn)

    s = sub.add_parser("render", help="render stored words as an image")
    s.add_argument("--array", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_render)

    s = sub.add_parser("stats", help="windows, power, uniformity and retention report")
    s.add_argument("--what", default="all", help="comma list of windows,power,uniformity,retention")
    s.set_defaults(fn=cmd_stats)
    return P


def run(argv=None):
    try:
        args = build_parser().parse_args(argv)
        ctx = Context(args)
        args.fn(ctx, args)
    except UsageError as e:
        print(str(e).rstrip(), file=sys.stderr)
        return 2
    except (ParseError, InvalidArgument) as e:
        print(f"mhdd: error: {e}", file=sys.stderr)
        return 2
    except (MhddError, OSError) as e:
        print(f"mhdd: failed: {e}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())
