import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from mhdd import codec as cd
from mhdd import device as dev
from mhdd.errors import InvalidArgument, OutOfRange, ParseError, ProgramFailure


@pytest.mark.parametrize("value,volts", [(35, 4.0), (24, 2.9), (0, 0.5), (63, 6.8)])
def test_level_to_voltage(codec, value, volts):
    assert cd.level_to_voltage(codec, value) == volts


def test_level_to_conductance(codec):
    assert cd.level_to_conductance(codec, 0) == pytest.approx(0.4e-9)
    assert cd.level_to_conductance(codec, 63) == pytest.approx(7.3e-9)
    gap = cd.level_to_conductance(codec, 32) - cd.level_to_conductance(codec, 31)
    assert gap == pytest.approx(0.1095e-9, rel=1e-3)


@pytest.mark.parametrize("bad", [-1, 64, 2.5])
def test_out_of_range_levels(codec, bad):
    with pytest.raises(OutOfRange):
        cd.level_to_voltage(codec, bad)
    with pytest.raises(OutOfRange):
        cd.level_to_conductance(codec, bad)


def test_mappings_strictly_increasing(codec):
    v = [cd.level_to_voltage(codec, k) for k in range(64)]
    g = [cd.level_to_conductance(codec, k) for k in range(64)]
    assert all(a < b for a, b in zip(v, v[1:])) and all(a < b for a, b in zip(g, g[1:]))


def test_codec_validation():
    with pytest.raises(InvalidArgument):
        cd.LevelCodec(n_used=97)
    with pytest.raises(InvalidArgument):
        cd.LevelCodec(V_step=0.2)  # ladder past 10 V
    with pytest.raises(InvalidArgument):
        cd.LevelCodec(G_lo=8e-9)


def test_codec_text_round_trip(codec):
    c2 = cd.LevelCodec.from_text(codec.to_text())
    assert c2 == codec
    with pytest.raises(ParseError):
        cd.LevelCodec.from_text("n_used=abc\n")


# ---------------------------------------------------------------- decoding

def test_nearest_level_exact_targets(codec):
    for k in range(64):
        assert cd.nearest_level(codec, cd.level_to_conductance(codec, k))[0] == k


def test_tie_goes_to_lower_level(codec):
    t = cd.targets(codec)
    for k in (0, 20, 62):
        # equal relative distance to t[k] and t[k+1]
        mid = 2 * t[k] * t[k + 1] / (t[k] + t[k + 1])
        lvl, _ = cd.nearest_level(codec, mid)
        assert lvl == k
        assert cd.nearest_level(codec, mid * (1 + 1e-9))[0] == k + 1


def test_sign_is_ignored(codec):
    g = cd.level_to_conductance(codec, 40)
    assert cd.nearest_level(codec, -g) == cd.nearest_level(codec, g)


def test_worst_case_half_gap_exceeds_twice_read_noise(codec, params):
    """Read noise after averaging read_samples samples, which is what a level read sees."""
    t = cd.targets(codec)
    worst = np.min(np.diff(t) / t[1:])
    sigma_read = params.sigma_c2c / math.sqrt(codec.read_samples)
    assert worst > 2 * sigma_read


def test_single_sample_noise_margin_is_documented(codec, params):
    # one raw sample would not clear the margin at the top of the ladder
    t = cd.targets(codec)
    assert np.min(np.diff(t) / t[1:]) < 2 * params.sigma_c2c


def test_misread_rate_monte_carlo(codec, params):
    rng = np.random.default_rng(12)
    x, u, f = np.full(1, 0.5), np.zeros(1), np.ones(1)
    unit = cd.program_level(dev.UnitState(dev.X_PRISTINE, 0.0), 32, codec, params)
    x, u, f = cd._arrays(unit, params)
    xs, us, fs = (np.repeat(a, 10_000) for a in (x, u, f))
    g = cd.read_batch(xs, us, fs, params, codec, rng)
    errors = np.count_nonzero(cd._decode(codec, g) != 32)
    # Gaussian-tail oracle for the averaged read
    t = cd.targets(codec)
    half = 0.5 * (t[33] - t[32]) / t[32]
    p_tail = 2 * stats.norm.sf(half / (params.sigma_c2c / math.sqrt(codec.read_samples)))
    assert p_tail < 1e-3
    assert errors / 10_000 < 1e-3


# ---------------------------------------------------------------- programming

def _pristine():
    return dev.UnitState(dev.X_PRISTINE, 0.0)


@pytest.mark.parametrize("value", [0, 1, 17, 32, 53, 63])
def test_round_trip_from_pristine(codec, params, value):
    u = cd.program_level(_pristine(), value, codec, params)
    r = cd.read_level(u, codec, params)
    assert r.level == value and r.residual <= codec.verify_tol


@given(st.integers(0, 63), st.integers(0, 63))
def test_round_trip_from_any_level(a, b):
    p, c = dev.ModelParams(), cd.LevelCodec()
    u = cd.program_level(_pristine(), a, c, p)
    u = cd.program_level(u, b, c, p)
    assert cd.read_level(u, c, p).level == b


def test_idempotent_rewrite_issues_no_waveform(codec, params):
    u = cd.program_level(_pristine(), 40, codec, params)
    log = []
    again = cd.program_level(u, 40, codec, params, polarity_log=log)
    assert again is u
    assert log == []


def test_fixture_polarities(codec, params):
    u53 = cd.program_level(_pristine(), 53, codec, params)
    log = []
    cd.program_level(u53, 35, codec, params, polarity_log=log)
    assert [int(e[0]) for e in log][0] == -1 and all(int(e[0]) <= 0 for e in log)
    u8 = cd.program_level(_pristine(), 8, codec, params)
    log = []
    cd.program_level(u8, 24, codec, params, polarity_log=log)
    assert [int(e[0]) for e in log][0] == 1


@given(st.integers(0, 63), st.integers(0, 63), st.integers(0, 2**32 - 1))
def test_polarity_rule_on_written_units(a, b, seed):
    """On a written unit every raising round is positive and every lowering round negative."""
    p, c = dev.ModelParams(), cd.LevelCodec()
    rng = np.random.default_rng(seed)
    u = cd.program_level(dev.spawn_unit(p, seed), a, c, p, rng)
    x, uu, f = cd._arrays(u, p)
    audit = []
    cd.program_batch(x, uu, f, [b], c, p, rng, audit=audit)
    t = cd.level_to_conductance(c, b)
    for _, g, pol in audit:
        assert pol[0] == (1 if t > abs(g[0]) else -1)


def test_program_failure_carries_reading(params):
    c = cd.LevelCodec(verify_tol=1e-12, max_iters=1)
    with pytest.raises(ProgramFailure) as ei:
        cd.program_level(_pristine(), 30, c, params)
    assert ei.value.reading is not None
    assert 0 <= ei.value.reading.level < 64


def test_program_batch_matches_scalar(codec, params):
    vals = [3, 40, 22]
    x = np.full(3, dev.X_PRISTINE)
    u = np.zeros(3)
    x2, u2, ok, g, iters = cd.program_batch(x, u, np.ones(3), vals, codec, params)
    assert ok.all()
    assert list(cd._decode(codec, g)) == vals


# ---------------------------------------------------------------- estimation

@given(st.floats(0.05, 0.95), st.floats(-2.0, 2.0), st.floats(0.9, 1.1))
def test_state_estimate_recovers_truth(x, u, f):
    p = dev.ModelParams()
    xs, us = np.array([x]), np.array([u])
    probes = [dev.current_kernel(xs, us, f, v, p) for v in cd.PROBES]
    gm, uh = cd.estimate_state(probes, p)
    assert uh[0] == pytest.approx(u, abs=2e-3)
    assert gm[0] == pytest.approx(f * p.G_red * (1 - p.alpha_ox * x), rel=1e-2)


# ---------------------------------------------------------------- metrics

def test_staircase_metrics_exact_line(codec):
    rows = [(k, cd.level_to_conductance(codec, k)) for k in range(64)]
    r2, _ = cd.staircase_metrics(rows)
    assert r2 == pytest.approx(1.0)


def test_staircase_metrics_needs_three_points():
    with pytest.raises(InvalidArgument):
        cd.staircase_metrics([(0, 1e-9), (1, 2e-9)])


def test_repeated_reading_uniformity():
    rng = np.random.default_rng(5)
    reads = 2e-9 * np.exp(0.0141 * rng.standard_normal(20_000))
    assert cd.uniformity(reads) == pytest.approx(98.59, abs=0.1)
    r2, uni = cd.staircase_metrics([(5, 1.0e-9), (5, 1.02e-9), (5, 0.98e-9), (6, 2e-9)])
    assert uni == pytest.approx(100 * (1 - np.std([1.0, 1.02, 0.98], ddof=1) / 1.0))


def test_staircase_csv_header():
    text = cd.staircase_csv([(0, 0.5, 0.4e-9, 0.41e-9)])
    assert text.splitlines()[0] == "level,voltage_V,G_target_S,G_measured_S"
    assert text.splitlines()[1].startswith("0,0.5,")
