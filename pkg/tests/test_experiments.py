import numpy as np
import pytest

from mhdd import codec as cd
from mhdd import device as dev
from mhdd import experiments as ex


def test_sweep_observables_noise_free_is_deterministic(params):
    a, ta = ex.sweep_observables(params)
    b, tb = ex.sweep_observables(params)
    assert a == b and ta == tb
    assert len(a.as_dict()) == 12
    assert a.peak_power_per_molecule == pytest.approx(a.peak_power / 235)


def test_seeded_observables_reproduce(params):
    a, _ = ex.sweep_observables(params, noise_seed=4)
    b, _ = ex.sweep_observables(params, noise_seed=4)
    c, _ = ex.sweep_observables(params, noise_seed=5)
    assert a == b and a != c


def test_zero_bias_signs(params):
    obs, _ = ex.sweep_observables(params)
    assert [np.sign(v) for v in obs.zero_bias] == [1, -1, 1, -1]


def test_negative_half_continues_from_positive(params):
    _, tr = ex.sweep_observables(params)
    n = len(dev.make_sweep(0.0, ex.CAL_AMPLITUDE, ex.CAL_STEP).samples()[0])
    assert (tr.voltage[:n] >= 0).all() and (tr.voltage[n:] <= 0).all()
    assert np.all(np.diff(tr.time_s) > 0)


def test_window_family_increasing(params):
    w = ex.window_family(params)
    assert len(w) == 3 and w[0] < w[1] < w[2]


def test_staircase_rows(params, codec):
    rows = ex.staircase(params, codec)
    assert len(rows) == codec.n_states == 96
    assert rows[0][1] == 0.5 and rows[35][1] == 4.0 and rows[-1][1] == 10.0
    g = np.array([r[3] for r in rows])
    # low stops sit near the charge-screened plateau and dip slightly before the climb
    assert np.all(np.diff(g[8:]) > 0)
    assert g[2:9].max() / g[2:9].min() < 1.1
    for k in (0, 40, 63):
        assert rows[k][2] == pytest.approx(cd.level_to_conductance(codec, k))


def test_staircase_span_oracle():
    rows = [(k, 0.5 + 0.1 * k, 0.0, 1e-9 + 1e-10 * k) for k in range(10)]
    lo, hi, r2 = ex.staircase_span(rows)
    assert (lo, hi) == (1e-9, pytest.approx(1.9e-9)) and r2 == pytest.approx(1.0)


def test_pooled_uniformity_oracle():
    rng = np.random.default_rng(0)
    shape = np.linspace(1, 50, 40)
    runs = shape * (1 + 0.02 * rng.standard_normal((20_000, 40)))
    assert ex._pooled_uniformity(runs) == pytest.approx(98.0, abs=0.05)
    assert ex._pooled_uniformity(np.vstack([shape, shape])) == 100.0


def test_uniformities_collapse_without_noise(params):
    assert ex.c2c_uniformity(params.with_(sigma_c2c=0.0)) == pytest.approx(100.0)
    assert ex.d2d_uniformity(params.with_(sigma_d2d=0.0)) == pytest.approx(100.0)


def test_c2c_tracks_read_noise(params):
    # pooled CV of three samples estimates sigma_c2c
    u = ex.c2c_uniformity(params, n_sweeps=40)
    assert u == pytest.approx(100 * (1 - params.sigma_c2c), abs=0.1)


def test_retention_states_order(params):
    g = [dev.read_conductance(s, params) for s in ex.retention_states(params)]
    assert len(g) == 10
    assert all(v < 0 for v in g)


def test_retention_without_drift(params):
    r = ex.retention(params.with_(drift_sigma=0.0), duration=1000.0)
    assert r.max_fluctuation == 0.0 and r.distinguishable


def test_retention_deterministic(params):
    a = ex.retention(params, duration=2000.0, seed=3)
    b = ex.retention(params, duration=2000.0, seed=3)
    assert a.max_fluctuation == b.max_fluctuation
    assert all(np.array_equal(x, y) for x, y in zip(a.traces, b.traces))


def test_large_drift_breaks_distinguishability(params):
    r = ex.retention(params.with_(drift_sigma=0.2), duration=2000.0)
    assert not r.distinguishable


def test_default_drift_sigma_is_the_derived_value(params):
    assert params.drift_sigma == pytest.approx(ex.drift_sigma_for_levels(params), rel=1e-3)


def test_derived_sigma_keeps_worst_state_inside_half_gap(params):
    # independent check: push u of every state by the full bound and compare to the log half gap
    sig = ex.drift_sigma_for_levels(params)
    states = ex.retention_states(params)
    lg = np.log([abs(dev.read_conductance(s, params)) for s in states])
    for k, s in enumerate(states):
        u = float(dev._u_of_c(s.c, params))
        half = 0.5 * np.min(np.abs(np.delete(lg, k) - lg[k]))
        for du in (-1, 1):
            for dx in (-1, 1):
                moved = dev.UnitState(min(1.0, max(0.0, s.x + dx * 0.1 * dev.DRIFT_BOUND * sig)),
                                      float(dev._c_of_u(u + du * dev.DRIFT_BOUND * sig, params)))
                assert abs(np.log(abs(dev.read_conductance(moved, params))) - lg[k]) < half
