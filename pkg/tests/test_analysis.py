import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import log_linear_lifetime
from qdpair.analysis import (
    FitError,
    IterationRecord,
    emg,
    fit_fss,
    fit_lifetime,
    fit_rabi,
    fss_model,
    rabi_model,
    stability_report,
    t1_weighted_negativity,
)
from qdpair.correlate import CoincidenceHistogram, cross_correlate, delay_grid
from qdpair.sim import DriftProfile, SimConfig, simulate_pair_stream, tomography_configs
from qdpair.tomography import assemble_dataset, combine_datasets, reconstruct_window

SIG50 = 50.0 / (2 * math.sqrt(2 * math.log(2)))


def emg_hist(t1=162.0, area=1e5, offset=2.0, t0=-10.0, sigma=SIG50, side=-1, width=8, window=2000):
    tau_min, n = delay_grid(width, window)
    c = tau_min + width * (np.arange(n) + 0.5)
    y = area * width * emg(side * (c - t0), t1, sigma) + offset
    return CoincidenceHistogram(width, tau_min, y)


# emg --------------------------------------------------------------------------------

def test_emg_normalised():
    u = np.linspace(-500, 3000, 200_001)
    for sig in (0.0, 5.0, 21.2, 200.0):
        assert np.trapezoid(emg(u, 162.0, sig), u) == pytest.approx(1.0, abs=2e-3)


def test_emg_stable_far_tails():
    v = emg(np.array([-2000.0, -300.0, 5000.0]), 162.0, 21.2)
    assert np.all(np.isfinite(v)) and np.all(v >= 0)


# lifetime ---------------------------------------------------------------------------

def test_lifetime_noiseless_emg():
    r = fit_lifetime(emg_hist())
    assert r.converged
    assert r.params["T1"] == pytest.approx(162.0, abs=1.0)
    assert r.params["side"] == -1
    assert r.sigmas["T1"] >= 0


def test_lifetime_orientation_mirror():
    r = fit_lifetime(emg_hist(side=1, t0=10.0))
    assert r.params["side"] == 1
    assert r.params["T1"] == pytest.approx(162.0, abs=1.0)


def test_lifetime_zero_jitter_matches_log_linear():
    h = emg_hist(sigma=0.0, offset=0.0, t0=0.0)
    r = fit_lifetime(h, jitter_fwhm=1e-6, fit_range=(-600, 0))
    c = h.centers
    m = (c < -16) & (c > -600)
    ref = log_linear_lifetime(-c[m], h.counts[m])
    assert r.params["T1"] == pytest.approx(ref, rel=0.01)


def test_lifetime_model_curve_on_input_abscissae():
    h = emg_hist()
    r = fit_lifetime(h, fit_range=(-400, 100))
    xs = [x for x, _ in r.model_curve]
    c = h.centers
    assert xs == c[(c >= -400) & (c < 100)].tolist()


def test_lifetime_closed_loop_simulation():
    cfg = SimConfig(pulse_count=200_000, efficiency_x=1.0, efficiency_xx=1.0, seed=21)
    h = cross_correlate(simulate_pair_stream(cfg), 0, 1, 8, 3000)
    r = fit_lifetime(h)
    assert 157 <= r.params["T1"] <= 167
    assert r.sigmas["T1"] < 4


def test_lifetime_errors():
    h = CoincidenceHistogram(8, -404, np.r_[np.zeros(90), np.ones(11)])
    with pytest.raises(FitError, match="nonzero"):
        fit_lifetime(h, fit_range=(-400, 400))
    with pytest.raises(ValueError, match="degenerate"):
        fit_lifetime(emg_hist(), fit_range=(100, 100))
    with pytest.raises(ValueError):
        fit_lifetime(emg_hist(), side=0)


# fss --------------------------------------------------------------------------------

def fss_samples(delta=2.54, phase=0.3, e0=1.0, noise=0.0, n=36, seed=0, start=0.0):
    rng = np.random.default_rng(seed)
    th = start + np.arange(n) * 180.0 / n
    e = fss_model(th, e0, delta, phase) + rng.normal(0, noise, n)
    return list(zip(th.tolist(), e.tolist()))


def test_fss_flat_gives_zero():
    r = fit_fss([(t, 5.0) for t in range(0, 180, 10)])
    assert r.params["delta_fss"] == pytest.approx(0.0, abs=1e-9)
    assert r.params["E0"] == pytest.approx(5.0)


def test_fss_noiseless_exact():
    r = fit_fss(fss_samples())
    assert r.params["delta_fss"] == pytest.approx(2.54, abs=1e-9)
    assert r.converged and "ambiguous_phase" not in r.flags


def test_fss_noisy_matches_quoted_precision():
    deltas = [fit_fss(fss_samples(noise=0.05, seed=s)).params["delta_fss"] for s in range(50)]
    assert all(abs(d - 2.54) < 0.12 for d in deltas)


def test_fss_curve_symmetry():
    # cos(4 theta): full period 90 deg of HWP angle, mirrored about E0 after 45 deg
    r = fit_fss(fss_samples(noise=0.05, seed=3))
    p = r.params
    th = np.linspace(0, 90, 37)
    e = fss_model(th, p["E0"], p["delta_fss"], p["phase"])
    assert np.allclose(e, fss_model(th + 90, p["E0"], p["delta_fss"], p["phase"]), atol=1e-12)
    assert np.allclose(e - p["E0"], p["E0"] - fss_model(th + 45, p["E0"], p["delta_fss"], p["phase"]), atol=1e-12)


@given(st.floats(-100, 100), st.sampled_from([45.0, 90.0, 135.0]), st.integers(0, 1000))
@settings(max_examples=30)
def test_fss_invariances(shift, dtheta, seed):
    base = fss_samples(noise=0.05, seed=seed)
    d0 = fit_fss(base).params["delta_fss"]
    shifted = [(t, e + shift) for t, e in base]
    rotated = [(t + dtheta, e) for t, e in base]
    assert fit_fss(shifted).params["delta_fss"] == pytest.approx(d0, abs=1e-9)
    assert fit_fss(rotated).params["delta_fss"] == pytest.approx(d0, abs=1e-9)


def test_fss_ambiguous_phase_flag():
    r = fit_fss(fss_samples(delta=0.01, noise=0.05, seed=1))
    assert "ambiguous_phase" in r.flags


def test_fss_input_checks():
    with pytest.raises(FitError, match="8"):
        fit_fss(fss_samples(n=7))
    with pytest.raises(FitError, match="90"):
        fit_fss([(t, 1.0) for t in np.linspace(0, 80, 10)])


# rabi -------------------------------------------------------------------------------

def rabi_samples(p_pi=9.0, amp=1000.0, gamma=0.0, offset=20.0, pmax=40.0, n=41):
    p = np.linspace(0, pmax, n)
    return list(zip(p.tolist(), rabi_model(p, amp, p_pi, gamma, offset).tolist()))


def test_rabi_noiseless():
    r = fit_rabi(rabi_samples())
    assert r.params["P_pi"] == pytest.approx(9.0, abs=1e-6)
    assert r.params["gamma"] == pytest.approx(0.0, abs=1e-6)


def test_rabi_damped():
    r = fit_rabi(rabi_samples(gamma=0.3))
    assert r.params["P_pi"] == pytest.approx(9.0, abs=1e-5)
    assert r.params["gamma"] == pytest.approx(0.3, abs=1e-5)


def test_rabi_model_limits():
    assert rabi_model(0.0, 1000, 9, 0.4, 20) == pytest.approx(20)
    assert rabi_model(36.0, 1000, 9, 0.0, 20) == pytest.approx(20)
    assert rabi_model(9.0, 1000, 9, 0.0, 20) == pytest.approx(1020)


@given(st.floats(1e-3, 1e6))
@settings(max_examples=20)
def test_rabi_scale_invariance(k):
    s = rabi_samples(gamma=0.2)
    noisy = [(p, y + 15 * math.sin(3 * p)) for p, y in s]
    a = fit_rabi(noisy).params["P_pi"]
    b = fit_rabi([(p, k * y) for p, y in noisy]).params["P_pi"]
    assert b == pytest.approx(a, rel=1e-6)


def test_rabi_simulated_scan():
    from qdpair.sim import simulate_rabi_scan

    scan = simulate_rabi_scan(SimConfig(efficiency_xx=0.01, seed=6), np.linspace(0, 40, 41), 1_000_000)
    r = fit_rabi(scan)
    assert r.params["P_pi"] == pytest.approx(9.0, abs=0.1)


def test_rabi_errors():
    with pytest.raises(FitError, match="6"):
        fit_rabi(rabi_samples(n=5))
    with pytest.raises(FitError, match="maximum"):
        fit_rabi([(p, 100 - p) for p in range(10)])


# t1 weighting ---------------------------------------------------------------------

def test_t1_weight_toy():
    v, s = t1_weighted_negativity([(10, 1.0, 300), (100, 0.8, 100)], 162)
    assert v == pytest.approx(0.95)
    assert math.isnan(s)


def test_t1_weight_constant_and_window():
    series = [(t, 1.0, w) for t, w in zip(range(-40, 400, 8), np.random.default_rng(0).integers(1, 100, 55))]
    assert t1_weighted_negativity(series, 162)[0] == pytest.approx(1.0)
    v, s = t1_weighted_negativity([(0, 0.9, 1, 0.01), (80, 0.9, 1, 0.01), (500, 0.1, 100, 0.01)], 162)
    assert v == pytest.approx(0.9) and s == pytest.approx(0.01 / math.sqrt(2))
    with pytest.raises(ValueError):
        t1_weighted_negativity([(300, 1.0, 10)], 162)


@given(st.lists(st.tuples(st.floats(0, 162), st.floats(0, 1), st.floats(0.1, 1e4)), min_size=1, max_size=30))
def test_t1_weight_convexity(rows):
    v, _ = t1_weighted_negativity(rows, 162)
    lo, hi = min(r[1] for r in rows), max(r[1] for r in rows)
    assert lo - 1e-12 <= v <= hi + 1e-12


# stability ------------------------------------------------------------------------

def make_iterations(n_iter, drift=None, pulses=20_000, seed=5):
    base = SimConfig(rep_rate=0.01, pulse_count=pulses, seed=seed, drift=drift)
    out = []
    for j in range(n_iter):
        cfgs = tomography_configs(base, iteration=j)
        streams = {lab: simulate_pair_stream(c) for lab, c in cfgs}
        out.append(IterationRecord(cfgs[0][1].start_time, streams, [c.duration for _, c in cfgs]))
    return out


@pytest.fixture(scope="module")
def steady_run():
    return make_iterations(4)


def test_stability_report_shapes(steady_run):
    rep = stability_report(steady_run, 0.01, pairing=2, bootstrap=100)
    total = sum(sum(it.durations) for it in steady_run)
    assert len(rep.rate_series["combined"]) == pytest.approx(total / 0.01, abs=36 * 4)
    assert len(rep.negativity_series) == 2
    assert rep.fluctuation >= 0 and rep.max_rate >= rep.mean_rate
    assert all(v > 0.95 for _, v, _ in rep.negativity_series)
    assert rep.min_2n <= rep.mean_2n
    times = [t for t, _ in rep.rate_series["combined"]]
    assert times == sorted(times)
    d = rep.to_dict()
    assert d["pairing"] == 2 and len(d["negativity_series"]) == 2


def test_stability_groups_agree_with_full_dataset(steady_run):
    rep = stability_report(steady_run, 0.01, pairing=2, bootstrap=100)
    sets = [assemble_dataset({k: cross_correlate(s, 0, 1, 8, 2000, duration=d)
                              for (k, s), d in zip(it.streams.items(), it.durations)}) for it in steady_run]
    full = reconstruct_window(combine_datasets(sets), (-162, 0), background=None)
    for _, v, s in rep.negativity_series:
        assert abs(v - full.negativity_2n) < 2 * s


def test_stability_needs_enough_iterations(steady_run):
    with pytest.raises(ValueError, match="group of 2"):
        stability_report(steady_run[:1], 0.01, pairing=2)


def test_iteration_record_validation():
    with pytest.raises(ValueError, match="lacks"):
        IterationRecord(0.0, {"HH": None}, [1.0] * 36)


def test_drift_shows_in_rates_not_in_entanglement(steady_run):
    run_len = 4 * 36 * 20_000 / 1e7
    drifted = make_iterations(4, drift=DriftProfile("sinusoidal", 0.1, run_len))
    rep = stability_report(drifted, 0.01, pairing=2, bootstrap=100)
    ref = stability_report(steady_run, 0.01, pairing=2, bootstrap=100)
    # 0.01 s windows over a 0.288 s period barely smooth the +-10 % swing
    assert rep.fluctuation == pytest.approx(0.2, abs=0.03)
    assert ref.fluctuation < 0.05
    for (_, a, sa), (_, b, sb) in zip(rep.negativity_series, ref.negativity_series):
        assert abs(a - b) < 2 * math.hypot(sa, sb)
