import numpy as np
import pytest
from hypothesis import given, strategies as st

from pvhil.protection import (
    RelaySettings,
    RelayState,
    RocofEstimatorCfg,
    RocofEstimatorState,
    TimestampError,
    ls_slope,
    relay_step,
    rocof_update,
    scan_trip,
)

DT = 1e-3
SETTINGS = RelaySettings()


def run_relay(trace, settings=SETTINGS, dt=DT):
    rs = RelayState()
    flags = []
    for k, r in enumerate(trace):
        rs = relay_step(rs, r, dt, settings, t=(k + 1) * dt)
        flags.append(rs.tripped)
    return rs, flags


def test_trip_after_600ms():
    rs, _ = run_relay([1.8] * 650)
    assert rs.tripped
    assert rs.trip_time == pytest.approx(0.6, abs=DT / 2)
    assert scan_trip([1.8] * 650, DT, SETTINGS)[0]


def test_500ms_does_not_trip():
    assert not run_relay([1.8] * 500)[0].tripped
    assert not run_relay([-1.8] * 599)[0].tripped


def test_below_threshold_never_trips():
    assert not run_relay([1.6] * 5000)[0].tripped
    assert not run_relay([1.7] * 5000)[0].tripped  # strictly greater is required


def test_gap_resets_timer():
    trace = [1.8] * 500 + [0.0] + [1.8] * 500
    assert not run_relay(trace)[0].tripped
    assert not scan_trip(trace, DT, SETTINGS)[0]


def test_negative_rocof_counts():
    assert run_relay([-1.8] * 600)[0].tripped


@given(st.lists(st.sampled_from([0.0, 1.0, 1.8, -2.5]), max_size=120), st.integers(1, 12))
def test_online_relay_equals_scan(trace, hold):
    settings = RelaySettings(threshold=1.7, duration=hold * 0.01)
    rs, _ = run_relay(trace, settings, dt=0.01)
    tripped, t_trip = scan_trip(trace, 0.01, settings)
    assert rs.tripped == tripped
    if tripped:
        assert rs.trip_time == t_trip


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=100))
def test_trip_latches(after):
    rs, _ = run_relay([3.0] * 600)
    assert rs.tripped
    t0 = rs.trip_time
    for r in after:
        rs = relay_step(rs, r, DT, SETTINGS)
        assert rs.tripped and rs.trip_time == t0


def test_timer_stays_in_range():
    rs = RelayState()
    for r in [1.8] * 599:
        rs = relay_step(rs, r, DT, SETTINGS)
        assert 0 <= rs.above_timer <= SETTINGS.duration


def test_relay_validation():
    with pytest.raises(ValueError):
        RelaySettings(threshold=0.0)
    with pytest.raises(ValueError):
        relay_step(RelayState(), 0.0, 0.0, SETTINGS)


def feed(samples, cfg):
    est = RocofEstimatorState()
    out = None
    for t, f in samples:
        out = rocof_update(est, f, t, cfg)
    return est, out


CFG = RocofEstimatorCfg(sample_dt=DT, window=0.1)


def test_estimator_constant_and_warmup():
    est = RocofEstimatorState()
    assert rocof_update(est, 50.0, 0.0, CFG) == 0.0
    assert rocof_update(est, 50.0, DT, CFG) == 0.0


def test_estimator_exact_on_ramp():
    samples = [(k * DT, 50.0 + 0.625 * k * DT) for k in range(300)]
    est, r = feed(samples, CFG)
    assert abs(r - 0.625) < 1e-9
    # window holds 0.1 s of samples: 101 at 1 ms spacing
    assert len(est.samples) == 101
    assert est.samples[0][0] == pytest.approx(samples[-1][0] - 0.1)


def test_estimator_rejects_time_reversal():
    est = RocofEstimatorState()
    rocof_update(est, 50.0, 0.1, CFG)
    with pytest.raises(TimestampError):
        rocof_update(est, 50.0, 0.1, CFG)


def test_estimator_cfg_validation():
    with pytest.raises(ValueError):
        RocofEstimatorCfg(sample_dt=0.1, window=0.1)


ramps = st.lists(st.floats(-1.0, 1.0), min_size=2, max_size=150)


@given(st.lists(st.floats(-1.0, 1.0), min_size=101, max_size=101), st.floats(-5.0, 5.0))
def test_estimator_shift_invariant(fs, c):
    # full 100 ms window; shorter windows amplify the rounding of f + c itself
    ts = [k * DT for k in range(len(fs))]
    a = ls_slope(ts, [50.0 + f for f in fs])
    b = ls_slope(ts, [50.0 + f + c for f in fs])
    assert abs(a - b) <= 1e-12


@given(ramps)
def test_estimator_sign_symmetry(fs):
    ts = [k * DT for k in range(len(fs))]
    assert ls_slope(ts, [-f for f in fs]) == -ls_slope(ts, fs)


def noise_bound(n, dt, amp):
    """Worst-case slope error of a least-squares fit for noise bounded by amp."""
    tc = (np.arange(n) - (n - 1) / 2) * dt
    return amp * np.abs(tc).sum() / (tc**2).sum()


@given(st.integers(0, 2**32 - 1))
def test_estimator_noise(seed):
    rng = np.random.default_rng(seed)
    n = 300
    noise = rng.uniform(-1e-3, 1e-3, n)
    samples = [(k * DT, 50.0 + 0.625 * k * DT + noise[k]) for k in range(n)]
    _, r = feed(samples, CFG)
    assert noise_bound(101, DT, 1e-3) < 0.05
    assert abs(r - 0.625) <= noise_bound(101, DT, 1e-3) + 1e-12


def test_estimator_noise_repeated_trials():
    rng = np.random.default_rng(7)
    errs = []
    for _ in range(200):
        n = 101
        t = np.arange(n) * DT
        f = 50.0 + 0.625 * t + rng.uniform(-1e-3, 1e-3, n)
        errs.append(ls_slope(t, f) - 0.625)
    errs = np.array(errs)
    # uniform noise: sd = amp/sqrt(3); slope sd = sd/sqrt(sum tc^2)
    tc = t - t.mean()
    predicted = 1e-3 / np.sqrt(3) / np.sqrt((tc**2).sum())
    assert np.std(errs) == pytest.approx(predicted, rel=0.2)
    assert np.max(np.abs(errs)) < 0.05
