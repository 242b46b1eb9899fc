import math
from dataclasses import replace

import pytest
from hypothesis import given, strategies as st

from pvhil.pvplant import (
    InverterController,
    InverterMode,
    InverterParams,
    InverterState,
    ModuleParams,
    OperatingEnv,
    apply_trip,
    current_reference,
    irradiance_for_fraction,
    lvrt_transition,
    mpp_power,
)

ALLOWED = {
    (InverterMode.NORMAL, InverterMode.LVRT),
    (InverterMode.LVRT, InverterMode.RECOVERY),
    (InverterMode.RECOVERY, InverterMode.NORMAL),
}
modes = st.sampled_from(list(InverterMode))
voltages = st.floats(0.0, 1.3)


def test_mpp_examples():
    mp = ModuleParams(p_stc=0.15)
    assert mpp_power(mp, OperatingEnv(1000, 25)) == pytest.approx(0.15)
    assert mpp_power(mp, OperatingEnv(500, 25)) == pytest.approx(0.075)
    assert mpp_power(mp, OperatingEnv(1000, 50)) == pytest.approx(0.9 * 0.15)


def test_mpp_clamped():
    mp = ModuleParams(p_stc=1.0)
    assert mpp_power(mp, OperatingEnv(1400, 25)) == pytest.approx(1.05)
    assert mpp_power(mp, OperatingEnv(0, 90)) == 0.0


@pytest.mark.parametrize("fraction, g", [(0.10, 100), (0.25, 250), (0.50, 500), (0.75, 750), (1.00, 1000)])
def test_pv_sweep_mapping(fraction, g):
    assert irradiance_for_fraction(fraction) == g
    assert mpp_power(ModuleParams(p_stc=0.15), OperatingEnv(g, 25.0)) == pytest.approx(fraction * 0.15, rel=1e-15)


@pytest.mark.parametrize(
    "kwargs",
    [{"i_max": 0.9}, {"v_enter": 0.0}, {"v_enter": 1.2}, {"k_q": 0.0}, {"p_ramp": 0.0}, {"s_rated": -1.0}],
)
def test_params_validation(kwargs):
    with pytest.raises(ValueError):
        InverterParams(**kwargs)


def test_env_validation():
    with pytest.raises(ValueError):
        OperatingEnv(-1.0)
    with pytest.raises(ValueError):
        OperatingEnv(500, 95)
    with pytest.raises(ValueError):
        ModuleParams(p_stc=1.0, gamma=0.001)


def test_transition_examples():
    p = InverterParams()
    st0 = InverterState(p_ref=0.15)
    assert lvrt_transition(st0, 1.0, 0.0, p).mode is InverterMode.NORMAL
    lv = lvrt_transition(st0, 0.4, 0.0, p)
    assert lv.mode is InverterMode.LVRT
    assert lv.p_prefault == 0.15


def test_exit_hold_needs_continuous_recovery():
    p = InverterParams(exit_hold=0.02)
    s = lvrt_transition(InverterState(p_ref=0.1), 0.4, 0.0, p)
    s = lvrt_transition(s, 0.95, 0.30, p)
    s = lvrt_transition(s, 0.5, 0.31, p)  # relapse resets the hold
    s = lvrt_transition(s, 0.95, 0.32, p)
    s = lvrt_transition(s, 0.95, 0.339, p)
    assert s.mode is InverterMode.LVRT
    s = lvrt_transition(s, 0.95, 0.340, p)
    assert s.mode is InverterMode.RECOVERY and s.recovery_started == 0.340


def case_one_timeline(dt=1e-3, p0=0.15):
    params = InverterParams(p_ramp=p0 / 0.28)
    ctrl = InverterController(params, p0)
    modes = []
    for k in range(1000):
        t = k * dt
        v = 0.4 if t < 0.3 else 1.0
        ctrl.step(v, t)
        modes.append(ctrl.state.mode)
    return modes


def test_case_one_mode_timeline():
    dt = 1e-3
    modes = case_one_timeline(dt)
    assert modes[0] is InverterMode.LVRT
    t_rec = modes.index(InverterMode.RECOVERY) * dt
    assert t_rec == pytest.approx(0.32)
    t_norm = next(k for k in range(len(modes)) if k * dt > 0.3 and modes[k] is InverterMode.NORMAL) * dt
    assert abs(t_norm - 0.6) <= 2 * dt


def test_current_reference_examples():
    unit = InverterParams(s_rated=1.0, k_q=2.0)
    assert current_reference(InverterState(), 1.0, unit, 0.5) == complex(0.5, 0.0)
    lv = InverterState(mode=InverterMode.LVRT)
    i = current_reference(lv, 0.4, unit, 10.0)
    assert -i.imag == pytest.approx(1.0)
    assert i.real == pytest.approx(math.sqrt(1.1**2 - 1.0), rel=1e-12)
    assert i.real == pytest.approx(0.458, abs=1e-3)
    # active part further capped by available power
    assert current_reference(lv, 0.4, unit, 0.1).real == pytest.approx(0.1 / 0.4)
    assert current_reference(InverterState(mode=InverterMode.ISOLATED), 0.5, unit, 1.0) == 0


def test_apply_trip_examples():
    for m in (InverterMode.NORMAL, InverterMode.LVRT, InverterMode.ISOLATED):
        s = apply_trip(InverterState(mode=m, p_ref=0.1))
        assert s.mode is InverterMode.ISOLATED and s.p_ref == 0.0
    once = apply_trip(InverterState())
    assert apply_trip(once) == once


@given(
    mode=modes,
    v=st.floats(0.0, 2.0),
    p_avail=st.floats(0.0, 1.0),
    p_ref=st.floats(0.0, 1.0),
    s_rated=st.floats(0.01, 1.0),
    i_max=st.floats(1.0, 1.5),
    k_q=st.floats(0.1, 10.0),
)
def test_current_never_exceeds_limit(mode, v, p_avail, p_ref, s_rated, i_max, k_q):
    params = InverterParams(s_rated=s_rated, i_max=i_max, k_q=k_q)
    i = current_reference(InverterState(mode=mode, p_ref=p_ref), v, params, p_avail)
    assert abs(i) <= params.i_limit * (1 + 1e-12)


@given(st.lists(voltages, min_size=1, max_size=80), st.floats(0.0, 0.15))
def test_controller_trace_invariants(vs, p_avail):
    params = InverterParams()
    ctrl = InverterController(params, p_avail)
    prev = ctrl.state.mode
    for k, v in enumerate(vs):
        i_p, i_q = ctrl.step(v, k * 0.01)
        st_ = ctrl.state
        if st_.mode is InverterMode.NORMAL:
            assert st_.q_ref == 0.0 and i_q == 0.0
        assert st_.p_ref**2 + st_.q_ref**2 <= (params.s_rated * params.i_max * max(v, 0.1)) ** 2 * (1 + 1e-9)
        assert prev == st_.mode or (prev, st_.mode) in ALLOWED
        prev = st_.mode


@given(st.lists(voltages, max_size=50))
def test_isolated_is_terminal(vs):
    ctrl = InverterController(InverterParams(), 0.1)
    ctrl.trip()
    for k, v in enumerate(vs):
        assert ctrl.step(v, k * 0.01) == (0.0, 0.0)
        assert ctrl.state.mode is InverterMode.ISOLATED


@given(v1=st.floats(0.0, 1.0), v2=st.floats(0.0, 1.0), k_q=st.floats(0.5, 5.0))
def test_reactive_priority_is_monotone(v1, v2, k_q):
    lo, hi = sorted((v1, v2))
    params = InverterParams(k_q=k_q)
    lv = InverterState(mode=InverterMode.LVRT)
    iq_lo = -current_reference(lv, lo, params, 0.15).imag
    iq_hi = -current_reference(lv, hi, params, 0.15).imag
    assert iq_lo >= iq_hi


def test_recovery_ramp_is_linear():
    params = InverterParams(p_ramp=0.5)
    s = InverterState(mode=InverterMode.RECOVERY, p_prefault=0.15, recovery_started=1.0)
    s = lvrt_transition(s, 1.0, 1.1, params)
    assert s.p_ref == pytest.approx(0.05) and s.mode is InverterMode.RECOVERY
    s = lvrt_transition(s, 1.0, 1.3, params)
    assert s.mode is InverterMode.NORMAL and s.p_ref == 0.15


def test_negative_voltage_rejected():
    with pytest.raises(ValueError):
        current_reference(InverterState(), -0.1, InverterParams(), 0.1)
