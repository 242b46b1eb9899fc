"""Aggregated PV park: array output and the grid-following inverter's LVRT mode machine.

Currents are per-unit on the system base. ``i_rated = s_rated`` (rated current
at 1 pu voltage). Reactive current ``i_q`` is positive when the inverter
injects reactive power (capacitive, voltage-supporting).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

G_STC = 1000.0  # W/m^2
T_STC = 25.0  # degC
V_FLOOR = 0.1
RECOVERY_TIME = 0.28  # s, default active-power ramp duration after LVRT exit
_HOLD_EPS = 1e-9


class InverterMode(enum.IntEnum):
    NORMAL = 0
    LVRT = 1
    RECOVERY = 2
    ISOLATED = 3


@dataclass(frozen=True)
class ModuleParams:
    p_stc: float  # pu
    gamma: float = -0.004  # 1/K

    def __post_init__(self) -> None:
        if not self.p_stc > 0:
            raise ValueError("p_stc must be positive")
        if not -0.01 < self.gamma < 0:
            raise ValueError("gamma must lie in (-0.01, 0)")


@dataclass(frozen=True)
class OperatingEnv:
    irradiance: float  # W/m^2
    cell_temp: float = T_STC  # degC

    def __post_init__(self) -> None:
        if not self.irradiance >= 0:
            raise ValueError("irradiance must be non-negative")
        if not -40 <= self.cell_temp <= 90:
            raise ValueError("cell temperature outside [-40, 90] degC")


@dataclass(frozen=True)
class InverterParams:
    s_rated: float = 0.15  # pu on system base (1.5 MVA / 10 MVA)
    i_max: float = 1.1
    v_enter: float = 0.9
    v_exit: float = 0.9
    exit_hold: float = 0.02
    k_q: float = 2.5
    p_ramp: float = 0.15 / RECOVERY_TIME  # pu/s

    def __post_init__(self) -> None:
        problems = []
        if not self.s_rated > 0:
            problems.append("s_rated must be positive")
        if not self.i_max >= 1:
            problems.append("i_max must be >= 1")
        if not 0 < self.v_enter <= 1:
            problems.append("v_enter must lie in (0, 1]")
        if not self.v_exit > 0:
            problems.append("v_exit must be positive")
        if not self.exit_hold >= 0:
            problems.append("exit_hold must be non-negative")
        if not self.k_q > 0:
            problems.append("k_q must be positive")
        if not self.p_ramp > 0:
            problems.append("p_ramp must be positive")
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def i_rated(self) -> float:
        return self.s_rated

    @property
    def i_limit(self) -> float:
        return self.i_max * self.i_rated


@dataclass(frozen=True)
class InverterState:
    mode: InverterMode = InverterMode.NORMAL
    p_ref: float = 0.0
    q_ref: float = 0.0
    p_prefault: float = 0.0
    recovery_started: float | None = None
    above_since: float | None = None  # first instant of the current v >= v_exit run while in LVRT


def mpp_power(mp: ModuleParams, env: OperatingEnv) -> float:
    p = mp.p_stc * (env.irradiance / G_STC) * (1.0 + mp.gamma * (env.cell_temp - T_STC))
    return min(max(p, 0.0), 1.05 * mp.p_stc)


def irradiance_for_fraction(fraction: float) -> float:
    """Irradiance at STC temperature that yields ``fraction`` of the array rating."""
    return fraction * G_STC


def lvrt_transition(st: InverterState, v_pcc: float, t: float, params: InverterParams) -> InverterState:
    mode = st.mode
    if mode is InverterMode.ISOLATED:
        return st
    if mode is InverterMode.NORMAL:
        if v_pcc < params.v_enter:
            return replace(st, mode=InverterMode.LVRT, p_prefault=st.p_ref, above_since=None)
        return st
    if mode is InverterMode.LVRT:
        if v_pcc < params.v_exit:
            return replace(st, above_since=None) if st.above_since is not None else st
        since = t if st.above_since is None else st.above_since
        if t - since >= params.exit_hold - _HOLD_EPS:
            return replace(
                st, mode=InverterMode.RECOVERY, recovery_started=t, above_since=None, p_ref=0.0, q_ref=0.0
            )
        return replace(st, above_since=since)
    # recovery: linear active-power ramp from zero, measured from the transition instant
    assert st.recovery_started is not None
    p_ref = params.p_ramp * (t - st.recovery_started)
    if p_ref >= st.p_prefault:
        return replace(st, mode=InverterMode.NORMAL, p_ref=st.p_prefault, q_ref=0.0, recovery_started=None)
    return replace(st, p_ref=p_ref, q_ref=0.0)


def current_reference(st: InverterState, v_pcc: float, params: InverterParams, p_avail: float) -> complex:
    """Current setpoint in the PCC-voltage frame: ``i_p - 1j * i_q``.

    The real part is in phase with the PCC voltage; a positive ``i_q`` lags it
    by 90 degrees in this frame, i.e. injects reactive power.
    """
    if v_pcc < 0:
        raise ValueError("negative voltage magnitude")
    mode = st.mode
    if mode is InverterMode.ISOLATED:
        return 0j
    v = max(v_pcc, V_FLOOR)
    limit = params.i_limit
    p_cap = min(max(p_avail, 0.0), params.s_rated)
    if mode is InverterMode.NORMAL:
        return complex(min(p_cap / v, limit), 0.0)
    if mode is InverterMode.LVRT:
        iq_rel = min(params.k_q * max(params.v_enter - v_pcc, 0.0), params.i_max)
        ip_rel = math.sqrt(max(params.i_max**2 - iq_rel**2, 0.0))
        i_q = iq_rel * params.i_rated
        i_p = min(ip_rel * params.i_rated, p_cap / v)
        return complex(i_p, -i_q)
    # recovery
    return complex(min(min(st.p_ref, p_cap) / v, limit), 0.0)


def apply_trip(st: InverterState) -> InverterState:
    return replace(
        st, mode=InverterMode.ISOLATED, p_ref=0.0, q_ref=0.0, recovery_started=None, above_since=None
    )


class InverterController:
    """Stateful wrapper that runs one control period: mode update, then current setpoint."""

    def __init__(self, params: InverterParams, p_avail: float, state: InverterState | None = None):
        self.params = params
        self.p_avail = p_avail
        p0 = min(max(p_avail, 0.0), params.s_rated)
        self.state = state if state is not None else InverterState(p_ref=p0)

    def step(self, v_pcc: float, t: float) -> tuple[float, float]:
        """Returns ``(i_p, i_q)`` for the next plant step."""
        st = lvrt_transition(self.state, v_pcc, t, self.params)
        i = current_reference(st, v_pcc, self.params, self.p_avail)
        i_p, i_q = i.real, -i.imag + 0.0  # avoid -0.0
        if st.mode is InverterMode.LVRT:
            st = replace(st, p_ref=v_pcc * i_p, q_ref=v_pcc * i_q)
        elif st.mode is InverterMode.NORMAL:
            st = replace(st, p_ref=min(max(self.p_avail, 0.0), self.params.s_rated), q_ref=0.0)
        self.state = st
        return i_p, i_q

    def trip(self) -> None:
        self.state = apply_trip(self.state)
