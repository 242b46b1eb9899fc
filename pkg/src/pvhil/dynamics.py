"""Fixed-step phasor dynamics: aggregate swing machine, source dip events, per-bus frequency.

``World`` bundles everything that evolves during a run. One plant step is split in
two halves so that the controller can live in-process or across the lockstep link:

* ``World.measure()`` returns the PCC measurement produced by the previous step.
* ``World.advance(cmd)`` applies the controller's command and integrates one step.

``step_system`` glues them together with the in-process controller.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .hilink.codec import CmdMsg, MeasMsg
from .netmodel import FeederModel, LinearNetwork, init_power_flow
from .protection import (
    RelaySettings,
    RelayState,
    RocofEstimatorCfg,
    RocofEstimatorState,
    relay_step,
    rocof_update,
)
from .pvplant import InverterController, InverterMode, InverterParams, current_reference, InverterState

TWO_PI = 2.0 * math.pi
WASHOUT_TC = 0.02
POSITIONS = ("start", "middle", "end")


@dataclass(frozen=True)
class SwingParams:
    h: float = 4.0
    d: float = 20.0  # pu power (s_base) per pu frequency; 1 pu on the machine rating
    f_n: float = 50.0
    s_sys: float = 20.0  # aggregate island machine, pu on s_base

    def __post_init__(self) -> None:
        if not (self.h > 0 and self.d >= 0 and self.s_sys > 0):
            raise ValueError("swing parameters need h > 0, d >= 0, s_sys > 0")
        if self.f_n not in (50.0, 60.0):
            raise ValueError("f_n must be 50 or 60 Hz")


@dataclass(frozen=True)
class SwingState:
    delta_f: float = 0.0  # Hz
    delta: float = 0.0  # rad
    p_mech: float = 0.0  # pu


@dataclass(frozen=True)
class EventSchedule:
    dip_start: float = 0.0
    dip_clear: float = 0.3
    dip_residual: float = 0.4

    def __post_init__(self) -> None:
        if not 0 <= self.dip_start < self.dip_clear:
            raise ValueError("need 0 <= dip_start < dip_clear")
        if not 0 < self.dip_residual < 1:
            raise ValueError("dip_residual must lie in (0, 1)")


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1e-3
    duration: float = 2.0

    def __post_init__(self) -> None:
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.duration >= 1.0:
            raise ValueError("duration must be at least 1 s")
        n = round(self.duration / self.dt)
        if abs(n * self.dt - self.duration) > 1e-9 * max(1.0, self.duration):
            raise ValueError("duration must be an integer number of steps")

    @property
    def steps(self) -> int:
        return round(self.duration / self.dt)


def _check_finite(*xs: float) -> None:
    for x in xs:
        if not math.isfinite(x):
            raise ValueError("non-finite input to swing_step")


def swing_step(state: SwingState, params: SwingParams, p_elec: float, dt: float) -> SwingState:
    """Heun (explicit trapezoidal) step of the aggregate swing equation.

    ``p_elec`` is held constant over the step.
    """
    _check_finite(state.delta_f, state.delta, state.p_mech, p_elec, dt)
    if not dt > 0:
        raise ValueError("dt must be positive")
    gain = params.f_n / (2.0 * params.h * params.s_sys)
    imbalance = state.p_mech - p_elec

    def dfdt(df: float) -> float:
        return gain * (imbalance - params.d * df / params.f_n)

    k1 = dfdt(state.delta_f)
    df_pred = state.delta_f + dt * k1
    k2 = dfdt(df_pred)
    delta_f = state.delta_f + 0.5 * dt * (k1 + k2)
    delta = state.delta + 0.5 * dt * TWO_PI * (state.delta_f + df_pred)
    return SwingState(delta_f=delta_f, delta=delta, p_mech=state.p_mech)


def apply_events(t: float, schedule: EventSchedule | None, nominal_emf: complex) -> complex:
    if schedule is not None and schedule.dip_start <= t < schedule.dip_clear:
        return nominal_emf * schedule.dip_residual
    return nominal_emf


@dataclass
class BusFrequencyTracker:
    f_n: float = 50.0
    tc: float = WASHOUT_TC
    prev_phasor: complex | None = None
    rate: float = 0.0  # filtered angle velocity, rad/s
    f_local: float = field(init=False)

    def __post_init__(self) -> None:
        self.f_local = self.f_n


def local_frequency(tracker: BusFrequencyTracker, bus_phasor: complex, system_f: float, dt: float) -> float:
    """System frequency plus the washed-out angle velocity of ``bus_phasor``.

    ``bus_phasor`` must be expressed in the machine's rotating frame.
    """
    if abs(bus_phasor) == 0:
        raise ValueError("zero-magnitude bus phasor (collapsed voltage)")
    if tracker.prev_phasor is None:
        tracker.prev_phasor = bus_phasor
    # angle of the ratio is the unwrapped increment in (-pi, pi]
    dtheta = cmath.phase(bus_phasor * tracker.prev_phasor.conjugate())
    alpha = -math.expm1(-dt / tracker.tc)
    tracker.rate += alpha * (dtheta / dt - tracker.rate)
    tracker.prev_phasor = bus_phasor
    tracker.f_local = system_f + tracker.rate / TWO_PI
    return tracker.f_local


@dataclass
class RunResult:
    """Recorded traces of one run; ``valid`` is False for aborted runs."""

    dt: float
    bus_names: dict[str, str]
    t: list[float] = field(default_factory=list)
    v: dict[str, list[float]] = field(default_factory=lambda: {p: [] for p in POSITIONS})
    f: dict[str, list[float]] = field(default_factory=lambda: {p: [] for p in POSITIONS})
    rocof: dict[str, list[float]] = field(default_factory=lambda: {p: [] for p in POSITIONS})
    relay: dict[str, list[bool]] = field(default_factory=lambda: {p: [] for p in POSITIONS})
    relay_trip_time: dict[str, float | None] = field(default_factory=lambda: {p: None for p in POSITIONS})
    delta_f: list[float] = field(default_factory=list)
    pv_p: list[float] = field(default_factory=list)
    pv_q: list[float] = field(default_factory=list)
    pv_mode: list[int] = field(default_factory=list)
    spec_digest: str = ""
    valid: bool = True
    error: str | None = None

    def __len__(self) -> int:
        return len(self.t)

    @property
    def relay_tripped(self) -> list[bool]:
        """Trip trace of the relay acting on the DG (PCC / end bus)."""
        return self.relay["end"]


class World:
    """Mutable plant state for one run. Build with ``init_world``."""

    def __init__(
        self,
        model: FeederModel,
        net: LinearNetwork,
        swing_params: SwingParams,
        swing: SwingState,
        schedule: EventSchedule | None,
        sim: SimConfig,
        inverter: InverterParams,
        relay_settings: RelaySettings,
        est_cfg: RocofEstimatorCfg,
        emf0: complex,
        pcc_voltage: complex,
        bus_voltages: np.ndarray,
        controller: InverterController | None = None,
    ):
        self.model = model
        self.net = net
        self.swing_params = swing_params
        self.swing = swing
        self.schedule = schedule
        self.sim = sim
        self.dt = sim.dt
        self.inverter = inverter
        self.relay_settings = relay_settings
        self.est_cfg = est_cfg
        self.emf0 = emf0
        self.pcc_voltage = pcc_voltage
        self.controller = controller
        self.k = 0
        self.tripped = False
        self.meas_idx = {p: model.index(b) for p, b in model.measurement_buses.as_dict().items()}
        self.trackers = {
            p: BusFrequencyTracker(f_n=swing_params.f_n, prev_phasor=complex(bus_voltages[i]))
            for p, i in self.meas_idx.items()
        }
        self.estimators = {p: RocofEstimatorState() for p in POSITIONS}
        # the plant has been in steady state before t = 0: start with a full window
        n_hist = int(round(est_cfg.window / sim.dt))
        for est in self.estimators.values():
            for j in range(n_hist, 0, -1):
                rocof_update(est, swing_params.f_n, -j * sim.dt, est_cfg)
        self.relays = {p: RelayState() for p in POSITIONS}
        self.last_f = swing_params.f_n
        self.last_rocof = 0.0
        self.result = RunResult(dt=sim.dt, bus_names=model.measurement_buses.as_dict())
        self.on_trip: Callable[[], None] | None = controller.trip if controller is not None else None

    @property
    def t(self) -> float:
        return self.k * self.dt

    def measure(self) -> MeasMsg:
        v = self.pcc_voltage
        return MeasMsg(
            seq=self.k,
            t=self.t,
            v_mag=abs(v),
            v_ang=cmath.phase(v),
            f_local=self.last_f,
            rocof=self.last_rocof,
        )

    def pv_current(self, meas: MeasMsg, cmd: CmdMsg) -> complex:
        if self.tripped or cmd.breaker_open:
            return 0j
        return complex(cmd.i_p_ref, -cmd.i_q_ref) * cmath.rect(1.0, meas.v_ang)

    def advance(self, meas: MeasMsg, cmd: CmdMsg) -> None:
        """Integrate one step using ``cmd`` (computed from ``meas``)."""
        if cmd.seq != self.k or meas.seq != self.k:
            raise ValueError(f"command for step {cmd.seq} applied at step {self.k}")
        limit = self.inverter.i_limit * (1 + 1e-9)
        if math.hypot(cmd.i_p_ref, cmd.i_q_ref) > limit:
            raise ValueError("commanded current exceeds the inverter limit")
        t = self.t
        dt = self.dt
        delta = self.swing.delta
        rot = cmath.rect(1.0, delta)
        emf = apply_events(t, self.schedule, self.emf0 * rot)
        i_pv = self.pv_current(meas, cmd)
        mode = InverterMode.ISOLATED if (self.tripped or cmd.breaker_open) else InverterMode(cmd.mode)
        v = self.net.voltages(emf, i_pv)
        i_src = complex(emf - v[0]) * self.net.y_source
        p_elec = float((emf * i_src.conjugate()).real)
        self.swing = swing_step(self.swing, self.swing_params, p_elec, dt)
        system_f = self.swing_params.f_n + self.swing.delta_f
        derot = rot.conjugate()
        res = self.result
        res.t.append(t)
        for p, idx in self.meas_idx.items():
            f = local_frequency(self.trackers[p], complex(v[idx]) * derot, system_f, dt)
            r = rocof_update(self.estimators[p], f, t, self.est_cfg)
            rs = relay_step(self.relays[p], r, dt, self.relay_settings, t=t)
            self.relays[p] = rs
            res.v[p].append(float(abs(v[idx])))
            res.f[p].append(f)
            res.rocof[p].append(r)
            res.relay[p].append(rs.tripped)
            res.relay_trip_time[p] = rs.trip_time
        v_pcc = complex(v[self.model.pv_index])
        s_pv = v_pcc * i_pv.conjugate()
        res.pv_p.append(s_pv.real)
        res.pv_q.append(s_pv.imag)
        res.pv_mode.append(int(mode))
        res.delta_f.append(self.swing.delta_f)
        self.last_f = res.f["end"][-1]
        self.last_rocof = res.rocof["end"][-1]
        self.pcc_voltage = v_pcc
        if self.relays["end"].tripped and not self.tripped:
            self.tripped = True
            if self.on_trip is not None:
                self.on_trip()
        self.k += 1


def controller_command(controller: InverterController, meas: MeasMsg) -> CmdMsg:
    """The control law as seen through the link: measurement in, command out."""
    i_p, i_q = controller.step(meas.v_mag, meas.t)
    mode = controller.state.mode
    return CmdMsg(
        seq=meas.seq,
        i_p_ref=i_p,
        i_q_ref=i_q,
        breaker_open=mode is InverterMode.ISOLATED,
        mode=int(mode),
    )


def step_system(world: World, dt: float | None = None) -> World:
    """One in-process step: measurement, controller (one-step delay), plant update."""
    if dt is not None and dt != world.dt:
        raise ValueError("world dt is fixed at initialization")
    if world.controller is None:
        raise ValueError("world has no in-process controller")
    meas = world.measure()
    world.advance(meas, controller_command(world.controller, meas))
    return world


def init_world(
    model: FeederModel,
    p_avail: float,
    load_scale: float,
    *,
    swing_params: SwingParams | None = None,
    schedule: EventSchedule | None = None,
    sim: SimConfig | None = None,
    inverter: InverterParams | None = None,
    relay_settings: RelaySettings | None = None,
    rocof_window: float = 0.1,
    emf0: complex = 1.0 + 0j,
    in_process: bool = True,
) -> World:
    """Steady-state initialization with the inverter in Normal mode.

    The sweep solution seeds the PCC voltage; the PV current is then iterated
    through the exact plant/controller arithmetic so that the first steps start
    from a fixed point of the discrete loop.
    """
    swing_params = swing_params or SwingParams()
    sim = sim or SimConfig()
    inverter = inverter or InverterParams()
    relay_settings = relay_settings or RelaySettings()
    p0 = min(max(p_avail, 0.0), inverter.s_rated)
    pf = init_power_flow(model, complex(p0, 0.0), load_scale, source_emf=emf0, pv_rating=inverter.s_rated)
    net = LinearNetwork(model, pf.load_admittances)
    state = InverterState(p_ref=p0)
    v_pcc = complex(pf.bus_voltages[model.pv_index])
    v = pf.bus_voltages
    for _ in range(200):
        i_ref = current_reference(state, abs(v_pcc), inverter, p_avail)
        i_pv = complex(i_ref.real, i_ref.imag) * cmath.rect(1.0, cmath.phase(v_pcc))
        v = net.voltages(emf0, i_pv)
        new = complex(v[model.pv_index])
        if new == v_pcc:
            break
        v_pcc = new
    i_src = complex(emf0 - v[0]) * net.y_source
    p_mech = float((emf0 * i_src.conjugate()).real)
    controller = InverterController(inverter, p_avail) if in_process else None
    return World(
        model=model,
        net=net,
        swing_params=swing_params,
        swing=SwingState(p_mech=p_mech),
        schedule=schedule,
        sim=sim,
        inverter=inverter,
        relay_settings=relay_settings,
        est_cfg=RocofEstimatorCfg(sample_dt=sim.dt, window=rocof_window),
        emf0=emf0,
        pcc_voltage=v_pcc,
        bus_voltages=v,
        controller=controller,
    )


def run_world(world: World, steps: int | None = None) -> RunResult:
    n = world.sim.steps if steps is None else steps
    for _ in range(n):
        step_system(world)
    return world.result
