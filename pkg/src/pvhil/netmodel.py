"""Radial MV feeder in per-unit: model construction, steady-state sweep, transient solve.

Conventions
-----------
* Phasors are positive-sequence, per-unit on ``PerUnitBase``.
* The source is an EMF behind ``source_impedance`` feeding the first bus.
* Injected complex power is positive when power flows *into* the network.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

SWEEP_TOL = 1e-10
MAX_SWEEPS = 100

DEFAULT_FEEDER = Path(__file__).parent / "feeders" / "cyprus_synthetic.json"


class FeederError(ValueError):
    """Invalid feeder description."""


class ConvergenceError(RuntimeError):
    """Backward/forward sweep did not converge (usually infeasible loading)."""


class SingularNetworkError(RuntimeError):
    """Nodal admittance matrix cannot be inverted."""


@dataclass(frozen=True)
class PerUnitBase:
    s_base: float  # VA
    v_base: float  # V, line-to-line

    def __post_init__(self) -> None:
        if not (self.s_base > 0 and self.v_base > 0):
            raise FeederError(f"base quantities must be positive, got {self.s_base}, {self.v_base}")

    @property
    def z_base(self) -> float:
        return self.v_base**2 / self.s_base

    @property
    def i_base(self) -> float:
        return self.s_base / (math.sqrt(3.0) * self.v_base)


@dataclass(frozen=True)
class Branch:
    from_bus: str
    to_bus: str
    r_per_km: float
    x_per_km: float
    length_km: float

    def __post_init__(self) -> None:
        if self.length_km < 0 or self.r_per_km < 0 or not self.x_per_km > 0:
            raise FeederError(f"invalid branch parameters on {self.from_bus}-{self.to_bus}")

    def impedance_pu(self, base: PerUnitBase) -> complex:
        return complex(self.r_per_km, self.x_per_km) * self.length_km / base.z_base


@dataclass(frozen=True)
class LoadSpec:
    bus: str
    p_nominal: float  # pu
    power_factor: float

    def __post_init__(self) -> None:
        if self.p_nominal < 0:
            raise FeederError(f"negative load at {self.bus}")
        if not 0 < self.power_factor <= 1:
            raise FeederError(f"power factor out of (0, 1] at {self.bus}")

    @property
    def q_nominal(self) -> float:
        # lagging: consumes reactive power
        return self.p_nominal * math.tan(math.acos(self.power_factor))

    @property
    def s_nominal(self) -> complex:
        return complex(self.p_nominal, self.q_nominal)


@dataclass(frozen=True)
class MeasurementBuses:
    start: str
    middle: str
    end: str

    def as_dict(self) -> dict[str, str]:
        return {"start": self.start, "middle": self.middle, "end": self.end}


@dataclass(frozen=True)
class FeederModel:
    base: PerUnitBase
    buses: tuple[str, ...]
    branches: tuple[Branch, ...]
    loads: tuple[LoadSpec, ...]
    pv_bus: str
    source_impedance: complex
    measurement_buses: MeasurementBuses
    name: str = "feeder"
    # cumulative line-length multiplier; kept separate so that scalings compose exactly
    length_factor: float = 1.0
    # derived topology, rebuilt on construction
    parent: tuple[int, ...] = field(init=False, repr=False, compare=False)
    order: tuple[int, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        parent, order = _tree_topology(self.buses, self.branches)
        object.__setattr__(self, "parent", parent)
        object.__setattr__(self, "order", order)
        names = set(self.buses)
        if self.pv_bus not in names:
            raise FeederError(f"pv_bus {self.pv_bus!r} is not a bus")
        for b in self.measurement_buses.as_dict().values():
            if b not in names:
                raise FeederError(f"measurement bus {b!r} is not a bus")
        for ld in self.loads:
            if ld.bus not in names:
                raise FeederError(f"load references unknown bus {ld.bus!r}")
        if not self.length_factor > 0:
            raise FeederError("length factor must be positive")
        zs = self.source_impedance
        if not (zs.real > 0 and zs.imag > 0):
            raise FeederError("source impedance needs positive real and imaginary parts")

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    def index(self, bus: str) -> int:
        return self.buses.index(bus)

    @property
    def pv_index(self) -> int:
        return self.index(self.pv_bus)

    @property
    def effective_branches(self) -> tuple[Branch, ...]:
        """Branches with ``length_factor`` applied to their lengths."""
        if self.length_factor == 1.0:
            return self.branches
        return tuple(replace(br, length_km=br.length_km * self.length_factor) for br in self.branches)

    def branch_impedances(self) -> np.ndarray:
        return np.array([br.impedance_pu(self.base) for br in self.effective_branches], dtype=complex)

    def load_powers(self, scale: float = 1.0) -> np.ndarray:
        s = np.zeros(self.n_bus, dtype=complex)
        for ld in self.loads:
            s[self.index(ld.bus)] += scale * ld.s_nominal
        return s

    def path_to(self, bus: str) -> list[str]:
        """Buses from the source to ``bus`` inclusive."""
        k = self.index(bus)
        path = [k]
        while self.parent[k] >= 0:
            k = self.parent[k]
            path.append(k)
        return [self.buses[i] for i in reversed(path)]


def _tree_topology(
    buses: Sequence[str], branches: Sequence[Branch]
) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Parent index per bus (-1 at the source) and a BFS order from the source.

    Branch ``k`` always connects ``parent[child]`` to ``child`` where ``child``
    is ``branch_child[k]``; the orientation in the file does not matter.
    """
    if len(set(buses)) != len(buses):
        raise FeederError("duplicate bus names")
    if not buses:
        raise FeederError("feeder has no buses")
    idx = {b: i for i, b in enumerate(buses)}
    adj: list[list[int]] = [[] for _ in buses]
    for br in branches:
        if br.from_bus not in idx or br.to_bus not in idx:
            raise FeederError(f"branch {br.from_bus}-{br.to_bus} references an unknown bus")
        if br.from_bus == br.to_bus:
            raise FeederError(f"self-loop at {br.from_bus}")
        adj[idx[br.from_bus]].append(idx[br.to_bus])
        adj[idx[br.to_bus]].append(idx[br.from_bus])
    parent = [-2] * len(buses)
    parent[0] = -1
    order = []
    queue = deque([0])
    while queue:
        k = queue.popleft()
        order.append(k)
        for j in adj[k]:
            if parent[j] == -2:
                parent[j] = k
                queue.append(j)
            elif j != parent[k]:
                raise FeederError("branch cycle: topology is not a tree")
    if len(order) != len(buses):
        missing = [buses[i] for i, p in enumerate(parent) if p == -2]
        raise FeederError(f"disconnected buses: {missing}")
    if len(branches) != len(buses) - 1:
        raise FeederError(
            f"radial feeder with {len(buses)} buses needs {len(buses) - 1} branches, got {len(branches)}"
        )
    return tuple(parent), tuple(order)


def _branch_children(model: FeederModel) -> list[int]:
    """Index of the downstream bus of each branch."""
    out = []
    for br in model.branches:
        a, b = model.index(br.from_bus), model.index(br.to_bus)
        out.append(b if model.parent[b] == a else a)
    return out


def _resolve_measurement_buses(buses: Sequence[str], branches: Sequence[Branch], pv_bus: str) -> MeasurementBuses:
    parent, _ = _tree_topology(buses, branches)
    k = list(buses).index(pv_bus)
    path = [k]
    while parent[k] >= 0:
        k = parent[k]
        path.append(k)
    path.reverse()
    if len(path) < 2:
        raise FeederError("pv_bus must not be the source bus")
    return MeasurementBuses(
        start=buses[path[1]],
        middle=buses[path[len(path) // 2]],
        end=buses[path[-1]],
    )


def build_feeder(raw: Mapping[str, Any]) -> FeederModel:
    """Validate a feeder description (the JSON document shape) into a ``FeederModel``.

    Measurement buses resolve to the first bus after the source, the middle
    bus of the source-to-PV path and the PV bus itself.
    """
    try:
        bases = raw["bases"]
        base = PerUnitBase(float(bases["s_base_mva"]) * 1e6, float(bases["v_base_kv"]) * 1e3)
        buses = tuple(str(b) for b in raw["buses"])
        source_bus = str(raw.get("source_bus", buses[0] if buses else ""))
        if buses and buses[0] != source_bus:
            if source_bus not in buses:
                raise FeederError(f"source bus {source_bus!r} is not a bus")
            buses = (source_bus,) + tuple(b for b in buses if b != source_bus)
        branches = tuple(
            Branch(
                from_bus=str(b["from"]),
                to_bus=str(b["to"]),
                r_per_km=float(b["r_per_km"]),
                x_per_km=float(b["x_per_km"]),
                length_km=float(b["length_km"]),
            )
            for b in raw["branches"]
        )
        s_mva = base.s_base / 1e6
        loads = tuple(
            LoadSpec(bus=str(ld["bus"]), p_nominal=float(ld["p_mw"]) / s_mva, power_factor=float(ld["pf"]))
            for ld in raw.get("loads", [])
        )
        pv_bus = str(raw["pv_bus"])
        zs_raw = raw.get("source_impedance_pu", [0.02, 0.08])
        zs = complex(float(zs_raw[0]), float(zs_raw[1]))
    except KeyError as exc:
        raise FeederError(f"missing field {exc.args[0]!r}") from None
    except (TypeError, IndexError) as exc:
        raise FeederError(f"malformed feeder description: {exc}") from None
    if pv_bus not in buses:
        raise FeederError(f"pv_bus {pv_bus!r} is not a bus")
    meas = _resolve_measurement_buses(buses, branches, pv_bus)
    return FeederModel(
        base=base,
        buses=buses,
        branches=branches,
        loads=loads,
        pv_bus=pv_bus,
        source_impedance=zs,
        measurement_buses=meas,
        name=str(raw.get("name", "feeder")),
    )


def load_feeder(path: str | Path = DEFAULT_FEEDER) -> FeederModel:
    with open(path, encoding="utf-8") as fh:
        return build_feeder(json.load(fh))


def scale_line_length(model: FeederModel, factor: float) -> FeederModel:
    if not factor > 0:
        raise ValueError(f"line length factor must be positive, got {factor}")
    return replace(model, length_factor=model.length_factor * factor)


@dataclass(frozen=True)
class NetworkSolution:
    bus_voltages: np.ndarray
    branch_currents: np.ndarray  # parent -> child direction, ordered as model.branches
    injections: np.ndarray  # net complex power injected into the network at each bus
    source_emf: complex
    source_current: complex  # EMF -> first bus
    load_admittances: np.ndarray
    iterations: int = 0

    @property
    def source_power(self) -> complex:
        """Complex power delivered by the source EMF (includes source impedance losses)."""
        return self.source_emf * self.source_current.conjugate()


def power_balance_residual(model: FeederModel, sol: NetworkSolution) -> np.ndarray:
    """Per-bus |S_injected - S_leaving_through_branches| from the branch currents."""
    children = _branch_children(model)
    out_current = np.zeros(model.n_bus, dtype=complex)
    for k, child in enumerate(children):
        out_current[model.parent[child]] += sol.branch_currents[k]
        out_current[child] -= sol.branch_currents[k]
    return np.abs(sol.injections - sol.bus_voltages * np.conj(out_current))


def init_power_flow(
    model: FeederModel,
    pv_power: complex,
    load_scale: float,
    source_emf: complex = 1.0 + 0j,
    pv_rating: float | None = None,
) -> NetworkSolution:
    """Backward/forward sweep with constant-power loads and a PQ PV injection.

    The returned ``load_admittances`` freeze each load to the constant
    impedance that draws its scheduled power at the solved voltage.
    """
    if load_scale < 0:
        raise ValueError("load_scale must be non-negative")
    if pv_rating is not None and abs(pv_power) > pv_rating * (1 + 1e-12):
        raise ValueError(f"|pv_power| = {abs(pv_power):.4g} exceeds inverter rating {pv_rating:.4g}")
    n = model.n_bus
    z = model.branch_impedances()
    children = _branch_children(model)
    branch_of = {child: k for k, child in enumerate(children)}
    s_load = model.load_powers(load_scale)
    s_net = -s_load.copy()
    s_net[model.pv_index] += pv_power
    zs = model.source_impedance

    v = np.full(n, complex(source_emf), dtype=complex)
    order = model.order
    for it in range(1, MAX_SWEEPS + 1):
        # backward: accumulate currents drawn at each bus towards the source
        i_bus = -np.conj(s_net / v)
        i_branch = np.zeros(len(children), dtype=complex)
        acc = i_bus.copy()
        for k in reversed(order[1:]):
            i_branch[branch_of[k]] = acc[k]
            acc[model.parent[k]] += acc[k]
        i_source = acc[0]
        # forward: voltage drops from the source EMF
        v_new = np.empty_like(v)
        v_new[0] = source_emf - zs * i_source
        for k in order[1:]:
            v_new[k] = v_new[model.parent[k]] - z[branch_of[k]] * i_branch[branch_of[k]]
        delta = np.max(np.abs(v_new - v))
        v = v_new
        if delta < SWEEP_TOL:
            break
    else:
        raise ConvergenceError(f"sweep did not converge in {MAX_SWEEPS} iterations (infeasible loading?)")

    # recompute currents at the converged voltages so that KCL closes exactly
    i_bus = -np.conj(s_net / v)
    i_branch = np.zeros(len(children), dtype=complex)
    acc = i_bus.copy()
    for k in reversed(order[1:]):
        i_branch[branch_of[k]] = acc[k]
        acc[model.parent[k]] += acc[k]
    injections = s_net.copy()
    i_source = acc[0]
    injections[0] += v[0] * np.conj(i_source)
    y_load = np.conj(s_load) / np.abs(v) ** 2
    return NetworkSolution(
        bus_voltages=v,
        branch_currents=i_branch,
        injections=injections,
        source_emf=complex(source_emf),
        source_current=complex(i_source),
        load_admittances=y_load,
        iterations=it,
    )


class LinearNetwork:
    """Constant-impedance network with two independent sources: the EMF and the PV current.

    The bus impedance columns for both injection points are precomputed, so each
    solve is a fixed linear combination and superposition holds to rounding.
    """

    def __init__(self, model: FeederModel, load_admittances: np.ndarray):
        self.model = model
        n = model.n_bus
        self.z = model.branch_impedances()
        self.children = _branch_children(model)
        self.load_admittances = np.asarray(load_admittances, dtype=complex).copy()
        if self.load_admittances.shape != (n,):
            raise ValueError(f"expected {n} load admittances")
        y = np.zeros((n, n), dtype=complex)
        for k, child in enumerate(self.children):
            p = model.parent[child]
            yb = 1.0 / self.z[k] if self.z[k] != 0 else np.inf
            y[p, p] += yb
            y[child, child] += yb
            y[p, child] -= yb
            y[child, p] -= yb
        self.y_source = 1.0 / model.source_impedance
        y[0, 0] += self.y_source
        y[np.diag_indices(n)] += self.load_admittances
        if not np.all(np.isfinite(y)):
            raise SingularNetworkError("zero-impedance branch")
        self.y_bus = y
        rhs = np.zeros((n, 2), dtype=complex)
        rhs[0, 0] = 1.0
        rhs[model.pv_index, 1] = 1.0
        try:
            cols = np.linalg.solve(y, rhs)
        except np.linalg.LinAlgError as exc:
            raise SingularNetworkError(str(exc)) from None
        if not np.all(np.isfinite(cols)) or np.linalg.cond(y) > 1e14:
            raise SingularNetworkError("nodal admittance matrix is singular")
        self._z_src = cols[:, 0]
        self._z_pv = cols[:, 1]

    def voltages(self, source_emf: complex, pv_current: complex) -> np.ndarray:
        return self._z_src * (source_emf * self.y_source) + self._z_pv * pv_current

    def solve(self, source_emf: complex, pv_current: complex) -> NetworkSolution:
        model = self.model
        v = self.voltages(source_emf, pv_current)
        i_branch = np.array(
            [(v[model.parent[c]] - v[c]) / self.z[k] for k, c in enumerate(self.children)], dtype=complex
        )
        i_source = (source_emf - v[0]) * self.y_source
        inj = -np.conj(self.load_admittances) * np.abs(v) ** 2
        inj[0] += v[0] * np.conj(i_source)
        inj[model.pv_index] += v[model.pv_index] * np.conj(pv_current)
        return NetworkSolution(
            bus_voltages=v,
            branch_currents=i_branch,
            injections=inj,
            source_emf=complex(source_emf),
            source_current=complex(i_source),
            load_admittances=self.load_admittances,
        )


def solve_network(
    model: FeederModel, source_emf: complex, pv_current: complex, load_admittances: np.ndarray
) -> NetworkSolution:
    """One-shot linear solve; build a ``LinearNetwork`` once when stepping repeatedly."""
    return LinearNetwork(model, load_admittances).solve(source_emf, pv_current)
