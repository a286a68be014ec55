"""Three-phase unbalanced feeder model, JSON ingestion and connectivity queries.

Power quantities inside optimization problems are per-unit on a per-phase
base of ``base_kva / 3``; impedances use ``Z_base = 1000 kV_LL^2 / base_kva``,
which is the same number for the three-phase and the per-phase convention.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import networkx as nx
import numpy as np

from .errors import (
    DanglingReference,
    MissingBase,
    NonRadialCore,
    PhaseMismatch,
    SchemaError,
    UnknownSwitch,
)

PHASES = ("a", "b", "c")
PHASE_INDEX = {p: i for i, p in enumerate(PHASES)}

# unit phasors of the nominal a-b-c sequence
_ALPHA = np.exp(-2j * np.pi / 3 * np.arange(3))
_GAMMA = np.outer(_ALPHA, _ALPHA.conj())


def linearized_impedance(z):
    """Relative-phasor linearization of a 3x3 complex phase impedance matrix.

    Returns ``(R_hat, X_hat)`` such that the squared-voltage drop along the
    line is ``2 (R_hat P + X_hat Q)`` with per-phase flows ``P, Q``.
    """
    z = np.asarray(z, dtype=complex)
    r, x = z.real, z.imag
    g_re, g_im = _GAMMA.real, _GAMMA.imag
    return g_re * r + g_im * x, g_re * x - g_im * r


def to_per_unit(z_ohm, base_kva, base_kv):
    """Convert an impedance (scalar or matrix) from ohms to per-unit."""
    if base_kva is None or base_kv is None or base_kva <= 0 or base_kv <= 0:
        raise MissingBase("per-unit conversion needs positive base_kva and base_kv")
    return np.asarray(z_ohm, dtype=float) * base_kva / (1000.0 * base_kv**2)


def to_ohms(z_pu, base_kva, base_kv):
    if base_kva is None or base_kv is None or base_kva <= 0 or base_kv <= 0:
        raise MissingBase("ohmic conversion needs positive base_kva and base_kv")
    return np.asarray(z_pu, dtype=float) * 1000.0 * base_kv**2 / base_kva


@dataclass(frozen=True)
class Bus:
    id: str
    phases: tuple
    vmin2: float = 0.95**2
    vmax2: float = 1.05**2


@dataclass(frozen=True)
class Ramp:
    mls_kw: float
    sens_kw_per_hz: float
    f_nadir: float
    f_min: float

    @property
    def step_kw(self):
        """Growth of the maximum load step per stage."""
        return self.sens_kw_per_hz * (self.f_nadir - self.f_min)


@dataclass(frozen=True, eq=False)
class Line:
    id: str
    from_bus: str
    to_bus: str
    phases: tuple
    r_ohm: np.ndarray
    x_ohm: np.ndarray
    pmax_kw: float
    qmax_kvar: float
    is_switch: bool = False
    r_hat: np.ndarray = field(default=None, repr=False)
    x_hat: np.ndarray = field(default=None, repr=False)


@dataclass(frozen=True)
class Ibr:
    id: str
    bus: str
    kind: str  # GFL | GFM
    phases: tuple
    pmax_kw: float
    qmax_kvar: float
    ramp: Ramp | None = None

    @property
    def is_gfm(self):
        return self.kind == "GFM"


@dataclass(frozen=True)
class LoadPoint:
    id: str
    bus: str
    phases: tuple
    kw: float
    weight: float = 1.0
    profile: str = ""
    load_type: str = "residential"
    attacked: bool = False
    power_factor: float = 0.95


class Feeder:
    """Validated, immutable-by-convention feeder."""

    def __init__(self, buses, lines, ibrs, loads, base_kva, base_kv, name=""):
        self.name = name
        self.base_kva = float(base_kva)
        self.base_kv = float(base_kv)
        buses = list(buses)
        if len({b.id for b in buses}) != len(buses):
            raise SchemaError("duplicate bus ids")
        self.buses = {b.id: b for b in buses}
        self.lines = list(lines)
        self.ibrs = list(ibrs)
        self.loads = list(loads)
        self._line = {ln.id: ln for ln in self.lines}
        self._validate()
        self._core = nx.Graph()
        self._core.add_nodes_from(self.buses)
        for ln in self.lines:
            if not ln.is_switch:
                self._core.add_edge(ln.from_bus, ln.to_bus, line=ln.id)
        if not nx.is_forest(self._core):
            raise NonRadialCore("non-switch lines contain a cycle")
        comps = sorted(
            (sorted(c, key=self.bus_order) for c in nx.connected_components(self._core)),
            key=lambda c: self.bus_order(c[0]),
        )
        self.zones = [tuple(c) for c in comps]
        self.zone_of = {b: z for z, comp in enumerate(self.zones) for b in comp}

    # -- lookups ----------------------------------------------------------
    def line(self, line_id) -> Line:
        return self._line[line_id]

    @property
    def switches(self):
        return [ln for ln in self.lines if ln.is_switch]

    @property
    def gfms(self):
        return [g for g in self.ibrs if g.is_gfm]

    @property
    def gfls(self):
        return [g for g in self.ibrs if not g.is_gfm]

    @property
    def phase_base_kw(self):
        return self.base_kva / 3.0

    def kw_to_pu(self, kw):
        return kw / self.phase_base_kw

    def pu_to_kw(self, pu):
        return pu * self.phase_base_kw

    def load(self, load_id) -> LoadPoint:
        for ld in self.loads:
            if ld.id == load_id:
                return ld
        raise KeyError(load_id)

    # -- validation -------------------------------------------------------
    def _validate(self):
        self._order = {b: i for i, b in enumerate(self.buses)}
        for b in self.buses.values():
            if not set(b.phases) <= set(PHASES) or not b.phases:
                raise SchemaError(f"bus {b.id} has invalid phases {b.phases}")
            if not 0 < b.vmin2 < b.vmax2:
                raise SchemaError(f"bus {b.id} needs 0 < vmin2 < vmax2")
        seen = set()
        for ln in self.lines:
            if ln.id in seen:
                raise SchemaError(f"duplicate line id {ln.id}")
            seen.add(ln.id)
            for end in (ln.from_bus, ln.to_bus):
                if end not in self.buses:
                    raise DanglingReference(f"line {ln.id} references missing bus {end}")
                if not set(ln.phases) <= set(self.buses[end].phases):
                    raise PhaseMismatch(f"line {ln.id} phases {ln.phases} not on bus {end}")
            if ln.pmax_kw <= 0 or ln.qmax_kvar <= 0:
                raise SchemaError(f"line {ln.id} needs positive limits")
            off = [PHASE_INDEX[p] for p in PHASES if p not in ln.phases]
            for m in (ln.r_ohm, ln.x_ohm):
                if np.any(m[off, :] != 0) or np.any(m[:, off] != 0):
                    raise PhaseMismatch(f"line {ln.id} has impedance outside its phases")
        ids = set()
        for g in self.ibrs:
            if g.id in ids:
                raise SchemaError(f"duplicate IBR id {g.id}")
            ids.add(g.id)
            if g.bus not in self.buses:
                raise DanglingReference(f"IBR {g.id} at missing bus {g.bus}")
            if not set(g.phases) <= set(self.buses[g.bus].phases):
                raise PhaseMismatch(f"IBR {g.id} phases not on bus {g.bus}")
            if g.kind not in ("GFL", "GFM"):
                raise SchemaError(f"IBR {g.id} has unknown kind {g.kind}")
            if g.pmax_kw <= 0 or g.qmax_kvar <= 0:
                raise SchemaError(f"IBR {g.id} needs positive capacities")
            if g.is_gfm:
                if g.ramp is None:
                    raise SchemaError(f"GFM {g.id} needs ramp data")
                if g.ramp.f_nadir < g.ramp.f_min:
                    raise SchemaError(f"GFM {g.id} has f_nadir below f_min")
        ids = set()
        for ld in self.loads:
            if ld.id in ids:
                raise SchemaError(f"duplicate load id {ld.id}")
            ids.add(ld.id)
            if ld.bus not in self.buses:
                raise DanglingReference(f"load {ld.id} at missing bus {ld.bus}")
            if not set(ld.phases) <= set(self.buses[ld.bus].phases):
                raise PhaseMismatch(f"load {ld.id} phases not on bus {ld.bus}")
            if ld.weight <= 0 or ld.kw < 0:
                raise SchemaError(f"load {ld.id} needs positive weight and non-negative kW")
            if ld.load_type not in ("residential", "commercial"):
                raise SchemaError(f"load {ld.id} has unknown type {ld.load_type}")

    def bus_order(self, bus_id):
        return self._order[bus_id]

    # -- connectivity -----------------------------------------------------
    def energized_subgraph(self, closed_switches=(), energized_sources=()):
        """Buses reachable from ``energized_sources`` via core lines and closed switches."""
        g = self._core.copy()
        for sid in closed_switches:
            ln = self._line.get(sid)
            if ln is None or not ln.is_switch:
                raise UnknownSwitch(f"{sid!r} is not a switch")
            g.add_edge(ln.from_bus, ln.to_bus, line=sid)
        out = set()
        for src in energized_sources:
            if src not in g:
                raise DanglingReference(f"source bus {src!r} not in feeder")
            if src not in out:
                out |= nx.node_connected_component(g, src)
        return out

    def islands(self, closed_switches=(), energized_sources=()):
        """Energized connected components, ordered by their lowest bus."""
        energized = self.energized_subgraph(closed_switches, energized_sources)
        g = self._core.subgraph(energized).copy()
        for sid in closed_switches:
            ln = self._line[sid]
            g.add_edge(ln.from_bus, ln.to_bus, line=sid)
        comps = [set(c) for c in nx.connected_components(g)]
        return sorted(comps, key=lambda c: min(self._order[b] for b in c))

    def energized_lines(self, buses, closed_switches=()):
        closed = set(closed_switches)
        return [
            ln
            for ln in self.lines
            if ln.from_bus in buses
            and ln.to_bus in buses
            and (not ln.is_switch or ln.id in closed)
        ]

    # -- serialization ----------------------------------------------------
    def to_dict(self):
        def mat(m):
            return [[float(v) for v in row] for row in m]

        return {
            "name": self.name,
            "base": {"kva": self.base_kva, "kv": self.base_kv},
            "buses": [
                {"id": b.id, "phases": "".join(b.phases), "vmin2": b.vmin2, "vmax2": b.vmax2}
                for b in self.buses.values()
            ],
            "lines": [
                {
                    "id": ln.id,
                    "from": ln.from_bus,
                    "to": ln.to_bus,
                    "phases": "".join(ln.phases),
                    "r_ohm": mat(ln.r_ohm),
                    "x_ohm": mat(ln.x_ohm),
                    "pmax_kw": ln.pmax_kw,
                    "qmax_kvar": ln.qmax_kvar,
                    "switch": ln.is_switch,
                }
                for ln in self.lines
            ],
            "ibrs": [
                {
                    "id": g.id,
                    "bus": g.bus,
                    "kind": g.kind,
                    "phases": "".join(g.phases),
                    "pmax_kw": g.pmax_kw,
                    "qmax_kvar": g.qmax_kvar,
                    **(
                        {
                            "ramp": {
                                "mls_kw": g.ramp.mls_kw,
                                "sens_kw_per_hz": g.ramp.sens_kw_per_hz,
                                "f_nadir": g.ramp.f_nadir,
                                "f_min": g.ramp.f_min,
                            }
                        }
                        if g.ramp
                        else {}
                    ),
                }
                for g in self.ibrs
            ],
            "loads": [
                {
                    "id": ld.id,
                    "bus": ld.bus,
                    "phases": "".join(ld.phases),
                    "kw": ld.kw,
                    "weight": ld.weight,
                    "profile": ld.profile,
                    "type": ld.load_type,
                    "attacked": ld.attacked,
                    "pf": ld.power_factor,
                }
                for ld in self.loads
            ],
        }


def _phases(value, where):
    phases = tuple(p for p in PHASES if p in str(value).lower())
    if not phases or len(phases) != len(str(value)):
        raise SchemaError(f"{where}: invalid phase string {value!r}")
    return phases


def _matrix(value, where):
    m = np.asarray(value, dtype=float)
    if m.shape != (3, 3) or not np.all(np.isfinite(m)):
        raise SchemaError(f"{where}: impedance must be a finite 3x3 matrix")
    return m


def feeder_from_dict(doc: dict) -> Feeder:
    try:
        base = doc["base"]
        kva, kv = float(base["kva"]), float(base["kv"])
        buses = [
            Bus(
                str(b["id"]),
                _phases(b["phases"], f"bus {b['id']}"),
                float(b.get("vmin2", 0.95**2)),
                float(b.get("vmax2", 1.05**2)),
            )
            for b in doc["buses"]
        ]
        lines = []
        for d in doc["lines"]:
            where = f"line {d['id']}"
            r = _matrix(d["r_ohm"], where)
            x = _matrix(d["x_ohm"], where)
            r_pu, x_pu = to_per_unit(r, kva, kv), to_per_unit(x, kva, kv)
            r_hat, x_hat = linearized_impedance(r_pu + 1j * x_pu)
            lines.append(
                Line(
                    str(d["id"]),
                    str(d["from"]),
                    str(d["to"]),
                    _phases(d["phases"], where),
                    r,
                    x,
                    float(d["pmax_kw"]),
                    float(d["qmax_kvar"]),
                    bool(d.get("switch", False)),
                    r_hat,
                    x_hat,
                )
            )
        ibrs = []
        for d in doc.get("ibrs", []):
            ramp = d.get("ramp")
            ibrs.append(
                Ibr(
                    str(d["id"]),
                    str(d["bus"]),
                    str(d["kind"]).upper(),
                    _phases(d["phases"], f"ibr {d['id']}"),
                    float(d["pmax_kw"]),
                    float(d["qmax_kvar"]),
                    Ramp(
                        float(ramp["mls_kw"]),
                        float(ramp["sens_kw_per_hz"]),
                        float(ramp["f_nadir"]),
                        float(ramp["f_min"]),
                    )
                    if ramp
                    else None,
                )
            )
        loads = [
            LoadPoint(
                str(d["id"]),
                str(d["bus"]),
                _phases(d["phases"], f"load {d['id']}"),
                float(d.get("kw", 0.0)),
                float(d.get("weight", 1.0)),
                str(d.get("profile", "")),
                str(d.get("type", "residential")),
                bool(d.get("attacked", False)),
                float(d.get("pf", 0.95)),
            )
            for d in doc.get("loads", [])
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"feeder document malformed: {exc!r}") from exc
    return Feeder(buses, lines, ibrs, loads, kva, kv, name=str(doc.get("name", "")))


def load_feeder(path) -> Feeder:
    with open(path) as fh:
        return feeder_from_dict(json.load(fh))


def save_feeder(feeder: Feeder, path):
    Path(path).write_text(json.dumps(feeder.to_dict(), indent=1))


def bundled_feeder_path() -> Path:
    return Path(__file__).parent / "data" / "ieee123_modified.json"


def load_bundled_feeder() -> Feeder:
    return load_feeder(bundled_feeder_path())


def tan_phi(power_factor: float) -> float:
    return math.tan(math.acos(power_factor))
