"""Staged restoration planning as a MILP over forecast loads.

Formulation (stage ``s = 1..T``):

* zones are the components of the feeder joined by non-switch lines; a zone
  holding a GFM is energized from stage 1, any other zone is energized at
  stage ``s`` only through a switch closed at ``s`` whose far side was already
  energized at ``s - 1`` (one switching hop per stage);
* closed switches equal the number of energized non-GFM zones, which keeps
  every island a tree around exactly one grid-forming source;
* loads, zones and switches never revert;
* per-phase active/reactive balance, line limits, LinDistFlow voltage drop
  (big-M relaxed on de-energized lines) and voltage bounds;
* GFM output within capacity, with stage-to-stage changes bounded by the
  maximum load step; GFL output within capacity and recorded as setpoints;
* a load picked up at stage ``p`` draws its CLPU-inflated forecast at every
  later stage.

The objective is the weighted restored forecast energy.  A small penalty on
GFL output breaks dispatch ties toward the grid-forming units.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .clpu import clpu_multiplier, lookup_params, time_of_day
from .errors import Infeasible, NodeLimitReached, ShapeMismatch
from .feeder import PHASE_INDEX, Feeder, tan_phi
from .lp import MilpProblem, solve_milp


@dataclass
class PlannerInput:
    feeder: Feeder
    stages: int
    load_forecasts: dict  # load id -> per-stage kW (sum over the load's phases)
    stage_minutes: float = 60.0
    start_hour: float = 8.0
    clpu_enabled: bool = True
    voltage_constraints: bool = True
    gfl_penalty: float = 1e-3  # objective units per kW of GFL output
    voltage_penalty: float = 0.1  # objective units per squared-pu deviation from 1
    v_ref: float = 1.0
    backend: str = "auto"
    node_limit: int = 20_000

    def __post_init__(self):
        if self.stages < 1:
            raise ShapeMismatch("need at least one stage")
        for ld in self.feeder.loads:
            f = self.load_forecasts.get(ld.id)
            if f is None or len(f) != self.stages:
                raise ShapeMismatch(f"load {ld.id} needs a forecast for each of {self.stages} stages")


def stage_hour(start_hour, stage, stage_minutes=60.0):
    """Clock hour at the start of 1-based ``stage``."""
    return (start_hour + (stage - 1) * stage_minutes / 60.0) % 24


def clpu_demand_table(load, p0, start_hour, stage_minutes, enabled=True):
    """``D[p, s]``: kW drawn at stage ``s`` by ``load`` if picked up at ``p`` (0-based)."""
    T = len(p0)
    D = np.zeros((T, T))
    for p in range(T):
        a, tau = lookup_params(load.load_type, time_of_day(stage_hour(start_hour, p + 1, stage_minutes)))
        for s in range(p, T):
            mult = clpu_multiplier(a, tau, (s - p) * stage_minutes) if enabled else 1.0
            D[p, s] = p0[s] * mult
    return D


def mls_schedule(ramp, stages, f_nadir=None):
    """Maximum load step (kW per phase) available at each 1-based stage >= 2.

    ``f_nadir`` may be a scalar or a per-stage sequence overriding the feeder.
    """
    out = {}
    mls = ramp.mls_kw
    for s in range(2, stages + 1):
        if s > 2:
            fn = ramp.f_nadir
            if f_nadir is not None:
                fn = f_nadir[s - 1] if np.ndim(f_nadir) else f_nadir
            mls += ramp.sens_kw_per_hz * (fn - ramp.f_min)
        out[s] = max(mls, 0.0)
    return out


@dataclass
class PlanStage:
    stage: int
    closed_switches: list
    energized_buses: list
    restored_loads: list
    restored_ibrs: list
    gfl_setpoints: dict  # ibr -> phase -> [P kW, Q kvar]
    gfm_dispatch: dict
    load_demand: dict  # load -> phase -> [P kW, Q kvar] as seen by the planner
    flows: dict = field(default_factory=dict)  # line -> phase -> [P kW, Q kvar]
    voltages: dict = field(default_factory=dict)  # bus -> phase -> squared pu


@dataclass
class RestorationPlan:
    feeder_name: str
    stage_minutes: float
    start_hour: float
    clpu_enabled: bool
    stages: list
    objective: float = 0.0
    pickup: dict = field(default_factory=dict)  # load -> 1-based stage

    @property
    def horizon(self):
        return len(self.stages)

    def to_dict(self):
        return {
            "feeder": self.feeder_name,
            "stage_minutes": self.stage_minutes,
            "start_hour": self.start_hour,
            "clpu_enabled": self.clpu_enabled,
            "objective": self.objective,
            "pickup": self.pickup,
            "stages": [copy.deepcopy(st.__dict__) for st in self.stages],
        }

    @classmethod
    def from_dict(cls, doc):
        stages = [PlanStage(**copy.deepcopy(st)) for st in doc["stages"]]
        return cls(
            doc["feeder"],
            doc["stage_minutes"],
            doc["start_hour"],
            doc["clpu_enabled"],
            stages,
            doc.get("objective", 0.0),
            dict(doc.get("pickup", {})),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------


class _Model:
    """Variable bookkeeping for the planning MILP."""

    def __init__(self, inp: PlannerInput):
        self.inp = inp
        self.f = inp.feeder
        self.T = inp.stages
        self.prob = MilpProblem(sense="max")
        self.v = {}

    def var(self, key, lo=0.0, hi=math.inf, binary=False):
        name = "|".join(map(str, key))
        idx = self.prob.add_var(name, lo, hi, binary=binary)
        self.v[key] = idx
        return idx

    def build(self):
        inp, f, T = self.inp, self.f, self.T
        P = self.prob
        pu = f.kw_to_pu
        gfm_zones = {f.zone_of[g.bus] for g in f.gfms}
        self.gfm_zones = gfm_zones
        sw_zone = {}
        for ln in f.switches:
            za, zb = f.zone_of[ln.from_bus], f.zone_of[ln.to_bus]
            sw_zone[ln.id] = (za, zb)
        self.sw_zone = sw_zone
        vmax_all = max(b.vmax2 for b in f.buses.values())
        big_m = vmax_all + 0.1
        obj = {}

        # demand tables (kW) per load
        self.demand = {}
        for ld in f.loads:
            p0 = np.asarray(inp.load_forecasts[ld.id], dtype=float)
            self.demand[ld.id] = clpu_demand_table(ld, p0, inp.start_hour, inp.stage_minutes, inp.clpu_enabled)

        for s in range(1, T + 1):
            for z in range(len(f.zones)):
                if z in gfm_zones:
                    self.var(("z", z, s), 1.0, 1.0, binary=True)
                else:
                    self.var(("z", z, s), binary=True)
            for ln in f.switches:
                za, zb = sw_zone[ln.id]
                hi = 0.0 if za == zb else 1.0
                self.var(("c", ln.id, s), 0.0, hi, binary=True)
                self.var(("y", ln.id, za, s), 0.0, 1.0)
                self.var(("y", ln.id, zb, s), 0.0, 1.0)
            for ld in f.loads:
                self.var(("x", ld.id, s), binary=True)
            for ln in f.lines:
                for ph in ln.phases:
                    self.var(("P", ln.id, ph, s), -pu(ln.pmax_kw), pu(ln.pmax_kw))
                    self.var(("Q", ln.id, ph, s), -pu(ln.qmax_kvar), pu(ln.qmax_kvar))
            for b in f.buses.values():
                for ph in b.phases:
                    self.var(("U", b.id, ph, s), 0.0, b.vmax2)
            for g in f.ibrs:
                for ph in g.phases:
                    self.var(("PG", g.id, ph, s), 0.0, pu(g.pmax_kw))
                    self.var(("QG", g.id, ph, s), 0.0, pu(g.qmax_kvar))

        v = self.v
        for s in range(1, T + 1):
            # energization propagation and radiality
            for z in range(len(f.zones)):
                if z in gfm_zones:
                    continue
                row = {v[("z", z, s)]: 1.0}
                rhs = 0.0
                if s > 1:
                    row[v[("z", z, s - 1)]] = -1.0
                for sid, (za, zb) in sw_zone.items():
                    if z in (za, zb) and za != zb:
                        row[v[("y", sid, z, s)]] = row.get(v[("y", sid, z, s)], 0.0) - 1.0
                P.add_constraint(row, "<=", rhs, f"energize|{z}|{s}")
                if s > 1:
                    P.add_constraint({v[("z", z, s)]: 1, v[("z", z, s - 1)]: -1}, ">=", 0, f"zmono|{z}|{s}")
            count = {}
            for sid, (za, zb) in sw_zone.items():
                c = v[("c", sid, s)]
                count[c] = 1.0
                for zz, other in ((za, zb), (zb, za)):
                    y = v[("y", sid, zz, s)]
                    P.add_constraint({y: 1, c: -1}, "<=", 0, f"y_c|{sid}|{zz}|{s}")
                    if s == 1:
                        # nothing is energized before the first stage
                        P.add_constraint({y: 1}, "<=", 0, f"y_prev|{sid}|{zz}|{s}")
                    else:
                        P.add_constraint({y: 1, v[("z", other, s - 1)]: -1}, "<=", 0, f"y_prev|{sid}|{zz}|{s}")
                P.add_constraint({c: 1, v[("z", za, s)]: -1}, "<=", 0, f"c_end|{sid}|a|{s}")
                P.add_constraint({c: 1, v[("z", zb, s)]: -1}, "<=", 0, f"c_end|{sid}|b|{s}")
                if s > 1:
                    P.add_constraint({c: 1, v[("c", sid, s - 1)]: -1}, ">=", 0, f"cmono|{sid}|{s}")
            for z in range(len(f.zones)):
                if z not in gfm_zones:
                    count[v[("z", z, s)]] = count.get(v[("z", z, s)], 0.0) - 1.0
            if count:
                P.add_constraint(count, "=", 0, f"radial|{s}")

            # loads
            for ld in f.loads:
                x = v[("x", ld.id, s)]
                P.add_constraint({x: 1, v[("z", f.zone_of[ld.bus], s)]: -1}, "<=", 0, f"x_z|{ld.id}|{s}")
                if s > 1:
                    P.add_constraint({x: 1, v[("x", ld.id, s - 1)]: -1}, ">=", 0, f"xmono|{ld.id}|{s}")
                p0 = inp.load_forecasts[ld.id][s - 1]
                obj[x] = obj.get(x, 0.0) + ld.weight * p0

            # line availability
            for ln in f.lines:
                avail = v[("c", ln.id, s)] if ln.is_switch else v[("z", f.zone_of[ln.from_bus], s)]
                for ph in ln.phases:
                    for key, cap in (("P", ln.pmax_kw), ("Q", ln.qmax_kvar)):
                        fl = v[(key, ln.id, ph, s)]
                        P.add_constraint({fl: 1, avail: -pu(cap)}, "<=", 0, f"{key}cap+|{ln.id}|{ph}|{s}")
                        P.add_constraint({fl: 1, avail: pu(cap)}, ">=", 0, f"{key}cap-|{ln.id}|{ph}|{s}")
                if inp.voltage_constraints:
                    for ph in ln.phases:
                        i = PHASE_INDEX[ph]
                        row = {v[("U", ln.from_bus, ph, s)]: 1.0, v[("U", ln.to_bus, ph, s)]: -1.0}
                        for ps in ln.phases:
                            k = PHASE_INDEX[ps]
                            row[v[("P", ln.id, ps, s)]] = -2.0 * ln.r_hat[i, k]
                            row[v[("Q", ln.id, ps, s)]] = -2.0 * ln.x_hat[i, k]
                        # |row| <= M (1 - avail)
                        r1 = dict(row)
                        r1[avail] = big_m
                        P.add_constraint(r1, "<=", big_m, f"vdrop+|{ln.id}|{ph}|{s}")
                        r2 = dict(row)
                        r2[avail] = -big_m
                        P.add_constraint(r2, ">=", -big_m, f"vdrop-|{ln.id}|{ph}|{s}")

            # bus voltage bounds, a centring penalty on |U - 1| and GFL availability
            if inp.voltage_constraints:
                for b in f.buses.values():
                    zb = v[("z", f.zone_of[b.id], s)]
                    for ph in b.phases:
                        u = v[("U", b.id, ph, s)]
                        P.add_constraint({u: 1, zb: -b.vmin2}, ">=", 0, f"vmin|{b.id}|{ph}|{s}")
                        if inp.voltage_penalty > 0:
                            d = self.var(("dU", b.id, ph, s))
                            P.add_constraint({d: 1, u: -1, zb: 1}, ">=", 0, f"dU+|{b.id}|{ph}|{s}")
                            P.add_constraint({d: 1, u: 1, zb: -1}, ">=", 0, f"dU-|{b.id}|{ph}|{s}")
                            obj[d] = -inp.voltage_penalty
                for g in f.gfms:
                    for ph in g.phases:
                        P.add_constraint({v[("U", g.bus, ph, s)]: 1}, "=", inp.v_ref, f"vref|{g.id}|{ph}|{s}")
            for g in f.gfls:
                zb = v[("z", f.zone_of[g.bus], s)]
                for ph in g.phases:
                    P.add_constraint({v[("PG", g.id, ph, s)]: 1, zb: -pu(g.pmax_kw)}, "<=", 0, f"gfl_p|{g.id}|{ph}|{s}")
                    P.add_constraint({v[("QG", g.id, ph, s)]: 1, zb: -pu(g.qmax_kvar)}, "<=", 0, f"gfl_q|{g.id}|{ph}|{s}")
                    obj[v[("PG", g.id, ph, s)]] = -inp.gfl_penalty * f.phase_base_kw

            # nodal balance
            self._balance(s)

        # GFM ramping
        for g in f.gfms:
            sched = mls_schedule(g.ramp, T)
            for s in range(2, T + 1):
                for ph in g.phases:
                    a, b = v[("PG", g.id, ph, s)], v[("PG", g.id, ph, s - 1)]
                    P.add_constraint({a: 1, b: -1}, "<=", pu(sched[s]), f"ramp+|{g.id}|{ph}|{s}")
                    P.add_constraint({a: 1, b: -1}, ">=", -pu(sched[s]), f"ramp-|{g.id}|{ph}|{s}")
        P.set_objective(obj)
        return P

    def _balance(self, s):
        f, v, P, inp = self.f, self.v, self.prob, self.inp
        pu = f.kw_to_pu
        rows = {}
        for b in f.buses.values():
            for ph in b.phases:
                rows[(b.id, ph, "P")] = ({}, 0.0)
                rows[(b.id, ph, "Q")] = ({}, 0.0)

        def add(key, idx, coef):
            row = rows[key][0]
            row[idx] = row.get(idx, 0.0) + coef

        for ln in f.lines:
            for ph in ln.phases:
                for kind in ("P", "Q"):
                    fl = v[(kind, ln.id, ph, s)]
                    add((ln.from_bus, ph, kind), fl, 1.0)
                    add((ln.to_bus, ph, kind), fl, -1.0)
        for g in f.ibrs:
            for ph in g.phases:
                add((g.bus, ph, "P"), v[("PG", g.id, ph, s)], -1.0)
                add((g.bus, ph, "Q"), v[("QG", g.id, ph, s)], -1.0)
        for ld in f.loads:
            D = self.demand[ld.id]
            share = 1.0 / len(ld.phases)
            tq = tan_phi(ld.power_factor)
            # demand at s = sum_p (x_p - x_{p-1}) D[p, s] = sum_p x_p (D[p, s] - D[p+1, s])
            for p in range(1, s + 1):
                coef = D[p - 1, s - 1] - (D[p, s - 1] if p < s else 0.0)
                if coef == 0.0:
                    continue
                x = v[("x", ld.id, p)]
                for ph in ld.phases:
                    add((ld.bus, ph, "P"), x, pu(coef * share))
                    add((ld.bus, ph, "Q"), x, pu(coef * share * tq))
        for (bus, ph, kind), (row, rhs) in rows.items():
            if row:
                name = "active_balance" if kind == "P" else "reactive_balance"
                P.add_constraint(row, "=", rhs, f"{name}|{bus}|{ph}|{s}")


def plan_restoration(inp: PlannerInput) -> RestorationPlan:
    model = _Model(inp)
    prob = model.build()
    out = solve_milp(prob, backend=inp.backend, node_limit=inp.node_limit)
    if out.node_limit_reached:
        raise NodeLimitReached("planner hit the branch-and-bound node limit", out)
    if out.status != "optimal":
        raise Infeasible(f"restoration MILP is {out.status}", out.infeasible_hint)
    return _extract(model, out)


def _extract(model: _Model, out) -> RestorationPlan:
    f, v, inp, x = model.f, model.v, model.inp, out.values
    kw = f.pu_to_kw
    on = lambda key: x[v[key]] > 0.5  # noqa: E731
    stages = []
    pickup = {}
    for s in range(1, model.T + 1):
        closed = sorted(sid for sid in model.sw_zone if on(("c", sid, s)))
        zones = [z for z in range(len(f.zones)) if on(("z", z, s))]
        buses = sorted((b for z in zones for b in f.zones[z]), key=f.bus_order)
        loads = [ld.id for ld in f.loads if on(("x", ld.id, s))]
        for lid in loads:
            pickup.setdefault(lid, s)
        energized = set(buses)
        ibrs = [g.id for g in f.ibrs if g.bus in energized]
        gfl, gfm = {}, {}
        for g in f.ibrs:
            if g.bus not in energized:
                continue
            target = gfm if g.is_gfm else gfl
            target[g.id] = {
                ph: [_r(kw(x[v[("PG", g.id, ph, s)]])), _r(kw(x[v[("QG", g.id, ph, s)]]))] for ph in g.phases
            }
        demand = {}
        for ld in f.loads:
            if ld.id not in loads:
                continue
            p = pickup[ld.id]
            total = model.demand[ld.id][p - 1, s - 1]
            share = total / len(ld.phases)
            tq = tan_phi(ld.power_factor)
            demand[ld.id] = {ph: [share, share * tq] for ph in ld.phases}
        flows = {}
        for ln in f.lines:
            if ln.is_switch and ln.id not in closed:
                continue
            if not ln.is_switch and f.zone_of[ln.from_bus] not in zones:
                continue
            flows[ln.id] = {
                ph: [kw(x[v[("P", ln.id, ph, s)]]), kw(x[v[("Q", ln.id, ph, s)]])] for ph in ln.phases
            }
        volts = {b: {ph: float(x[v[("U", b, ph, s)]]) for ph in f.buses[b].phases} for b in buses}
        stages.append(PlanStage(s, closed, buses, loads, ibrs, gfl, gfm, demand, flows, volts))
    return RestorationPlan(
        f.name, inp.stage_minutes, inp.start_hour, inp.clpu_enabled, stages, float(out.objective), pickup
    )


def _r(v):
    # strip solver noise below a micro-kW so setpoint diffs are meaningful
    return float(round(v, 6)) + 0.0


def restored_energy(plan: RestorationPlan, feeder: Feeder, load_forecasts) -> float:
    """Objective term recomputed from the plan: sum of w * forecast over restored loads."""
    total = 0.0
    for st in plan.stages:
        for lid in st.restored_loads:
            total += feeder.load(lid).weight * load_forecasts[lid][st.stage - 1]
    return total


def balance_residuals(plan: RestorationPlan, feeder: Feeder) -> float:
    """Largest per-bus, per-phase active/reactive mismatch (per-unit) in the plan."""
    worst = 0.0
    for st in plan.stages:
        net = {}
        for lid, per in st.flows.items():
            ln = feeder.line(lid)
            for ph, (p, q) in per.items():
                for bus, sgn in ((ln.from_bus, 1.0), (ln.to_bus, -1.0)):
                    a = net.setdefault((bus, ph), [0.0, 0.0])
                    a[0] += sgn * p
                    a[1] += sgn * q
        for disp in (st.gfl_setpoints, st.gfm_dispatch):
            for gid, per in disp.items():
                bus = next(g.bus for g in feeder.ibrs if g.id == gid)
                for ph, (p, q) in per.items():
                    a = net.setdefault((bus, ph), [0.0, 0.0])
                    a[0] -= p
                    a[1] -= q
        for lid, per in st.load_demand.items():
            bus = feeder.load(lid).bus
            for ph, (p, q) in per.items():
                a = net.setdefault((bus, ph), [0.0, 0.0])
                a[0] += p
                a[1] += q
        for p, q in net.values():
            worst = max(worst, abs(feeder.kw_to_pu(p)), abs(feeder.kw_to_pu(q)))
    return worst


# ---------------------------------------------------------------------------


@dataclass
class PlanDiff:
    stages: list  # per stage dict of differences

    @property
    def sequence_identical(self):
        return all(
            not (d["switches_only_a"] or d["switches_only_b"] or d["loads_only_a"] or d["loads_only_b"]
                 or d["ibrs_only_a"] or d["ibrs_only_b"])
            for d in self.stages
        )

    @property
    def empty(self):
        return self.sequence_identical and not any(d["setpoint_deltas"] for d in self.stages)

    def entries(self):
        """Flat list of (stage, kind, item) differences."""
        out = []
        for d in self.stages:
            for kind in ("switches_only_a", "switches_only_b", "loads_only_a", "loads_only_b",
                         "ibrs_only_a", "ibrs_only_b", "setpoint_deltas"):
                out.extend((d["stage"], kind, item) for item in d[kind])
        return out

    def to_dict(self):
        return {"sequence_identical": self.sequence_identical, "empty": self.empty, "stages": self.stages}


def plan_diff(plan_a: RestorationPlan, plan_b: RestorationPlan, tol=1e-6) -> PlanDiff:
    if plan_a.horizon != plan_b.horizon:
        raise ShapeMismatch("plans cover different horizons")
    out = []
    for a, b in zip(plan_a.stages, plan_b.stages):
        deltas = []
        for disp_a, disp_b in ((a.gfl_setpoints, b.gfl_setpoints), (a.gfm_dispatch, b.gfm_dispatch)):
            for gid in sorted(set(disp_a) | set(disp_b)):
                pa, pb = disp_a.get(gid, {}), disp_b.get(gid, {})
                for ph in sorted(set(pa) | set(pb)):
                    va, vb = pa.get(ph, [0.0, 0.0]), pb.get(ph, [0.0, 0.0])
                    dp, dq = vb[0] - va[0], vb[1] - va[1]
                    if abs(dp) > tol or abs(dq) > tol:
                        deltas.append({"ibr": gid, "phase": ph, "dP_kw": dp, "dQ_kvar": dq})
        sa, sb = set(a.closed_switches), set(b.closed_switches)
        la, lb = set(a.restored_loads), set(b.restored_loads)
        ia, ib = set(a.restored_ibrs), set(b.restored_ibrs)
        out.append(
            {
                "stage": a.stage,
                "switches_only_a": sorted(sa - sb),
                "switches_only_b": sorted(sb - sa),
                "loads_only_a": sorted(la - lb),
                "loads_only_b": sorted(lb - la),
                "ibrs_only_a": sorted(ia - ib),
                "ibrs_only_b": sorted(ib - ia),
                "setpoint_deltas": deltas,
            }
        )
    return PlanDiff(out)
