"""Stage-by-stage linearized OPF validation of a restoration plan under true loads.

Each energized island at each stage becomes one LP: loads are fixed to their
actual CLPU-adjusted demand, GFL outputs are pinned to the plan setpoints, and
GFM output must respect capacity and (after the first stage) the ramp bound
measured from the validator's own previous-stage dispatch.  When the LP is
infeasible an elastic copy with weighted non-negative slacks names the
constraints that break.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .clpu import clpu_multiplier, lookup_params, time_of_day
from .errors import MalformedStage, PlanFeederMismatch, UnexpectedlyFeasible
from .feeder import PHASE_INDEX, Feeder, tan_phi
from .lp import LpProblem, solve_lp
from .planner import RestorationPlan, mls_schedule, stage_hour

KINDS = (
    "active_balance",
    "reactive_balance",
    "line_p",
    "line_q",
    "voltage_low",
    "voltage_high",
    "gfl_setpoint",
    "gfm_capacity",
    "ramping",
)
# device constraints are expensive to relax so that a shortfall is reported
# where it physically appears, on the nodal balance
SLACK_WEIGHTS = {k: 1.0 for k in KINDS} | {"gfl_setpoint": 10.0, "gfm_capacity": 10.0, "ramping": 10.0}
SLACK_TOL = 1e-6
VERDICT_TOL = 1e-7


@dataclass
class StageProblem:
    feeder: Feeder
    stage: int
    buses: list
    lines: list  # energized Line objects
    loads: dict  # bus -> phase -> [P kW, Q kvar] (actual demand)
    gfl_setpoints: dict  # ibr -> phase -> [P kW, Q kvar]
    gfms: list  # ibr ids
    gfm_previous: dict | None = None  # ibr -> phase -> P kW at the previous stage
    mls_kw: dict = field(default_factory=dict)  # ibr -> per-phase bound
    v_ref: float = 1.0
    backend: str = "auto"

    def __post_init__(self):
        f = self.feeder
        bus_set = set(self.buses)
        for ln in self.lines:
            if ln.from_bus not in bus_set or ln.to_bus not in bus_set:
                raise MalformedStage(f"line {ln.id} leaves the island")
        for bus in self.loads:
            if bus not in bus_set:
                raise MalformedStage(f"load at bus {bus} is outside the island")
        ibr = {g.id: g for g in f.ibrs}
        for g in f.gfls:
            if g.bus in bus_set and g.id not in self.gfl_setpoints:
                raise MalformedStage(f"energized GFL {g.id} has no setpoint")
        for gid in self.gfl_setpoints:
            if gid not in ibr or ibr[gid].is_gfm or ibr[gid].bus not in bus_set:
                raise MalformedStage(f"setpoint for {gid} does not match an energized GFL")
        if not self.gfms:
            raise MalformedStage("island has no grid-forming source")
        for gid in self.gfms:
            if gid not in ibr or not ibr[gid].is_gfm or ibr[gid].bus not in bus_set:
                raise MalformedStage(f"{gid} is not an energized GFM of this island")
        if self.stage > 1 and self.gfm_previous is not None:
            for gid in self.gfms:
                if gid not in self.gfm_previous or gid not in self.mls_kw:
                    raise MalformedStage(f"ramp data missing for {gid}")


@dataclass
class Violation:
    kind: str
    bus: str
    phase: str
    slack_pu: float
    slack_kw: float | None = None  # None for voltage slacks (squared pu)
    element: str = ""


@dataclass
class StageValidationResult:
    status: str
    violations: list = field(default_factory=list)
    dispatch: dict = field(default_factory=dict)
    total_slack: float = 0.0

    @property
    def feasible(self):
        return self.status == "feasible"

    def to_dict(self):
        return {
            "status": self.status,
            "total_slack": self.total_slack,
            "violations": [asdict(v) for v in self.violations],
            "dispatch": self.dispatch,
        }


# ---------------------------------------------------------------------------


class _StageLp:
    def __init__(self, pb: StageProblem, elastic: bool):
        self.pb = pb
        self.elastic = elastic
        self.lp = LpProblem("min")
        self.v = {}
        self.slacks = []  # (var index, kind, bus, phase, element, is_power)
        self._build()

    def var(self, key, lo=0.0, hi=float("inf")):
        self.v[key] = self.lp.add_var("|".join(map(str, key)), lo, hi)
        return self.v[key]

    def slack(self, kind, bus, phase, element="", power=True, tag=""):
        idx = self.lp.add_var(f"s{len(self.slacks)}|{kind}|{element or bus}|{phase}|{tag}", 0.0)
        self.slacks.append((idx, kind, bus, phase, element, power))
        return idx

    def soft_upper(self, x, bound, kind, bus, ph, element="", power=True):
        """``x <= bound``: a variable bound, or a slack row in elastic mode."""
        if self.elastic:
            s = self.slack(kind, bus, ph, element, power, "hi")
            self.lp.add_constraint({x: 1.0, s: -1.0}, "<=", bound, f"{kind}|{element or bus}|{ph}|hi")
        else:
            self.lp.add_constraint({x: 1.0}, "<=", bound, f"{kind}|{element or bus}|{ph}|hi")

    def soft_lower(self, x, bound, kind, bus, ph, element="", power=True):
        if self.elastic:
            s = self.slack(kind, bus, ph, element, power, "lo")
            self.lp.add_constraint({x: 1.0, s: 1.0}, ">=", bound, f"{kind}|{element or bus}|{ph}|lo")
        else:
            self.lp.add_constraint({x: 1.0}, ">=", bound, f"{kind}|{element or bus}|{ph}|lo")

    def soft_equal(self, row, rhs, kind, bus, ph, element="", power=True):
        if self.elastic:
            row = dict(row)
            row[self.slack(kind, bus, ph, element, power, "up")] = 1.0
            row[self.slack(kind, bus, ph, element, power, "dn")] = -1.0
        self.lp.add_constraint(row, "=", rhs, f"{kind}|{element or bus}|{ph}")

    def _build(self):
        pb, f = self.pb, self.pb.feeder
        pu = f.kw_to_pu
        ibr = {g.id: g for g in f.ibrs}
        free = (-float("inf"), float("inf"))

        for b in pb.buses:
            bus = f.buses[b]
            for ph in bus.phases:
                u = self.var(("U", b, ph), 0.0, float("inf"))
                self.soft_lower(u, bus.vmin2, "voltage_low", b, ph, power=False)
                self.soft_upper(u, bus.vmax2, "voltage_high", b, ph, power=False)
        for ln in pb.lines:
            for ph in ln.phases:
                for key, cap, kind in (("P", ln.pmax_kw, "line_p"), ("Q", ln.qmax_kvar, "line_q")):
                    x = self.var((key, ln.id, ph), *free)
                    self.soft_upper(x, pu(cap), kind, ln.from_bus, ph, ln.id)
                    self.soft_lower(x, -pu(cap), kind, ln.from_bus, ph, ln.id)
            for ph in ln.phases:
                i = PHASE_INDEX[ph]
                row = {self.v[("U", ln.from_bus, ph)]: 1.0, self.v[("U", ln.to_bus, ph)]: -1.0}
                for ps in ln.phases:
                    k = PHASE_INDEX[ps]
                    row[self.v[("P", ln.id, ps)]] = -2.0 * ln.r_hat[i, k]
                    row[self.v[("Q", ln.id, ps)]] = -2.0 * ln.x_hat[i, k]
                self.lp.add_constraint(row, "=", 0.0, f"vdrop|{ln.id}|{ph}")

        for gid, per in pb.gfl_setpoints.items():
            g = ibr[gid]
            for ph in g.phases:
                p_set, q_set = per.get(ph, [0.0, 0.0])
                p = self.var(("PG", gid, ph), *free)
                q = self.var(("QG", gid, ph), *free)
                self.soft_equal({p: 1.0}, pu(p_set), "gfl_setpoint", g.bus, ph, gid)
                self.soft_equal({q: 1.0}, pu(q_set), "gfl_setpoint", g.bus, ph, gid)
        ref = ibr[pb.gfms[0]]
        for gid in pb.gfms:
            g = ibr[gid]
            for ph in g.phases:
                p = self.var(("PG", gid, ph), 0.0, float("inf"))
                q = self.var(("QG", gid, ph), 0.0, float("inf"))
                self.soft_upper(p, pu(g.pmax_kw), "gfm_capacity", g.bus, ph, gid)
                self.soft_upper(q, pu(g.qmax_kvar), "gfm_capacity", g.bus, ph, gid)
                if pb.stage > 1 and pb.gfm_previous is not None:
                    prev = pu(pb.gfm_previous[gid][ph])
                    step = pu(pb.mls_kw[gid])
                    self.soft_upper(p, prev + step, "ramping", g.bus, ph, gid)
                    self.soft_lower(p, prev - step, "ramping", g.bus, ph, gid)
        for ph in ref.phases:
            self.lp.add_constraint({self.v[("U", ref.bus, ph)]: 1.0}, "=", pb.v_ref, f"vref|{ph}")

        # nodal balance: outflow - inflow - generation = -load
        rows = {}
        for b in pb.buses:
            for ph in f.buses[b].phases:
                rows[(b, ph, "P")] = {}
                rows[(b, ph, "Q")] = {}
        for ln in pb.lines:
            for ph in ln.phases:
                for key in ("P", "Q"):
                    x = self.v[(key, ln.id, ph)]
                    rows[(ln.from_bus, ph, key)][x] = rows[(ln.from_bus, ph, key)].get(x, 0.0) + 1.0
                    rows[(ln.to_bus, ph, key)][x] = rows[(ln.to_bus, ph, key)].get(x, 0.0) - 1.0
        for gid in list(pb.gfl_setpoints) + list(pb.gfms):
            g = ibr[gid]
            for ph in g.phases:
                rows[(g.bus, ph, "P")][self.v[("PG", gid, ph)]] = -1.0
                rows[(g.bus, ph, "Q")][self.v[("QG", gid, ph)]] = -1.0
        for (b, ph, key), row in rows.items():
            p_kw, q_kvar = pb.loads.get(b, {}).get(ph, [0.0, 0.0])
            demand = p_kw if key == "P" else q_kvar
            kind = "active_balance" if key == "P" else "reactive_balance"
            if not row and not self.elastic:
                if abs(demand) > 0:
                    # an isolated phase with demand cannot be balanced
                    self.lp.add_constraint({}, "=", -pu(demand), f"{kind}|{b}|{ph}")
                continue
            self.soft_equal(row, -pu(demand), kind, b, ph)

        if self.elastic:
            self.lp.set_objective({idx: SLACK_WEIGHTS[kind] for idx, kind, *_ in self.slacks})

    def dispatch(self, x):
        f = self.pb.feeder
        kw = f.pu_to_kw
        out = {"gfm": {}, "gfl": {}, "voltages": {}, "flows": {}}
        for key, idx in self.v.items():
            if key[0] in ("PG", "QG"):
                gid, ph = key[1], key[2]
                target = out["gfm"] if gid in self.pb.gfms else out["gfl"]
                pair = target.setdefault(gid, {}).setdefault(ph, [0.0, 0.0])
                pair[0 if key[0] == "PG" else 1] = kw(x[idx])
            elif key[0] == "U":
                out["voltages"].setdefault(key[1], {})[key[2]] = float(x[idx])
            else:
                pair = out["flows"].setdefault(key[1], {}).setdefault(key[2], [0.0, 0.0])
                pair[0 if key[0] == "P" else 1] = kw(x[idx])
        return out


def _violations(model: _StageLp, x):
    f = model.pb.feeder
    merged = {}
    for idx, kind, bus, ph, element, power in model.slacks:
        val = float(x[idx])
        if val <= SLACK_TOL:
            continue
        key = (kind, bus, ph, element)
        merged[key] = merged.get(key, 0.0) + val
    out = []
    for (kind, bus, ph, element), val in merged.items():
        is_power = kind not in ("voltage_low", "voltage_high")
        out.append(Violation(kind, bus, ph, val, f.pu_to_kw(val) if is_power else None, element))
    out.sort(key=lambda v: (KINDS.index(v.kind), f.bus_order(v.bus), v.phase, v.element))
    return out


def _elastic(pb: StageProblem):
    model = _StageLp(pb, elastic=True)
    res = solve_lp(model.lp, backend=pb.backend)
    if not res.optimal:
        raise MalformedStage(f"elastic re-solve ended {res.status}")
    return model, res


def validate_stage(problem: StageProblem) -> StageValidationResult:
    base = _StageLp(problem, elastic=False)
    res = solve_lp(base.lp, backend=problem.backend)
    if res.optimal:
        return StageValidationResult("feasible", [], base.dispatch(res.values), 0.0)
    model, el = _elastic(problem)
    total = float(el.objective)
    if total <= VERDICT_TOL:
        # the base solve rejected a point the elastic copy finds within tolerance
        return StageValidationResult("feasible", [], model.dispatch(el.values), total)
    return StageValidationResult("infeasible", _violations(model, el.values), {}, total)


def attribute_violations(problem: StageProblem):
    base = _StageLp(problem, elastic=False)
    if solve_lp(base.lp, backend=problem.backend).optimal:
        raise UnexpectedlyFeasible("the stage LP is feasible; nothing to attribute")
    model, el = _elastic(problem)
    return _violations(model, el.values)


# ---------------------------------------------------------------------------


@dataclass
class IslandStage:
    microgrid: str
    stage: int
    gfms: list
    buses: list
    result: StageValidationResult | None  # None when excluded after an earlier failure
    planned_gfm_kw: float = 0.0
    actual_gfm_kw: float = 0.0
    planned_load_kw: float = 0.0
    actual_load_kw: float = 0.0
    bus_loads_kw: dict = field(default_factory=dict)  # bus -> actual kW (all phases)

    @property
    def excluded(self):
        return self.result is None

    def to_dict(self):
        return {
            "microgrid": self.microgrid,
            "stage": self.stage,
            "gfms": self.gfms,
            "buses": self.buses,
            "excluded": self.excluded,
            "status": "excluded" if self.excluded else self.result.status,
            "violations": [] if self.excluded else [asdict(v) for v in self.result.violations],
            "total_slack": 0.0 if self.excluded else self.result.total_slack,
            "planned_gfm_kw": self.planned_gfm_kw,
            "actual_gfm_kw": self.actual_gfm_kw,
            "planned_load_kw": self.planned_load_kw,
            "actual_load_kw": self.actual_load_kw,
            "bus_loads_kw": self.bus_loads_kw,
        }


@dataclass
class ValidationReport:
    entries: list

    @property
    def first_failure(self):
        for e in sorted(self.entries, key=lambda e: (e.stage, _mg_key(e.microgrid))):
            if not e.excluded and not e.result.feasible:
                return (e.microgrid, e.stage)
        return None

    @property
    def failures(self):
        return [(e.microgrid, e.stage) for e in self.entries if not e.excluded and not e.result.feasible]

    @property
    def all_feasible(self):
        return not self.failures

    def entry(self, microgrid, stage):
        for e in self.entries:
            if e.microgrid == microgrid and e.stage == stage:
                return e
        raise KeyError((microgrid, stage))

    def summary(self):
        """Planned vs actual GFM generation and load per microgrid and stage."""
        return [
            {
                "microgrid": e.microgrid,
                "stage": e.stage,
                "status": "excluded" if e.excluded else e.result.status,
                "planned_gfm_kw": e.planned_gfm_kw,
                "actual_gfm_kw": e.actual_gfm_kw,
                "planned_load_kw": e.planned_load_kw,
                "actual_load_kw": e.actual_load_kw,
            }
            for e in self.entries
        ]

    def to_dict(self):
        ff = self.first_failure
        return {
            "first_failure": None if ff is None else {"microgrid": ff[0], "stage": ff[1]},
            "all_feasible": self.all_feasible,
            "entries": [e.to_dict() for e in self.entries],
            "summary": self.summary(),
        }

    def save_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    def write_violations_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["stage", "microgrid", "constraint", "bus", "phase", "element", "slack_pu", "slack_kw"])
            for e in self.entries:
                if e.excluded:
                    continue
                for v in e.result.violations:
                    w.writerow([
                        e.stage, e.microgrid, v.kind, v.bus, v.phase, v.element,
                        f"{v.slack_pu:.9g}", "" if v.slack_kw is None else f"{v.slack_kw:.6f}",
                    ])

    def write_generation_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["microgrid", "stage", "status", "planned_gfm_kw", "actual_gfm_kw",
                        "planned_load_kw", "actual_load_kw"])
            for r in self.summary():
                w.writerow([
                    r["microgrid"], r["stage"], r["status"], f"{r['planned_gfm_kw']:.6f}",
                    f"{r['actual_gfm_kw']:.6f}", f"{r['planned_load_kw']:.6f}", f"{r['actual_load_kw']:.6f}",
                ])


def _mg_key(label):
    return int(label.split()[-1])


def actual_demand(feeder: Feeder, plan: RestorationPlan, actual_loads, stage):
    """Actual per-load, per-phase ``[P kW, Q kvar]`` at ``stage`` for restored loads."""
    out = {}
    for lid in plan.stages[stage - 1].restored_loads:
        ld = feeder.load(lid)
        p = plan.pickup[lid]
        base = float(actual_loads[lid][stage - 1])
        mult = 1.0
        if plan.clpu_enabled:
            a, tau = lookup_params(ld.load_type, time_of_day(stage_hour(plan.start_hour, p, plan.stage_minutes)))
            mult = clpu_multiplier(a, tau, (stage - p) * plan.stage_minutes)
        share = base * mult / len(ld.phases)
        out[lid] = {ph: [share, share * tan_phi(ld.power_factor)] for ph in ld.phases}
    return out


def _check_plan(feeder: Feeder, plan: RestorationPlan, actual_loads):
    if plan.feeder_name and feeder.name and plan.feeder_name != feeder.name:
        raise PlanFeederMismatch(f"plan is for {plan.feeder_name!r}, feeder is {feeder.name!r}")
    switches = {ln.id for ln in feeder.switches}
    load_ids = {ld.id for ld in feeder.loads}
    ibr_ids = {g.id for g in feeder.ibrs}
    for st in plan.stages:
        if not set(st.closed_switches) <= switches:
            raise PlanFeederMismatch(f"stage {st.stage} closes unknown switches")
        if not set(st.restored_loads) <= load_ids:
            raise PlanFeederMismatch(f"stage {st.stage} restores unknown loads")
        if not set(st.gfl_setpoints) | set(st.gfm_dispatch) <= ibr_ids:
            raise PlanFeederMismatch(f"stage {st.stage} dispatches unknown IBRs")
        for lid in st.restored_loads:
            if len(actual_loads.get(lid, ())) < plan.horizon:
                raise PlanFeederMismatch(f"no actual load series for {lid}")


def validate_plan(feeder: Feeder, plan: RestorationPlan, actual_loads, ramp_params=None,
                  backend="auto") -> ValidationReport:
    """Validate every island of every stage; failed microgrids stop advancing.

    ``actual_loads`` maps load id to per-stage kW before cold-load pickup.
    ``ramp_params`` optionally maps a GFM id to an ``f_nadir`` scalar or a
    per-stage sequence, overriding the feeder's ramp data.
    """
    _check_plan(feeder, plan, actual_loads)
    ramp_params = ramp_params or {}
    gfm_rank = {g.id: k for k, g in enumerate(feeder.gfms)}
    mls = {g.id: mls_schedule(g.ramp, plan.horizon, ramp_params.get(g.id)) for g in feeder.gfms}
    failed = set()
    previous = {}  # gfm -> phase -> kW from the last feasible stage
    entries = []
    load_bus = {ld.id: ld.bus for ld in feeder.loads}
    for st in plan.stages:
        s = st.stage
        demand = actual_demand(feeder, plan, actual_loads, s)
        sources = [g.bus for g in feeder.gfms]
        for island in feeder.islands(st.closed_switches, sources):
            gfms = sorted((g.id for g in feeder.gfms if g.bus in island), key=gfm_rank.get)
            label = f"MG {gfm_rank[gfms[0]] + 1}"
            buses = sorted(island, key=feeder.bus_order)
            bus_loads = {}
            for lid, per in demand.items():
                if load_bus[lid] in island:
                    slot = bus_loads.setdefault(load_bus[lid], {})
                    for ph, (p, q) in per.items():
                        acc = slot.setdefault(ph, [0.0, 0.0])
                        acc[0] += p
                        acc[1] += q
            planned_load = sum(
                p for lid, per in st.load_demand.items() if load_bus[lid] in island for p, _ in per.values()
            )
            actual_load = sum(p for per in bus_loads.values() for p, _ in per.values())
            gfl = {gid: per for gid, per in st.gfl_setpoints.items() if gid in {g.id for g in feeder.gfls
                                                                                   if g.bus in island}}
            planned_gfm = sum(p for gid in gfms for p, _ in st.gfm_dispatch.get(gid, {}).values())
            gfl_total = sum(p for per in gfl.values() for p, _ in per.values())
            entry = IslandStage(
                label, s, gfms, buses, None, planned_gfm, actual_load - gfl_total, planned_load, actual_load,
                {b: sum(p for p, _ in per.values()) for b, per in bus_loads.items()},
            )
            if label in failed:
                entries.append(entry)
                continue
            pb = StageProblem(
                feeder,
                s,
                buses,
                feeder.energized_lines(island, st.closed_switches),
                bus_loads,
                gfl,
                gfms,
                {gid: previous[gid] for gid in gfms if gid in previous} if s > 1 else None,
                {gid: mls[gid].get(s, 0.0) for gid in gfms},
                backend=backend,
            )
            if pb.gfm_previous is not None and len(pb.gfm_previous) < len(gfms):
                pb.gfm_previous = None  # a source joining late has no ramp history
            entry.result = validate_stage(pb)
            if entry.result.feasible:
                for gid in gfms:
                    previous[gid] = {ph: pq[0] for ph, pq in entry.result.dispatch["gfm"][gid].items()}
            else:
                failed.add(label)
            entries.append(entry)
    return ValidationReport(entries)
