import networkx as nx
import numpy as np
import pytest

from builders import (
    TOY_LOADS,
    bus,
    exhaustive_plan_value,
    gfm,
    line,
    load,
    make_feeder,
    oracle_demand,
    toy_feeder,
)
from restoration_attack.errors import ShapeMismatch
from restoration_attack.feeder import Ramp, load_bundled_feeder
from restoration_attack.planner import (
    PlannerInput,
    RestorationPlan,
    balance_residuals,
    clpu_demand_table,
    mls_schedule,
    plan_diff,
    plan_restoration,
    restored_energy,
)

TOY_FORECAST = {"L2": [40.0, 42.0], "L3": [60.0, 55.0], "L4": [50.0, 52.0]}


def _plan_toy(feeder, clpu=True, **kw):
    kw.setdefault("gfl_penalty", 0.0)
    kw.setdefault("voltage_penalty", 0.0)
    return plan_restoration(PlannerInput(feeder, 2, TOY_FORECAST, start_hour=13, clpu_enabled=clpu,
                                         backend="embedded", **kw))


def test_two_bus_load_restored_at_first_stage():
    f = make_feeder([bus(1), bus(2)], [line("L", 1, 2)], [gfm("G", 1, 100.0, 100.0)],
                    [load("D", 2, 50.0, "abc")])
    plan = plan_restoration(PlannerInput(f, 2, {"D": [50.0, 50.0]}, clpu_enabled=False))
    assert plan.pickup == {"D": 1}
    assert plan.stages[0].restored_loads == ["D"]
    assert sum(p for p, _ in plan.stages[0].gfm_dispatch["G"].values()) == pytest.approx(50.0, abs=1e-6)


def test_oversized_load_is_never_restored():
    f = make_feeder([bus(1), bus(2), bus(3)], [line("L", 1, 2), line("M", 2, 3)],
                    [gfm("G", 1, 100.0, 100.0)],
                    [load("BIG", 2, 400.0, "abc"), load("OK", 3, 30.0, "abc")])
    fc = {"BIG": [400.0] * 3, "OK": [30.0] * 3}
    plan = plan_restoration(PlannerInput(f, 3, fc, clpu_enabled=False, gfl_penalty=0, voltage_penalty=0))
    assert "BIG" not in plan.pickup
    assert plan.pickup == {"OK": 1}
    assert plan.objective == pytest.approx(90.0, abs=1e-6)


def test_missing_forecast_is_rejected():
    with pytest.raises(ShapeMismatch):
        PlannerInput(toy_feeder(), 2, {"L2": [1.0, 1.0]})
    with pytest.raises(ShapeMismatch):
        PlannerInput(toy_feeder(), 0, {})


@pytest.mark.parametrize(
    "cap, gfl_cap, mls, clpu",
    [(100, 30, 20, True), (150, 30, 60, True), (100, 60, 100, False), (220, 10, 150, True),
     (60, 100, 10, True), (90, 40, 35, False), (300, 50, 200, True), (120, 80, 45, True)],
)
def test_toy_plan_matches_exhaustive_enumeration(cap, gfl_cap, mls, clpu):
    f = toy_feeder(cap, gfl_cap, mls)
    plan = _plan_toy(f, clpu)
    best, _ = exhaustive_plan_value(f, TOY_FORECAST, 2, 13.0, 60.0, clpu)
    assert plan.objective == pytest.approx(best, abs=1e-6)
    assert restored_energy(plan, f, TOY_FORECAST) == pytest.approx(plan.objective, abs=1e-6)


def test_more_generation_never_lowers_the_objective():
    values = [_plan_toy(toy_feeder(cap, 30, 60)).objective for cap in (80, 120, 160, 240)]
    assert all(b >= a - 1e-9 for a, b in zip(values, values[1:]))


def test_demand_table_matches_cold_load_formula():
    f = toy_feeder()
    ld = f.load("L3")
    D = clpu_demand_table(ld, [60.0, 55.0, 50.0], 11.0, 60.0)
    for p in range(3):
        for s in range(3):
            expected = oracle_demand("residential", [60.0, 55.0, 50.0][s], p + 1, s + 1, 11.0, 60.0) if s >= p else 0
            assert D[p, s] == pytest.approx(expected)
    assert np.allclose(clpu_demand_table(ld, [1.0, 2.0], 11.0, 60.0, enabled=False), [[1, 2], [0, 2]])


def test_mls_schedule_grows_with_frequency_headroom():
    ramp = Ramp(3.5, 25.0, 59.8, 59.5)
    sched = mls_schedule(ramp, 4)
    assert sched == pytest.approx({2: 3.5, 3: 11.0, 4: 18.5})
    assert mls_schedule(ramp, 3, f_nadir=59.5) == pytest.approx({2: 3.5, 3: 3.5})


# ---------------------------------------------------------------------------
# bundled feeder


@pytest.fixture(scope="module")
def bundled_plan():
    f = load_bundled_feeder()
    fc = {ld.id: [ld.kw * m for m in (1.0, 1.02, 0.98, 1.01)] for ld in f.loads}
    return f, fc, plan_restoration(PlannerInput(f, 4, fc, start_hour=13))


def test_bundled_plan_is_monotone(bundled_plan):
    _, _, plan = bundled_plan
    for a, b in zip(plan.stages, plan.stages[1:]):
        assert set(a.closed_switches) <= set(b.closed_switches)
        assert set(a.energized_buses) <= set(b.energized_buses)
        assert set(a.restored_loads) <= set(b.restored_loads)


def test_bundled_plan_energizes_only_reachable_trees(bundled_plan):
    f, _, plan = bundled_plan
    gfm_buses = {g.bus for g in f.gfms}
    for st in plan.stages:
        g = nx.Graph()
        for ln in f.energized_lines(set(st.energized_buses), st.closed_switches):
            g.add_edge(ln.from_bus, ln.to_bus)
        g.add_nodes_from(st.energized_buses)
        assert nx.is_forest(g)
        for comp in nx.connected_components(g):
            assert len(comp & gfm_buses) == 1
        assert set(st.energized_buses) == f.energized_subgraph(st.closed_switches, gfm_buses)
        for lid in st.restored_loads:
            assert f.load(lid).bus in g
        energized_gfls = {x.id for x in f.gfls if x.bus in set(st.energized_buses)}
        assert set(st.gfl_setpoints) == energized_gfls


def test_bundled_plan_one_hop_per_stage(bundled_plan):
    f, _, plan = bundled_plan
    assert plan.stages[0].closed_switches == []
    prev = set(plan.stages[0].energized_buses)
    for st in plan.stages[1:]:
        for bid in set(st.energized_buses) - prev:
            # a newly energized zone hangs off a switch whose other end was live a stage earlier
            zone = set(f.zones[f.zone_of[bid]])
            assert any(
                (f.line(s).from_bus in zone and f.line(s).to_bus in prev)
                or (f.line(s).to_bus in zone and f.line(s).from_bus in prev)
                for s in st.closed_switches
            )
        prev = set(st.energized_buses)


def test_bundled_plan_physics(bundled_plan):
    f, _, plan = bundled_plan
    assert balance_residuals(plan, f) <= 1e-6
    for st in plan.stages:
        for b, per in st.voltages.items():
            for u in per.values():
                assert f.buses[b].vmin2 - 1e-7 <= u <= f.buses[b].vmax2 + 1e-7
        for g in f.gfms:
            for p, q in st.gfm_dispatch[g.id].values():
                assert -1e-7 <= p <= g.pmax_kw + 1e-6
    for g in f.gfms:
        sched = mls_schedule(g.ramp, plan.horizon)
        for a, b in zip(plan.stages, plan.stages[1:]):
            for ph in g.phases:
                step = b.gfm_dispatch[g.id][ph][0] - a.gfm_dispatch[g.id][ph][0]
                assert abs(step) <= sched[b.stage] + 1e-6


def test_bundled_plan_follows_zone_groups(bundled_plan):
    f, _, plan = bundled_plan
    first = set(plan.stages[0].restored_ibrs)
    assert {g.id for g in f.gfms} <= first
    assert set(plan.stages[-1].energized_buses) == set(f.buses)


def test_plan_json_round_trip(bundled_plan, tmp_path):
    _, _, plan = bundled_plan
    plan.save(tmp_path / "p.json")
    again = RestorationPlan.load(tmp_path / "p.json")
    assert again.to_dict() == plan.to_dict()
    assert plan_diff(plan, again).empty


def test_diff_reports_a_single_changed_load(bundled_plan):
    _, _, plan = bundled_plan
    other = RestorationPlan.from_dict(plan.to_dict())
    dropped = other.stages[2].restored_loads.pop()
    d = plan_diff(plan, other)
    assert d.entries() == [(3, "loads_only_a", dropped)]
    assert not d.sequence_identical


def test_diff_separates_setpoints_from_sequence(bundled_plan):
    _, _, plan = bundled_plan
    other = RestorationPlan.from_dict(plan.to_dict())
    gid = sorted(other.stages[1].gfl_setpoints)[0]
    ph = sorted(other.stages[1].gfl_setpoints[gid])[0]
    other.stages[1].gfl_setpoints[gid][ph][0] += 1.5
    d = plan_diff(plan, other)
    assert d.sequence_identical and not d.empty
    assert d.entries() == [(2, "setpoint_deltas", {"ibr": gid, "phase": ph, "dP_kw": pytest.approx(1.5),
                                                    "dQ_kvar": 0.0})]


def test_diff_needs_equal_horizons(bundled_plan):
    _, _, plan = bundled_plan
    short = RestorationPlan.from_dict(plan.to_dict())
    short.stages.pop()
    with pytest.raises(ShapeMismatch):
        plan_diff(plan, short)
