"""Generate ``src/restoration_attack/data/ieee123_modified.json``.

The layout approximates a sectionalized 123-bus feeder: four grid-forming
sources, remote switches between load zones, grid-following units at fixed
buses and seven attacked loads bound to the seven synthetic profiles.  The
output is deterministic.

Run: ``python3 scripts/build_bundled_feeder.py``
"""
from __future__ import annotations

import sys
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "src"))

from restoration_attack.feeder import bundled_feeder_path, feeder_from_dict, save_feeder  # noqa: E402
from restoration_attack.synth import PROFILES  # noqa: E402

# zones per microgrid in switching order; the first zone holds the GFM
ZONES = {
    1: [[8, 9, 10, 11, 12, 13, 14], [1, 2, 3, 4, 5, 6, 7, 15, 16, 17, 119]],
    2: [
        [18, 19, 20],
        [21, 22, 23, 24, 25, 26, 27, 31, 32, 33, 34, 35, 36, 37, 38, 39, 40, 41, 42, 43, 120],
        [28, 29, 30, 44, 45, 46, 47, 48, 115],
        [49, 50, 51, 118],
    ],
    3: [[60, 62], [52, 53, 54, 55, 56, 57, 58, 59, 61, 121], [63, 64, 65, 66]],
    4: [
        [72, 73, 74, 75, 76],
        [67, 68, 69, 70, 71, 77, 78, 79, 80, 86, 87, 88, 89, 90, 91, 92, 97, 98, 99, 100, 117, 122],
        [81, 82, 83, 84, 85, 93, 94, 95, 96, 101, 102, 103, 104, 105, 106, 107, 123],
        [108, 109, 110, 111, 112, 113, 114, 116],
    ],
}
GFM_BUSES = {1: 13, 2: 19, 3: 60, 4: 76}
GFL_1PH = [7, 15, 41, 46, 47, 51, 61, 64, 69, 82, 93, 97, 103]
GFL_3PH = [5, 23, 29, 31, 57, 70, 80, 90, 110]
NO_LOAD = {34, 119, 120, 121, 122, 123}

# load id -> (profile, phase); one attacked load per profile
ATTACKED = {
    12: ("SmallHotel", "a"),
    21: ("MidriseApartment", "a"),
    46: ("FullSrvcRestaurant", "a"),
    66: ("QuickSrvcRestaurant", "b"),
    73: ("HIGH", "c"),
    75: ("BASE", "c"),
    97: ("LOW", "a"),
}

BASE_KVA = 1000.0
BASE_KV = 4.16
# ohms per mile, three-phase overhead configuration
R3 = np.array([[0.4576, 0.1560, 0.1535], [0.1560, 0.4666, 0.1580], [0.1535, 0.1580, 0.4615]])
X3 = np.array([[1.0780, 0.5017, 0.3849], [0.5017, 1.0482, 0.4236], [0.3849, 0.4236, 1.0651]])
SEGMENT_MILES = (0.05, 0.08, 0.06, 0.04)
LOAD_SHARE = 0.22  # zone nominal load as a fraction of zone generation capacity
RESIDENTIAL = ("BASE", "HIGH", "LOW")
COMMERCIAL = ("FullSrvcRestaurant", "MidriseApartment", "QuickSrvcRestaurant", "SmallHotel")


def _ibr_phase(bus):
    return "abc"[bus % 3]


def build():
    buses, lines, ibrs, loads = [], [], [], []
    seg = 0

    def add_line(a, b, switch=False):
        nonlocal seg
        miles = SEGMENT_MILES[seg % len(SEGMENT_MILES)]
        seg += 1
        lines.append(
            {
                "id": f"{'SW' if switch else 'L'}{a}_{b}",
                "from": str(a),
                "to": str(b),
                "phases": "abc",
                "r_ohm": (R3 * miles).round(6).tolist(),
                "x_ohm": (X3 * miles).round(6).tolist(),
                "pmax_kw": 1200.0 if switch else 1500.0,
                "qmax_kvar": 600.0 if switch else 750.0,
                "switch": switch,
            }
        )

    for mg, zones in ZONES.items():
        for zi, zone in enumerate(zones):
            for b in zone:
                buses.append({"id": str(b), "phases": "abc", "vmin2": 0.95**2, "vmax2": 1.05**2})
            # tree inside the zone: mostly a chain with a branch every third bus
            for k in range(1, len(zone)):
                parent = zone[k - 2] if k % 3 == 0 and k >= 2 else zone[k - 1]
                add_line(parent, zone[k])
            if zi > 0:
                prev = zones[zi - 1]
                add_line(prev[len(prev) // 2], zone[0], switch=True)

    ramp = {"mls_kw": 3.5, "sens_kw_per_hz": 25.0, "f_nadir": 59.8, "f_min": 59.5}
    for mg, bus in GFM_BUSES.items():
        ibrs.append(
            {"id": f"G{bus}", "bus": str(bus), "kind": "GFM", "phases": "abc",
             "pmax_kw": 500.0, "qmax_kvar": 250.0, "ramp": ramp}
        )
    for bus in GFL_3PH:
        ibrs.append({"id": f"G{bus}", "bus": str(bus), "kind": "GFL", "phases": "abc",
                     "pmax_kw": 500.0, "qmax_kvar": 250.0})
    for bus in GFL_1PH:
        ibrs.append({"id": f"G{bus}", "bus": str(bus), "kind": "GFL", "phases": _ibr_phase(bus),
                     "pmax_kw": 400.0, "qmax_kvar": 200.0})
    ibrs.sort(key=lambda d: int(d["bus"]))

    cap = {}
    for d in ibrs:
        cap[int(d["bus"])] = cap.get(int(d["bus"]), 0.0) + d["pmax_kw"] * len(d["phases"])
    k = 0
    for mg, zones in ZONES.items():
        for zone in zones:
            served = [b for b in zone if b not in NO_LOAD]
            budget = LOAD_SHARE * sum(cap.get(b, 0.0) for b in zone)
            for i, b in enumerate(served):
                kw = budget / len(served) * (0.8 + 0.4 * ((i * 7) % 5) / 4)
                if b in ATTACKED:
                    profile, phase = ATTACKED[b]
                else:
                    profile = (RESIDENTIAL + COMMERCIAL)[k % 7]
                    phase = "abc"[k % 3]
                k += 1
                loads.append(
                    {
                        "id": f"L{b}",
                        "bus": str(b),
                        "phases": phase,
                        "kw": round(kw, 1),
                        "weight": 1.0,
                        "profile": profile,
                        "type": PROFILES[profile].load_type,
                        "attacked": b in ATTACKED,
                        "pf": 0.95,
                    }
                )
    loads.sort(key=lambda d: int(d["bus"]))
    buses.sort(key=lambda d: int(d["id"]))
    return {
        "name": "ieee123-modified",
        "base": {"kva": BASE_KVA, "kv": BASE_KV},
        "buses": buses,
        "lines": lines,
        "ibrs": ibrs,
        "loads": loads,
    }


def main():
    feeder = feeder_from_dict(build())
    save_feeder(feeder, bundled_feeder_path())
    print(f"wrote {bundled_feeder_path()} ({len(feeder.buses)} buses, {len(feeder.loads)} loads)")


if __name__ == "__main__":
    main()
