"""End-to-end pipeline: data, training, attacks, restoration planning, validation, report.

Every stage writes its artifacts under the output directory and the report is
assembled from those files alone, so any number in it can be traced back to
an artifact on disk.
"""
from __future__ import annotations

import csv
import hashlib
import json
import platform
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import AttackConfig, attack_fn_for, make_oracle, mse_increase, run_attack
from .errors import ConfigError, RestorationAttackError, StageFailure
from .feeder import bundled_feeder_path, load_feeder
from .forecast import ForecastModel, build_windows, fit_normalizer, read_dataset_csv, stack, train
from .planner import PlannerInput, RestorationPlan, plan_diff, plan_restoration
from .synth import PROFILES, synth_dataset
from .validator import validate_plan

OUTPUT_ENV = "RESTORATION_ATTACK_OUTPUT_DIR"


def demo_config_path() -> Path:
    """Bundled configuration for the full demonstration run."""
    return Path(__file__).parent / "data" / "demo_config.json"


DEFAULT_ATTACKS = (
    {"name": "pgd_temperature", "method": "pgd", "target_feature": "temperature"},
    {"name": "greedy_pgd", "method": "greedy_pgd"},
    {"name": "saa_n12", "method": "saa", "sparsity": 12},
    {"name": "saa_n72", "method": "saa", "sparsity": 72},
)


def derive_seed(master: int, *labels) -> int:
    """Stable 32-bit seed for a named sub-task."""
    key = "|".join([str(master), *map(str, labels)])
    return int(hashlib.sha256(key.encode()).hexdigest()[:8], 16)


@dataclass
class ExperimentConfig:
    seed: int = 0
    profiles: list = field(default_factory=lambda: list(PROFILES))
    days: int = 40
    train_days: int = 30
    datasets: dict = field(default_factory=dict)  # profile -> CSV path; synthesized when absent
    model: dict = field(
        default_factory=lambda: {"architecture": "rnn", "hidden": 8, "epochs": 400, "learning_rate": 0.05, "H": 72}
    )
    test_windows: int = 32
    attack: dict = field(default_factory=lambda: {"epsilon": 0.05, "iterations": 50, "mode": "white_box"})
    attack_methods: list = field(default_factory=lambda: [dict(a) for a in DEFAULT_ATTACKS])
    feeder: str = "bundled"
    attacked_loads: list | None = None
    restoration: dict = field(
        default_factory=lambda: {
            "method": "saa_n72",
            "epsilon": 0.05,
            "stages": 4,
            "stage_minutes": 60,
            "start_hour": 13,
            "day": 3,
            "clpu_enabled": True,
        }
    )
    output_dir: str = "experiment_out"

    @classmethod
    def from_dict(cls, doc, base_dir="."):
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls()
        for k, v in doc.items():
            if k in ("model", "attack", "restoration"):
                merged = dict(getattr(cfg, k))
                merged.update(v)
                v = merged
            setattr(cfg, k, v)
        base = Path(base_dir)
        cfg.datasets = {p: str((base / path).resolve()) for p, path in cfg.datasets.items()}
        if cfg.feeder != "bundled":
            cfg.feeder = str((base / cfg.feeder).resolve())
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        return cls.from_dict(doc, path.parent)

    def feeder_path(self):
        return bundled_feeder_path() if self.feeder == "bundled" else Path(self.feeder)

    def validate(self):
        if not isinstance(self.seed, int):
            raise ConfigError("seed must be an integer")
        for p in self.profiles:
            if p not in PROFILES:
                raise ConfigError(f"unknown profile {p!r}")
        if self.days < 30 or not 0 < self.train_days < self.days:
            raise ConfigError("need days >= 30 and 0 < train_days < days")
        for p, path in self.datasets.items():
            if not Path(path).is_file():
                raise ConfigError(f"dataset for {p} not found: {path}")
        if not self.feeder_path().is_file():
            raise ConfigError(f"feeder file not found: {self.feeder_path()}")
        names = [a.get("name") for a in self.attack_methods]
        if len(set(names)) != len(names) or None in names:
            raise ConfigError("every attack method needs a unique name")
        for a in self.attack_methods:
            if a.get("method") not in ("pgd", "greedy_pgd", "saa"):
                raise ConfigError(f"unknown attack method {a.get('method')!r}")
            try:
                self.attack_config(a)
            except RestorationAttackError as exc:
                raise ConfigError(f"attack {a['name']}: {exc}") from None
        r = self.restoration
        if self.attack_methods and r.get("method") not in names:
            raise ConfigError(f"restoration.method {r.get('method')!r} is not a configured attack")
        if int(r.get("stages", 0)) < 1:
            raise ConfigError("restoration.stages must be >= 1")
        feeder = load_feeder(self.feeder_path())
        ids = {ld.id for ld in feeder.loads}
        for lid in self.attacked_loads or []:
            if lid not in ids:
                raise ConfigError(f"attacked load {lid!r} is not in the feeder")
        for ld in feeder.loads:
            if ld.profile not in self.profiles:
                raise ConfigError(f"load {ld.id} uses profile {ld.profile!r} that is not configured")
        if self.test_windows < 1:
            raise ConfigError("test_windows must be positive")

    def attack_config(self, spec, epsilon=None):
        common = dict(self.attack)
        if epsilon is not None:
            common["epsilon"] = epsilon
        extra = {k: v for k, v in spec.items() if k not in ("name", "method")}
        return AttackConfig(**{**common, **extra})

    def to_dict(self):
        return asdict(self)

    def digest(self):
        """Hash of everything that shapes results (the output location does not)."""
        doc = self.to_dict()
        doc.pop("output_dir")
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# stages


class Artifacts:
    """Paths of every stage artifact under one output directory."""

    def __init__(self, root):
        self.root = Path(root)

    def data(self, profile):
        return self.root / "data" / f"{profile}.csv"

    def model(self, profile):
        return self.root / "models" / f"{profile}.json"

    attack_table = property(lambda self: self.root / "attack_table.json")
    forecasts = property(lambda self: self.root / "forecasts.json")
    plan_attacked = property(lambda self: self.root / "plan_attacked.json")
    plan_clean = property(lambda self: self.root / "plan_clean.json")
    plan_diff = property(lambda self: self.root / "plan_diff.json")
    validation_attacked = property(lambda self: self.root / "validation_attacked.json")
    validation_clean = property(lambda self: self.root / "validation_clean.json")
    config = property(lambda self: self.root / "config.json")
    report = property(lambda self: self.root / "report.json")


def _dump(path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True))


def _split(cfg: ExperimentConfig, series):
    samples = build_windows(series, int(cfg.model.get("H", 72)))
    H = int(cfg.model.get("H", 72))
    n_train = cfg.train_days * 24 - H
    if n_train < 1 or n_train >= len(samples):
        raise ConfigError("train_days leaves no training or test windows")
    norm = fit_normalizer(samples[:n_train])
    return norm, samples[:n_train], samples[n_train:]


def _test_subset(cfg, test):
    idx = np.linspace(0, len(test) - 1, min(cfg.test_windows, len(test))).round().astype(int)
    return [test[i] for i in sorted(set(idx.tolist()))]


def stage_data(cfg: ExperimentConfig, art: Artifacts):
    for p in cfg.profiles:
        if p in cfg.datasets:
            continue
        art.data(p).parent.mkdir(parents=True, exist_ok=True)
        synth_dataset(derive_seed(cfg.seed, "data", p), cfg.days, p, art.data(p))


def _series(cfg, art, profile):
    return read_dataset_csv(cfg.datasets.get(profile, art.data(profile)))


def stage_train(cfg: ExperimentConfig, art: Artifacts):
    metrics = {}
    for p in cfg.profiles:
        norm, tr, te = _split(cfg, _series(cfg, art, p))
        m = cfg.model
        model = train(
            norm.apply(tr),
            {
                "architecture": m.get("architecture", "rnn"),
                "hidden": int(m.get("hidden", 8)),
                "epochs": int(m.get("epochs", 400)),
                "learning_rate": m.get("learning_rate"),
                "seed": derive_seed(cfg.seed, "model", p),
            },
            norm,
        )
        art.model(p).parent.mkdir(parents=True, exist_ok=True)
        model.save(art.model(p))
        X, y = stack(norm.apply(_test_subset(cfg, te)))
        metrics[p] = {"train_mse": model.training_log[-1][1] if model.training_log else None,
                      "test_mse": model.mse(X, y)}
    return metrics


def stage_attack(cfg: ExperimentConfig, art: Artifacts, metrics=None):
    table = {}
    for spec in cfg.attack_methods:
        acfg = cfg.attack_config(spec)
        row = {}
        for p in cfg.profiles:
            model = ForecastModel.load(art.model(p))
            norm, _, te = _split(cfg, _series(cfg, art, p))
            samples = norm.apply(_test_subset(cfg, te))
            row[p] = mse_increase(model, samples, attack_fn_for(model, spec["method"], acfg))
        table[spec["name"]] = row
    _dump(art.attack_table, {"mse_increase": table, "test_metrics": metrics or {},
                             "attack": cfg.attack, "methods": cfg.attack_methods})
    return table


def _restoration_samples(cfg, art, profile):
    """Normalized samples whose targets are the consecutive stage hours."""
    norm, _, te = _split(cfg, _series(cfg, art, profile))
    r = cfg.restoration
    stages = int(r["stages"])
    day, hour = int(r.get("day", 0)), int(r.get("start_hour", 13))
    candidates = [
        k for k, s in enumerate(te)
        if _target_time(s).hour == hour and k // 24 >= day and k + stages <= len(te)
    ]
    if not candidates:
        raise ConfigError("restoration.day/start_hour fall outside the test period")
    k0 = candidates[0]
    picked = te[k0 : k0 + stages]
    return norm, picked, norm.apply(picked)


def _target_time(sample):
    from datetime import timedelta

    return sample.window.timestamps[-1] + timedelta(hours=1)


def stage_forecast(cfg: ExperimentConfig, art: Artifacts):
    r = cfg.restoration
    spec = next((a for a in cfg.attack_methods if a["name"] == r.get("method")), None)
    out = {}
    for p in cfg.profiles:
        model = ForecastModel.load(art.model(p))
        norm, raw, samples = _restoration_samples(cfg, art, p)
        clean = [model.predict(s.window) for s in samples]
        if spec is None:
            attacked = list(clean)
        else:
            acfg = cfg.attack_config(spec, epsilon=r.get("epsilon"))
            attacked = [
                model.predict(run_attack(spec["method"], make_oracle(model, acfg), s.window, s.target, acfg).adversarial)
                for s in samples
            ]
        out[p] = {
            "timestamps": [_target_time(s).isoformat() for s in raw],
            "true_kw": [float(s.target) for s in raw],
            "clean_kw": [float(norm.denormalize_load(v)) for v in clean],
            "attacked_kw": [float(norm.denormalize_load(v)) for v in attacked],
            "base_kw": PROFILES[p].base_kw,
        }
    feeder = load_feeder(cfg.feeder_path())
    attacked_ids = set(cfg.attacked_loads) if cfg.attacked_loads is not None else {
        ld.id for ld in feeder.loads if ld.attacked
    }
    loads = {"clean": {}, "attacked": {}}
    for ld in feeder.loads:
        prof = out[ld.profile]
        scale = ld.kw / prof["base_kw"]
        loads["clean"][ld.id] = [scale * v for v in prof["clean_kw"]]
        src = prof["attacked_kw"] if ld.id in attacked_ids else prof["clean_kw"]
        loads["attacked"][ld.id] = [scale * v for v in src]
    order = [ld.id for ld in feeder.loads]
    doc = {"profiles": out, "loads": loads, "attacked_loads": sorted(attacked_ids, key=order.index)}
    _dump(art.forecasts, doc)
    return doc


def stage_plan(cfg: ExperimentConfig, art: Artifacts):
    feeder = load_feeder(cfg.feeder_path())
    fc = json.loads(art.forecasts.read_text())["loads"]
    r = cfg.restoration
    plans = {}
    for key, path in (("attacked", art.plan_attacked), ("clean", art.plan_clean)):
        plan = plan_restoration(
            PlannerInput(
                feeder,
                int(r["stages"]),
                fc[key],
                stage_minutes=float(r.get("stage_minutes", 60)),
                start_hour=float(r.get("start_hour", 13)),
                clpu_enabled=bool(r.get("clpu_enabled", True)),
            )
        )
        plan.save(path)
        plans[key] = plan
    diff = plan_diff(plans["clean"], plans["attacked"])
    _dump(art.plan_diff, diff.to_dict())
    return plans, diff


def stage_validate(cfg: ExperimentConfig, art: Artifacts):
    feeder = load_feeder(cfg.feeder_path())
    actual = json.loads(art.forecasts.read_text())["loads"]["clean"]
    reports = {}
    for key, plan_path, out_path in (
        ("attacked", art.plan_attacked, art.validation_attacked),
        ("clean", art.plan_clean, art.validation_clean),
    ):
        rep = validate_plan(feeder, RestorationPlan.load(plan_path), actual)
        rep.save_json(out_path)
        reports[key] = rep
    reports["attacked"].write_violations_csv(art.root / "violations.csv")
    reports["attacked"].write_generation_csv(art.root / "generation.csv")
    return reports


# ---------------------------------------------------------------------------
# report


def restoration_sequence(feeder, plan: RestorationPlan):
    """Per microgrid and stage, the IBRs and loads that come online (restoration-table shape)."""
    gfm_rank = {g.id: k for k, g in enumerate(feeder.gfms)}
    label_of_bus = {}
    final = plan.stages[-1]
    for island in feeder.islands(final.closed_switches, [g.bus for g in feeder.gfms]):
        gfms = sorted((g.id for g in feeder.gfms if g.bus in island), key=gfm_rank.get)
        for b in island:
            label_of_bus[b] = f"MG {gfm_rank[gfms[0]] + 1}"
    ibr_bus = {g.id: g.bus for g in feeder.ibrs}
    rows = []
    seen_ibr, seen_load, seen_sw = set(), set(), set()
    for st in plan.stages:
        per = {}
        for gid in st.restored_ibrs:
            if gid not in seen_ibr:
                per.setdefault(label_of_bus[ibr_bus[gid]], {"ibrs": [], "loads": [], "switches": []})["ibrs"].append(gid)
        for lid in st.restored_loads:
            if lid not in seen_load:
                lab = label_of_bus[feeder.load(lid).bus]
                per.setdefault(lab, {"ibrs": [], "loads": [], "switches": []})["loads"].append(lid)
        for sid in st.closed_switches:
            if sid not in seen_sw:
                lab = label_of_bus[feeder.line(sid).to_bus]
                per.setdefault(lab, {"ibrs": [], "loads": [], "switches": []})["switches"].append(sid)
        seen_ibr |= set(st.restored_ibrs)
        seen_load |= set(st.restored_loads)
        seen_sw |= set(st.closed_switches)
        labels = sorted(set(label_of_bus.values()), key=lambda s: int(s.split()[-1]))
        for lab in labels:
            entry = per.get(lab, {"ibrs": [], "loads": [], "switches": []})
            rows.append({"microgrid": lab, "stage": st.stage, **entry})
    return rows


def build_report(out_dir, timestamp=None):
    """Assemble the report from on-disk artifacts only and write report files."""
    art = Artifacts(out_dir)
    try:
        cfg_doc = json.loads(art.config.read_text())
    except FileNotFoundError:
        raise StageFailure("report", f"no config.json in {out_dir}; run the pipeline first") from None
    cfg = ExperimentConfig.from_dict(cfg_doc)
    feeder = load_feeder(cfg.feeder_path())
    attack = json.loads(art.attack_table.read_text()) if art.attack_table.exists() else {"mse_increase": {}}
    plans = {k: RestorationPlan.load(p) for k, p in (("attacked", art.plan_attacked), ("clean", art.plan_clean))}
    diff = json.loads(art.plan_diff.read_text())
    val = {k: json.loads(p.read_text()) for k, p in
           (("attacked", art.validation_attacked), ("clean", art.validation_clean))}
    forecasts = json.loads(art.forecasts.read_text())

    verdicts_differ = _verdicts(val["attacked"]) != _verdicts(val["clean"])
    sequence_identical = diff["sequence_identical"]
    if sequence_identical and verdicts_differ:
        finding = "restoration sequences identical; validation verdicts differ"
    elif sequence_identical:
        finding = "restoration sequences identical; validation verdicts identical"
    else:
        finding = "restoration sequences differ between attacked and clean plans"
    setpoint_changes = sum(len(s["setpoint_deltas"]) for s in diff["stages"])

    report = {
        "attack_table": attack["mse_increase"],
        "forecast_deviation_kw": {
            p: [a - c for a, c in zip(d["attacked_kw"], d["clean_kw"])] for p, d in forecasts["profiles"].items()
        },
        "plans": {
            k: {"objective": plan.objective, "sequence": restoration_sequence(feeder, plan)}
            for k, plan in plans.items()
        },
        "plan_stability": {
            "sequence_identical": sequence_identical,
            "setpoint_differences": setpoint_changes,
            "verdicts_differ": verdicts_differ,
            "finding": finding,
        },
        "validation": {
            k: {
                "first_failure": v["first_failure"],
                "all_feasible": v["all_feasible"],
                "violations": [
                    {"stage": e["stage"], "microgrid": e["microgrid"], **viol}
                    for e in v["entries"]
                    for viol in e["violations"]
                ],
                "generation": v["summary"],
            }
            for k, v in val.items()
        },
        "provenance": {
            "config_sha256": cfg.digest(),
            "seed": cfg.seed,
            "package_version": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": _scipy_version(),
            "timestamp": timestamp or datetime.now(timezone.utc).isoformat(timespec="seconds"),
        },
    }
    _dump(art.report, report)
    _write_tables(art, report)
    return report


def _scipy_version():
    import scipy

    return scipy.__version__


def _verdicts(val_doc):
    return [(e["microgrid"], e["stage"], e["status"]) for e in val_doc["entries"]]


def _write_tables(art, report):
    table = report["attack_table"]
    profiles = list(next(iter(table.values()), {}).keys())
    with open(art.root / "attack_mse.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["profile", *table.keys()])
        for p in profiles:
            w.writerow([p, *(f"{table[m][p]:.8f}" for m in table)])
    with open(art.root / "restoration_sequence.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["plan", "microgrid", "stage", "switches", "ibrs", "loads"])
        for k, plan in report["plans"].items():
            for row in plan["sequence"]:
                w.writerow([k, row["microgrid"], row["stage"], " ".join(row["switches"]),
                            " ".join(row["ibrs"]), " ".join(row["loads"])])


# ---------------------------------------------------------------------------


def run_experiment(cfg: ExperimentConfig, out_dir=None, timestamp=None):
    """Run every stage; a failing stage raises :class:`StageFailure` tagged with its name."""
    art = Artifacts(out_dir or cfg.output_dir)
    art.root.mkdir(parents=True, exist_ok=True)
    _dump(art.config, cfg.to_dict())
    steps = (
        ("synth-data", lambda: stage_data(cfg, art)),
        ("train", lambda: stage_train(cfg, art)),
        ("attack", None),
        ("forecast", lambda: stage_forecast(cfg, art)),
        ("plan", lambda: stage_plan(cfg, art)),
        ("validate", lambda: stage_validate(cfg, art)),
        ("report", lambda: build_report(art.root, timestamp)),
    )
    metrics = None
    report = None
    for name, fn in steps:
        try:
            if name == "train":
                metrics = fn()
            elif name == "attack":
                stage_attack(cfg, art, metrics)
            else:
                result = fn()
                if name == "report":
                    report = result
        except StageFailure:
            raise
        except (RestorationAttackError, OSError, ValueError, KeyError) as exc:
            raise StageFailure(name, f"{type(exc).__name__}: {exc}") from exc
    return report
