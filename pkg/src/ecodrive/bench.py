"""Pipeline orchestration: corpus DP solves, net training and the route benchmark.

Every stage reads its inputs from and writes its outputs to one output
directory, so the stages can be run separately from the command line or
chained in-process.  Nothing time- or host-dependent is written to disk.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, dp, mpc
from . import terminal as T
from .vehicle import VehicleParams
from .world import (LeadTrajectory, Scenario, WorldError, build_scenario, generate_scenarios, load_scenario,
                    save_scenario, scenario_variants)

CONTROLLERS = ("dp", "ag_nn_mpc", "ensemble_mpc")
MPC_SOURCES = {"ag_nn_mpc": "ag_nn", "ensemble_mpc": "ensemble_nn"}
FOOTER = ("Absolute grams come from a surrogate powertrain and are not comparable to a calibrated vehicle; "
          "read the orderings and the relative deltas.")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    gamma: float = 0.9
    out_dir: str = "out"
    jobs: int = 1
    variants: tuple = (("route1", 6), ("route2", 4))
    synthetic: int = 0
    scenario_files: tuple = ()
    budget: int = 40000
    grid: dp.GridSpec = field(default_factory=dp.GridSpec)
    hidden: tuple = (64, 64)
    epochs: int = 200
    learning_rate: float = 0.02
    batch_size: int = 256
    val_split: float = 0.2
    bench_routes: tuple = ("route1", "route2")

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma {self.gamma} outside [0, 1]")
        if self.jobs < 1:
            raise ConfigError("jobs must be at least 1")
        for path in self.scenario_files:
            if not Path(path).is_file():
                raise ConfigError(f"scenario file not found: {path}")
        for rid in self.bench_routes:
            if rid not in ("route1", "route2") and not Path(rid).is_file():
                raise ConfigError(f"benchmark scenario not found: {rid}")

    @property
    def out(self) -> Path:
        return Path(self.out_dir)

    def train_config(self) -> T.TrainConfig:
        return T.TrainConfig(hidden=self.hidden, learning_rate=self.learning_rate, batch_size=self.batch_size,
                             epochs=self.epochs, seed=self.seed, val_split=self.val_split)

    def to_ini(self) -> str:
        """Canonical text form; also the input of the config hash."""
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp["pipeline"] = {"seed": str(self.seed), "gamma": repr(self.gamma), "jobs": str(self.jobs)}
        cp["corpus"] = {
            "variants": ", ".join(f"{rid}:{n}" for rid, n in self.variants),
            "synthetic": str(self.synthetic),
            "scenario_files": ", ".join(self.scenario_files),
            "budget": str(self.budget),
        }
        cp["grid"] = {k: (", ".join(repr(x) for x in v) if isinstance(v, tuple) else repr(v))
                      for k, v in asdict(self.grid).items()}
        cp["train"] = {
            "hidden": ", ".join(str(h) for h in self.hidden),
            "epochs": str(self.epochs),
            "learning_rate": repr(self.learning_rate),
            "batch_size": str(self.batch_size),
            "val_split": repr(self.val_split),
        }
        cp["benchmark"] = {"routes": ", ".join(self.bench_routes)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def hash(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:16]

    def replace(self, **kw) -> "PipelineConfig":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update({k: v for k, v in kw.items() if v is not None})
        return PipelineConfig(**d)


def _split(text: str) -> list:
    return [p.strip() for p in text.split(",") if p.strip()]


def load_config(path) -> PipelineConfig:
    """Read a pipeline INI; relative scenario paths resolve against the file's directory."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser()
    cp.optionxform = str
    try:
        cp.read(path)
        kw = {}
        if cp.has_section("pipeline"):
            sec = cp["pipeline"]
            for key, conv in (("seed", int), ("gamma", float), ("jobs", int), ("out_dir", str)):
                if key in sec:
                    kw[key] = conv(sec[key])
        if cp.has_section("corpus"):
            sec = cp["corpus"]
            if "variants" in sec:
                pairs = []
                for item in _split(sec["variants"]):
                    rid, _, n = item.partition(":")
                    pairs.append((rid.strip(), int(n)))
                kw["variants"] = tuple(pairs)
            if "synthetic" in sec:
                kw["synthetic"] = int(sec["synthetic"])
            if "scenario_files" in sec:
                kw["scenario_files"] = tuple(str(_resolve(path, p)) for p in _split(sec["scenario_files"]))
            if "budget" in sec:
                kw["budget"] = int(sec["budget"])
        if cp.has_section("grid"):
            g = {}
            for key, val in cp["grid"].items():
                parts = _split(val)
                if key in ("accels", "engine_states"):
                    conv = float if key == "accels" else int
                    g[key] = tuple(conv(p) for p in parts)
                else:
                    g[key] = float(val)
            kw["grid"] = dp.GridSpec(**g)
        if cp.has_section("train"):
            sec = cp["train"]
            if "hidden" in sec:
                kw["hidden"] = tuple(int(h) for h in _split(sec["hidden"]))
            for key, conv in (("epochs", int), ("learning_rate", float), ("batch_size", int),
                              ("val_split", float)):
                if key in sec:
                    kw[key] = conv(sec[key])
        if cp.has_section("benchmark") and "routes" in cp["benchmark"]:
            kw["bench_routes"] = tuple(r if r in ("route1", "route2") else str(_resolve(path, r))
                                       for r in _split(cp["benchmark"]["routes"]))
    except (configparser.Error, ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path}: {exc}") from exc
    return PipelineConfig(**kw)


def _resolve(cfg_path: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else cfg_path.parent / q


# ---------------------------------------------------------------------------
# scenarios


def corpus_scenarios(cfg: PipelineConfig) -> list[Scenario]:
    """Training corridors: seeded variants of the base routes, synthetic corridors, then explicit files."""
    out = []
    for i, (rid, n) in enumerate(cfg.variants):
        if n > 0:
            out += scenario_variants(build_scenario(rid), n, cfg.seed + 1 + i)
    if cfg.synthetic > 0:
        out += generate_scenarios(cfg.synthetic, cfg.seed)
    for path in cfg.scenario_files:
        out.append(load_scenario(path))
    names = [s.name for s in out]
    if len(set(names)) != len(names):
        raise ConfigError("corpus scenario names must be unique")
    if not out:
        raise ConfigError("training corpus is empty")
    return out


def bench_scenarios(cfg: PipelineConfig) -> list[Scenario]:
    return [build_scenario(r) if r in ("route1", "route2") else load_scenario(r) for r in cfg.bench_routes]


def cmd_gen_scenarios(cfg: PipelineConfig) -> list[Path]:
    d = cfg.out / "scenarios"
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for scn in corpus_scenarios(cfg) + bench_scenarios(cfg):
        p = d / f"{scn.name}.ini"
        save_scenario(scn, p)
        paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# solve-dp


def _solve_one(args):
    scn, grid, gamma, dp_dir = args
    dp_dir = Path(dp_dir)
    rows = []
    try:
        lead = dp.resolve_lead(scn, grid=grid)
    except dp.DpError as exc:
        return [{"scenario": scn.name, "variant": v, "status": f"failed: {exc}"} for v in ("nojam", "jam")]
    if lead is not None:
        lead.save_csv(dp_dir / f"{scn.name}.lead.csv")
    for variant, s in (("nojam", scn.without_jams()), ("jam", scn)):
        row = {"scenario": scn.name, "variant": variant}
        try:
            prob, vf, pol, traj = dp.solve_scenario(s, grid=grid, gamma=gamma, lead=lead if variant == "jam" else None)
        except dp.DpError as exc:
            row["status"] = f"failed: {exc}"
            rows.append(row)
            continue
        path = dp_dir / f"{scn.name}.{variant}.vf"
        dp.save_value_function(vf, path)
        row.update(status="ok", efc_g=traj.efc_g, travel_time_s=traj.travel_time_s,
                   final_soc_pct=100.0 * traj.final_soc, total_cost=traj.total_cost, vf_file=path.name)
        rows.append(row)
    return rows


SUMMARY_FIELDS = ["scenario", "variant", "status", "efc_g", "travel_time_s", "final_soc_pct", "total_cost", "vf_file"]


def cmd_solve_dp(cfg: PipelineConfig, log=print) -> list[dict]:
    """Solve every corpus scenario with and without its jams; returns the summary rows.

    The jam-conditioned solve also carries the scenario's lead vehicle, which
    is written next to the value functions as ``<name>.lead.csv``.
    """
    scns = corpus_scenarios(cfg)
    d = cfg.out / "dp"
    d.mkdir(parents=True, exist_ok=True)
    sd = cfg.out / "scenarios"
    sd.mkdir(parents=True, exist_ok=True)
    for scn in scns:
        save_scenario(scn, sd / f"{scn.name}.ini")
    jobs = [(scn, cfg.grid, cfg.gamma, str(d)) for scn in scns]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(cfg.jobs) as ex:
            results = list(ex.map(_solve_one, jobs))
    else:
        results = []
        for job in jobs:
            results.append(_solve_one(job))
            log(f"solved {job[0].name}")
    rows = [r for rs in results for r in rs]
    with open(d / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, SUMMARY_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return rows


# ---------------------------------------------------------------------------
# train


def _entries(cfg: PipelineConfig, variant: str) -> list:
    d = cfg.out / "dp"
    suffix = "nojam" if variant == "ag" else "jam"
    entries = []
    for scn in corpus_scenarios(cfg):
        path = d / f"{scn.name}.{suffix}.vf"
        if not path.is_file():
            continue
        vf, _, header = dp.load_value_function(path)
        route = scn.route.without_jams() if variant == "ag" else scn.route
        lead = None
        if variant == "aw":
            lp = d / f"{scn.name}.lead.csv"
            if not lp.is_file():
                continue
            lead = LeadTrajectory.load_csv(lp)
        entries.append(T.DatasetEntry(route, None, vf, lead))
    if not entries:
        raise ConfigError(f"no {suffix} value functions under {d}; run solve-dp first")
    return entries


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def cmd_train(cfg: PipelineConfig, variant: str, log=print) -> dict:
    """Fit one terminal-cost net; writes ``<variant>.npz``, its loss CSV and a JSON report."""
    if variant not in ("ag", "aw"):
        raise ConfigError(f"unknown variant {variant!r}")
    ds = T.build_dataset(_entries(cfg, variant), variant, cfg.budget, cfg.seed)
    meta = {"variant": variant, "gamma": cfg.gamma, "dataset_hash": T.dataset_hash(ds)}
    net, rep = T.train(ds, cfg.train_config(), meta)
    d = cfg.out / "nets"
    d.mkdir(parents=True, exist_ok=True)
    net.save(d / f"{variant}.npz")
    with open(d / f"{variant}_loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss"])
        for e in range(1, len(rep.train_loss)):
            w.writerow([e, repr(rep.train_loss[e]), repr(rep.val_loss[e])])
    report = {"variant": variant, "n_inputs": net.n_inputs, "features": list(ds.names), "n_samples": len(ds),
              "n_train": rep.n_train, "n_val": rep.n_val, "rel_rmse_val": rep.rel_rmse_val,
              "rel_rmse_train": rep.rel_rmse_train, "initial_loss": rep.train_loss[0],
              "final_loss": rep.train_loss[-1], "dataset_hash": meta["dataset_hash"],
              "net_hash": file_hash(d / f"{variant}.npz")}
    (d / f"{variant}_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    log(f"{variant}: {len(ds)} samples, held-out relative RMSE {rep.rel_rmse_val:.4f}")
    return report


def load_nets(cfg: PipelineConfig):
    d = cfg.out / "nets"
    nets = []
    for v in ("ag", "aw"):
        p = d / f"{v}.npz"
        if not p.is_file():
            raise ConfigError(f"missing net {p}; run train --variant {v} first")
        nets.append(T.TerminalCostNet.load(p))
    return tuple(nets)


# ---------------------------------------------------------------------------
# benchmark


@dataclass
class RouteRun:
    """In-memory outcome for one benchmark route."""

    scenario: Scenario
    lead: LeadTrajectory | None
    problem: dp.DpProblem
    vf: dp.ValueFunction
    policy: dp.OptimalPolicy
    dp_traj: dp.Trajectory
    results: dict = field(default_factory=dict)  # controller -> ClosedLoopResult
    failures: dict = field(default_factory=dict)  # controller -> message


def pct(new: float, ref: float) -> float:
    return 100.0 * (new - ref) / ref


def lead_gap_series(traj: dp.Trajectory, lead: LeadTrajectory | None) -> np.ndarray:
    """Lead position minus ego position at each node time (nan without a lead on the road)."""
    gap = np.full(len(traj.x_m), np.nan)
    if lead is None:
        return gap
    inside = traj.t_s <= lead.t_s[-1]
    gap[inside] = lead.position_at(traj.t_s[inside]) - traj.x_m[inside]
    return gap


def _metrics(traj: dp.Trajectory) -> dict:
    return {"efc_g": traj.efc_g, "travel_time_s": traj.travel_time_s, "final_soc_pct": 100.0 * traj.final_soc}


def run_route(scn: Scenario, cfg: PipelineConfig, ag_net, aw_net, params: VehicleParams | None = None,
              log=print) -> RouteRun:
    params = params or VehicleParams()
    lead = dp.resolve_lead(scn, params, cfg.grid)
    prob, vf, pol, traj = dp.solve_scenario(scn, params, cfg.grid, cfg.gamma, lead)
    run = RouteRun(scn, lead, prob, vf, pol, traj)
    log(f"{scn.name} dp: efc {traj.efc_g:.2f} g, time {traj.travel_time_s:.1f} s")
    for name, src in MPC_SOURCES.items():
        ctrl = mpc.Controller(scn.route, params, mpc.MpcConfig(gamma=cfg.gamma, terminal_cost_source=src), cfg.grid,
                              ag_net=ag_net, aw_net=aw_net)
        try:
            res = mpc.run_closed_loop(ctrl, prob.x0, lead)
        except mpc.MpcError as exc:
            run.failures[name] = str(exc)
            log(f"{scn.name} {name}: aborted ({exc})")
            continue
        run.results[name] = res
        log(f"{scn.name} {name}: efc {res.efc_g:.2f} g, time {res.travel_time_s:.1f} s")
    return run


def build_report(cfg: PipelineConfig, runs: list[RouteRun], net_hashes: dict) -> dict:
    routes = []
    for run in runs:
        ctrls = {"dp": _metrics(run.dp_traj)}
        for name in MPC_SOURCES:
            if name in run.results:
                res = run.results[name]
                ctrls[name] = _metrics(res.trajectory) | {
                    "gap_violations": res.gap_violations, "light_violations": res.light_violations,
                    "fallbacks": res.fallbacks, "aw_steps": res.branches.count("aw")}
            else:
                ctrls[name] = {"failure": run.failures.get(name, "not run")}
        entry = {"route": run.scenario.name, "controllers": ctrls}
        ag, ens = ctrls["ag_nn_mpc"], ctrls["ensemble_mpc"]
        if "efc_g" in ag and "efc_g" in ens:
            entry["delta_pct"] = {"efc": pct(ens["efc_g"], ag["efc_g"]),
                                  "travel_time": pct(ens["travel_time_s"], ag["travel_time_s"])}
            entry["ordering_ok"] = bool(ctrls["dp"]["efc_g"] <= ens["efc_g"] <= ag["efc_g"])
        routes.append(entry)
    return {
        "routes": routes,
        "provenance": {"config_hash": cfg.hash(), "net_hashes": net_hashes, "seed": cfg.seed,
                       "gamma": cfg.gamma, "code_version": __version__},
        "note": FOOTER,
    }


def report_text(report: dict) -> str:
    lines = []
    head = f"{'route':<10} {'controller':<14} {'EFC [g]':>16} {'time [s]':>16} {'final SoC [%]':>14}"
    lines.append(head)
    lines.append("-" * len(head))
    for r in report["routes"]:
        d = r.get("delta_pct", {})
        for name in CONTROLLERS:
            m = r["controllers"][name]
            if "failure" in m:
                lines.append(f"{r['route']:<10} {name:<14} failed: {m['failure']}")
                continue
            efc = f"{m['efc_g']:.2f}"
            tt = f"{m['travel_time_s']:.1f}"
            if name == "ensemble_mpc" and d:
                efc += f" ({d['efc']:+.1f}%)"
                tt += f" ({d['travel_time']:+.1f}%)"
            lines.append(f"{r['route']:<10} {name:<14} {efc:>16} {tt:>16} {m['final_soc_pct']:>14.2f}")
        if "ordering_ok" in r:
            lines.append(f"{r['route']:<10} ordering dp <= ensemble <= ag: {'yes' if r['ordering_ok'] else 'no'}")
    p = report["provenance"]
    lines.append("")
    lines.append(f"config {p['config_hash']}  nets {p['net_hashes']}  seed {p['seed']}  gamma {p['gamma']}  "
                 f"version {p['code_version']}")
    lines.append(report["note"])
    return "\n".join(lines) + "\n"


REPORT_FIELDS = ["route", "controller", "efc_g", "travel_time_s", "final_soc_pct", "efc_delta_pct",
                 "time_delta_pct", "gap_violations", "light_violations", "fallbacks", "aw_steps", "failure"]


def write_report(report: dict, d: Path) -> None:
    (d / "report.txt").write_text(report_text(report))
    (d / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    with open(d / "report.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, REPORT_FIELDS)
        w.writeheader()
        for r in report["routes"]:
            for name in CONTROLLERS:
                row = {"route": r["route"], "controller": name}
                row.update({k: (repr(v) if isinstance(v, float) else v) for k, v in r["controllers"][name].items()})
                if name == "ensemble_mpc" and "delta_pct" in r:
                    row["efc_delta_pct"] = repr(r["delta_pct"]["efc"])
                    row["time_delta_pct"] = repr(r["delta_pct"]["travel_time"])
                w.writerow(row)


def write_plot_series(run: RouteRun, path: Path) -> None:
    """Distance-indexed velocity, SoC, cumulative EFC and lead gap for every controller that finished."""
    trajs = {"dp": run.dp_traj} | {k: v.trajectory for k, v in run.results.items()}
    cols = {"x_m": run.dp_traj.x_m}
    for name, tr in trajs.items():
        cols[f"v_mps_{name}"] = tr.v_mps
        cols[f"soc_{name}"] = tr.soc
        cols[f"cum_efc_g_{name}"] = np.concatenate([[0.0], np.cumsum(tr.eq_fuel_g)])
        cols[f"lead_gap_m_{name}"] = lead_gap_series(tr, run.lead)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(cols))
        for row in zip(*cols.values()):
            w.writerow([repr(float(x)) for x in row])


def cmd_benchmark(cfg: PipelineConfig, nets=None, log=print):
    """Run DP and both learned-terminal MPCs on the benchmark routes; returns ``(report, runs)``."""
    ag, aw = nets if nets is not None else load_nets(cfg)
    d = cfg.out / "bench"
    (d / "traj").mkdir(parents=True, exist_ok=True)
    (d / "plot").mkdir(parents=True, exist_ok=True)
    runs = []
    for scn in bench_scenarios(cfg):
        run = run_route(scn, cfg, ag, aw, log=log)
        runs.append(run)
        name = scn.name
        dp.save_value_function(run.vf, d / f"{name}.vf", run.policy)
        if run.lead is not None:
            run.lead.save_csv(d / f"{name}.lead.csv")
        mpc.write_trajectory_csv(d / "traj" / f"{name}_dp.csv", run.dp_traj)
        for ctrl, res in run.results.items():
            res.save_csv(d / "traj" / f"{name}_{ctrl}.csv")
            res.save_diagnostics(d / "traj" / f"{name}_{ctrl}.jsonl")
        write_plot_series(run, d / "plot" / f"{name}.csv")
    hashes = {}
    for v in ("ag", "aw"):
        p = cfg.out / "nets" / f"{v}.npz"
        hashes[v] = file_hash(p) if p.is_file() else None
    report = build_report(cfg, runs, hashes)
    write_report(report, d)
    return report, runs


def benchmark_ok(report: dict) -> bool:
    """No controller aborted and no closed-loop run broke a signal or gap constraint."""
    for r in report["routes"]:
        for name in MPC_SOURCES:
            m = r["controllers"][name]
            if "failure" in m or m["gap_violations"] or m["light_violations"]:
                return False
    return True
