"""Config-driven experiment runs: solve, simulate, identify, diagnose, report.

A run executes the requested stages in dependency order, writes every
artifact as columnar text under the output directory and records a
manifest (``manifest.json``) with the config hash, stage timings, artifact
checksums and verdict summaries.  A stage whose upstream artifact already
exists on disk reads it instead of recomputing it.
"""
from __future__ import annotations

import copy
import hashlib
import json
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import io
from .diagnostics import kotlarski_deconv, rationalizability_check
from .ident_bunching import bunching_index, detect_bunching_set, radon_invert
from .ident_linear import estimate_density_high, recover_cost_pde, recover_types_linear
from .ident_nonlinear import (find_fixed_point, iterate_type_recovery, loglog_slopes, recover_cost_nonlinear,
                              recover_type_field, regime_pair)
from .model import closed_form_example, primitives_from_config
from .pricefit import fit_price_field
from .simulate import (BilinearBandGenerator, CovariateLaw, NoiseSpec, SeparableGenerator, apply_price_noise,
                       sample_market, sample_shifted_markets)
from .solver import SolverConfig, solve_equilibrium

STAGES = ("solve", "simulate", "identify-linear", "identify-bilinear", "identify-nonlinear", "diagnose",
          "deconvolve", "report")
GENERATORS = ("menu", "closed_form", "separable", "bilinear_band")
TOP_KEYS = {"primitives", "solver", "simulation", "stages", "out", "seed", "tolerances", "tolerance_scale",
            "identify", "diagnose", "deconvolve"}


class ConfigError(ValueError):
    """Schema violation; ``field`` is the dotted path of the offending entry."""

    def __init__(self, field_path: str, msg: str):
        super().__init__(f"{field_path}: {msg}")
        self.field = field_path


class StageError(RuntimeError):
    def __init__(self, stage: str, msg: str):
        super().__init__(f"stage {stage} failed: {msg}")
        self.stage = stage


DEFAULT_CONFIG = {
    "primitives": {"dimension": 2, "density": {"kind": "uniform", "bounds": [[0.0, 1.0], [0.0, 1.0]], "n": 41},
                   "cost": {"kind": "quadratic", "c": 1.0}},
    "solver": {"mesh": 41},
    "simulation": {"generator": "menu", "n": 20000, "noise": {}, "covariates": {"kind": "none"}},
    "stages": ["solve", "simulate"],
    "out": "screenlab-out",
    "seed": 0,
    "tolerances": {},
    "tolerance_scale": 1.0,
    "identify": {"mesh": 61, "density_bins": 50, "density_smooth": 1.5,
                 "radon_bounds": [[0.0, 1.0], [0.0, 1.0]], "radon_grid": 101, "theta0": None, "omega": [0.5, 0.7]},
    "diagnose": {"model_class": "M1", "mesh": 41},
    "deconvolve": {"n_markets": 50000, "per_market": 2, "shifter_sd": 0.2, "split_seed": None},
}


def _merge(base: dict, over: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    """Validated run configuration (see :data:`DEFAULT_CONFIG` for the fields)."""

    primitives: dict
    solver: dict
    simulation: dict
    stages: list
    out: str
    seed: int | None
    tolerances: dict
    tolerance_scale: float
    identify: dict
    diagnose: dict
    deconvolve: dict

    @classmethod
    def from_mapping(cls, cfg: Mapping | None = None, **overrides) -> "ExperimentConfig":
        """Merge ``cfg`` over the defaults and validate.

        Raises
        ------
        ConfigError
            Unknown keys, unknown stages, bad values or a missing seed.
        """
        cfg = dict(cfg or {})
        for k in cfg:
            if k not in TOP_KEYS:
                raise ConfigError(k, "unknown field")
        merged = _merge(DEFAULT_CONFIG, cfg)
        for k, v in overrides.items():
            if v is not None:
                merged[k] = v
        stages = merged["stages"]
        if not isinstance(stages, list) or not stages:
            raise ConfigError("stages", "must be a nonempty list")
        for i, s in enumerate(stages):
            if s not in STAGES:
                raise ConfigError(f"stages[{i}]", f"unknown stage {s!r}")
        sim = merged["simulation"]
        if sim.get("generator") not in GENERATORS:
            raise ConfigError("simulation.generator", f"must be one of {', '.join(GENERATORS)}")
        n = sim.get("n")
        if not isinstance(n, int) or isinstance(n, bool) or n <= 0:
            raise ConfigError("simulation.n", "must be a positive integer")
        seed = merged.get("seed")
        if seed is not None and (not isinstance(seed, int) or isinstance(seed, bool) or seed < 0):
            raise ConfigError("seed", "must be a nonnegative integer")
        random_stages = {"simulate", "identify-linear", "identify-bilinear", "identify-nonlinear", "diagnose",
                         "deconvolve"}
        if seed is None and random_stages & set(stages):
            raise ConfigError("seed", "required by stages that draw random numbers")
        ts = merged["tolerance_scale"]
        if not isinstance(ts, (int, float)) or not ts > 0:
            raise ConfigError("tolerance_scale", "must be a positive number")
        if merged["diagnose"].get("model_class") not in ("M1", "M2", "M3"):
            raise ConfigError("diagnose.model_class", "must be M1, M2 or M3")
        try:
            primitives_from_config(merged["primitives"])
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError("primitives", str(exc)) from None
        mesh = merged["solver"].get("mesh")
        if mesh is not None and (not isinstance(mesh, int) or isinstance(mesh, bool) or mesh < 3):
            raise ConfigError("solver.mesh", "must be an integer >= 3")
        try:
            SolverConfig(**merged["solver"])
        except (TypeError, ValueError) as exc:
            raise ConfigError("solver", str(exc)) from None
        return cls(merged["primitives"], merged["solver"], sim, list(stages), str(merged["out"]), seed,
                   dict(merged["tolerances"]), float(ts), merged["identify"], merged["diagnose"],
                   merged["deconvolve"])

    def as_dict(self) -> dict:
        return {k: copy.deepcopy(getattr(self, k)) for k in
                ("primitives", "solver", "simulation", "stages", "out", "seed", "tolerances", "tolerance_scale",
                 "identify", "diagnose", "deconvolve")}

    def digest(self) -> str:
        d = self.as_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def load_config(path) -> dict:
    """Read a YAML or JSON config file into a mapping."""
    import yaml

    text = Path(path).read_text()
    data = yaml.safe_load(text) if text.strip() else {}
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a mapping")
    return data


@dataclass
class RunManifest:
    config_hash: str
    stages: dict = field(default_factory=dict)          # name -> status
    timings: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)       # file name -> sha256
    verdicts: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(s == "ok" for s in self.stages.values())

    def to_json(self) -> str:
        return json.dumps({"config_hash": self.config_hash, "stages": self.stages, "timings": self.timings,
                           "artifacts": self.artifacts, "verdicts": self.verdicts, "errors": self.errors},
                          indent=2, sort_keys=True, default=float)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------
def _depends(stage: str, cfg: ExperimentConfig) -> tuple:
    if stage == "simulate":
        return ("solve",) if cfg.simulation["generator"] == "menu" else ()
    if stage.startswith("identify") or stage == "diagnose":
        return ("simulate",)
    return ()


class _Run:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.prim = primitives_from_config(cfg.primitives)
        self.menu = None
        self.ds = None
        self.summaries = {}
        self.written = []

    def path(self, name) -> Path:
        p = self.out / name
        self.written.append(name)
        return p

    # upstream artifacts -------------------------------------------------
    def get_menu(self):
        if self.menu is None:
            f = self.out / "menu.csv"
            if not f.exists():
                raise StageError("simulate", "no menu in memory or on disk; run solve first")
            self.menu = io.read_menu(f)
        return self.menu

    def get_dataset(self):
        if self.ds is None:
            f = self.out / "dataset.csv"
            if not f.exists():
                raise StageError("identify", "no dataset in memory or on disk; run simulate first")
            self.ds = io.read_dataset(f)
        return self.ds

    # stages -------------------------------------------------------------
    def solve(self):
        menu = solve_equilibrium(self.prim, SolverConfig(**self.cfg.solver))
        self.menu = menu
        io.write_menu(menu, self.path("menu.csv"))
        return {"objective": float(menu.objective), "regions": np.bincount(menu.labels.ravel(), minlength=3).tolist()}

    def simulate(self):
        sim = self.cfg.simulation
        seed = int(sim.get("seed", self.cfg.seed))
        n = int(sim["n"])
        cov = CovariateLaw(**sim.get("covariates", {}))
        gen = sim["generator"]
        if gen == "menu":
            ds = sample_market(self.get_menu(), self.prim, n, seed, cov)
        elif gen == "closed_form":
            ds = sample_market(closed_form_example(float(self.prim.cost.params["A"][0, 0])), self.prim, n, seed,
                               cov)
        elif gen == "separable":
            g = SeparableGenerator(omega=tuple(sim.get("omega", (0.5, 0.7))), regime2=sim.get("regime2", "quadratic"))
            ds = g.sample(n, seed, covariate_law=cov)
        else:
            rng = np.random.default_rng(seed)
            theta = self.prim.density.sample(n, rng)
            law = cov if cov.kind != "none" else CovariateLaw("directions")
            X1, _ = law.draw(n, 2, rng)
            ds = BilinearBandGenerator().sample(theta, X1, seed)
        noise = NoiseSpec(**sim.get("noise", {}))
        ds = apply_price_noise(ds, noise, seed + 1)
        self.ds = ds
        io.write_dataset(ds, self.path("dataset.csv"))
        self.written.append("dataset.csv.meta.json")
        return {"n": ds.n, "generator": gen}

    def identify_linear(self):
        ds = self.get_dataset().regime(1)
        opt = self.cfg.identify
        pf = fit_price_field(ds, q0=self.prim.q0, mesh=int(opt["mesh"]), seed=self.cfg.seed)
        ptf = recover_types_linear(pf, ds)
        dens = estimate_density_high(ptf, bins=int(opt["density_bins"]), smooth=float(opt["density_smooth"]))
        est = recover_cost_pde(ptf, pf, dens, q0=self.prim.q0)
        a = ds.q[ptf.attached]
        io.write_table(self.path("pseudo_types.csv"),
                       {"q1": a[:, 0], "q2": a[:, 1], "theta1": ptf.points[:, 0], "theta2": ptf.points[:, 1]},
                       ["axes: q (bundle units); theta (type units)"], tag="pseudo-types")
        centers = tuple(0.5 * (e[1:] + e[:-1]) for e in dens.edges)
        io.write_grid(self.path("type_density.csv"), centers, {"density": dens.values},
                      ["axes: theta (type units); density (per unit area)"])
        io.write_grid(self.path("cost.csv"), est.axes, {"C": est.C, "dC": est.grad},
                      ["axes: q (bundle units); C (money); dC (money per unit)"])
        return {"attached": int(ptf.attached.sum()), "pde_residual": float(est.pde.residual)}

    def identify_bilinear(self):
        ds = self.get_dataset()
        opt = self.cfg.identify
        geom = detect_bunching_set(ds, q0=self.prim.q0)
        if geom.empty:
            raise StageError("identify-bilinear", "no bunching flat found")
        idx = bunching_index(ds, geom)
        b = np.asarray(opt["radon_bounds"], dtype=float)
        axes = tuple(np.linspace(b[j, 0], b[j, 1], int(opt["radon_grid"])) for j in range(2))
        est = radon_invert(idx.B, idx.D, axes)
        io.write_table(self.path("bunching_index.csv"),
                       {"s": idx.s, "index": idx.I, "B": idx.B, "d1": idx.D[:, 0], "d2": idx.D[:, 1]},
                       ["axes: s (arclength); index (money per unit); B (type units); d (unit direction)"],
                       tag="bunching index")
        io.emit_plot_data(est, "density", self.path("radon_density.csv"))
        f = geom.flat
        return {"flat_r2": float(f.r2), "records_on_flat": int(len(idx.records)), "bins": int(len(est.angles))}

    def identify_nonlinear(self):
        ds = self.get_dataset()
        if not {1, 2} <= set(np.unique(ds.z)):
            raise StageError("identify-nonlinear", "needs records from both cost regimes")
        opt = self.cfg.identify
        d1, d2 = ds.regime(1), ds.regime(2)
        mesh = int(opt.get("nonlinear_mesh", 41))
        pf1 = fit_price_field(d1, mesh=mesh, seed=self.cfg.seed)
        pf2 = fit_price_field(d2, mesh=mesh, seed=self.cfg.seed)
        rp = regime_pair(pf1, pf2, seed=self.cfg.seed)
        fp = find_fixed_point(rp)
        theta0 = np.ones(ds.dim) if opt.get("theta0") is None else np.asarray(opt["theta0"], dtype=float)
        tf = recover_type_field(rp, fp, theta0)
        io.write_grid(self.path("type_field.csv"), tf.axes, {"theta": tf.theta, "dv": tf.dv},
                      [f"q_hat: {fp.q_hat[0]!r} {fp.q_hat[1]!r}", "axes: q (bundle units); theta (type units)"])
        starts = pf1.q[np.linspace(0, len(pf1.q) - 1, 5).astype(int)]
        tr = iterate_type_recovery(rp, starts, fp.q_hat, theta0, keep_trajectories=True)
        io.emit_plot_data(tr.trajectories, "trajectory", self.path("trajectories.csv"))
        out = {"q_hat": fp.q_hat.tolist(), "attractive": bool(fp.attractive), "slopes": loglog_slopes(tf).tolist()}
        for r, pf, d in ((1, pf1, d1), (2, pf2, d2)):
            rc = recover_cost_nonlinear(tf, pf, d, r)
            io.write_grid(self.path(f"cost_z{r}.csv"), rc.cost.axes, {"C": rc.cost.C, "dC": rc.cost.grad},
                          ["axes: q (bundle units); C (money); dC (money per unit)"])
            out[f"det_gap_z{r}"] = float(rc.det_gap)
        return out

    def diagnose(self):
        ds = self.get_dataset()
        opt = self.cfg.diagnose
        rep = rationalizability_check(ds, opt["model_class"], q0=self.prim.q0, tolerances=self.cfg.tolerances,
                                      tolerance_scale=self.cfg.tolerance_scale, mesh=int(opt.get("mesh", 41)),
                                      seed=self.cfg.seed)
        io.write_text(self.path("verdicts.txt"), rep.to_text())
        return {name: ("pass" if v.passed else "fail") for name, v in rep.verdicts.items()}

    def deconvolve(self):
        opt = self.cfg.deconvolve
        sd = float(opt["shifter_sd"])
        spec = NoiseSpec(shifter="lognormal" if sd > 0 else "degenerate", shifter_sd=sd)
        P, _ = sample_shifted_markets(lambda n, rng: rng.uniform(0.0, 1.0, (n, 1)), int(opt["n_markets"]),
                                      int(opt["per_market"]), spec, self.cfg.seed)
        split = self.cfg.seed if opt.get("split_seed") is None else int(opt["split_seed"])
        res = kotlarski_deconv(P, split_seed=split)
        io.write_table(self.path("deconv.csv"),
                       {"x": res.x, "pdf_log_y": res.pdf_log_y, "cdf_log_y": res.cdf_log_y,
                        "pdf_log_theta": res.pdf_log_theta, "cdf_log_theta": res.cdf_log_theta},
                       [f"cutoff: {res.cutoff!r}", f"split_seed: {split}", "axes: x (log units)"], tag="deconvolution")
        return {"cutoff": float(res.cutoff), "mean_log_y": float(res.mean_log_y), "pairs": int(res.n_pairs)}

    def report(self, manifest: RunManifest):
        lines = ["# Run report", "", f"config hash: `{manifest.config_hash}`", "", "## Stages", ""]
        for s, status in manifest.stages.items():
            if s != "report":
                lines.append(f"- {s}: {status}")
        lines += ["", "## Summaries", ""]
        for s, summ in self.summaries.items():
            lines.append(f"- {s}: {json.dumps(summ, sort_keys=True, default=float)}")
        if manifest.verdicts:
            lines += ["", "## Rationalizability verdicts", ""]
            lines += [f"- {k}: {v}" for k, v in manifest.verdicts.items()]
        lines += ["", "## Artifacts", ""]
        for a in sorted(manifest.artifacts):
            lines.append(f"- {a} `{manifest.artifacts[a][:16]}`")
        io.write_text(self.path("report.md"), "\n".join(lines) + "\n")
        return {"lines": len(lines)}


def plan_stages(cfg: ExperimentConfig) -> list:
    """Requested stages plus missing upstream stages whose artifacts are not on disk, in run order."""
    want = set(cfg.stages)
    on_disk = {"solve": "menu.csv", "simulate": "dataset.csv"}
    changed = True
    while changed:
        changed = False
        for s in list(want):
            for d in _depends(s, cfg):
                if d not in want and not (Path(cfg.out) / on_disk[d]).exists():
                    want.add(d)
                    changed = True
    return [s for s in STAGES if s in want]


def _carry_over(man: RunManifest, out: Path):
    """Keep stages, artifacts and verdicts of earlier runs in the same directory (still-present files only)."""
    prev_path = out / "manifest.json"
    if not prev_path.exists():
        return
    try:
        prev = json.loads(prev_path.read_text())
    except (OSError, json.JSONDecodeError):
        return
    for name in prev.get("artifacts", {}):
        if name not in man.artifacts and name != "report.md" and (out / name).exists():
            man.artifacts[name] = io.sha256(out / name)
    for st, status in prev.get("stages", {}).items():
        if st not in man.stages and st != "report":
            man.stages[st] = status
            if st in prev.get("errors", {}):
                man.errors[st] = prev["errors"][st]
    if not man.verdicts:
        man.verdicts = prev.get("verdicts", {})
    man.stages = {st: man.stages[st] for st in STAGES if st in man.stages}


def run_pipeline(config: ExperimentConfig | Mapping) -> RunManifest:
    """Execute the configured stages and persist artifacts and manifest.

    A failing stage is recorded with its error; stages depending on it are
    marked ``skipped``.
    """
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.from_mapping(config)
    run = _Run(cfg)
    man = RunManifest(cfg.digest())
    order = plan_stages(cfg)
    failed = set()
    for stage in order:
        if stage == "report":
            continue
        if any(d in failed for d in _depends(stage, cfg)):
            man.stages[stage] = "skipped"
            failed.add(stage)
            continue
        t0 = time.perf_counter()
        try:
            run.summaries[stage] = getattr(run, stage.replace("-", "_"))()
            man.stages[stage] = "ok"
        except Exception as exc:  # a stage failure is recorded, not raised
            man.stages[stage] = "failed"
            man.errors[stage] = {"type": type(exc).__name__, "message": str(exc),
                                 "where": traceback.extract_tb(exc.__traceback__)[-1].name}
            failed.add(stage)
        man.timings[stage] = round(time.perf_counter() - t0, 6)
    if "diagnose" in run.summaries:
        man.verdicts = dict(run.summaries["diagnose"])
    man.artifacts = {name: io.sha256(run.out / name) for name in dict.fromkeys(run.written)}
    _carry_over(man, run.out)
    if "report" in order:
        t0 = time.perf_counter()
        run.report(man)
        man.stages["report"] = "ok"
        man.timings["report"] = round(time.perf_counter() - t0, 6)
        man.artifacts["report.md"] = io.sha256(run.out / "report.md")
    (run.out / "manifest.json").write_text(man.to_json())
    return man
