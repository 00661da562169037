"""Command-line front end: ``simulate``, ``fit``, ``fit-glm`` and ``evaluate``.

Each command reads a JSON config, writes its outputs plus the resolved
config into ``--out``, and keeps wall-clock data in ``timing.json`` so every
other file is byte-identical across reruns and worker counts.

Exit codes: 0 success, 2 validation error, 3 numerical failure, 4 I/O error.
"""

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from . import data, em, evaluate, model, simulate
from .regress import RankDeficientError

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("aggmarkov")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class BasisSpec(_Strict):
    kind: Literal["poly", "indicator"] = "poly"
    degree: int = Field(1, ge=0)
    breakpoints: List[float] = []

    def build(self):
        return model.Basis(self.kind, self.degree, tuple(self.breakpoints))


class EMSpec(_Strict):
    max_iterations: int = Field(500, ge=1)
    loglik_rel_tolerance: float = Field(1e-8, gt=0)
    param_abs_tolerance: float = Field(1e-10, gt=0)
    init: Literal["default", "random", "model"] = "default"
    seed: int = 0
    jitter: float = Field(0.1, ge=0, lt=1)
    inner_tol: float = Field(1e-10, gt=0)
    inner_max_iter: int = Field(100, ge=1)
    chunk_size: int = Field(2048, ge=1)

    def build(self):
        return em.EMConfig(**self.model_dump())


GridSpec = Union[Literal["disability"], List[float]]


def _grid(spec):
    if spec == "disability":
        return model.TimeGrid(simulate.DISABILITY_FIT_GRID)
    return model.TimeGrid(spec)


class SimulateConfig(_Strict):
    preset: Optional[Literal["disability"]] = "disability"
    model: Optional[str] = None
    n: int = Field(10000, ge=0)
    t0: Optional[float] = None
    horizon: Optional[float] = None
    seed: int = 0
    initial_state: int = Field(1, ge=1)

    @field_validator("model")
    @classmethod
    def _one_source(cls, v, info):
        if v is not None and info.data.get("preset") is not None:
            raise ValueError("give either preset or model, not both (set preset to null)")
        return v


class SweepSpec(_Strict):
    state: int = Field(2, ge=1)
    values: List[int]


class FitConfig(_Strict):
    paths: str
    start_time: float = 0.0
    initial_state: int = Field(1, ge=1)
    grid: GridSpec = "disability"
    d: List[int] = [1, 2, 1]
    absorbing: List[int] = [3]
    transitions: Optional[List[Tuple[int, int]]] = None
    basis: BasisSpec = BasisSpec()
    em: EMSpec = EMSpec()
    init_model: Optional[str] = None
    sweep: Optional[SweepSpec] = None


class GLMConfig(_Strict):
    paths: str
    start_time: float = 0.0
    initial_state: int = Field(1, ge=1)
    absorbing: List[int] = [3]
    transitions: List[Tuple[int, int]] = [(2, 1), (2, 3)]
    age_breaks: List[float] = [float(a) for a in range(30, 111)]
    duration_step: float = Field(0.25, gt=0)
    shapes: Dict[str, dict] = {}


class EvaluateConfig(_Strict):
    paths: Optional[str] = None
    start_time: float = 0.0
    initial_state: int = Field(1, ge=1)
    absorbing: List[int] = [3]
    models: Dict[str, str] = {}
    glm: Optional[str] = None
    preset: Optional[Literal["disability"]] = "disability"
    state: int = Field(2, ge=1)
    entry_times: List[float] = [60.5]
    max_duration: float = Field(20.0, gt=0)
    n_points: int = Field(201, ge=2)
    window: float = Field(0.5, gt=0)
    rate_durations: List[float] = [1.0]
    rate_ages: Tuple[float, float] = (50.0, 80.0)


def _dump(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _read_config(path, cls):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValueError(f"config {path}: {exc}") from None
    return cls.model_validate(raw)


def cmd_simulate(cfg, out, workers=1):
    """Simulate macro paths; writes ``paths.csv`` and ``manifest.json``."""
    manifest = {"n": cfg.n, "seed": cfg.seed, "initial_state": cfg.initial_state}
    if cfg.preset == "disability":
        rates = simulate.disability_preset()
        t0 = rates.start_time if cfg.t0 is None else cfg.t0
        horizon = rates.horizon if cfg.horizon is None else cfg.horizon
        paths = simulate.simulate_semi_markov(rates, cfg.n, cfg.seed, cfg.initial_state,
                                              t0, horizon, workers)
        manifest.update(source="preset:disability", t0=t0, horizon=horizon,
                        labels={f"{i}-{j}": v for (i, j), v in rates.labels.items()})
    elif cfg.model is not None:
        m = model.load_model(cfg.model)
        t0 = m.grid.origin if cfg.t0 is None else cfg.t0
        if cfg.horizon is None:
            raise ValueError("horizon is required when simulating from a model")
        _, paths = simulate.simulate_aggregate(m, cfg.n, cfg.seed, t0, cfg.horizon,
                                               cfg.initial_state, workers)
        manifest.update(source=f"model:{cfg.model}", t0=t0, horizon=cfg.horizon)
    else:
        raise ValueError("either preset or model must be given")
    data.write_paths(paths, out / "paths.csv")
    manifest["n_jumps"] = int(sum(len(p.jumps) for p in paths))
    _dump(manifest, out / "manifest.json")
    return manifest


def _fit_one(paths, cfg, d, workers, init_model=None):
    layout = model.MicroLayout(d, cfg.absorbing, cfg.transitions)
    grid = _grid(cfg.grid)
    res = em.em_fit(paths, layout, grid, cfg.basis.build(), cfg.em.build(),
                    init_model=init_model, workers=workers)
    diags = [{k: v for k, v in dg.items() if k != "seconds"} for dg in res.diagnostics]
    seconds = [dg.get("seconds", 0.0) for dg in res.diagnostics]
    report = {
        "d": list(d), "loglik": res.loglik, "iterations": res.iterations,
        "converged": res.converged, "n_sojourns": res.n_sojourns,
        "n_skipped": res.n_skipped, "trace": res.trace, "iterations_detail": diags,
    }
    return res, report, seconds


def cmd_fit(cfg, out, workers=1):
    """EM fit (or a sweep over one macrostate's microstate count)."""
    paths = data.read_paths(cfg.paths, cfg.start_time, cfg.initial_state)
    init_model = model.load_model(cfg.init_model) if cfg.init_model else None
    timing = {}
    if cfg.sweep is None:
        res, report, secs = _fit_one(paths, cfg, cfg.d, workers, init_model)
        model.save_model(res.model, out / "model.json")
        _dump(report, out / "diagnostics.json")
        timing["fit"] = secs
        return [report], timing
    reports = []
    rows = ["d,loglik,iterations,converged"]
    for v in cfg.sweep.values:
        d = list(cfg.d)
        d[cfg.sweep.state - 1] = v
        res, report, secs = _fit_one(paths, cfg, d, workers)
        tag = f"d{cfg.sweep.state}_{v}"
        model.save_model(res.model, out / f"model_{tag}.json")
        _dump(report, out / f"diagnostics_{tag}.json")
        rows.append(f"{v},{res.loglik!r},{res.iterations},{int(res.converged)}")
        reports.append(report)
        timing[tag] = secs
    (out / "loglik_table.csv").write_text("\n".join(rows) + "\n")
    return reports, timing


def cmd_fit_glm(cfg, out, workers=1):
    """Segmented Poisson GLM benchmark per transition; writes ``glm.json``."""
    paths = data.read_paths(cfg.paths, cfg.start_time, cfg.initial_state)
    fits = {}
    for i, j in cfg.transitions:
        key = f"{i}-{j}"
        shape = evaluate.GLMShape.from_dict(cfg.shapes[key]) if key in cfg.shapes else None
        g = evaluate.glm_benchmark(paths, i, j, cfg.age_breaks, shape, cfg.duration_step,
                                   absorbing=cfg.absorbing)
        fits[key] = g.to_dict()
    _dump({"format": "aggmarkov.glm/1", "fits": fits}, out / "glm.json")
    return fits


def load_glm(path):
    with open(path) as fh:
        obj = json.load(fh)
    return {tuple(int(x) for x in k.split("-")): evaluate.GLMBenchmark.from_dict(v)
            for k, v in obj["fits"].items()}


def cmd_evaluate(cfg, out, workers=1):
    """Survival, density and rate curves as long-format CSV files."""
    models = {name: model.load_model(p) for name, p in sorted(cfg.models.items())}
    preset = simulate.disability_preset() if cfg.preset == "disability" else None
    paths = data.read_paths(cfg.paths, cfg.start_time, cfg.initial_state) if cfg.paths else None
    glm = load_glm(cfg.glm) if cfg.glm else {}
    i = cfg.state
    written = []
    grid_pts = set()
    for m in models.values():
        grid_pts.update(m.grid.points.tolist())
    for s in cfg.entry_times:
        u = evaluate.open_partition(0.0, cfg.max_duration, cfg.n_points,
                                    [p - s for p in grid_pts])
        surv = evaluate.CurveTable(u, {}, {"entry_time": s, "state": i, "x": "duration"})
        dens = evaluate.CurveTable(u, {}, {"entry_time": s, "state": i, "x": "duration"})
        for name, m in models.items():
            surv.add(name, evaluate.conditional_survival(m, s, s + u, i))
            dens.add(name, evaluate.conditional_density(m, s, s + u, i))
        if preset is not None:
            S = preset.sojourn_survival(i, s, u)
            surv.add("true", S)
            dens.add("true", S * preset.total(i, s + u, u))
        if paths is not None:
            es, ed, n = evaluate.empirical_sojourn_curves(paths, i, s, u, cfg.window, cfg.absorbing)
            surv.add("empirical", es)
            dens.add("empirical", ed)
            surv.meta["n_empirical"] = n
        for kind, tab in (("survival", surv), ("density", dens)):
            p = out / f"{kind}_s{s:g}.csv"
            tab.to_csv(p)
            written.append(p.name)
    exits = sorted({j for m in models.values() for j in m.layout.exits(i)}
                   | ({j for (a, j) in preset.rates if a == i} if preset else set()))
    ages = np.linspace(cfg.rate_ages[0], cfg.rate_ages[1], cfg.n_points)
    for uu in cfg.rate_durations:
        t = evaluate.open_partition(max(cfg.rate_ages[0], uu), cfg.rate_ages[1], cfg.n_points,
                                    sorted(grid_pts)) if uu > 0 else ages
        for j in exits:
            tab = evaluate.CurveTable(t, {}, {"duration": uu, "transition": f"{i}-{j}", "x": "age"})
            for name, m in models.items():
                if j in m.layout.exits(i):
                    tab.add(name, [evaluate.fitted_semimarkov_rate(m, tt, uu, j, i) for tt in t])
            if preset is not None and (i, j) in preset.rates:
                tab.add("true", evaluate.true_rate_eval(preset, t, np.full_like(t, uu), i, j))
            if (i, j) in glm:
                tab.add("glm", glm[(i, j)](t, np.full_like(t, uu)))
            p = out / f"rate_{i}{j}_u{uu:g}.csv"
            tab.to_csv(p)
            written.append(p.name)
    _dump({"files": written}, out / "curves.json")
    return written


COMMANDS = {
    "simulate": (SimulateConfig, cmd_simulate),
    "fit": (FitConfig, cmd_fit),
    "fit-glm": (GLMConfig, cmd_fit_glm),
    "evaluate": (EvaluateConfig, cmd_evaluate),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="aggmarkov", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--workers", type=int, default=1, help="worker threads")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cls, fn = COMMANDS[args.command]
    try:
        if args.workers < 1:
            raise ValueError("--workers must be >= 1")
        cfg = _read_config(args.config, cls)
        if args.seed is not None:
            if isinstance(cfg, SimulateConfig):
                cfg = cfg.model_copy(update={"seed": args.seed})
            elif isinstance(cfg, FitConfig):
                cfg = cfg.model_copy(update={"em": cfg.em.model_copy(update={"seed": args.seed})})
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _dump({"command": args.command, "config": cfg.model_dump(mode="json")}, out / "config.json")
        t0 = time.perf_counter()
        result = fn(cfg, out, args.workers)
        timing = {"command": args.command, "workers": args.workers,
                  "seconds": time.perf_counter() - t0}
        if args.command == "fit":
            timing["iterations"] = result[1]
        _dump(timing, out / "timing.json")
    except data.PathFileError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (em.NumericalFailure, FloatingPointError, np.linalg.LinAlgError, RankDeficientError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValidationError, ValueError, KeyError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
