"""Experiment harness: config ingestion, runners, and report emission.

Each runner reproduces one of the quantitative conclusions at desk scale
and returns an :class:`ExperimentReport` whose assertions decide the CLI
exit code.  Reports are reproducible bit-for-bit from (config, seed): no
wall-clock data enters the emitted files, all randomness flows from the
configured seed, and distance comparisons between simulated laws share one
grid and one bandwidth fixed from the pooled sample.

Slope fits use ordinary least squares on log-log points with the smallest
and largest abscissa dropped (endpoints carry discretization and noise-floor
bias); exponent tolerances are fixed in the shipped configs and tests, not
hidden in code.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import metrics
from .coefficients import Model, lipschitz_audit, load_model
from .duhamel import solve_density
from .errors import ConfigError, DomainError
from .fixed_point import solve_mvsde
from .measures import Flow, Measure, pooled_grid, resample, to_density
from .sde_engine import SimConfig, simulate_frozen

KINDS = ("audit", "solve", "regularity", "gradient", "stability", "duhamel")

SMOKE_PARTICLES = 1000
SMOKE_MC_PARTICLES = 10_000
SMOKE_CELLS = 256
SMOKE_AUDIT_SAMPLES = 200
EMIT_ATOMS = 4096  # per-node resample size for emitted law CSVs


# ---------------------------------------------------------------------------
# Report containers


@dataclass(frozen=True)
class Assertion:
    name: str
    passed: bool
    value: float
    detail: str

    def to_json(self):
        return {"name": self.name, "passed": bool(self.passed),
                "value": float(self.value), "detail": self.detail}


@dataclass(frozen=True)
class Series:
    name: str
    columns: tuple
    rows: tuple
    logx: bool = False
    logy: bool = False


@dataclass(frozen=True)
class ExperimentReport:
    kind: str
    model: str
    passed: bool
    assertions: tuple
    series: tuple
    metadata: dict


def _plain(obj):
    """Coerce numpy scalars/arrays so json.dump accepts the structure."""
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def emit_report(report: ExperimentReport, outdir) -> list:
    """Write summary.json, one CSV per series, and one plot script per CSV."""
    os.makedirs(outdir, exist_ok=True)
    written = []
    series_files = []
    for s in report.series:
        csv_name = f"series_{s.name}.csv"
        path = os.path.join(outdir, csv_name)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(s.columns)
            for row in s.rows:
                writer.writerow([repr(float(v)) for v in row])
        written.append(path)
        series_files.append(csv_name)
        gp_path = os.path.join(outdir, f"plot_{s.name}.gp")
        with open(gp_path, "w", encoding="utf-8") as fh:
            fh.write("set datafile separator ','\n")
            fh.write("set key autotitle columnhead\n")
            if s.logx and s.logy:
                fh.write("set logscale xy\n")
            elif s.logx:
                fh.write("set logscale x\n")
            elif s.logy:
                fh.write("set logscale y\n")
            fh.write(f"set xlabel '{s.columns[0]}'\n")
            cols = ", ".join(
                f"'{csv_name}' using 1:{j + 2} with linespoints"
                for j in range(len(s.columns) - 1)
            )
            fh.write(f"plot {cols}\n")
        written.append(gp_path)
    summary = {
        "kind": report.kind,
        "model": report.model,
        "passed": bool(report.passed),
        "assertions": [a.to_json() for a in report.assertions],
        "metadata": _plain(report.metadata),
        "series": series_files,
    }
    path = os.path.join(outdir, "summary.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
    written.append(path)
    return written


# ---------------------------------------------------------------------------
# Config


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    model_path: str
    model: Model
    gamma1: Measure
    gamma2: Measure | None
    times: np.ndarray | None
    sim: SimConfig
    options: dict
    smoke: bool = False

    def option(self, key, default):
        return self.options.get(key, default)


def _measure_from_spec(spec, pointer: str) -> Measure:
    if not isinstance(spec, dict) or "type" not in spec:
        raise ConfigError("measure spec must be an object with a 'type' field", pointer)
    kind = spec["type"]
    if kind == "dirac":
        if "point" not in spec:
            raise ConfigError("dirac spec needs 'point'", pointer + "/point")
        return Measure.dirac(np.asarray(spec["point"], dtype=float))
    if kind == "atoms":
        if "points" not in spec:
            raise ConfigError("atoms spec needs 'points'", pointer + "/points")
        return Measure.from_points(np.asarray(spec["points"], dtype=float),
                                   spec.get("weights"))
    if kind == "normal":
        for key in ("mean", "std", "n"):
            if key not in spec:
                raise ConfigError(f"normal spec needs {key!r}", f"{pointer}/{key}")
        rng = np.random.default_rng(int(spec.get("seed", 0)))
        mean = np.atleast_1d(np.asarray(spec["mean"], dtype=float))
        pts = mean + float(spec["std"]) * rng.standard_normal((int(spec["n"]), len(mean)))
        return Measure.from_points(pts)
    if kind == "csv":
        if "path" not in spec:
            raise ConfigError("csv spec needs 'path'", pointer + "/path")
        return Measure.from_csv(spec["path"])
    raise ConfigError(f"unknown measure type {kind!r}", pointer + "/type")


def parse_config(path, kind: str | None = None, seed: int | None = None,
                 particles: int | None = None, smoke: bool = False) -> ExperimentConfig:
    """Load and validate an experiment config; overrides apply after parsing."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if "kind" not in raw:
        raise ConfigError("missing experiment kind", "/kind")
    cfg_kind = raw["kind"]
    if cfg_kind not in KINDS:
        raise ConfigError(f"unknown kind {cfg_kind!r}; expected one of {KINDS}", "/kind")
    if kind is not None and cfg_kind != kind:
        raise ConfigError(f"config kind {cfg_kind!r} does not match subcommand {kind!r}",
                          "/kind")
    if "model" not in raw:
        raise ConfigError("missing model file path", "/model")
    model_path = raw["model"]
    if not os.path.isabs(model_path):
        model_path = os.path.normpath(os.path.join(os.path.dirname(os.path.abspath(path)),
                                                   model_path))
    if not os.path.exists(model_path):
        raise ConfigError(f"model file does not exist: {model_path}", "/model")
    model = load_model(model_path)

    gamma1 = _measure_from_spec(raw.get("gamma1", {"type": "dirac", "point": [0.0] * model.dim}),
                                "/gamma1")
    gamma2 = _measure_from_spec(raw["gamma2"], "/gamma2") if "gamma2" in raw else None

    times = None
    if "times" in raw:
        times = np.asarray(raw["times"], dtype=float)
        if times.ndim != 1 or len(times) == 0 or np.any(np.diff(times) <= 0):
            raise ConfigError("times must be a strictly increasing list", "/times")
        if times[0] <= 0:
            raise ConfigError("time points must lie in (0, T]", "/times/0")

    sim_raw = raw.get("sim", {})
    n = int(sim_raw.get("n_particles", 10_000))
    if particles is not None:
        n = particles
    if smoke:
        n = min(n, SMOKE_PARTICLES)
    t0 = float(sim_raw.get("t0", 0.0))
    t1 = float(sim_raw.get("t1", times[-1] if times is not None else 0.0))
    if t1 <= t0:
        if cfg_kind == "audit":  # audit only consumes the seed
            t1 = t0 + 1.0
        else:
            raise ConfigError("sim needs t1 > t0 (set sim.t1 or times)", "/sim/t1")
    sim = SimConfig(
        n_particles=n,
        dt=float(sim_raw.get("dt", 1e-3)),
        t0=t0,
        t1=t1,
        seed=int(seed if seed is not None else sim_raw.get("seed", 0)),
        crn=bool(sim_raw.get("crn", True)),
    )
    return ExperimentConfig(
        kind=cfg_kind,
        model_path=model_path,
        model=model,
        gamma1=gamma1,
        gamma2=gamma2,
        times=times,
        sim=sim,
        options=dict(raw.get("options", {})),
        smoke=smoke,
    )


def config_to_json(cfg: ExperimentConfig) -> dict:
    out = {
        "kind": cfg.kind,
        "model": cfg.model_path,
        "sim": cfg.sim.to_json(),
        "options": cfg.options,
        "smoke": cfg.smoke,
    }
    if cfg.times is not None:
        out["times"] = cfg.times.tolist()
    return out


# ---------------------------------------------------------------------------
# Shared numerics


def fit_loglog(xs, ys, drop_ends: bool = True):
    """OLS slope/intercept of log y against log x, endpoints dropped."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if drop_ends and len(xs) >= 5:
        order = np.argsort(xs)
        keep = order[1:-1]
        xs, ys = xs[keep], ys[keep]
    if np.any(ys <= 0) or np.any(xs <= 0):
        raise DomainError("log-log fit needs positive data")
    slope, intercept = np.polyfit(np.log(xs), np.log(ys), 1)
    return float(slope), float(intercept)


def shared_grid_tv(m1: Measure, m2: Measure, theta: float = 0.0, cells=None) -> float:
    """Weighted variation between ensembles via KDEs on one pooled grid/bandwidth."""
    grid, bw = pooled_grid([m1, m2], cells=cells)
    d1 = to_density(m1, grid=grid, bandwidth=bw)
    d2 = to_density(m2, grid=grid, bandwidth=bw)
    return metrics.weighted_variation(d1, d2, theta).value


def _sup_wk(flow1: Flow, flow2: Flow, k: float) -> float:
    vals = [
        metrics.wasserstein(a, b, k).value
        for a, b in zip(flow1.measures, flow2.measures)
    ]
    return max(vals)


# ---------------------------------------------------------------------------
# Runners


def run_audit(cfg: ExperimentConfig) -> ExperimentReport:
    n_samples = int(cfg.option("n_samples", SMOKE_AUDIT_SAMPLES if cfg.smoke else 1000))
    report = lipschitz_audit(cfg.model, n_samples=n_samples, seed=cfg.sim.seed,
                             raise_on_failure=False)
    assertions = [
        Assertion("audit_passed", report.passed, 1.0 if report.passed else 0.0,
                  f"witness={report.witness}"),
        Assertion("ratios_within_K", max(report.ratios.values()) <= report.declared_K,
                  max(report.ratios.values()), f"declared K={report.declared_K}"),
    ]
    return ExperimentReport(
        kind="audit", model=cfg.model.name,
        passed=all(a.passed for a in assertions),
        assertions=tuple(assertions),
        series=(),
        metadata={"config": config_to_json(cfg), "audit": report.to_json()},
    )


def run_solve(cfg: ExperimentConfig, outdir=None) -> ExperimentReport:
    tol = float(cfg.option("tol", 0.05))
    report = solve_mvsde(cfg.model, cfg.gamma1, cfg.sim, tol=tol)
    hist = report.contraction_history
    ratios = list(hist["outer_ratios"])
    for info in hist["inner"]:
        ratios.extend(info["ratios"])
    assertions = [
        Assertion("converged", report.outer_iterations <= 25,
                  report.outer_iterations, f"tol_used={report.tol_used}"),
        Assertion("ratios_below_one", all(r < 1.0 for r in ratios),
                  max(ratios) if ratios else 0.0,
                  f"{len(ratios)} measured contraction ratios"),
    ]
    dists = hist["outer_distances"]
    series = [
        Series("outer_distances", ("iteration", "rho_tilde"),
               tuple((i + 1, d) for i, d in enumerate(dists)), logy=True),
    ]
    if outdir is not None:
        laws_dir = os.path.join(outdir, "laws")
        os.makedirs(laws_dir, exist_ok=True)
        for i, (t, m) in enumerate(zip(report.solution.times, report.solution.measures)):
            thin = resample(m, min(EMIT_ATOMS, m.n), cfg.sim.seed) if m.n > EMIT_ATOMS else m
            thin.to_csv(os.path.join(laws_dir, f"node_{i:03d}_t{t:.6f}.csv"))
    return ExperimentReport(
        kind="solve", model=cfg.model.name,
        passed=all(a.passed for a in assertions),
        assertions=tuple(assertions),
        series=tuple(series),
        metadata={"config": config_to_json(cfg), "solve": report.to_json()},
    )


def _solved_flow(cfg: ExperimentConfig, gamma: Measure, t1: float) -> Flow:
    """Solution flow of the full MVSDE from gamma over [t0, t1]."""
    sim = SimConfig(cfg.sim.n_particles, cfg.sim.dt, cfg.sim.t0, t1,
                    cfg.sim.seed, cfg.sim.crn)
    report = solve_mvsde(cfg.model, gamma, sim, tol=float(cfg.option("tol", 0.05)),
                         audit=False)
    return report.solution


def run_regularity(cfg: ExperimentConfig) -> ExperimentReport:
    """Short-time total-variation decay and transport stability of the semigroup."""
    if cfg.times is None or len(cfg.times) < 3:
        raise ConfigError("regularity needs at least 3 time points", "/times")
    audit = lipschitz_audit(cfg.model, n_samples=SMOKE_AUDIT_SAMPLES, seed=cfg.sim.seed,
                            raise_on_failure=True)
    if not (audit.condition_i or audit.condition_ii):
        raise ConfigError(
            "regularity requires a diffusion that is either state-free or "
            "transport-Lipschitz through state-Lipschitz functionals; "
            f"audit flags: {audit.flags}"
        )
    gamma1 = cfg.gamma1
    gamma2 = cfg.gamma2 if cfg.gamma2 is not None else gamma1
    k = cfg.model.constants.k
    t1 = float(cfg.times[-1])
    record = np.union1d(cfg.times, [cfg.sim.t0])
    sim = SimConfig(cfg.sim.n_particles, cfg.sim.dt, cfg.sim.t0, t1,
                    cfg.sim.seed, True)

    flow_mu1 = _solved_flow(cfg, gamma1, t1)
    if gamma2 is gamma1:
        flow_mu2 = flow_mu1
    else:
        flow_mu2 = _solved_flow(cfg, gamma2, t1)
    law1 = simulate_frozen(cfg.model, flow_mu1, flow_mu1, gamma1, sim, record_times=record)
    law2 = simulate_frozen(cfg.model, flow_mu2, flow_mu2, gamma2, sim, record_times=record)

    w0 = metrics.wasserstein(gamma1, gamma2, k).value
    rows, tvs, wks = [], [], []
    for t in cfg.times:
        i = int(np.searchsorted(law1.times, t - 1e-12))
        m1, m2 = law1.measures[i], law2.measures[i]
        tv = shared_grid_tv(m1, m2, 0.0)
        wk = metrics.wasserstein(m1, m2, k).value
        tvs.append(tv)
        wks.append(wk)
        rows.append((float(t), tv, wk, wk / w0 if w0 > 0 else 0.0))
    tvs = np.array(tvs)
    wks = np.array(wks)

    assertions = []
    metadata = {"config": config_to_json(cfg), "w0": w0}
    if w0 == 0.0:
        # Identical initials: distances sit at the decoupled noise floor.
        sim_b = SimConfig(sim.n_particles, sim.dt, sim.t0, sim.t1, sim.seed + 1, True)
        law_b = simulate_frozen(cfg.model, flow_mu1, flow_mu1, gamma1, sim_b,
                                record_times=record)
        floor = max(
            shared_grid_tv(law1.measures[-1], law_b.measures[-1], 0.0), 1e-12
        )
        assertions.append(Assertion(
            "distances_at_noise_floor", bool(np.all(tvs <= 3.0 * floor)),
            float(tvs.max()), f"3x decoupled floor {3 * floor:.3g}; slope fit skipped"))
        metadata["noise_floor"] = floor
    else:
        slope, _ = fit_loglog(cfg.times, tvs)
        interior = slice(1, -1) if len(cfg.times) >= 5 else slice(None)
        log_c = float(np.mean(np.log(tvs[interior]) + 0.5 * np.log(cfg.times[interior])))
        c_hat = math.exp(log_c)
        envelope_ok = bool(np.all(tvs <= 1.5 * c_hat * cfg.times ** -0.5))
        ratio = wks / w0
        assertions.extend([
            Assertion("tv_slope_floor", slope >= -0.65, slope,
                      "slope of log TV vs log t must be >= -0.5 - 0.15"),
            Assertion("tv_envelope", envelope_ok, c_hat,
                      "TV <= 1.5 * C_hat * t^(-1/2) at every time point"),
            Assertion("wk_ratio_stable", float(ratio.max() / ratio.min()) < 2.0,
                      float(ratio.max() / ratio.min()),
                      "fitted W_k contraction constant varies < 2x across t"),
        ])
        metadata.update({"tv_slope": slope, "c_hat": c_hat,
                         "wk_ratio_range": [float(ratio.min()), float(ratio.max())]})

    series = (Series("regularity", ("t", "tv", "wk", "wk_ratio"),
                     tuple(rows), logx=True, logy=True),)
    return ExperimentReport(
        kind="regularity", model=cfg.model.name,
        passed=all(a.passed for a in assertions),
        assertions=tuple(assertions), series=series, metadata=metadata,
    )


def run_gradient(cfg: ExperimentConfig) -> ExperimentReport:
    """Smoothing estimates for Dirac initials under one frozen solution flow."""
    if cfg.times is None or len(cfg.times) < 3:
        raise ConfigError("gradient needs at least 3 time points", "/times")
    if cfg.gamma1.n != 1 or cfg.gamma2 is None or cfg.gamma2.n != 1:
        raise ConfigError("gradient needs two Dirac initials", "/gamma1")
    x = cfg.gamma1.points[0]
    y = cfg.gamma2.points[0]
    dxy = float(np.linalg.norm(x - y))
    k = cfg.model.constants.k
    K = cfg.model.constants.K
    t_min = float(cfg.times[0])
    bw_floor = 0.9 * math.sqrt(K * t_min) * cfg.sim.n_particles ** (-0.2)
    if 0 < dxy < 0.5 * bw_floor:
        raise DomainError(
            f"|x-y|={dxy:.3g} below the noise-resolvable threshold "
            f"{0.5 * bw_floor:.3g} at the smallest time point"
        )
    epsilons = [float(e) for e in cfg.option("epsilons", [0.25, 0.5, 1.0])]
    t1 = float(cfg.times[-1])
    record = np.union1d(cfg.times, [cfg.sim.t0])
    sim = SimConfig(cfg.sim.n_particles, cfg.sim.dt, cfg.sim.t0, t1, cfg.sim.seed, True)

    flow_mu = _solved_flow(cfg, cfg.gamma1, t1)
    law1 = simulate_frozen(cfg.model, flow_mu, flow_mu, cfg.gamma1, sim, record_times=record)
    law2 = simulate_frozen(cfg.model, flow_mu, flow_mu, cfg.gamma2, sim, record_times=record)

    rows = []
    tvs = []
    weps = {e: [] for e in epsilons}
    for t in cfg.times:
        i = int(np.searchsorted(law1.times, t - 1e-12))
        m1, m2 = law1.measures[i], law2.measures[i]
        tv = shared_grid_tv(m1, m2, 0.0)
        tvs.append(tv)
        row = [float(t), tv]
        for e in epsilons:
            if e >= 1.0:
                w = metrics.wasserstein(m1, m2, e).value
            else:
                # One coupled resample straight to the LP budget.
                thin1 = resample(m1, min(m1.n, 100), 13)
                thin2 = resample(m2, min(m2.n, 100), 13)
                w = metrics.ot_lp(thin1, thin2, e).value
            weps[e].append(w)
            row.append(w)
        rows.append(tuple(row))

    assertions = []
    metadata = {"config": config_to_json(cfg), "dxy": dxy}
    if dxy == 0.0:
        assertions.append(Assertion("zero_distances", bool(np.max(tvs) <= 1e-12),
                                    float(np.max(tvs)), "identical initials"))
    else:
        tv_slope, _ = fit_loglog(cfg.times, tvs)
        assertions.append(Assertion(
            "tv_slope", abs(tv_slope + 0.5) <= 0.15, tv_slope,
            "TV decay exponent -1/2 within 0.15"))
        metadata["tv_slope"] = tv_slope
        for e in epsilons:
            slope, _ = fit_loglog(cfg.times, weps[e])
            ceiling = (-1.0 + e) / 2.0
            ok = ceiling - 0.15 <= slope <= 0.15
            assertions.append(Assertion(
                f"weps_slope_{e}", ok, slope,
                f"W_eps exponent within [{ceiling - 0.15:.3g}, 0.15] "
                f"(ceiling {ceiling:.3g})"))
            metadata[f"weps_slope_{e}"] = slope

    columns = ["t", "tv"] + [f"w_{e}" for e in epsilons]
    series = (Series("gradient", tuple(columns), tuple(rows), logx=True, logy=True),)
    return ExperimentReport(
        kind="gradient", model=cfg.model.name,
        passed=all(a.passed for a in assertions),
        assertions=tuple(assertions), series=series, metadata=metadata,
    )


def run_stability(cfg: ExperimentConfig) -> ExperimentReport:
    """Linear response of sup_t W_k to each driver of the stability bound."""
    k = cfg.model.constants.k
    eta = cfg.model.constants.eta
    deltas = np.asarray(cfg.option("deltas", [1e-3, 3.16e-3, 1e-2, 3.16e-2, 1e-1]),
                        dtype=float)
    sim = cfg.sim
    base_flow = _solved_flow(cfg, cfg.gamma1, sim.t1)
    nodes = base_flow.times
    e1 = np.zeros(cfg.model.dim)
    e1[0] = 1.0

    law_base = simulate_frozen(cfg.model, base_flow, base_flow, cfg.gamma1, sim,
                               record_times=nodes)

    drivers = {
        "initial": lambda d: (cfg.gamma1.shift(d * e1), base_flow, base_flow),
        "diffusion_flow": lambda d: (cfg.gamma1, base_flow, base_flow.shift(d * e1)),
        "drift_flow": lambda d: (cfg.gamma1, base_flow.shift(d * e1), base_flow),
    }
    assertions = []
    series = []
    metadata = {"config": config_to_json(cfg)}
    for name, make in drivers.items():
        responses = []
        driver_vals = []
        for d in deltas:
            gamma, mu_f, nu_f = make(float(d))
            law = simulate_frozen(cfg.model, mu_f, nu_f, gamma, sim, record_times=nodes)
            responses.append(_sup_wk(law_base, law, k))
            if name == "initial":
                driver_vals.append(metrics.wasserstein(cfg.gamma1, gamma, k).value)
            elif name == "diffusion_flow":
                seg = np.diff(np.append(nodes, sim.t1)) if nodes[-1] < sim.t1 else np.diff(nodes)
                vals = [
                    (metrics.wasserstein(a, b, k).value
                     + metrics.wasserstein_eta(a, b, eta).value) ** 2
                    for a, b in zip(base_flow.measures, nu_f.measures)
                ]
                driver_vals.append(math.sqrt(float(np.sum(np.array(vals[: len(seg)]) * seg))))
            else:
                seg = np.diff(np.append(nodes, sim.t1)) if nodes[-1] < sim.t1 else np.diff(nodes)
                vals = [
                    metrics.wasserstein(a, b, k).value + shared_grid_tv(a, b, k)
                    for a, b in zip(base_flow.measures, mu_f.measures)
                ]
                driver_vals.append(float(np.sum(np.array(vals[: len(seg)]) * seg)))
        slope, _ = fit_loglog(deltas, responses, drop_ends=False)
        assertions.append(Assertion(
            f"{name}_response_linear", abs(slope - 1.0) <= 0.2, slope,
            "log-log slope of sup_t W_k against the perturbation size within 1 +- 0.2"))
        metadata[f"{name}_slope"] = slope
        series.append(Series(
            f"stability_{name}", ("delta", "response", "driver"),
            tuple((float(d), float(r), float(v))
                  for d, r, v in zip(deltas, responses, driver_vals)),
            logx=True, logy=True))
    return ExperimentReport(
        kind="stability", model=cfg.model.name,
        passed=all(a.passed for a in assertions),
        assertions=tuple(assertions), series=tuple(series), metadata=metadata,
    )


def _rebin(masses: np.ndarray, groups: int) -> np.ndarray:
    return masses.reshape(groups, -1).sum(axis=1)


def run_duhamel_validation(cfg: ExperimentConfig, outdir=None) -> ExperimentReport:
    """Duhamel grid solver against a Monte Carlo histogram at several horizons."""
    if cfg.model.dim != 1:
        raise ConfigError("duhamel validation needs a 1D model", "/model")
    horizons = [float(h) for h in cfg.option("horizons", [0.0625, 0.125, 0.25])]
    cells = int(cfg.option("cells", SMOKE_CELLS if cfg.smoke else 1024))
    n_mc = int(cfg.option("mc_particles", SMOKE_MC_PARTICLES if cfg.smoke else 100_000))
    tv_tol = float(cfg.option("tv_tol", 0.05))
    tol = float(cfg.option("tol", 1e-6))
    bins = int(cfg.option("comparison_bins", 64))
    x0 = cfg.gamma1.points[0]

    mean_field = not (cfg.model.drift_measure_free and cfg.model.sigma_measure_free)
    t_max = max(horizons)
    if mean_field:
        n_flow = min(cfg.sim.n_particles, 20_000)
        flow_sim = SimConfig(n_flow, cfg.sim.dt, 0.0, t_max, cfg.sim.seed, True)
        flows = solve_mvsde(cfg.model, cfg.gamma1, flow_sim,
                            tol=float(cfg.option("tol_solve", 0.05)), audit=False).solution
    else:
        flows = Flow.constant(cfg.gamma1, np.array([0.0]))

    assertions = []
    rows = []
    metadata = {"config": config_to_json(cfg), "mean_field": mean_field}
    for hz in horizons:
        grid = solve_density(cfg.model, flows, flows, x0, 0.0, hz,
                             tol=tol, cells=cells)
        mc_sim = SimConfig(n_mc, cfg.sim.dt, 0.0, hz, cfg.sim.seed + 17, True)
        mc = simulate_frozen(cfg.model, flows, flows, cfg.gamma1, mc_sim,
                             record_times=np.array([0.0, hz]))
        sample = mc.measures[-1].points[:, 0]
        edges = grid.edges()
        hist, _ = np.histogram(sample, bins=edges)
        mass_mc = hist / n_mc
        mass_solver = grid.final_density() * grid.h
        groups = bins if cells % bins == 0 else cells
        tv = float(np.abs(_rebin(mass_solver, groups) - _rebin(mass_mc, groups)).sum())
        outside = 1.0 - mass_mc.sum()
        tv += outside
        assertions.append(Assertion(
            f"tv_horizon_{hz}", tv <= tv_tol, tv,
            f"solver vs {n_mc}-sample histogram on {groups} bins, tol {tv_tol}"))
        rows.append((hz, tv, grid.iterations, grid.residuals[-1], grid.mass_errors.max()))
        if outdir is not None:
            os.makedirs(outdir, exist_ok=True)
            grid.density_csv(os.path.join(outdir, f"density_t{hz:.6f}.csv"))
            grid.residuals_csv(os.path.join(outdir, f"residuals_t{hz:.6f}.csv"))
    series = (Series("duhamel", ("horizon", "tv", "iterations", "last_residual",
                                 "max_mass_error"), tuple(rows)),)
    return ExperimentReport(
        kind="duhamel", model=cfg.model.name,
        passed=all(a.passed for a in assertions),
        assertions=tuple(assertions), series=series, metadata=metadata,
    )


RUNNERS = {
    "audit": lambda cfg, outdir=None: run_audit(cfg),
    "solve": run_solve,
    "regularity": lambda cfg, outdir=None: run_regularity(cfg),
    "gradient": lambda cfg, outdir=None: run_gradient(cfg),
    "stability": lambda cfg, outdir=None: run_stability(cfg),
    "duhamel": run_duhamel_validation,
}


def run_experiment(cfg: ExperimentConfig, outdir=None) -> ExperimentReport:
    if cfg.kind not in RUNNERS:
        raise ConfigError(f"unknown experiment kind {cfg.kind!r}", "/kind")
    if cfg.kind != "audit":
        # The referenced model must pass its audit before any run.
        lipschitz_audit(cfg.model, n_samples=100, seed=0)
    return RUNNERS[cfg.kind](cfg, outdir=outdir)
