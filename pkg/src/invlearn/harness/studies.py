"""
Monte Carlo studies: rate regression, descent profile, schedule comparison
and the concentration check.

Every replicate draws from ``RngStream(seed, (n, rep))``: child 0 feeds the
data and child 1 the SGD index draws, so results do not depend on worker
count or completion order.
"""
from __future__ import annotations

import functools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import linregress

from ..diagnostics import admissible_lambda, check_concentration
from ..errors import ConfigError, DivergenceError, SourceConstructionError
from ..models import ForwardModel
from ..sampling import NoiseModel, TruthSpec, generate_samples, make_truth
from ..solvers import (RunRecord, SolverConfig, gd_run, min_batch_bound, saturation,
                       schedule_preset, sgd_run, stopping_time)
from ..spectral import QuadratureGrid, RngStream, quadrature_grid
from ..tangent import fit_decay, population_T
from .config import ExperimentConfig, check_step_cap

MAX_EXCLUDED = 0.2
RESULT_COLUMNS = ("n", "rep", "err_u0", "err_u05", "err_pred", "t_stop", "in_ball", "wall_ns")


def theoretical_exponent(r: float, nu: float, u: float, solver: str = "gd") -> float:
    """Decay exponent of the bounded quantity: the norm for GD, its square for SGD."""
    if solver == "gd":
        q = min(r, 0.5)
        return (q + u) / (2 * q + nu + 1)
    q = saturation(r)
    return (q + 2 * u) / (q + nu + 1)


def fit_slope(ns, values) -> tuple:
    """Least-squares slope and its standard error of ``log values`` on ``log n``."""
    res = linregress(np.log(np.asarray(ns, dtype=float)), np.log(np.asarray(values, dtype=float)))
    return float(res.slope), float(res.stderr), float(res.intercept)


@dataclass
class Setup:
    model: ForwardModel
    truth: TruthSpec
    grid: QuadratureGrid
    noise: NoiseModel
    nu: float


def build_setup(cfg: ExperimentConfig) -> Setup:
    model = cfg.model.build()
    check_step_cap(cfg, model)
    grid = quadrature_grid(cfg.quadrature, design=cfg.design.as_tuple())
    fd = model.default_truth()
    t_pop = population_T(model, fd, grid)
    if cfg.truth.g == "powerlaw":
        direction = ("powerlaw", cfg.truth.g_decay)
    else:
        direction = RngStream(cfg.truth.g_seed, (0,)).generator().standard_normal(model.p)
    try:
        truth = make_truth(model, fd, cfg.truth.r, direction, cfg.truth.D, grid, t_pop=t_pop)
    except SourceConstructionError as exc:
        raise ConfigError(str(exc)) from None
    nu = cfg.truth.nu
    if cfg.truth.nu_from_fit:
        nu = fit_decay(truth.decomp).nu_hat
        if not 0 < nu < 1:
            raise ConfigError(f"fitted decay exponent {nu:.3g} is outside (0, 1)")
    return Setup(model, truth, grid, NoiseModel(cfg.noise.kind, cfg.noise.scale), nu)


@functools.lru_cache(maxsize=4)
def _cached_setup(cfg_json: str) -> Setup:
    return build_setup(ExperimentConfig.model_validate_json(cfg_json))


def gd_step(cfg: ExperimentConfig, setup: Setup, n: int) -> float:
    s = cfg.schedule
    if s.eta is not None:
        return s.eta
    return schedule_preset(s.case, n, cfg.truth.r, setup.nu, setup.model.constants.kappa1, s.c_eta).eta


def sgd_plan(cfg: ExperimentConfig, setup: Setup, n: int, case: str | None = None):
    """(eta, batch, horizon, warning) for one SGD run."""
    s = cfg.schedule
    case = case or s.case
    kappa1 = setup.model.constants.kappa1
    if case is not None:
        pr = schedule_preset(case, n, cfg.truth.r, setup.nu, kappa1, s.c_eta)
        eta, b, T = pr.eta, pr.b, pr.T
    else:
        eta, b, T = s.eta, min(s.batch, n), s.t_max
    warning = None
    if case is None:
        # the batch bound is stated in units where kappa1 = 1
        need = min_batch_bound(eta * kappa1**2, T / kappa1**2, cfg.truth.r, setup.nu)
        if b < need:
            warning = f"batch size {b} below the admissible bound {need:.3g} at n={n}"
    return eta, b, T, warning


def _empty_row(n, rep):
    return {"n": n, "rep": rep, "err_u0": math.nan, "err_u05": math.nan, "err_pred": math.nan,
            "t_stop": 0, "in_ball": 0, "wall_ns": 0}


def run_replicate(cfg_json: str, n: int, rep: int, case: str | None = None,
                  keep_trace: bool = False) -> dict:
    """One (n, rep) replicate; returns a results row plus status fields."""
    cfg = ExperimentConfig.model_validate_json(cfg_json)
    setup = _cached_setup(cfg_json)
    model, truth = setup.model, setup.truth
    stream = RngStream(cfg.seed, (n, rep))
    data = generate_samples(model, truth.f_dagger, setup.noise, n, stream.spawn(0), cfg.design.as_tuple())
    row = _empty_row(n, rep)
    row.update(status="ok", warning=None, case=case)
    try:
        if cfg.solver == "gd" and case is None:
            eta = gd_step(cfg, setup, n)
            t_stop = cfg.schedule.t_max or stopping_time(n, cfg.truth.r, setup.nu, eta)
            t_run = int(math.ceil(t_stop * cfg.descent.extend)) if keep_trace else t_stop
            every = 1 if keep_trace else t_run
            sc = SolverConfig.for_model(model, eta, t_run, record_every=every,
                                        domain_policy=cfg.domain_policy)
            rec = gd_run(model, data, truth.f1, sc, truth)
        else:
            eta, b, t_stop, warning = sgd_plan(cfg, setup, n, case)
            row["warning"] = warning
            sc = SolverConfig.for_model(model, eta, t_stop, batch=b, rng=stream.spawn(1),
                                        record_every=t_stop, domain_policy=cfg.domain_policy)
            rec = sgd_run(model, data, truth.f1, sc, truth)
            row["passes"] = math.ceil(b * t_stop / n)
    except DivergenceError as exc:
        row.update(status="diverged", detail=str(exc))
        return row
    row["t_stop"] = int(t_stop)
    if rec.error is not None:
        row.update(status="domain", detail=rec.error)
        return row
    final = rec.final if not keep_trace else rec.snapshots[min(t_stop, rec.ts.shape[0]) - 1]
    e = final - truth.f_dagger
    nodes = setup.grid.nodes
    row.update(
        err_u0=float(np.linalg.norm(e)),
        err_u05=float(np.linalg.norm(truth.decomp.apply(np.sqrt, e))),
        err_pred=setup.grid.l2_norm(model.apply(final, nodes) - model.apply(truth.f_dagger, nodes)),
        in_ball=int(rec.first_exit is None or rec.first_exit > t_stop),
        wall_ns=int(rec.wall_ns[-1]),
    )
    if keep_trace:
        row["trace"] = rec.err_u0
        row["first_exit"] = rec.first_exit
    return row


def _fan_out(tasks, jobs: int):
    """Run ``run_replicate`` over tasks; results keep task order."""
    if jobs <= 1:
        return [run_replicate(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(run_replicate, *t) for t in tasks]
        return [f.result() for f in futures]


@dataclass
class StudyReport:
    kind: str
    rows: list
    summary: dict
    passed: bool
    columns: tuple = RESULT_COLUMNS
    traces: dict = field(default_factory=dict)


def _per_n(rows, ns, value):
    stats, excluded = [], 0
    for n in ns:
        sel = [r for r in rows if r["n"] == n]
        good = [value(r) for r in sel if r["status"] == "ok"]
        excluded += len(sel) - len(good)
        stats.append({"n": n, "mean": float(np.mean(good)) if good else math.nan,
                      "std": float(np.std(good, ddof=1)) if len(good) > 1 else 0.0,
                      "valid": len(good), "excluded": len(sel) - len(good)})
    return stats, excluded


def _rate_summary(cfg, setup, rows, ns, solver, label=None):
    u = cfg.u
    key = "err_u0" if u == 0 else "err_u05"
    if solver == "gd":
        value = lambda r: r[key]
    else:
        value = lambda r: r[key] ** 2
    stats, excluded = _per_n(rows, ns, value)
    total = len(rows)
    expo = theoretical_exponent(cfg.truth.r, setup.nu, u, solver)
    out = {"solver": solver, "u": u, "quantity": ("mean " if solver == "gd" else "mean squared ") + key,
           "per_n": stats, "theoretical_exponent": expo, "target_slope": -expo,
           "tolerance": cfg.slope_tolerance, "excluded": excluded, "replicates": total}
    if label:
        out["case"] = label
    means = [s["mean"] for s in stats]
    reasons = []
    if total and excluded > MAX_EXCLUDED * total:
        reasons.append(f"{excluded}/{total} replicates excluded (limit {MAX_EXCLUDED:.0%})")
    if len(ns) >= 2 and all(np.isfinite(means)) and min(means) > 0:
        slope, stderr, intercept = fit_slope(ns, means)
        out.update(slope=slope, slope_stderr=stderr, intercept=intercept)
        if not abs(slope + expo) <= cfg.slope_tolerance:
            reasons.append(f"slope {slope:.3f} outside {-expo:.3f} +- {cfg.slope_tolerance}")
    else:
        out.update(slope=None, slope_stderr=None, intercept=None)
        reasons.append("slope undefined")
    out["passed"] = not reasons
    out["reasons"] = reasons
    return out


def _common_summary(cfg, setup):
    return {"seed": cfg.seed, "model": setup.model.fingerprint(), "nu": setup.nu, "r": cfg.truth.r,
            "kappa1": setup.model.constants.kappa1, "n_grid": list(cfg.n_grid),
            "replicates": cfg.replicates}


def rate_study(cfg: ExperimentConfig, jobs: int = 1) -> StudyReport:
    if len(cfg.n_grid) < 4:
        raise ConfigError("rate studies need an n_grid with at least 4 points")
    setup = build_setup(cfg)
    cfg_json = cfg.model_dump_json()
    tasks = [(cfg_json, n, rep) for n in cfg.n_grid for rep in range(cfg.replicates)]
    rows = _fan_out(tasks, jobs)
    summary = {"study": "rate", **_common_summary(cfg, setup),
               **_rate_summary(cfg, setup, rows, cfg.n_grid, cfg.solver)}
    warnings = sorted({r["warning"] for r in rows if r.get("warning")})
    summary["warnings"] = warnings
    return StudyReport("rate", rows, summary, summary["passed"])


def _first_increase(trace, upto):
    e = trace[:upto]
    bad = np.nonzero(np.diff(e) > 1e-12 * e[:-1])[0]
    return int(bad[0]) + 2 if bad.size else None


def descent_profile(cfg: ExperimentConfig, jobs: int = 1) -> StudyReport:
    """Monotonicity of ``||e_t||`` and ball containment for t <= T_n, per replicate."""
    if cfg.solver != "gd":
        raise ConfigError("descent_profile needs solver=gd")
    setup = build_setup(cfg)
    cfg_json = cfg.model_dump_json()
    tasks = [(cfg_json, n, rep, None, True) for n in cfg.n_grid for rep in range(cfg.replicates)]
    rows = _fan_out(tasks, jobs)
    per_n, traces = [], {}
    for n in cfg.n_grid:
        sel = [r for r in rows if r["n"] == n]
        flags, violations, upturns = [], [], 0
        for r in sel:
            if r["status"] != "ok":
                flags.append(False)
                violations.append({"rep": r["rep"], "status": r["status"]})
                continue
            t_stop = r["t_stop"]
            first = _first_increase(r["trace"], t_stop)
            ok = first is None and r["in_ball"] == 1
            r["monotone"] = int(first is None)
            flags.append(ok)
            if not ok:
                violations.append({"rep": r["rep"], "first_increase": first, "first_exit": r["first_exit"]})
            if r["trace"].shape[0] > t_stop and _first_increase(r["trace"], r["trace"].shape[0]) is not None:
                upturns += 1
        traces[n] = [r["trace"] for r in sel[: cfg.descent.traces] if r["status"] == "ok"]
        per_n.append({"n": n, "fraction": float(np.mean(flags)), "violations": violations,
                      "upturns_after_stop": upturns if cfg.descent.extend > 1 else None})
    passed = all(p["fraction"] >= cfg.descent.threshold for p in per_n)
    for r in rows:
        r.pop("trace", None)
    summary = {"study": "descent", **_common_summary(cfg, setup), "threshold": cfg.descent.threshold,
               "extend": cfg.descent.extend, "per_n": per_n, "passed": passed}
    return StudyReport("descent", rows, summary, passed, traces=traces)


SCHEDULE_COLUMNS = ("case",) + RESULT_COLUMNS + ("passes",)


def schedule_study(cfg: ExperimentConfig, jobs: int = 1, spread: float = 3.0) -> StudyReport:
    """All configured cases on the n grid: per-case rates, passes and the spread at the largest n."""
    if cfg.solver != "sgd":
        raise ConfigError("schedule_study needs solver=sgd")
    setup = build_setup(cfg)
    cfg_json = cfg.model_dump_json()
    tasks = [(cfg_json, n, rep, case) for case in cfg.cases for n in cfg.n_grid
             for rep in range(cfg.replicates)]
    rows = _fan_out(tasks, jobs)
    per_case = {}
    for case in cfg.cases:
        sel = [r for r in rows if r["case"] == case]
        block = _rate_summary(cfg, setup, sel, cfg.n_grid, "sgd", label=case) if len(cfg.n_grid) >= 2 else {}
        block["passes"] = {str(n): schedule_preset(case, n, cfg.truth.r, setup.nu,
                                                   setup.model.constants.kappa1).passes for n in cfg.n_grid}
        block["wall_s"] = float(sum(r["wall_ns"] for r in sel) / 1e9)
        per_case[case] = block
    n_top = cfg.n_grid[-1]
    top = {c: per_case[c]["per_n"][-1]["mean"] for c in cfg.cases}
    ratio = max(top.values()) / min(top.values()) if min(top.values()) > 0 else math.inf
    passed = ratio <= spread and all(b.get("passed", True) for b in per_case.values())
    summary = {"study": "schedules", **_common_summary(cfg, setup), "cases": per_case,
               "largest_n": n_top, "spread_at_largest_n": ratio, "spread_limit": spread, "passed": passed}
    return StudyReport("schedules", rows, summary, passed, columns=SCHEDULE_COLUMNS)


CONCENTRATION_COLUMNS = ("delta", "lambda", "in_range", "passed",
                         "upsilon_quantile", "upsilon_bound", "psi_quantile", "psi_hs_quantile",
                         "psi_bound", "psi_sqrt_lam_bound", "theta_quantile", "theta_bound",
                         "xi_half_quantile", "xi_half_bound", "xi_one_quantile", "xi_one_bound")


def concentration_study(cfg: ExperimentConfig, jobs: int = 1) -> StudyReport:
    """Quantiles of the concentration quantities on the admissible lambda grid."""
    setup = build_setup(cfg)
    block = cfg.concentration
    n = block.n
    lo, hi = admissible_lambda(n, setup.nu)
    lams = block.lambdas if block.lambdas is not None else list(np.geomspace(lo, hi, block.n_lambdas))
    rows, reports = [], []
    for i, delta in enumerate(block.deltas):
        rep = check_concentration(setup.model, setup.truth.f_dagger, setup.noise, n, lams, delta,
                                  block.reps, RngStream(cfg.seed, (n, 10**6 + i)), setup.nu, setup.grid,
                                  cfg.design.as_tuple())
        reports.append(rep.as_dict())
        rows += [{"delta": delta, **r} for r in rep.rows]
    passed = all(r["passed"] for r in rows if r["in_range"])
    summary = {"study": "concentration", **_common_summary(cfg, setup), "n": n,
               "admissible_lambda": [lo, hi], "reports": reports, "passed": passed}
    return StudyReport("concentration", rows, summary, passed, columns=CONCENTRATION_COLUMNS)


STUDIES = {"run": rate_study, "descent": descent_profile, "schedules": schedule_study,
           "concentration": concentration_study}
