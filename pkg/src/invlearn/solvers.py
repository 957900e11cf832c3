"""
Constant-step gradient descent and mini-batch SGD on the empirical risk,
with the stopping time, batch-size bound and the four schedule presets.

The implemented updates are

    g_{t+1} = g_t - (eta / n) sum_j (S_{x_j} A'(g_t))^* (A(g_t)(x_j) - y_j)
    f_{t+1} = f_t - (eta / b) sum_i (S_{x_{j_i}} A'(f_t))^* (A(f_t)(x_{j_i}) - y_{j_i})

with ``j_i`` drawn uniformly from [n] with replacement. The 1/n weighting makes
the linearised operator T_hat carry the same scaling as the population T, so
the step cap ``eta < 1 / kappa1^2`` applies to both. The gradient of the
empirical risk is twice the GD direction; the factor is absorbed in eta.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .errors import ContractError, DivergenceError, DomainError
from .models import ForwardModel, ParamVector
from .sampling import SampleSet, TruthSpec
from .spectral import RngStream, frac_power

CASES = ("a", "b", "c", "d")
DIVERGENCE_FACTOR = 1e6
# SGD index draws are made in blocks of about this many entries, independent of recording
_DRAW_BLOCK = 1 << 16


def _floor(x: float) -> int:
    k = round(x)
    return int(k) if abs(x - k) <= 1e-9 * max(1.0, abs(x)) else math.floor(x)


def _ceil(x: float) -> int:
    k = round(x)
    return int(k) if abs(x - k) <= 1e-9 * max(1.0, abs(x)) else math.ceil(x)


def saturation(r: float) -> float:
    """``min(2r, 1)``, the qualification-limited smoothness used in every schedule."""
    return min(2.0 * r, 1.0)


def stopping_time(n: int, r: float, nu: float, eta: float) -> int:
    """Early stopping index ``floor(n^(1 / (min(2r,1) + nu + 1)) / eta)``, at least 1."""
    if n < 1 or not eta > 0 or not 0 < nu < 1 or not r > 0:
        raise DomainError(f"stopping_time needs n >= 1, eta > 0, 0 < nu < 1, r > 0 "
                          f"(got n={n}, eta={eta}, nu={nu}, r={r})")
    expo = 1.0 / (saturation(r) + nu + 1.0)
    return max(1, _floor(n**expo / eta))


def min_batch_bound(eta: float, t: float, r: float, nu: float) -> float:
    """Smallest admissible batch size for a run of ``t`` steps."""
    if not (eta > 0 and t > 0 and r > 0 and nu > 0):
        raise DomainError("min_batch_bound needs positive eta, t, r and nu")
    q = saturation(r)
    et = eta * t
    first = eta * et ** (q + nu)
    second = eta ** ((q + 1) / (q + nu + 1)) * et ** (q + 1)
    return max(first, second)


@dataclass(frozen=True)
class SchedulePreset:
    case: str
    n: int
    b: int
    T: int
    eta: float
    kappa1: float = 1.0

    @property
    def passes(self) -> int:
        return _ceil(self.b * self.T / self.n)

    def as_dict(self) -> dict:
        return {"case": self.case, "n": self.n, "b": self.b, "T": self.T,
                "eta": self.eta, "passes": self.passes}


def schedule_preset(case: str, n: int, r: float, nu: float, kappa1: float = 1.0,
                    c_eta: float = 0.9) -> SchedulePreset:
    """Batch size, horizon and step size of the four mini-batch regimes.

    Orders are instantiated with constant 1 in units where ``kappa1 = 1``: the
    step size is ``c_eta / kappa1^2`` times its order and the horizon is
    ``kappa1^2`` times its order, so ``eta * T`` does not depend on kappa1.
    """
    if case not in CASES:
        raise DomainError(f"invalid schedule case {case!r}; expected one of {CASES}")
    if n < 2:
        raise DomainError("schedule presets need n >= 2")
    q = saturation(r)
    e = q + nu + 1.0
    k2 = kappa1**2
    eta0 = c_eta / k2
    b_mid = _ceil(n ** ((q + 1) / e))
    t_mid = _ceil(k2 * n ** (1 / e))
    if case == "a":
        b, T, eta = b_mid, _ceil(k2 * n), eta0 * n ** (-(q + nu) / e)
    elif case == "b":
        b, T, eta = b_mid, t_mid, eta0
    elif case == "c":
        b, T, eta = n, t_mid, eta0
    else:
        b, T, eta = 1, _ceil(k2 * n ** ((q + nu + 2) / e)), eta0 / n
    return SchedulePreset(case=case, n=int(n), b=int(min(b, n)), T=int(T), eta=float(eta),
                          kappa1=float(kappa1))


@dataclass
class SolverConfig:
    eta: float
    t_max: int
    step_cap: float
    batch: int | None = None
    rng: RngStream | None = None
    record_every: int = 1
    domain_policy: str = "reject"

    def __post_init__(self):
        if not self.eta > 0:
            raise DomainError(f"step size must be positive, got {self.eta}")
        if not self.eta < self.step_cap:
            raise DomainError(f"step size {self.eta:g} violates the cap eta < 1/kappa1^2 = {self.step_cap:g}")
        if self.t_max < 1:
            raise DomainError("t_max must be >= 1")
        if self.batch is not None and self.batch < 1:
            raise DomainError("batch size must be >= 1")
        if self.record_every < 1:
            raise DomainError("record_every must be >= 1")
        if self.domain_policy not in ("reject", "project"):
            raise DomainError(f"domain policy must be 'reject' or 'project', got {self.domain_policy!r}")

    @classmethod
    def for_model(cls, model: ForwardModel, eta: float, t_max: int, **kw) -> "SolverConfig":
        return cls(eta=eta, t_max=t_max, step_cap=model.constants.step_cap, **kw)


@dataclass
class RunRecord:
    """Trace of one solver run; iterate index t = 1 is the initial point."""

    ts: np.ndarray
    snapshots: np.ndarray
    wall_ns: np.ndarray
    err_u0: np.ndarray | None = None
    err_u05: np.ndarray | None = None
    in_ball: np.ndarray | None = None
    first_exit: int | None = None
    error: str | None = None
    meta: dict = field(default_factory=dict)

    @property
    def final(self) -> np.ndarray:
        return self.snapshots[-1]

    @property
    def t_final(self) -> int:
        return int(self.ts[-1])

    @property
    def ball_exit(self) -> bool:
        return self.first_exit is not None

    def to_csv(self, path) -> Path:
        path = Path(path)
        k = self.ts.shape[0]
        nan = np.full(k, np.nan)
        e0 = self.err_u0 if self.err_u0 is not None else nan
        e5 = self.err_u05 if self.err_u05 is not None else nan
        ib = self.in_ball if self.in_ball is not None else np.ones(k, dtype=bool)
        with path.open("w", encoding="utf-8") as fh:
            fh.write("t,err_u0,err_u05,in_ball,wall_ns\n")
            for row in zip(self.ts, e0, e5, ib, self.wall_ns):
                fh.write(f"{int(row[0])},{float(row[1])!r},{float(row[2])!r},{int(bool(row[3]))},{int(row[4])}\n")
        sidecar = path.with_suffix(".json")
        meta = {**self.meta, "first_exit": self.first_exit, "error": self.error}
        sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True, default=float), encoding="utf-8")
        return path


class _Tracker:
    """Records snapshots, error norms and ball containment during a run."""

    def __init__(self, f1, t_max, record_every, truth: TruthSpec | None, radius):
        self.t_max = t_max
        self.every = record_every
        self.truth = truth
        self.radius = radius
        self.half = frac_power(truth.decomp, 0.5) if truth is not None and truth.decomp is not None else None
        self.start = time.perf_counter_ns()
        self.ts, self.snaps, self.walls = [], [], []
        self.first_exit = None
        self.limit = DIVERGENCE_FACTOR * (1.0 + np.linalg.norm(f1))

    def due(self, t):
        return t == 1 or t == self.t_max or (t - 1) % self.every == 0

    def record(self, t, g):
        self.ts.append(t)
        self.snaps.append(np.array(g, copy=True))
        self.walls.append(time.perf_counter_ns() - self.start)

    def check(self, t, g):
        norm = float(np.linalg.norm(g))
        if not np.isfinite(norm) or norm > self.limit:
            raise DivergenceError(t, norm)
        if self.truth is not None and self.first_exit is None:
            if np.linalg.norm(g - self.truth.f_dagger) > self.radius:
                self.first_exit = t

    def finish(self, meta, error=None) -> RunRecord:
        ts = np.array(self.ts, dtype=int)
        snaps = np.array(self.snaps)
        rec = RunRecord(ts=ts, snapshots=snaps, wall_ns=np.array(self.walls, dtype=np.int64),
                        first_exit=self.first_exit, error=error, meta=meta)
        if self.truth is not None:
            e = snaps - self.truth.f_dagger
            rec.err_u0 = np.linalg.norm(e, axis=1)
            if self.half is not None:
                rec.err_u05 = np.linalg.norm(e @ self.half, axis=1)
            exit_t = self.first_exit if self.first_exit is not None else np.inf
            rec.in_ball = ts < exit_t
        return rec


def _domain_step(model, g, t, policy):
    """Return (iterate, error message or None) after the domain policy."""
    msg = model.domain_violation(g)
    if msg is None:
        return g, None
    if policy == "project":
        return model.project(g), None
    return g, f"domain violation at t={t}: {msg}"


def gd_run(model: ForwardModel, data: SampleSet, f1: ParamVector, cfg: SolverConfig,
           truth: TruthSpec | None = None) -> RunRecord:
    """Full-batch constant-step gradient descent, iterates ``g_1 = f1, ..., g_{t_max}``."""
    g = model.check_domain(f1).copy()
    n = data.n
    xs, ys = data.xs, data.ys
    tr = _Tracker(g, cfg.t_max, cfg.record_every, truth, model.ball_radius)
    meta = {"solver": "gd", "eta": cfg.eta, "t_max": cfg.t_max, "n": n}
    tr.check(1, g)
    if model.is_linear:
        # A'(g) is constant: iterate on the p x p normal equations
        rows = model.jacobian(g, xs).reshape(-1, model.p)
        t_hat = rows.T @ rows / n
        rhs = rows.T @ ys.reshape(-1) / n
    weights = np.full(n, 1.0 / n)
    error = None
    for t in range(1, cfg.t_max + 1):
        if tr.due(t):
            tr.record(t, g)
        if t == cfg.t_max:
            break
        if model.is_linear:
            grad = t_hat @ g - rhs
        else:
            grad = model.jac_adjoint_apply(g, xs, weights, model.apply(g, xs) - ys)
        g = g - cfg.eta * grad
        tr.check(t + 1, g)
        g, error = _domain_step(model, g, t + 1, cfg.domain_policy)
        if error is not None:
            tr.record(t + 1, g)
            break
    return tr.finish(meta, error)


@numba.njit(cache=True)
def _sgd_linear_steps(jac, ys, g, eta, idx, fd, radius, limit):
    """Run ``idx.shape[0]`` SGD steps in place on a linear model.

    Returns (first step offset leaving the ball or -1, diverged step offset or -1).
    """
    steps, b = idx.shape
    m, p = jac.shape[1], jac.shape[2]
    grad = np.zeros(p)
    first_exit = -1
    for s in range(steps):
        grad[:] = 0.0
        for i in range(b):
            j = idx[s, i]
            for c in range(m):
                res = -ys[j, c]
                for k in range(p):
                    res += jac[j, c, k] * g[k]
                for k in range(p):
                    grad[k] += jac[j, c, k] * res
        nrm = 0.0
        dist = 0.0
        for k in range(p):
            g[k] -= eta / b * grad[k]
            nrm += g[k] * g[k]
            d = g[k] - fd[k]
            dist += d * d
        if not np.isfinite(nrm) or np.sqrt(nrm) > limit:
            return first_exit, s
        if first_exit < 0 and np.sqrt(dist) > radius:
            first_exit = s
    return first_exit, -1


def sgd_run(model: ForwardModel, data: SampleSet, f1: ParamVector, cfg: SolverConfig,
            truth: TruthSpec | None = None) -> RunRecord:
    """Mini-batch SGD with indices drawn i.i.d. uniformly from [n] (with replacement)."""
    b = cfg.batch
    if b is None or not 1 <= b <= data.n:
        raise ContractError(f"batch size must satisfy 1 <= b <= n={data.n}, got {b}")
    if cfg.rng is None:
        raise ContractError("sgd_run needs an RngStream in SolverConfig.rng")
    g = model.check_domain(f1).copy()
    n = data.n
    xs, ys = data.xs, data.ys
    gen = cfg.rng.generator()
    tr = _Tracker(g, cfg.t_max, cfg.record_every, truth, model.ball_radius)
    meta = {"solver": "sgd", "eta": cfg.eta, "t_max": cfg.t_max, "n": n, "b": b}
    tr.check(1, g)
    # linear models have an unrestricted domain and a constant Jacobian
    fast = model.is_linear
    if fast:
        jac = np.ascontiguousarray(model.jacobian(g, xs))
        fd = truth.f_dagger if truth is not None else np.zeros(model.p)
        radius = model.ball_radius if truth is not None else np.inf
    weights = np.full(b, 1.0 / b)
    block = max(1, _DRAW_BLOCK // b)
    t = 1
    tr.record(1, g)
    total = cfg.t_max - 1
    error = None
    while total > 0 and error is None:
        k = min(block, total)
        idx = gen.integers(0, n, size=(k, b))
        pos = 0
        while pos < k:
            # advance to the next recording point or the end of the block
            nxt = t + 1
            while not tr.due(nxt) and nxt - t < k - pos:
                nxt += 1
            seg = nxt - t
            if fast:
                exit_s, div_s = _sgd_linear_steps(jac, ys, g, cfg.eta, idx[pos:pos + seg], fd,
                                                  radius, tr.limit)
                if div_s >= 0:
                    raise DivergenceError(t + div_s + 1, float(np.linalg.norm(g)))
                if exit_s >= 0 and tr.first_exit is None:
                    tr.first_exit = t + exit_s + 1
            else:
                for s in range(seg):
                    sel = idx[pos + s]
                    xb = xs[sel]
                    res = model.apply(g, xb) - ys[sel]
                    g = g - cfg.eta * model.jac_adjoint_apply(g, xb, weights, res)
                    tr.check(t + s + 1, g)
                    g, error = _domain_step(model, g, t + s + 1, cfg.domain_policy)
                    if error is not None:
                        seg = s + 1
                        break
            pos += seg
            t += seg
            if tr.due(t) or error is not None:
                tr.record(t, g)
            if error is not None:
                break
        total -= k
    return tr.finish(meta, error)
