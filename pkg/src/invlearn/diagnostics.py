"""
Error functionals, concentration quantities with their high-probability
bounds, the phi-sum inequalities and the Taylor remainder bound.

All operators live in coefficient coordinates: the population operator is
``T = sum_q w_q b_q^T b_q`` on the quadrature grid and the empirical one is
``T_hat = (1/n) sum_j b_j^T b_j``. These share their nonzero spectrum with the
corresponding operators on the output space, so every norm and trace below is
the same in either picture.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.special

from .errors import ContractError, DomainError
from .models import ForwardModel, ParamVector, sample_ball
from .sampling import NoiseModel, SampleSet, draw_design
from .spectral import QuadratureGrid, RngStream, frac_power, sym_eig
from .tangent import TangentOperators, decay_constant, population_T

XI_FLOOR = 1e-300


@dataclass(frozen=True)
class ErrorPair:
    u0: float
    u05: float
    pred: float

    def __post_init__(self):
        if min(self.u0, self.u05, self.pred) < 0:
            raise ContractError("error norms must be nonnegative")


def error_pair(t_ops: TangentOperators, e: ParamVector, model: ForwardModel | None = None,
               f: ParamVector | None = None, f_dagger: ParamVector | None = None,
               grid: QuadratureGrid | None = None) -> ErrorPair:
    """``||e||``, ``||T^(1/2) e||`` and the L2 prediction error ``||A(f) - A(f_dagger)||``.

    The prediction term is 0 unless ``model``, ``f``, ``f_dagger`` and ``grid`` are given.
    """
    decomp = getattr(t_ops, "decomp_t", t_ops)
    e = np.asarray(e, dtype=float)
    if e.shape != (decomp.dim,):
        raise ContractError(f"error vector has shape {e.shape}, operator has dimension {decomp.dim}")
    u0 = float(np.linalg.norm(e))
    u05 = float(np.linalg.norm(frac_power(decomp, 0.5) @ e))
    pred = 0.0
    if model is not None and f is not None and f_dagger is not None and grid is not None:
        pred = grid.l2_norm(model.apply(f, grid.nodes) - model.apply(f_dagger, grid.nodes))
    return ErrorPair(u0, u05, pred)


# -- concentration ---------------------------------------------------------

@dataclass(frozen=True)
class ConcentrationSample:
    lam: float
    psi: float
    theta: float
    upsilon: float
    xi_half: float
    xi_one: float
    psi_hs: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


def _inv_sqrt(decomp, lam):
    return decomp.apply(lambda s: 1.0 / np.sqrt(s + lam), np.eye(decomp.dim))


def _xi(d_hat, d_pop, lam, s):
    left = d_hat.apply(lambda v: (v + lam) ** -s, np.eye(d_hat.dim))
    right = d_pop.apply(lambda v: (v + lam) ** s, np.eye(d_pop.dim))
    return max(float(np.linalg.norm(left @ right, 2)), XI_FLOOR)


def concentration_sample(model: ForwardModel, f_dagger: ParamVector, data: SampleSet,
                         grid: QuadratureGrid, lam: float, t_pop: np.ndarray | None = None,
                         weights: np.ndarray | None = None) -> ConcentrationSample:
    """Psi, Theta, Upsilon and Xi^s at one regularisation level.

    ``weights`` replaces the empirical 1/n weights; with the quadrature nodes
    and weights as data the empirical and population operators coincide.
    Upsilon is reported as the absolute value of the trace.
    """
    if not lam > 0:
        raise DomainError(f"lambda must be positive, got {lam}")
    t_pop = population_T(model, f_dagger, grid) if t_pop is None else t_pop
    n = data.n
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (n,):
        raise ContractError(f"weights must have shape ({n},)")
    jac = model.jacobian(f_dagger, data.xs)
    t_hat = np.einsum("j,jmi,jmk->ik", w, jac, jac)
    t_hat = 0.5 * (t_hat + t_hat.T)
    # eps = (S_hat A)(f_dagger) - y
    eps = model.apply(f_dagger, data.xs) - data.ys
    s_eps = np.einsum("j,jmi,jm->i", w, jac, eps)
    d_pop = sym_eig(t_pop)
    d_hat = sym_eig(t_hat)
    half = _inv_sqrt(d_pop, lam)
    diff = t_pop - t_hat
    psi_mat = half @ diff
    psi = float(np.linalg.norm(psi_mat, 2))
    psi_hs = float(np.linalg.norm(psi_mat))
    upsilon = abs(float(np.trace(half @ half @ diff)))
    theta = float(np.linalg.norm(half @ s_eps))
    return ConcentrationSample(lam=float(lam), psi=psi, theta=theta, upsilon=upsilon,
                               xi_half=_xi(d_hat, d_pop, lam, 0.5), xi_one=_xi(d_hat, d_pop, lam, 1.0),
                               psi_hs=psi_hs)


def admissible_lambda(n: int, nu: float) -> tuple:
    """Range ``n^(-1/(1+nu)) <= lambda <= 1`` on which the simplified bounds hold."""
    return n ** (-1.0 / (1.0 + nu)), 1.0


def concentration_constants(kappa: float, c_nu: float, M: float, Sigma: float) -> tuple:
    """``C_kappa = 2(kappa^2 + kappa C_nu)`` and ``C_kappa,M,Sigma = 2(kappa M + Sigma C_nu)``."""
    return 2.0 * (kappa**2 + kappa * c_nu), 2.0 * (kappa * M + Sigma * c_nu)


def concentration_bounds(n: int, lam: float, nu: float, delta: float, c_kappa: float,
                         c_kms: float) -> dict:
    log_term = math.log(6.0 / delta)
    rate = 1.0 / math.sqrt(n * lam**nu)
    base = c_kappa * log_term
    return {
        "upsilon": base,
        "psi": base * rate,
        "psi_sqrt_lam": base * math.sqrt(lam),
        "theta": c_kms * rate * log_term,
        "xi_half": base,
        "xi_one": base**2,
    }


@dataclass
class ConcentrationReport:
    n: int
    delta: float
    nu: float
    kappa: float
    c_nu: float
    M: float
    Sigma: float
    reps: int
    rows: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r["passed"] for r in self.rows if r["in_range"])

    def as_dict(self) -> dict:
        return {**{k: v for k, v in asdict(self).items() if k != "rows"},
                "passed": self.passed, "rows": self.rows}


QUANTITIES = ("upsilon", "psi", "theta", "xi_half", "xi_one")


def check_concentration(model: ForwardModel, f_dagger: ParamVector, noise: NoiseModel, n: int,
                        lambda_grid, delta: float, reps: int, rng: RngStream, nu: float,
                        grid: QuadratureGrid, design: tuple | None = None) -> ConcentrationReport:
    """Empirical (1 - delta)-quantiles of the concentration quantities against their bounds.

    ``kappa`` is taken as ``kappa1``, the bound on the tangent rows; for linear
    models it equals ``kappa0``. The Psi row passes when both the Hilbert-Schmidt
    and the operator-norm quantiles sit below the bound.
    """
    if reps < 20:
        raise DomainError(f"concentration check needs reps >= 20, got {reps}")
    if not 0 < delta < 1:
        raise DomainError(f"delta must lie in (0, 1), got {delta}")
    t_pop = population_T(model, f_dagger, grid)
    d_pop = sym_eig(t_pop)
    c_nu = decay_constant(d_pop, nu)
    kappa = model.constants.kappa1
    signal = float(np.max(np.abs(model.apply(f_dagger, np.linspace(0, 1, 2049)))))
    M, Sigma = noise.bernstein_constants(signal)
    c_kappa, c_kms = concentration_constants(kappa, c_nu, M, Sigma)
    lo, hi = admissible_lambda(n, nu)
    report = ConcentrationReport(n=n, delta=delta, nu=nu, kappa=kappa, c_nu=c_nu, M=M,
                                 Sigma=Sigma, reps=reps)
    lams = [float(v) for v in lambda_grid]
    samples = {lam: [] for lam in lams}
    for rep in range(reps):
        stream = rng.spawn(rep)
        xs = draw_design(n, stream.spawn(0), design)
        clean = model.apply(f_dagger, xs)
        data = SampleSet(xs, clean + noise.sample(clean.shape, stream.spawn(1).generator()))
        for lam in lams:
            samples[lam].append(concentration_sample(model, f_dagger, data, grid, lam, t_pop=t_pop))
    for lam in lams:
        bounds = concentration_bounds(n, lam, nu, delta, c_kappa, c_kms)
        row = {"lambda": lam, "in_range": bool(lo * (1 - 1e-12) <= lam <= hi * (1 + 1e-12))}
        ok = True
        for q in QUANTITIES + ("psi_hs",):
            vals = np.array([getattr(s, q) for s in samples[lam]])
            quant = float(np.quantile(vals, 1.0 - delta))
            bound = bounds["psi" if q == "psi_hs" else q]
            row[f"{q}_quantile"] = quant
            row[f"{q}_bound"] = bound
            ok &= quant <= bound
        row["psi_sqrt_lam_bound"] = bounds["psi_sqrt_lam"]
        row["passed"] = bool(ok)
        report.rows.append(row)
    return report


# -- phi sums -------------------------------------------------------------

def phi(j, u: float):
    """``(u / (u + j))^u`` with the convention ``phi^0 = 1``."""
    if not 0 <= u <= 1:
        raise DomainError(f"phi needs u in [0, 1], got {u}")
    j = np.asarray(j, dtype=float)
    if np.any(j < 0):
        raise DomainError("phi needs j >= 0")
    if u == 0:
        out = np.ones_like(j)
    else:
        out = (u / (u + j)) ** u
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class PhiCheck:
    which: int
    k: int
    lhs: float
    rhs: float

    @property
    def passed(self) -> bool:
        return self.lhs <= self.rhs


def _split_constant(b, d):
    return 2.0**b * (1.0 / (1.0 - b) + 2.0 ** (d + 1) / (math.e * d))


def phi_sum_check(k: int, which: int, b: float = 0.0, d: float = 1.0, v: float | None = None) -> PhiCheck:
    """Evaluate both sides of one of the four phi-sum inequalities.

    ``which`` 1: sum_j phi_{k-j}^{1/2} j^-b
    ``which`` 2: sum_j (phi_{k-j}^{1/2})^2 j^-(b+d)
    ``which`` 3: sum_j phi_{k-j}^1 j^-(b+d)
    ``which`` 4: sum_j (phi_{k-j}^1)^v with the three-branch right side in v
    """
    if k < 2:
        raise DomainError(f"phi-sum inequalities need k >= 2, got {k}")
    j = np.arange(1, k + 1, dtype=float)
    if which in (1, 2, 3) and not 0 <= b < 1:
        raise DomainError(f"b must lie in [0, 1), got {b}")
    if which in (2, 3, 4) and not d > 0:
        raise DomainError(f"d must be positive, got {d}")
    if which == 1:
        lhs = np.sum(phi(k - j, 0.5) * j**-b)
        rhs = scipy.special.beta(0.5, 1.0 - b) * (k + 1) ** (0.5 - b)
    elif which == 2:
        lhs = np.sum(phi(k - j, 0.5) ** 2 * j ** -(b + d))
        rhs = _split_constant(b, d) * (k + 1) ** -b
    elif which == 3:
        lhs = np.sum(phi(k - j, 1.0) * j ** -(b + d))
        rhs = _split_constant(b, d) * (k + 1) ** -b
    elif which == 4:
        if v is None or not v >= 0:
            raise DomainError(f"inequality 4 needs v >= 0, got {v}")
        lhs = np.sum(phi(k - j, 1.0) ** v)
        if v < 1:
            rhs = (k + 1) ** (1.0 - v) / (1.0 - v)
        elif v == 1:
            rhs = 2.0 / (math.e * d) * (k + 1) ** d
        else:
            rhs = v / (v - 1.0)
    else:
        raise DomainError(f"which must be 1, 2, 3 or 4, got {which}")
    return PhiCheck(which=which, k=int(k), lhs=float(lhs), rhs=float(rhs))


PHI_KS = range(2, 201)
PHI_BS = (0.0, 0.25, 0.5, 0.75)
PHI_DS = (0.25, 0.5, 1.0)
PHI_VS = (0.0, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0)


def phi_sweep(ks=PHI_KS, bs=PHI_BS, ds=PHI_DS, vs=PHI_VS) -> dict:
    """Run every inequality over the grid; returns counts and any counterexamples."""
    failures, checked = [], 0
    for k in ks:
        for b in bs:
            checks = [phi_sum_check(k, 1, b=b)]
            for d in ds:
                checks += [phi_sum_check(k, 2, b=b, d=d), phi_sum_check(k, 3, b=b, d=d)]
            for c in checks:
                checked += 1
                if not c.passed:
                    failures.append({"which": c.which, "k": k, "b": b, "lhs": c.lhs, "rhs": c.rhs})
        for d in ds:
            for v in vs:
                c = phi_sum_check(k, 4, d=d, v=v)
                checked += 1
                if not c.passed:
                    failures.append({"which": 4, "k": k, "d": d, "v": v, "lhs": c.lhs, "rhs": c.rhs})
    return {"checked": checked, "failures": failures}


# -- Taylor remainder ------------------------------------------------------

@dataclass
class TaylorReport:
    c_r: float
    radius: float
    n_samples: int
    max_ratio: float
    violations: int
    ratios: np.ndarray = field(repr=False, default=None)

    @property
    def passed(self) -> bool:
        return self.violations == 0


def _remainder_terms(model, f_dagger, fs, grid):
    x = grid.nodes
    base = model.apply(f_dagger, x)
    jac = model.jacobian(f_dagger, x)
    out = []
    for f in fs:
        e = f - f_dagger
        lin = jac @ e
        rem = grid.l2_norm(model.apply(f, x) - base - lin)
        out.append((rem, float(np.linalg.norm(e)), grid.l2_norm(lin)))
    return np.array(out).reshape(-1, 3)


def calibrate_c_r(model: ForwardModel, f_dagger: ParamVector, radius: float, n_samples: int,
                  grid: QuadratureGrid, rng: RngStream, safety: float = 2.0) -> float:
    """``safety`` times the observed sup of ``2 ||S r(f)|| / (||e|| ||B e||)`` over the ball."""
    if model.is_linear:
        return 0.0
    gen = rng.generator()
    fs = [sample_ball(model, f_dagger, radius, gen) for _ in range(n_samples)]
    terms = _remainder_terms(model, f_dagger, fs, grid)
    den = terms[:, 1] * terms[:, 2]
    ok = den > 1e-300
    return float(safety * np.max(2.0 * terms[ok, 0] / den[ok])) if ok.any() else 0.0


def taylor_remainder_check(model: ForwardModel, f_dagger: ParamVector, radius: float,
                           n_samples: int, grid: QuadratureGrid, rng: RngStream,
                           c_r: float | None = None) -> TaylorReport:
    """Compare ``||S r(f)||`` with ``(C_R / 2) ||f - f_dagger|| ||B (f - f_dagger)||``.

    ``c_r`` defaults to the model constant. The ratio is lhs / rhs, with 0/0 = 0.
    """
    if n_samples < 1:
        raise DomainError("n_samples must be >= 1")
    if c_r is None:
        c_r = model.constants.c_r
    if c_r is None:
        raise DomainError("model has no C_R constant; calibrate one first")
    gen = rng.generator()
    fs = [sample_ball(model, f_dagger, radius, gen) for _ in range(n_samples)]
    terms = _remainder_terms(model, f_dagger, fs, grid)
    lhs = terms[:, 0]
    rhs = 0.5 * c_r * terms[:, 1] * terms[:, 2]
    tiny = 1e-13 * max(1.0, float(np.max(terms[:, 2], initial=0.0)))
    ratios = np.where(rhs > 0, lhs / np.where(rhs > 0, rhs, 1.0), np.where(lhs <= tiny, 0.0, np.inf))
    return TaylorReport(c_r=float(c_r), radius=float(radius), n_samples=int(n_samples),
                        max_ratio=float(np.max(ratios)), violations=int(np.sum(ratios > 1.0)),
                        ratios=ratios)
