"""
Forward operators on a piecewise-constant discretization of H1 = L2[0, 1].

A parameter ``f`` is a coefficient vector in the orthonormal basis
``e_k = 1_{cell k} / sqrt(mesh)``, so the H1 inner product is the plain dot
product and the function value on cell ``k`` is ``f[k] / sqrt(mesh)``.

Three models are provided:

* :class:`LinearIntegral` -- ``A f(x) = int k(x, s) f(s) ds``
* :class:`PointwiseNonlinear` -- ``A f(x) = int k(x, s) phi(f(s)) ds`` with
  ``phi(v) = v + beta * tanh(v)``
* :class:`DiffusionPDE` -- the parameter-to-solution map of
  ``-(a u')' = load`` on (0, 1), ``u(0) = u(1) = 0``

Outputs live in R^m; integral models realise channel ``i`` by evaluating the
kernel at the shifted point ``(x + i/m) mod 1``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np
import scipy.linalg
from scipy.special import erf

from .errors import ContractError, DegenerateSamplingError, DomainError
from .spectral import QuadratureGrid, RngStream, quadrature_grid

ParamVector = np.ndarray

KERNELS = ("min", "gaussian", "step")


@dataclass(frozen=True)
class OperatorConstants:
    """Structural constants of a forward model.

    ``alpha``, ``c_r`` and ``c_r_tilde`` are ``None`` until estimated; the
    linear model knows them exactly (0, 0 and 1).
    """

    kappa0: float
    lip: float
    ball_radius: float
    alpha: float | None = None
    c_r: float | None = None
    c_r_tilde: float | None = None

    def __post_init__(self):
        if not self.kappa0 > 0:
            raise DomainError(f"kappa0 must be positive, got {self.kappa0}")
        if not self.lip > 0:
            raise DomainError(f"lip must be positive, got {self.lip}")
        if not self.ball_radius > 0:
            raise DomainError(f"ball radius must be positive, got {self.ball_radius}")
        if self.alpha is not None and not 0 <= self.alpha < 0.5:
            raise DomainError(f"tangential cone constant must lie in [0, 1/2), got {self.alpha}")

    @property
    def kappa1(self) -> float:
        return self.kappa0 * self.lip

    @property
    def step_cap(self) -> float:
        """Largest admissible constant step size (exclusive)."""
        return 1.0 / self.kappa1**2


def _as_points(points) -> np.ndarray:
    x = np.atleast_1d(np.asarray(points, dtype=float))
    if x.ndim != 1:
        raise ContractError(f"design points must be a 1-d array, got shape {x.shape}")
    if np.any((x < 0) | (x > 1)) or not np.all(np.isfinite(x)):
        raise DomainError("design points must lie in [0, 1]")
    return x


def kernel_cell_integrals(name: str, x: np.ndarray, edges: np.ndarray, scale: float = 1.0,
                          sigma: float = 0.1) -> np.ndarray:
    """Exact integrals ``int_{cell k} k(x, s) ds`` for every x, shape (n, p)."""
    x = x[:, None]
    a = edges[None, :-1]
    b = edges[None, 1:]
    if name == "step":
        out = np.clip(x - a, 0.0, b - a)
    elif name == "min":
        def prim(t):
            # int_0^t min(x, s) ds
            return np.where(t <= x, 0.5 * t**2, 0.5 * x**2 + x * (t - x))
        out = prim(b) - prim(a)
    elif name == "gaussian":
        c = sigma * np.sqrt(2.0)
        out = sigma * np.sqrt(np.pi / 2.0) * (erf((b - x) / c) - erf((a - x) / c))
    else:
        raise DomainError(f"unknown kernel {name!r}; expected one of {KERNELS}")
    return scale * out


class ForwardModel:
    """Base class: a nonlinear map from coefficient vectors to R^m-valued functions."""

    kind: str = "abstract"
    is_linear = False

    def __init__(self, p: int, m: int = 1, ball_radius: float = 1.0):
        if p < 2:
            raise DomainError(f"parameter dimension p must be >= 2, got {p}")
        if m < 1:
            raise DomainError(f"output dimension m must be >= 1, got {m}")
        self.p = int(p)
        self.m = int(m)
        self.ball_radius = float(ball_radius)
        self.constants: OperatorConstants | None = None

    # -- coordinates -------------------------------------------------------
    @property
    def mesh(self) -> float:
        raise NotImplementedError

    @property
    def nodes(self) -> np.ndarray:
        raise NotImplementedError

    def values(self, f: ParamVector) -> np.ndarray:
        """Function values on the parameter grid."""
        return np.asarray(f, dtype=float) / np.sqrt(self.mesh)

    def coeffs(self, values) -> ParamVector:
        return np.asarray(values, dtype=float) * np.sqrt(self.mesh)

    def function(self, fn) -> ParamVector:
        """Coefficients of a callable sampled on the parameter grid."""
        return self.coeffs(fn(self.nodes))

    # -- domain ------------------------------------------------------------
    def domain_violation(self, f: ParamVector) -> str | None:
        f = np.asarray(f)
        if f.shape != (self.p,):
            raise ContractError(f"parameter vector must have shape ({self.p},), got {f.shape}")
        if not np.all(np.isfinite(f)):
            return "non-finite coefficients"
        return None

    def in_domain(self, f: ParamVector) -> bool:
        return self.domain_violation(f) is None

    def check_domain(self, f: ParamVector) -> ParamVector:
        msg = self.domain_violation(f)
        if msg is not None:
            raise DomainError(f"domain violation ({self.kind}): {msg}")
        return np.asarray(f, dtype=float)

    def project(self, f: ParamVector) -> ParamVector:
        return np.asarray(f, dtype=float)

    # -- operator interface ----------------------------------------------
    def apply(self, f: ParamVector, points) -> np.ndarray:
        """``[A(f)](x_j)`` for every point, shape (n, m)."""
        raise NotImplementedError

    def jacobian(self, f: ParamVector, points) -> np.ndarray:
        """Rows ``b_x = S_x A'(f)`` stacked as an (n, m, p) array."""
        raise NotImplementedError

    def jac_apply(self, f: ParamVector, h: ParamVector, points) -> np.ndarray:
        return self.jacobian(f, points) @ np.asarray(h, dtype=float)

    def jac_adjoint_apply(self, f: ParamVector, points, weights, residuals) -> ParamVector:
        """``sum_j w_j (S_{x_j} A'(f))^* r_j`` in coefficient coordinates."""
        x, w, r = self._check_adjoint_args(points, weights, residuals)
        jac = self.jacobian(f, x)
        return np.einsum("nmp,nm->p", jac, w[:, None] * r)

    def _check_adjoint_args(self, points, weights, residuals):
        x = _as_points(points)
        w = np.asarray(weights, dtype=float).reshape(-1)
        r = np.asarray(residuals, dtype=float)
        if r.ndim == 1 and self.m == 1:
            r = r[:, None]
        if not (x.shape[0] == w.shape[0] == r.shape[0]) or r.shape[1:] != (self.m,):
            raise ContractError(
                f"length mismatch: {x.shape[0]} points, {w.shape[0]} weights, "
                f"residuals of shape {r.shape}"
            )
        if np.any(w < 0):
            raise ContractError("weights must be nonnegative")
        return x, w, r

    # -- bookkeeping -------------------------------------------------------
    def default_truth(self) -> ParamVector:
        raise NotImplementedError

    def config(self) -> dict:
        raise NotImplementedError

    def fingerprint(self) -> str:
        blob = json.dumps(self.config(), sort_keys=True).encode()
        return f"{self.kind}:{hashlib.sha1(blob).hexdigest()[:10]}"

    def sup_row_norm(self, f: ParamVector, q: int = 2049) -> float:
        """``sup_x ||S_x A'(f)||_HS`` over a dense grid of evaluation points."""
        x = np.linspace(0.0, 1.0, q)
        jac = self.jacobian(f, x)
        return float(np.sqrt(np.max(np.sum(jac**2, axis=(1, 2)))))


class _IntegralModel(ForwardModel):
    def __init__(self, p: int, kernel: str = "step", scale: float = 1.0, sigma: float = 0.1,
                 m: int = 1, ball_radius: float = 1.0):
        super().__init__(p, m, ball_radius)
        if kernel not in KERNELS:
            raise DomainError(f"unknown kernel {kernel!r}; expected one of {KERNELS}")
        if not scale > 0 or not sigma > 0:
            raise DomainError("kernel scale and sigma must be positive")
        self.kernel = kernel
        self.scale = float(scale)
        self.sigma = float(sigma)
        self.edges = np.linspace(0.0, 1.0, self.p + 1)

    @property
    def mesh(self) -> float:
        return 1.0 / self.p

    @property
    def nodes(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    def cell_weights(self, points) -> np.ndarray:
        """Kernel cell integrals per channel, shape (n, m, p)."""
        x = _as_points(points)
        chans = []
        for i in range(self.m):
            xi = np.mod(x + i / self.m, 1.0) if i else x
            chans.append(kernel_cell_integrals(self.kernel, xi, self.edges, self.scale, self.sigma))
        return np.stack(chans, axis=1)

    def kernel_bound(self) -> float:
        x = np.linspace(0.0, 1.0, 2049)
        w = self.cell_weights(x) / np.sqrt(self.mesh)
        return float(np.sqrt(np.max(np.sum(w**2, axis=(1, 2)))))

    def default_truth(self) -> ParamVector:
        return self.function(lambda s: 0.5 * np.sin(np.pi * s))

    def _base_config(self) -> dict:
        return {"kind": self.kind, "p": self.p, "m": self.m, "kernel": self.kernel,
                "scale": self.scale, "sigma": self.sigma, "ball_radius": self.ball_radius}


class LinearIntegral(_IntegralModel):
    kind = "linear-integral"
    is_linear = True

    def __init__(self, p: int, kernel: str = "step", scale: float = 1.0, sigma: float = 0.1,
                 m: int = 1, ball_radius: float = 1.0):
        super().__init__(p, kernel, scale, sigma, m, ball_radius)
        self.constants = OperatorConstants(kappa0=self.kernel_bound(), lip=1.0,
                                           ball_radius=self.ball_radius,
                                           alpha=0.0, c_r=0.0, c_r_tilde=1.0)

    def apply(self, f, points):
        return self.jacobian(f, points) @ self.check_domain(f)

    def jacobian(self, f, points):
        return self.cell_weights(points) / np.sqrt(self.mesh)

    def config(self):
        return self._base_config()


class PointwiseNonlinear(_IntegralModel):
    kind = "pointwise-nonlinear"

    def __init__(self, p: int, kernel: str = "step", scale: float = 1.0, sigma: float = 0.1,
                 beta: float = 0.25, m: int = 1, ball_radius: float = 1.0):
        super().__init__(p, kernel, scale, sigma, m, ball_radius)
        if beta < 0:
            raise DomainError(f"beta must be nonnegative, got {beta}")
        self.beta = float(beta)
        # |phi'| <= 1 + beta globally
        self.constants = OperatorConstants(kappa0=self.kernel_bound(), lip=1.0 + self.beta,
                                           ball_radius=self.ball_radius)

    def phi(self, v):
        return v + self.beta * np.tanh(v)

    def dphi(self, v):
        return 1.0 + self.beta / np.cosh(v) ** 2

    def apply(self, f, points):
        v = self.values(self.check_domain(f))
        return self.cell_weights(points) @ self.phi(v)

    def jacobian(self, f, points):
        v = self.values(self.check_domain(f))
        return self.cell_weights(points) * (self.dphi(v) / np.sqrt(self.mesh))

    def config(self):
        return {**self._base_config(), "beta": self.beta}


def _faces(a: np.ndarray) -> np.ndarray:
    """Coefficient on the p + 1 cell faces from nodal values."""
    af = np.empty(a.shape[0] + 1)
    af[1:-1] = 0.5 * (a[:-1] + a[1:])
    af[0] = a[0]
    af[-1] = a[-1]
    return af


def _stiffness_banded(af: np.ndarray, h: float) -> np.ndarray:
    """Upper banded storage of the symmetric tridiagonal stiffness matrix."""
    p = af.shape[0] - 1
    ab = np.zeros((2, p))
    ab[1] = (af[:-1] + af[1:]) / h**2
    ab[0, 1:] = -af[1:-1] / h**2
    return ab


def pde_solve(a, load, a_min: float = 1e-12) -> np.ndarray:
    """Solve ``-(a u')' = load``, ``u(0) = u(1) = 0`` by finite differences.

    ``a`` and ``load`` are nodal values on the p interior nodes ``i / (p + 1)``;
    the face coefficients average neighbouring nodal values. Returns ``u`` at
    the interior nodes.
    """
    a = np.asarray(a, dtype=float)
    load = np.asarray(load, dtype=float)
    if a.shape != load.shape or a.ndim != 1:
        raise ContractError(f"coefficient and load must be matching 1-d arrays, got {a.shape}, {load.shape}")
    if np.any(a < a_min) or not np.all(np.isfinite(a)):
        raise DomainError(f"domain violation: diffusion coefficient below a_min={a_min:g} "
                          f"(min value {a.min():.4g})")
    h = 1.0 / (a.shape[0] + 1)
    return scipy.linalg.solveh_banded(_stiffness_banded(_faces(a), h), load, check_finite=False)


LOADS = {
    "one": lambda s: np.ones_like(s),
    "sine": lambda s: np.pi**2 * np.sin(np.pi * s),
}


class DiffusionPDE(ForwardModel):
    """Parameter-to-solution map of the 1-d diffusion equation.

    The discrete adjoint (transpose of the assembled solve) is used for the
    Jacobian adjoint so that the adjoint identity holds to round-off.
    """

    kind = "diffusion-pde"

    def __init__(self, p: int, a_min: float = 0.5, load: str = "one", m: int = 1,
                 ball_radius: float = 0.1, reference: ParamVector | None = None,
                 lip_margin: float = 1.5):
        super().__init__(p, m, ball_radius)
        if m != 1:
            raise DomainError("diffusion-pde supports scalar output only (m = 1)")
        if not a_min > 0:
            raise DomainError(f"a_min must be positive, got {a_min}")
        if load not in LOADS:
            raise DomainError(f"unknown load {load!r}; expected one of {sorted(LOADS)}")
        self.a_min = float(a_min)
        self.load_name = load
        self.load = LOADS[load](self.nodes)
        self.lip_margin = float(lip_margin)
        ref = self.default_truth() if reference is None else np.asarray(reference, dtype=float)
        # point evaluation is normalised to kappa0 = 1; lip bounds the rows of A'
        self.constants = OperatorConstants(kappa0=1.0,
                                           lip=self.lip_margin * self.sup_row_norm(ref),
                                           ball_radius=self.ball_radius)

    @property
    def mesh(self) -> float:
        return 1.0 / (self.p + 1)

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(1, self.p + 1) * self.mesh

    def default_truth(self) -> ParamVector:
        # rough L2 perturbations of size d change a by O(d) pointwise; a level of 4 keeps
        # the tangential cone constant below 1/2 at d = 0.1
        return self.function(lambda s: 4.0 + np.sin(np.pi * s))

    def domain_violation(self, f):
        msg = super().domain_violation(f)
        if msg is not None:
            return msg
        a = self.values(f)
        if np.any(a < self.a_min):
            return f"coefficient a(s) >= a_min={self.a_min:g} violated (min {a.min():.4g})"
        return None

    def project(self, f):
        return self.coeffs(np.maximum(self.values(f), self.a_min))

    def _solve(self, f):
        a = self.values(self.check_domain(f))
        af = _faces(a)
        ab = _stiffness_banded(af, self.mesh)
        u = scipy.linalg.solveh_banded(ab, self.load, check_finite=False)
        return u, ab

    def _interp(self, points):
        """Indices and weights of linear interpolation including boundary nodes."""
        x = _as_points(points)
        pos = x / self.mesh
        idx = np.clip(np.floor(pos).astype(int), 0, self.p)
        t = pos - idx
        return idx, t

    def _sensitivity(self, u: np.ndarray) -> np.ndarray:
        """Matrix M with ``M da = dK[da] u`` in nodal value coordinates."""
        p, h = self.p, self.mesh
        ue = np.concatenate(([0.0], u, [0.0]))
        dface = np.diff(ue)
        mf = np.zeros((p, p + 1))
        k = np.arange(p)
        mf[k, k] = dface[:-1] / h**2
        mf[k, k + 1] = -dface[1:] / h**2
        # face averaging map, (p + 1) x p
        pmap = np.zeros((p + 1, p))
        pmap[0, 0] = 1.0
        pmap[-1, -1] = 1.0
        j = np.arange(1, p)
        pmap[j, j - 1] = 0.5
        pmap[j, j] = 0.5
        return mf @ pmap

    def _extended_eval(self, vals_ext: np.ndarray, points) -> np.ndarray:
        idx, t = self._interp(points)
        return (1 - t)[:, None] * vals_ext[idx] + t[:, None] * vals_ext[idx + 1]

    def solution(self, f) -> np.ndarray:
        return self._solve(f)[0]

    def apply(self, f, points):
        u, _ = self._solve(f)
        ue = np.concatenate(([0.0], u, [0.0]))[:, None]
        return self._extended_eval(ue, points)

    def jacobian(self, f, points):
        u, ab = self._solve(f)
        du = -scipy.linalg.solveh_banded(ab, self._sensitivity(u), check_finite=False)
        du /= np.sqrt(self.mesh)
        ext = np.vstack([np.zeros(self.p), du, np.zeros(self.p)])
        return self._extended_eval(ext, points)[:, None, :]

    def jac_apply(self, f, h, points):
        u, ab = self._solve(f)
        h = np.asarray(h, dtype=float)
        du = -scipy.linalg.solveh_banded(ab, self._sensitivity(u) @ (h / np.sqrt(self.mesh)),
                                         check_finite=False)
        ue = np.concatenate(([0.0], du, [0.0]))[:, None]
        return self._extended_eval(ue, points)

    def jac_adjoint_apply(self, f, points, weights, residuals):
        x, w, r = self._check_adjoint_args(points, weights, residuals)
        u, ab = self._solve(f)
        idx, t = self._interp(x)
        wr = w * r[:, 0]
        # transpose of interpolation onto extended nodes, then drop boundary nodes
        g = np.zeros(self.p + 2)
        np.add.at(g, idx, (1 - t) * wr)
        np.add.at(g, idx + 1, t * wr)
        lam = scipy.linalg.solveh_banded(ab, g[1:-1], check_finite=False)
        return -(self._sensitivity(u).T @ lam) / np.sqrt(self.mesh)

    def config(self):
        return {"kind": self.kind, "p": self.p, "m": self.m, "a_min": self.a_min,
                "load": self.load_name, "ball_radius": self.ball_radius,
                "lip_margin": self.lip_margin}


def build_model(kind: str, p: int = 64, m: int = 1, kernel: str = "step", scale: float = 1.0,
                sigma: float = 0.1, beta: float = 0.25, a_min: float = 0.5, load: str = "one",
                ball_radius: float = 1.0, reference=None) -> ForwardModel:
    if kind == "linear-integral":
        return LinearIntegral(p, kernel, scale, sigma, m, ball_radius)
    if kind == "pointwise-nonlinear":
        return PointwiseNonlinear(p, kernel, scale, sigma, beta, m, ball_radius)
    if kind == "diffusion-pde":
        return DiffusionPDE(p, a_min, load, m, ball_radius, reference)
    raise DomainError(f"unknown model kind {kind!r}")


def sample_ball(model: ForwardModel, center: ParamVector, radius: float,
                gen: np.random.Generator, max_tries: int = 100) -> ParamVector:
    """Uniform draw from the ``radius``-ball around ``center`` inside the domain."""
    for _ in range(max_tries):
        z = gen.standard_normal(model.p)
        z *= radius * gen.random() ** (1.0 / model.p) / np.linalg.norm(z)
        f = center + z
        if model.in_domain(f):
            return f
    raise DegenerateSamplingError(f"no in-domain sample in the {radius:g}-ball after {max_tries} tries")


def estimate_tangential_cone(model: ForwardModel, f_dagger: ParamVector, radius: float,
                             n_pairs: int, rng: RngStream, grid: QuadratureGrid | None = None,
                             return_pairs: bool = False):
    """Empirical tangential-cone constant over random pairs in the ball.

    Returns ``max ||A(f) - A(g) - A'(g)(f - g)|| / ||A(f) - A(g)||`` with
    L2(nu) norms by quadrature; pairs with a denominator below 1e-14 are
    skipped.
    """
    if n_pairs < 1:
        raise DomainError("n_pairs must be >= 1")
    grid = grid or quadrature_grid()
    gen = rng.generator()
    if model.is_linear:
        # the Taylor remainder of a linear map vanishes identically
        pairs = [(sample_ball(model, f_dagger, radius, gen), sample_ball(model, f_dagger, radius, gen))
                 for _ in range(n_pairs)]
        return (0.0, pairs) if return_pairs else 0.0
    x = grid.nodes
    ratios, pairs = [], []
    for _ in range(n_pairs):
        f = sample_ball(model, f_dagger, radius, gen)
        g = sample_ball(model, f_dagger, radius, gen)
        diff = model.apply(f, x) - model.apply(g, x)
        lin = model.jac_apply(g, f - g, x)
        den = grid.l2_norm(diff)
        if den < 1e-14:
            continue
        ratios.append(grid.l2_norm(diff - lin) / den)
        pairs.append((f, g))
    if not ratios:
        raise DegenerateSamplingError("degenerate sampling: every pair had ||A(f) - A(g)|| < 1e-14")
    alpha = float(max(ratios))
    if return_pairs:
        return alpha, pairs
    return alpha


def model_summary(model: ForwardModel) -> dict:
    return {**model.config(), "constants": asdict(model.constants)}
