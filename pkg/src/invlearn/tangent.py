"""
Tangent-kernel operators.

With rows ``b_x = S_x A'(f_dagger)`` (coefficient coordinates) the tangent
kernel is ``G(x, x') = b_x b_x'^T``, the empirical operator is
``T_hat = (1/n) sum_j b_{x_j}^T b_{x_j}`` and the population operator is the
same sum under the design measure, evaluated by quadrature.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, InsufficientSpectrumError
from .models import ForwardModel, ParamVector
from .spectral import QuadratureGrid, SpectralDecomposition, frac_power, sym_eig


@dataclass(frozen=True)
class TangentOperators:
    t_hat: np.ndarray
    gram: np.ndarray
    decomp_t: SpectralDecomposition
    t_pop: np.ndarray | None = None
    n: int = 0

    @property
    def t(self) -> np.ndarray:
        """The operator whose decomposition is carried (population if present)."""
        return self.t_pop if self.t_pop is not None else self.t_hat


@dataclass(frozen=True)
class DecayFit:
    nu_hat: float
    c_nu_hat: float
    fit_window: tuple
    out_of_range: bool = False


def _rows(model: ForwardModel, f_dagger: ParamVector, points) -> np.ndarray:
    jac = model.jacobian(model.check_domain(f_dagger), points)
    return jac.reshape(-1, model.p)


def build_tangent(model: ForwardModel, f_dagger: ParamVector, points,
                  t_pop: np.ndarray | None = None) -> TangentOperators:
    """Gram matrix and empirical operator of the tangent kernel at ``f_dagger``.

    The carried decomposition is that of ``t_pop`` when supplied, otherwise of
    ``t_hat``.
    """
    points = np.atleast_1d(np.asarray(points, dtype=float))
    n = points.shape[0]
    rows = _rows(model, f_dagger, points)
    gram = rows @ rows.T
    t_hat = rows.T @ rows / n
    gram = 0.5 * (gram + gram.T)
    t_hat = 0.5 * (t_hat + t_hat.T)
    decomp = sym_eig(t_pop if t_pop is not None else t_hat)
    return TangentOperators(t_hat=t_hat, gram=gram, decomp_t=decomp, t_pop=t_pop, n=n)


def population_T(model: ForwardModel, f_dagger: ParamVector, grid: QuadratureGrid) -> np.ndarray:
    """``T = sum_q w_q b_{x_q}^T b_{x_q}`` over the quadrature nodes."""
    jac = model.jacobian(model.check_domain(f_dagger), grid.nodes)
    rows = jac.reshape(len(grid), -1, model.p)
    t = np.einsum("q,qmi,qmj->ij", grid.weights, rows, rows)
    return 0.5 * (t + t.T)


def effective_dimension(d: SpectralDecomposition | np.ndarray, lam: float) -> float:
    """``N(lam) = sum_j s_j / (s_j + lam)`` over the (clipped) spectrum."""
    if not lam > 0:
        raise DomainError(f"effective dimension needs lambda > 0, got {lam}")
    s = d.eigenvalues if isinstance(d, SpectralDecomposition) else np.asarray(d, dtype=float)
    s = np.maximum(s, 0.0)
    return float(np.sum(s / (s + lam)))


def default_window(d: SpectralDecomposition) -> tuple:
    hi = min(40, d.rank() // 2)
    return (4, hi)


def fit_decay(d: SpectralDecomposition | np.ndarray, window: tuple | None = None) -> DecayFit:
    """Least-squares fit of ``log s_j = log C - (1/nu) log j`` on a 1-based index window."""
    s = d.eigenvalues if isinstance(d, SpectralDecomposition) else np.sort(np.asarray(d, dtype=float))[::-1]
    if window is None:
        hi = min(40, int(np.sum(s > 1e-12 * max(s[0], 0))) // 2)
        window = (4, hi)
    lo, hi = int(window[0]), int(window[1])
    lo = max(lo, 1)
    hi = min(hi, s.shape[0])
    j = np.arange(lo, hi + 1)
    vals = s[lo - 1:hi]
    keep = vals > 1e-14
    if keep.sum() < 4:
        raise InsufficientSpectrumError(
            f"insufficient spectrum: {int(keep.sum())} usable eigenvalues in window {window}"
        )
    slope, intercept = np.polyfit(np.log(j[keep]), np.log(vals[keep]), 1)
    nu_hat = -1.0 / slope if slope < 0 else float("inf")
    # N(lam) <= C_nu^2 lam^-nu is not the same constant as the eigenvalue prefactor;
    # report the fitted prefactor of the eigenvalue law
    c_nu = float(np.exp(intercept))
    return DecayFit(nu_hat=float(nu_hat), c_nu_hat=c_nu, fit_window=(lo, hi),
                    out_of_range=not 0 < nu_hat < 1)


def apply_T_power(t_ops: TangentOperators | SpectralDecomposition, r: float, g: ParamVector) -> ParamVector:
    decomp = getattr(t_ops, "decomp_t", t_ops)
    return frac_power(decomp, r) @ np.asarray(g, dtype=float)


def decay_constant(d: SpectralDecomposition | np.ndarray, nu: float,
                   lam_range: tuple = (1e-10, 1e4), q: int = 4001) -> float:
    """Smallest ``C_nu`` with ``N(lam) <= C_nu^2 lam^-nu`` over a dense log grid."""
    s = d.eigenvalues if isinstance(d, SpectralDecomposition) else np.asarray(d, dtype=float)
    s = np.maximum(s, 0.0)
    lams = np.logspace(np.log10(lam_range[0]), np.log10(lam_range[1]), q)
    n_eff = np.sum(s[None, :] / (s[None, :] + lams[:, None]), axis=1)
    i = int(np.argmax(n_eff * lams**nu))
    # refine around the grid maximiser
    lo, hi = lams[max(i - 1, 0)], lams[min(i + 1, q - 1)]
    fine = np.geomspace(lo, hi, 201)
    vals = np.sum(s[None, :] / (s[None, :] + fine[:, None]), axis=1) * fine**nu
    return float(np.sqrt(max(vals.max(), (n_eff * lams**nu)[i])))
