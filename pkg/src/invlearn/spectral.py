"""
Dense symmetric linear algebra, quadrature and seeded random streams.

Every operator in the package is a small dense symmetric matrix (dim <= ~2048),
so everything here is a thin layer over LAPACK via numpy/scipy with the
validation the rest of the code relies on.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import DomainError, EigenSolverError

SYM_RTOL = 1e-12
# eigenvalues in [-NEG_TOL * lam_max, 0] are round-off and clip to zero
NEG_TOL = 1e-10


def fingerprint(m: np.ndarray) -> str:
    """Short stable identifier of an array, used in error messages."""
    arr = np.ascontiguousarray(m, dtype=float)
    digest = hashlib.sha1(arr.tobytes()).hexdigest()[:12]
    return f"{arr.shape}:{digest}"


def check_symmetric(m, name: str = "matrix") -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] == 0:
        raise DomainError(f"{name} must be a non-empty square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise DomainError(f"{name} has non-finite entries")
    gap = np.abs(m - m.T)
    if np.any(gap > SYM_RTOL * np.maximum(1.0, np.abs(m))):
        raise DomainError(f"{name} is not symmetric (max |M - M^T| = {gap.max():.3e})")
    return m


@dataclass(frozen=True)
class SpectralDecomposition:
    """Eigenpairs of a symmetric matrix, eigenvalues sorted descending."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def dim(self) -> int:
        return self.eigenvalues.shape[0]

    @property
    def lam_max(self) -> float:
        return float(self.eigenvalues[0])

    def reconstruct(self) -> np.ndarray:
        v = self.eigenvectors
        return (v * self.eigenvalues) @ v.T

    def apply(self, fn, x: np.ndarray) -> np.ndarray:
        """Apply the spectral function ``fn(eigenvalues)`` to a vector or matrix."""
        v = self.eigenvectors
        coeff = v.T @ x
        scale = fn(self.eigenvalues)
        if coeff.ndim == 1:
            return v @ (scale * coeff)
        return v @ (scale[:, None] * coeff)

    def rank(self, rtol: float = 1e-12) -> int:
        if self.lam_max <= 0:
            return 0
        return int(np.sum(self.eigenvalues > rtol * self.lam_max))


def sym_eig(m, psd: bool = True) -> SpectralDecomposition:
    """Symmetric eigendecomposition with descending eigenvalues.

    With ``psd=True`` eigenvalues below ``-1e-10 * lam_max`` raise a
    :class:`DomainError`; smaller negative values are round-off and clip to 0.
    """
    m = check_symmetric(m)
    try:
        w, v = np.linalg.eigh(0.5 * (m + m.T))
    except np.linalg.LinAlgError as exc:
        raise EigenSolverError(f"eigensolver failure on matrix {fingerprint(m)}: {exc}") from exc
    w = w[::-1].copy()
    v = v[:, ::-1].copy()
    if psd:
        top = max(w[0], 0.0)
        if w[-1] < -NEG_TOL * top:
            raise DomainError(
                f"matrix {fingerprint(m)} is indefinite: eigenvalue {w[-1]:.3e} "
                f"below -{NEG_TOL:g} * lam_max"
            )
        w = np.maximum(w, 0.0)
    return SpectralDecomposition(w, v)


def frac_power(d: SpectralDecomposition, r: float) -> np.ndarray:
    """Matrix power ``V diag(max(lam, 0)^r) V^T`` for ``r >= 0``."""
    if not r >= 0:
        raise DomainError(f"fractional power requires r >= 0, got {r}")
    lam = np.maximum(d.eigenvalues, 0.0)
    if r == 0:
        scale = np.ones_like(lam)
    else:
        scale = lam**r
    v = d.eigenvectors
    out = (v * scale) @ v.T
    return 0.5 * (out + out.T)


def spd_solve(m, shift: float, rhs) -> np.ndarray:
    """Solve ``(M + shift I) x = rhs`` for PSD ``M`` via Cholesky."""
    if not shift > 0:
        raise DomainError(f"shift must be positive, got {shift}")
    m = check_symmetric(m)
    rhs = np.asarray(rhs, dtype=float)
    a = m + shift * np.eye(m.shape[0])
    try:
        factor = scipy.linalg.cho_factor(a, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise DomainError(f"matrix {fingerprint(m)} + {shift:g} I is not positive definite") from exc
    return scipy.linalg.cho_solve(factor, rhs, check_finite=False)


@dataclass(frozen=True)
class QuadratureGrid:
    """Probability quadrature on [0, 1] for the design measure."""

    nodes: np.ndarray
    weights: np.ndarray
    rule: str = "midpoint"

    def __post_init__(self):
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise DomainError("quadrature weights must sum to one")
        if np.any(self.weights < 0):
            raise DomainError("quadrature weights must be nonnegative")
        if np.any(np.diff(self.nodes) <= 0):
            raise DomainError("quadrature nodes must be strictly increasing")

    def __len__(self):
        return self.nodes.shape[0]

    def integrate(self, values: np.ndarray) -> float:
        return float(np.tensordot(self.weights, values, axes=(0, 0)))

    def l2_norm(self, values: np.ndarray) -> float:
        """L2(nu) norm of samples at the nodes, shape (q,) or (q, m)."""
        v = np.asarray(values, dtype=float).reshape(len(self), -1)
        return float(np.sqrt(np.sum(self.weights[:, None] * v**2)))


def quadrature_grid(q: int = 512, rule: str = "midpoint", design: tuple | None = None) -> QuadratureGrid:
    """Composite quadrature on [0, 1].

    ``design=("beta", a, b)`` reweights the rule by the Beta(a, b) density so
    that the weights integrate against that design measure instead of the
    uniform one.
    """
    if q < 1:
        raise DomainError(f"quadrature needs q >= 1 nodes, got {q}")
    if rule == "midpoint":
        nodes = (np.arange(q) + 0.5) / q
        weights = np.full(q, 1.0 / q)
    elif rule == "trapezoid":
        if q < 2:
            raise DomainError("trapezoid rule needs q >= 2 nodes")
        nodes = np.linspace(0.0, 1.0, q)
        weights = np.full(q, 1.0 / (q - 1))
        weights[[0, -1]] *= 0.5
    else:
        raise DomainError(f"unknown quadrature rule {rule!r}")
    if design is not None and design[0] == "beta":
        from scipy.stats import beta as beta_dist

        dens = beta_dist(design[1], design[2]).pdf(nodes)
        weights = weights * dens
    weights = weights / weights.sum()
    return QuadratureGrid(nodes, weights, rule)


@dataclass(frozen=True)
class RngStream:
    """A named, reproducible random stream.

    Identical ``(seed, stream_id)`` pairs give bit-identical draws; child
    streams are addressed by appending integers to ``stream_id``.
    """

    seed: int
    stream_id: tuple = field(default=())

    def __post_init__(self):
        sid = self.stream_id
        if isinstance(sid, (int, np.integer)):
            sid = (int(sid),)
        object.__setattr__(self, "stream_id", tuple(int(s) for s in sid))
        object.__setattr__(self, "seed", int(self.seed) % 2**64)

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.stream_id)
        return np.random.Generator(np.random.PCG64(ss))

    def spawn(self, *ids: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id + tuple(int(i) for i in ids))

    def __str__(self):
        return f"{self.seed}/{'.'.join(map(str, self.stream_id)) or '-'}"
