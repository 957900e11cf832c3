"""
Random-design data: design draws, bounded noise, source-condition truths and
a Monte Carlo check of the Bernstein moment condition.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DomainError, SourceConstructionError
from .models import ForwardModel, ParamVector
from .spectral import QuadratureGrid, RngStream, SpectralDecomposition, frac_power, sym_eig
from .tangent import population_T

NOISE_KINDS = ("none", "uniform-bounded", "truncated-gaussian")
TRUNCATION = 4.0


@dataclass(frozen=True)
class SampleSet:
    xs: np.ndarray
    ys: np.ndarray
    seed: str = ""
    model: str = ""

    def __post_init__(self):
        xs = np.asarray(self.xs, dtype=float)
        ys = np.asarray(self.ys, dtype=float)
        if ys.ndim == 1:
            ys = ys[:, None]
        if xs.ndim != 1 or xs.shape[0] != ys.shape[0]:
            raise ContractError(f"xs and ys lengths differ: {xs.shape} vs {ys.shape}")
        if np.any((xs < 0) | (xs > 1)):
            raise DomainError("design points must lie in [0, 1]")
        if not np.all(np.isfinite(ys)):
            raise DomainError("outputs must be finite")
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)

    @property
    def n(self) -> int:
        return self.xs.shape[0]

    @property
    def m(self) -> int:
        return self.ys.shape[1]

    def to_csv(self, path) -> Path:
        path = Path(path)
        header = ",".join(["x"] + [f"y_{i + 1}" for i in range(self.m)])
        with path.open("w", encoding="utf-8") as fh:
            fh.write(f"# seed={self.seed} model={self.model}\n")
            fh.write(header + "\n")
            for x, y in zip(self.xs, self.ys):
                fh.write(",".join(repr(float(v)) for v in (x, *y)) + "\n")
        return path

    @classmethod
    def from_csv(cls, path) -> "SampleSet":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        meta = {}
        if lines and lines[0].startswith("#"):
            for tok in lines[0][1:].split():
                k, _, v = tok.partition("=")
                meta[k] = v
            lines = lines[1:]
        data = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:] if ln.strip()])
        data = data.reshape(-1, len(lines[0].split(",")))
        return cls(data[:, 0], data[:, 1:], seed=meta.get("seed", ""), model=meta.get("model", ""))


@dataclass(frozen=True)
class NoiseModel:
    """Centered additive noise.

    ``uniform-bounded``: uniform on [-scale, scale] per component.
    ``truncated-gaussian``: N(0, scale^2) truncated at 4 * scale.
    """

    kind: str = "uniform-bounded"
    scale: float = 0.0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise DomainError(f"unknown noise kind {self.kind!r}; expected one of {NOISE_KINDS}")
        if not self.scale >= 0:
            raise DomainError(f"noise scale must be nonnegative, got {self.scale}")

    @property
    def bound(self) -> float:
        if self.kind == "none":
            return 0.0
        if self.kind == "uniform-bounded":
            return self.scale
        return TRUNCATION * self.scale

    def sample(self, shape, gen: np.random.Generator) -> np.ndarray:
        if self.kind == "none" or self.scale == 0:
            return np.zeros(shape)
        if self.kind == "uniform-bounded":
            return gen.uniform(-self.scale, self.scale, size=shape)
        out = gen.standard_normal(size=shape)
        bad = np.abs(out) > TRUNCATION
        while np.any(bad):
            out[bad] = gen.standard_normal(size=int(bad.sum()))
            bad = np.abs(out) > TRUNCATION
        return self.scale * out

    def bernstein_constants(self, signal_sup: float) -> tuple[float, float]:
        """``M = max(bound, sup |A f_dagger|)`` and ``Sigma = 2 M``."""
        big_m = max(self.bound, float(signal_sup))
        return big_m, 2.0 * big_m


@dataclass(frozen=True)
class TruthSpec:
    f_dagger: np.ndarray
    f1: np.ndarray
    r: float
    g: np.ndarray
    D: float
    decomp: SpectralDecomposition | None = field(default=None, repr=False)

    def __post_init__(self):
        if np.linalg.norm(self.g) > self.D * (1 + 1e-12):
            raise DomainError("source element exceeds its norm bound D")


def draw_design(n: int, rng: RngStream | np.random.Generator, design: tuple | None = None) -> np.ndarray:
    """``n`` i.i.d. design points; uniform on [0, 1] unless ``design=("beta", a, b)``."""
    if n < 1:
        raise ContractError(f"need n >= 1 design points, got {n}")
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    if design is not None and design[0] == "beta":
        return gen.beta(design[1], design[2], size=n)
    return gen.random(n)


def powerlaw_direction(decomp: SpectralDecomposition, decay: float = 0.5) -> np.ndarray:
    """Direction with eigen-coefficients ``j^-decay`` in the basis of ``decomp``.

    Eigenvector signs are fixed so the largest-magnitude entry is positive.
    """
    v = decomp.eigenvectors
    idx = np.argmax(np.abs(v), axis=0)
    signs = np.sign(v[idx, np.arange(v.shape[1])])
    signs[signs == 0] = 1.0
    j = np.arange(1, v.shape[1] + 1, dtype=float)
    return (v * signs) @ j**-decay


def make_truth(model: ForwardModel, f_dagger: ParamVector, r: float, g_direction,
               D: float, grid: QuadratureGrid, t_pop: np.ndarray | None = None) -> TruthSpec:
    """Impose ``f_dagger - f1 = T^r g`` with ``||g|| = D`` by choosing ``f1``.

    ``g_direction`` may be an array or ``("powerlaw", decay)``, resolved in the
    eigenbasis of the population operator.
    """
    f_dagger = model.check_domain(f_dagger)
    if not r >= 0:
        raise DomainError(f"smoothness r must be nonnegative, got {r}")
    if not D > 0:
        raise DomainError(f"source norm D must be positive, got {D}")
    t = population_T(model, f_dagger, grid) if t_pop is None else t_pop
    decomp = sym_eig(t)
    if isinstance(g_direction, tuple) and g_direction[0] == "powerlaw":
        g_direction = powerlaw_direction(decomp, g_direction[1])
    g_direction = np.asarray(g_direction, dtype=float)
    norm = np.linalg.norm(g_direction)
    if not norm > 0:
        raise DomainError("source direction must be nonzero")
    g = D * g_direction / norm
    f1 = f_dagger - frac_power(decomp, r) @ g
    if not model.in_domain(f1):
        raise SourceConstructionError(
            f"source construction infeasible: reduce D ({model.domain_violation(f1)})"
        )
    dist = np.linalg.norm(f1 - f_dagger)
    if dist > model.ball_radius:
        raise SourceConstructionError(
            f"source construction infeasible: reduce D (||f1 - f_dagger|| = {dist:.4g} "
            f"exceeds ball radius {model.ball_radius:g})"
        )
    return TruthSpec(f_dagger=f_dagger, f1=f1, r=float(r), g=g, D=float(D), decomp=decomp)


def generate_samples(model: ForwardModel, f_dagger: ParamVector, noise: NoiseModel, n: int,
                     rng: RngStream, design: tuple | None = None) -> SampleSet:
    """``y_j = [A f_dagger](x_j) + eps_j``; design and noise come from child streams."""
    xs = draw_design(n, rng.spawn(0), design)
    clean = model.apply(f_dagger, xs)
    eps = noise.sample(clean.shape, rng.spawn(1).generator())
    return SampleSet(xs, clean + eps, seed=str(rng), model=model.fingerprint())


@dataclass(frozen=True)
class BernsteinReport:
    M: float
    Sigma: float
    moments: list
    passed: bool

    def failures(self) -> list:
        return [row["l"] for row in self.moments if not row["passed"]]


def verify_bernstein(noise: NoiseModel, M: float, Sigma: float, l_max: int = 8,
                     samples: int = 10**6, rng: RngStream | None = None) -> BernsteinReport:
    """Monte Carlo check of ``E|eps|^l <= l!/2 Sigma^2 M^(l-2)`` for l = 2..l_max.

    A moment fails only if its estimate exceeds the bound by more than two
    standard errors.
    """
    if l_max < 2:
        raise DomainError("l_max must be >= 2")
    rng = rng or RngStream(0)
    eps = np.abs(noise.sample(samples, rng.generator()))
    rows = []
    for l in range(2, l_max + 1):
        vals = eps**l
        est = float(vals.mean())
        se = float(vals.std(ddof=1) / np.sqrt(samples)) if samples > 1 else 0.0
        bound = 0.5 * math.factorial(l) * Sigma**2 * M ** (l - 2)
        rows.append({"l": l, "moment": est, "stderr": se, "bound": bound,
                     "passed": bool(est - 2.0 * se <= bound)})
    return BernsteinReport(M=M, Sigma=Sigma, moments=rows, passed=all(r["passed"] for r in rows))
