import numpy as np
import pytest
from hypothesis import given, strategies as st

from invlearn.errors import ContractError, DegenerateSamplingError, DomainError
from invlearn.models import (DiffusionPDE, LinearIntegral, OperatorConstants, PointwiseNonlinear, build_model,
                             estimate_tangential_cone, kernel_cell_integrals, pde_solve, sample_ball)
from invlearn.spectral import RngStream, quadrature_grid


def all_models(p=32):
    return [LinearIntegral(p, "step", 3.0), LinearIntegral(p, "min"), LinearIntegral(p, "gaussian", m=2),
            PointwiseNonlinear(p, "step", 3.0), PointwiseNonlinear(p, "gaussian", m=2), DiffusionPDE(p)]


MODEL_IDS = ["lin-step", "lin-min", "lin-gauss-m2", "pw-step", "pw-gauss-m2", "pde"]


def test_min_kernel_on_constant_function():
    model = LinearIntegral(64, "min")
    x = np.linspace(0, 1, 11)
    out = model.apply(model.function(np.ones_like), x)[:, 0]
    np.testing.assert_allclose(out, x - x**2 / 2, atol=1e-14)


def test_step_kernel_is_antiderivative():
    model = LinearIntegral(64, "step", scale=2.0)
    x = np.array([0.0, 20 / 64, 1.0])
    out = model.apply(model.function(lambda s: 2 * s), x)[:, 0]
    # on whole cells the midpoint value integrates a linear f exactly
    np.testing.assert_allclose(out, 2.0 * x**2, atol=1e-12)


def test_gaussian_cell_integrals_match_quadrature():
    edges = np.linspace(0, 1, 9)
    x = np.array([0.1, 0.55])
    exact = kernel_cell_integrals("gaussian", x, edges, sigma=0.2)
    s = np.linspace(0, 1, 80001)
    dens = np.exp(-(x[:, None] - s) ** 2 / (2 * 0.04))
    for k in range(8):
        sel = (s >= edges[k]) & (s <= edges[k + 1])
        np.testing.assert_allclose(exact[:, k], np.trapezoid(dens[:, sel], s[sel], axis=1), rtol=1e-8)


def test_pointwise_identity_phi_reduces_to_linear():
    lin = LinearIntegral(32, "min")
    pw = PointwiseNonlinear(32, "min", beta=0.0)
    f = lin.function(np.cos)
    x = np.linspace(0, 1, 17)
    np.testing.assert_allclose(pw.apply(f, x), lin.apply(f, x), atol=1e-15)


@pytest.mark.parametrize("model", all_models(), ids=MODEL_IDS)
def test_jac_apply_zero_direction_and_linear_shortcut(model):
    f = model.default_truth()
    x = np.linspace(0, 1, 9)
    np.testing.assert_array_equal(model.jac_apply(f, np.zeros(model.p), x), 0.0)
    if model.is_linear:
        h = model.function(np.sin)
        np.testing.assert_allclose(model.jac_apply(3 * f, h, x), model.apply(h, x), atol=1e-14)


@pytest.mark.parametrize("idx", range(6), ids=MODEL_IDS)
@given(seed=st.integers(0, 2**32 - 1))
def test_adjoint_identity(idx, seed):
    model = all_models()[idx]
    gen = np.random.default_rng(seed)
    f = model.default_truth() + 0.02 * gen.standard_normal(model.p) * np.sqrt(model.mesh)
    x = gen.random(1)
    h = gen.standard_normal(model.p)
    r = gen.standard_normal((1, model.m))
    lhs = float(np.sum(model.jac_apply(f, h, x) * r))
    rhs = float(h @ model.jac_adjoint_apply(f, x, [1.0], r))
    assert abs(lhs - rhs) <= 1e-10 * (1 + abs(lhs))


@pytest.mark.parametrize("idx", range(6), ids=MODEL_IDS)
@given(seed=st.integers(0, 2**32 - 1))
def test_central_difference_jacobian(idx, seed):
    model = all_models()[idx]
    gen = np.random.default_rng(seed)
    f = model.default_truth()
    h = gen.standard_normal(model.p)
    h *= 0.1 * np.linalg.norm(f) / np.linalg.norm(h)
    x = gen.random(7)
    eps = 1e-5
    fd = (model.apply(f + eps * h, x) - model.apply(f - eps * h, x)) / (2 * eps)
    jv = model.jac_apply(f, h, x)
    assert np.linalg.norm(fd - jv) <= 1e-6 * np.linalg.norm(jv)
    np.testing.assert_allclose(model.jacobian(f, x) @ h, jv, atol=1e-12 * (1 + np.abs(jv).max()))


@pytest.mark.parametrize("model", all_models(), ids=MODEL_IDS)
def test_adjoint_reproduces_risk_gradient(model):
    gen = np.random.default_rng(3)
    n = 40
    x = gen.random(n)
    y = model.apply(model.default_truth(), x) + 0.1 * gen.standard_normal((n, model.m))
    f = model.default_truth() + 0.05 * np.sqrt(model.mesh) * gen.standard_normal(model.p)

    def risk(g):
        return np.mean(np.sum((model.apply(g, x) - y) ** 2, axis=1))

    grad = model.jac_adjoint_apply(f, x, np.full(n, 1 / n), model.apply(f, x) - y)
    h = gen.standard_normal(model.p)
    eps = 1e-6
    fd = (risk(f + eps * h) - risk(f - eps * h)) / (2 * eps)
    assert abs(fd - 2 * grad @ h) <= 1e-6 * abs(fd)


def test_adjoint_zero_residual_and_length_mismatch():
    model = PointwiseNonlinear(16)
    f = model.default_truth()
    np.testing.assert_array_equal(model.jac_adjoint_apply(f, [0.2, 0.4], [0.5, 0.5], np.zeros(2)), 0.0)
    with pytest.raises(ContractError, match="length mismatch"):
        model.jac_adjoint_apply(f, [0.2, 0.4], [1.0], np.zeros(2))
    with pytest.raises(ContractError):
        model.jac_adjoint_apply(f, [0.2], [-1.0], np.zeros(1))


def test_pde_solve_quadratic_exact():
    p = 63
    s = np.arange(1, p + 1) / (p + 1)
    np.testing.assert_allclose(pde_solve(np.ones(p), 2 * np.ones(p)), s * (1 - s), atol=1e-12)
    np.testing.assert_array_equal(pde_solve(np.ones(p), np.zeros(p)), 0.0)


def _pde_errors(a_fn, load_fn, u_fn, ps=(64, 128, 256)):
    errs, hs = [], []
    for p in ps:
        s = np.arange(1, p + 1) / (p + 1)
        errs.append(np.max(np.abs(pde_solve(a_fn(s), load_fn(s)) - u_fn(s))))
        hs.append(1 / (p + 1))
    return np.array(errs), np.array(hs)


def pde_orders():
    """Observed orders for constant and variable coefficients with u = sin(pi s)."""
    pi = np.pi
    cases = {
        "constant": (np.ones_like, lambda s: pi**2 * np.sin(pi * s)),
        "variable": (lambda s: 1 + s, lambda s: -pi * np.cos(pi * s) + (1 + s) * pi**2 * np.sin(pi * s)),
    }
    out = {}
    for name, (a_fn, load_fn) in cases.items():
        errs, hs = _pde_errors(a_fn, load_fn, lambda s: np.sin(pi * s))
        out[name] = np.diff(np.log(errs)) / np.diff(np.log(hs))
    return out


def test_pde_solve_second_order():
    for name, orders in pde_orders().items():
        assert np.all(np.abs(orders - 2) <= 0.2), (name, orders)


def test_pde_domain_violation():
    with pytest.raises(DomainError, match="a_min"):
        pde_solve(np.array([1.0, 0.0, 1.0]), np.ones(3), a_min=0.1)
    model = DiffusionPDE(16)
    bad = model.function(lambda s: 0.2 + 0 * s)
    with pytest.raises(DomainError, match="domain violation"):
        model.apply(bad, [0.5])
    assert np.all(model.values(model.project(bad)) >= model.a_min)


def test_diffusion_model_matches_pde_solve():
    model = DiffusionPDE(31, load="sine")
    f = model.function(np.ones_like)
    out = model.apply(f, model.nodes)[:, 0]
    np.testing.assert_allclose(out, pde_solve(np.ones(31), model.load), atol=1e-14)
    np.testing.assert_allclose(model.apply(f, [0.0, 1.0]), 0.0, atol=1e-15)


def test_operator_constants_validation():
    c = OperatorConstants(kappa0=2.0, lip=1.5, ball_radius=1.0)
    assert c.kappa1 == 3.0 and c.step_cap == pytest.approx(1 / 9)
    for kw in ({"kappa0": 0.0}, {"lip": -1.0}, {"ball_radius": 0.0}, {"alpha": 0.5}):
        with pytest.raises(DomainError):
            OperatorConstants(**{"kappa0": 1.0, "lip": 1.0, "ball_radius": 1.0, **kw})


def test_model_construction_errors():
    with pytest.raises(DomainError):
        LinearIntegral(1)
    with pytest.raises(DomainError):
        LinearIntegral(8, kernel="cosine")
    with pytest.raises(DomainError):
        DiffusionPDE(8, a_min=0.0)
    with pytest.raises(DomainError):
        build_model("heat")
    with pytest.raises(ContractError):
        LinearIntegral(8).apply(np.ones(7), [0.5])
    with pytest.raises(DomainError):
        LinearIntegral(8).apply(np.ones(8), [1.5])


def test_tangential_cone_linear_is_zero():
    model = LinearIntegral(32, "step", 3.0)
    assert estimate_tangential_cone(model, model.default_truth(), 0.5, 20, RngStream(1)) == 0.0


def test_tangential_cone_shrinks_with_radius():
    model = PointwiseNonlinear(32, "step", 3.0)
    f0 = model.default_truth()
    alphas = [estimate_tangential_cone(model, f0, r, 100, RngStream(4)) for r in (0.5, 0.25, 0.125)]
    assert alphas[0] > alphas[1] > alphas[2] > 0


def test_tangential_cone_diffusion_default_below_half():
    model = DiffusionPDE(64)
    alpha, pairs = estimate_tangential_cone(model, model.default_truth(), 0.1, 500, RngStream(5),
                                            return_pairs=True)
    assert alpha < 0.5
    # two-sided bound with the estimated constant
    grid = quadrature_grid(512)
    for f, g in pairs[:100]:
        diff = grid.l2_norm(model.apply(f, grid.nodes) - model.apply(g, grid.nodes))
        lin = grid.l2_norm(model.jac_apply(g, f - g, grid.nodes))
        assert lin / (1 + alpha) <= diff * (1 + 1e-12)
        assert diff <= lin / (1 - alpha) * (1 + 1e-12)


def test_sample_ball_stays_in_ball_and_domain():
    model = DiffusionPDE(16)
    gen = np.random.default_rng(0)
    c = model.default_truth()
    for _ in range(50):
        f = sample_ball(model, c, 0.1, gen)
        assert np.linalg.norm(f - c) <= 0.1 and model.in_domain(f)
    with pytest.raises(DegenerateSamplingError):
        # every draw around an infeasible centre is rejected
        sample_ball(model, model.function(lambda s: 0.1 + 0 * s), 1e-3, gen, max_tries=5)
