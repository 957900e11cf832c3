import json
import math

import numpy as np
import pytest

from invlearn.errors import ContractError, DivergenceError, DomainError
from invlearn.models import DiffusionPDE, LinearIntegral, PointwiseNonlinear
from invlearn.sampling import NoiseModel, SampleSet, generate_samples, make_truth
from invlearn.solvers import (SolverConfig, gd_run, min_batch_bound, schedule_preset, sgd_run,
                              stopping_time)
from invlearn.spectral import RngStream, quadrature_grid, sym_eig

GRID = quadrature_grid(1024)


def linear_setup(n=200, noise=0.05, p=32, seed=0):
    model = LinearIntegral(p, "step", 3.0)
    truth = make_truth(model, model.default_truth(), 0.5, ("powerlaw", 0.5), 0.5, GRID)
    data = generate_samples(model, truth.f_dagger, NoiseModel("uniform-bounded", noise), n, RngStream(seed))
    return model, truth, data


def test_stopping_time_examples():
    assert stopping_time(1024, 0.5, 0.5, 1.0) == 16
    assert stopping_time(1024, 2.0, 0.5, 1.0) == 16
    assert stopping_time(10**4, 0.25, 0.5, 0.5) == 200
    assert stopping_time(1, 0.5, 0.5, 10.0) == 1
    for args in ((0, 0.5, 0.5, 1.0), (10, 0.5, 1.0, 1.0), (10, 0.0, 0.5, 1.0), (10, 0.5, 0.5, 0.0)):
        with pytest.raises(DomainError):
            stopping_time(*args)


def test_min_batch_bound_examples():
    assert min_batch_bound(1.0, 16, 0.5, 0.5) == pytest.approx(256.0)
    assert min_batch_bound(1.0, 1, 0.5, 0.5) == pytest.approx(1.0)
    first = 0.25 * 16**1.5
    second = 0.25**0.8 * 16**2
    assert min_batch_bound(0.25, 64, 0.5, 0.5) == pytest.approx(max(first, second))
    with pytest.raises(DomainError):
        min_batch_bound(0.0, 1, 0.5, 0.5)


def test_schedule_presets_power_of_two():
    c = schedule_preset("c", 1024, 0.5, 0.5)
    assert (c.b, c.T, c.passes) == (1024, 16, 16)
    a = schedule_preset("a", 1024, 0.5, 0.5)
    assert (a.b, a.T, a.passes) == (256, 1024, 256)
    assert a.eta == pytest.approx(0.9 * 1024**-0.6)
    b = schedule_preset("b", 1024, 0.5, 0.5)
    assert (b.b, b.T, b.passes, b.eta) == (256, 16, 4, 0.9)
    d = schedule_preset("d", 1024, 0.5, 0.5)
    assert (d.b, d.T, d.passes) == (1, 16384, 16)
    assert d.eta == pytest.approx(0.9 / 1024)
    with pytest.raises(DomainError):
        schedule_preset("e", 1024, 0.5, 0.5)
    with pytest.raises(DomainError):
        schedule_preset("a", 1, 0.5, 0.5)


@pytest.mark.parametrize("case", "abcd")
def test_presets_respect_batch_bound(case):
    pr = schedule_preset(case, 1024, 0.5, 0.5)
    assert min_batch_bound(pr.eta, pr.T, 0.5, 0.5) <= 2 * pr.b
    assert pr.eta < 1.0


def test_preset_kappa_scaling_keeps_eta_times_T():
    for case in "abcd":
        one = schedule_preset(case, 4096, 0.5, 0.5, kappa1=1.0)
        three = schedule_preset(case, 4096, 0.5, 0.5, kappa1=3.0)
        # horizons are integers, so eta * T agrees up to one step of either schedule
        assert abs(three.eta * three.T - one.eta * one.T) <= one.eta + three.eta
        assert three.b == one.b


def test_solver_config_step_cap():
    model = LinearIntegral(16, "step", 3.0)
    cap = model.constants.step_cap
    SolverConfig.for_model(model, 0.99 * cap, 10)
    with pytest.raises(DomainError, match="cap"):
        SolverConfig.for_model(model, cap, 10)
    with pytest.raises(DomainError):
        SolverConfig.for_model(model, 0.5 * cap, 0)
    with pytest.raises(DomainError):
        SolverConfig.for_model(model, 0.5 * cap, 5, domain_policy="clip")


def test_gd_fixed_point_without_noise():
    for model in (LinearIntegral(16, "step", 3.0), PointwiseNonlinear(16, "step", 3.0), DiffusionPDE(16)):
        fd = model.default_truth()
        data = generate_samples(model, fd, NoiseModel("none"), 60, RngStream(1))
        cfg = SolverConfig.for_model(model, 0.5 * model.constants.step_cap, 20, record_every=5)
        rec = gd_run(model, data, fd, cfg)
        np.testing.assert_allclose(rec.snapshots, np.tile(fd, (rec.ts.shape[0], 1)), atol=1e-13)
        sg = SolverConfig.for_model(model, 0.5 * model.constants.step_cap, 20, batch=5, rng=RngStream(2))
        np.testing.assert_allclose(sgd_run(model, data, fd, sg).final, fd, atol=1e-13)


def spectral_filter_oracle(model, data, f1, eta, ts):
    """Closed form of t - 1 Landweber steps in the eigenbasis of T_hat."""
    rows = model.jacobian(f1, data.xs).reshape(-1, model.p)
    n = data.n
    t_hat = rows.T @ rows / n
    rhs = rows.T @ data.ys.reshape(-1) / n
    w, v = np.linalg.eigh(t_hat)
    a1, c = v.T @ f1, v.T @ rhs
    out = []
    for t in ts:
        k = t - 1
        damp = (1 - eta * w) ** k
        geo = np.where(w > 1e-300, (1 - damp) / np.where(w > 1e-300, w, 1.0), eta * k)
        out.append(v @ (damp * a1 + geo * c))
    return np.array(out)


def test_gd_matches_spectral_filter():
    model, truth, data = linear_setup()
    eta = 0.9 * model.constants.step_cap
    cfg = SolverConfig.for_model(model, eta, 300, record_every=7)
    rec = gd_run(model, data, truth.f1, cfg, truth)
    oracle = spectral_filter_oracle(model, data, truth.f1, eta, rec.ts)
    assert np.max(np.abs(rec.snapshots - oracle)) <= 1e-8


def test_gd_zero_noise_risk_decreases():
    model, truth, data = linear_setup(noise=0.0)
    rec = gd_run(model, data, truth.f1, SolverConfig.for_model(model, 0.9 * model.constants.step_cap, 60), truth)
    risks = [np.mean((model.apply(f, data.xs) - data.ys) ** 2) for f in rec.snapshots]
    assert np.all(np.diff(risks) < 0)


def test_run_record_fields_and_csv(tmp_path):
    model, truth, data = linear_setup()
    rec = gd_run(model, data, truth.f1, SolverConfig.for_model(model, 0.1, 25, record_every=10), truth)
    assert list(rec.ts) == [1, 11, 21, 25]
    assert np.all(rec.err_u0 >= 0) and np.all(rec.err_u05 >= 0)
    assert np.all(rec.err_u05 <= np.sqrt(truth.decomp.lam_max) * rec.err_u0 + 1e-9)
    assert rec.in_ball.all() and rec.first_exit is None
    path = rec.to_csv(tmp_path / "trace.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "t,err_u0,err_u05,in_ball,wall_ns" and len(lines) == 5
    meta = json.loads((tmp_path / "trace.json").read_text())
    assert meta["solver"] == "gd" and meta["t_max"] == 25


def test_divergence_guard():
    model, truth, data = linear_setup()
    cfg = SolverConfig(eta=5.0, t_max=200, step_cap=100.0)
    with pytest.raises(DivergenceError, match=r"divergence at iteration t=\d+"):
        gd_run(model, data, truth.f1, cfg)
    cfg = SolverConfig(eta=5.0, t_max=200, step_cap=100.0, batch=10, rng=RngStream(1))
    with pytest.raises(DivergenceError):
        sgd_run(model, data, truth.f1, cfg)


def test_domain_policy_reject_and_project():
    model = DiffusionPDE(16)
    fd = model.default_truth()
    near = model.function(lambda s: 0.51 + 0 * s)
    data = generate_samples(model, fd, NoiseModel("none"), 40, RngStream(0))
    # inflated data with a large step overshoots the coefficient bound
    ys = SampleSet(data.xs, 3.0 * data.ys)
    cfg = SolverConfig(eta=50.0, t_max=50, step_cap=1e3, domain_policy="reject")
    rec = gd_run(model, ys, near, cfg)
    assert rec.error is not None and rec.error.startswith("domain violation at t=")
    assert rec.t_final < 50
    cfg = SolverConfig(eta=50.0, t_max=50, step_cap=1e3, domain_policy="project")
    rec = gd_run(model, ys, near, cfg)
    assert rec.error is None and rec.t_final == 50
    assert np.all(model.values(rec.final) >= model.a_min)


def test_sgd_contract_errors():
    model, truth, data = linear_setup(n=20)
    with pytest.raises(ContractError):
        sgd_run(model, data, truth.f1, SolverConfig.for_model(model, 0.05, 5, batch=21, rng=RngStream(0)))
    with pytest.raises(ContractError):
        sgd_run(model, data, truth.f1, SolverConfig.for_model(model, 0.05, 5, batch=2))


def test_sgd_reproducible_and_independent_of_recording():
    model, truth, data = linear_setup()
    runs = [sgd_run(model, data, truth.f1,
                    SolverConfig.for_model(model, 0.05, 500, batch=3, rng=RngStream(4), record_every=k), truth)
            for k in (1, 1000, 1)]
    np.testing.assert_array_equal(runs[0].final, runs[1].final)
    np.testing.assert_array_equal(runs[0].snapshots, runs[2].snapshots)
    assert list(runs[1].ts) == [1, 500]


def test_sgd_linear_fast_path_matches_generic_update():
    model, truth, data = linear_setup(n=50)
    cfg = SolverConfig.for_model(model, 0.05, 40, batch=4, rng=RngStream(6))
    rec = sgd_run(model, data, truth.f1, cfg)
    gen = RngStream(6).generator()
    idx = gen.integers(0, data.n, size=(39, 4))
    g = truth.f1.copy()
    for sel in idx:
        res = model.apply(g, data.xs[sel]) - data.ys[sel]
        g = g - 0.05 * model.jac_adjoint_apply(g, data.xs[sel], np.full(4, 0.25), res)
    np.testing.assert_allclose(rec.final, g, atol=1e-13)


@pytest.mark.parametrize("kind", ["linear", "pointwise"])
def test_sgd_single_step_is_unbiased(kind):
    model = LinearIntegral(16, "step", 3.0) if kind == "linear" else PointwiseNonlinear(16, "step", 3.0)
    fd = model.default_truth()
    data = generate_samples(model, fd, NoiseModel("uniform-bounded", 0.1), 100, RngStream(1))
    f = fd + 0.05 * np.random.default_rng(2).standard_normal(16)
    eta = 0.5 * model.constants.step_cap
    gd_step = gd_run(model, data, f, SolverConfig.for_model(model, eta, 2)).final
    draws = np.array([sgd_run(model, data, f, SolverConfig.for_model(model, eta, 2, batch=3,
                                                                      rng=RngStream(9, k))).final
                      for k in range(10**4)])
    se = draws.std(axis=0, ddof=1) / math.sqrt(draws.shape[0])
    assert np.all(np.abs(draws.mean(axis=0) - gd_step) <= 4 * se)


def test_full_batch_sgd_differs_pathwise_agrees_in_mean():
    model, truth, data = linear_setup(n=64)
    eta, t_max = 0.5 * model.constants.step_cap, 30
    gd = gd_run(model, data, truth.f1, SolverConfig.for_model(model, eta, t_max, record_every=1))
    runs = np.array([sgd_run(model, data, truth.f1,
                             SolverConfig.for_model(model, eta, t_max, batch=64, rng=RngStream(3, k),
                                                    record_every=1)).snapshots
                     for k in range(200)])
    assert not np.allclose(runs[0], gd.snapshots)
    v = sym_eig(model.jacobian(truth.f1, data.xs)[:, 0].T @ model.jacobian(truth.f1, data.xs)[:, 0]).eigenvectors
    proj = runs @ v[:, :3]
    ref = gd.snapshots @ v[:, :3]
    se = proj.std(axis=0, ddof=1) / math.sqrt(200)
    assert np.all(np.abs(proj.mean(axis=0) - ref) <= 3 * se + 1e-12)


def test_containment_and_first_exit():
    model, truth, data = linear_setup()
    small = LinearIntegral(32, "step", 3.0, ball_radius=0.5)
    rec = gd_run(small, data, truth.f1, SolverConfig.for_model(small, 0.1, 5), truth)
    assert rec.first_exit is None
    far = truth.f_dagger + 0.49 * np.ones(32) / np.sqrt(32)
    cfg = SolverConfig(eta=0.1, t_max=40, step_cap=1.0)
    rec = gd_run(small, SampleSet(data.xs, data.ys + 5.0), far, cfg, truth)
    assert rec.first_exit is not None and not rec.in_ball[-1] and rec.in_ball[0]
