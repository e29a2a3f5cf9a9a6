"""Guidance loss, latent perturbation, feasibility reporting, and KDE tests."""

import json
import logging

import numpy as np
import pytest

import sinkgen.diffusion as diffusion
from sinkgen.geometry import DESIGN_DIM, FeatureStats
from sinkgen.guidance import (
    REPORT_CSV_HEADER,
    DensityTable,
    GuidanceConfig,
    GuidedSampleReport,
    assess_designs,
    density_mode,
    density_report,
    generate_guided,
    guidance_gradient,
    guidance_loss,
    guided_reverse_step,
    hinge_derivative,
    make_guidance_hook,
    write_density_csv,
    write_report_csv,
    write_report_json,
)
from sinkgen.oracle import OracleConfig
from sinkgen.surrogate import QuantileMap, SurrogateConfig, SurrogateModel, init_params

CFG = GuidanceConfig(t_fixed=400.0, eta=0.01, lambda_p=0.4, lambda_t=0.4, delta_t=5.0)


def make_net(seed=0, hidden=24, n_knots=12):
    """Random frozen regressor over U(0,1)^48 inputs; no training."""
    rng = np.random.default_rng(seed)
    cfg = SurrogateConfig(hidden=hidden, n_knots=n_knots)
    params, buffers = init_params(cfg, rng)
    for k in buffers:
        buffers[k] = rng.uniform(0.5, 1.5, buffers[k].shape) if k.endswith("var") \
            else rng.standard_normal(buffers[k].shape) * 0.1
    qmap = QuantileMap.fit(rng.uniform(0.0, 1.0, size=(200, 48)), n_knots)
    return SurrogateModel(cfg=cfg, params=params, buffers=buffers, qmap=qmap,
                          target_mean=60.0, target_std=25.0)


def interior_stats(p_model):
    """Stats whose unit ball lands mid-range of the fitted quantile knots."""
    return FeatureStats(mean=np.full(DESIGN_DIM, 0.5), std=np.full(DESIGN_DIM, 0.05))


def small_model(T=20, seed=0):
    cfg = diffusion.UNetConfig(stage_channels=(8, 8, 16, 32), res_blocks=1,
                               time_dim=32, dropout=0.0)
    params = diffusion.init_unet_params(cfg, np.random.default_rng(seed))
    stats = FeatureStats(mean=np.full(DESIGN_DIM, 0.5), std=np.full(DESIGN_DIM, 0.05))
    return diffusion.DiffusionModel(cfg=cfg, params=params, stats=stats,
                                    schedule=diffusion.cosine_schedule(T=T))


# ---------------------------------------------------------------- loss

def test_loss_reduces_to_pressure_term_on_target():
    assert guidance_loss(10.0, 400.0, CFG) == 0.4 * 10.0


def test_loss_arithmetic_outside_band():
    # residual of tolerance + 5 leaves a squared excess of 25
    assert abs(guidance_loss(10.0, 410.0, CFG) - 14.0) < 1e-12
    assert abs(guidance_loss(10.0, 390.0, CFG) - 14.0) < 1e-12


def test_loss_dead_zone_spans_the_band():
    for t in (395.0, 398.0, 400.0, 403.0, 405.0):
        assert guidance_loss(7.0, t, CFG) == 0.4 * 7.0


def test_loss_broadcasts_elementwise():
    out = guidance_loss(np.array([10.0, 0.0]), np.array([400.0, 411.0]), CFG)
    assert np.allclose(out, [4.0, 0.4 * 36.0], rtol=0, atol=1e-12)


def test_hinge_derivative_piecewise_form():
    assert hinge_derivative(402.0, CFG) == 0.0
    assert hinge_derivative(405.0, CFG) == 0.0  # band edge included
    assert abs(hinge_derivative(410.0, CFG) - 2.0 * 0.4 * 5.0) < 1e-12
    assert abs(hinge_derivative(390.0, CFG) + 2.0 * 0.4 * 5.0) < 1e-12


def test_hinge_derivative_matches_loss_slope():
    h = 1e-6
    for t in (412.0, 387.5):
        fd = (guidance_loss(0.0, t + h, CFG) - guidance_loss(0.0, t - h, CFG)) / (2 * h)
        assert abs(hinge_derivative(t, CFG) - fd) < 1e-6


def test_config_rejects_negative_settings():
    for kw in ({"eta": -0.1}, {"lambda_p": -1.0}, {"lambda_t": -1.0}, {"delta_t": -2.0}):
        with pytest.raises(ValueError):
            GuidanceConfig(t_fixed=400.0, **kw)


# ---------------------------------------------------------------- gradient

def test_gradient_is_zero_with_zero_weights():
    p_net, t_net = make_net(0), make_net(1)
    stats = interior_stats(p_net)
    cfg = GuidanceConfig(t_fixed=400.0, lambda_p=0.0, lambda_t=0.0)
    g = guidance_gradient(np.zeros((2, DESIGN_DIM)), p_net, t_net, stats, cfg)
    assert np.array_equal(g, np.zeros((2, DESIGN_DIM)))


def test_gradient_does_not_depend_on_eta():
    p_net, t_net = make_net(0), make_net(1)
    stats = interior_stats(p_net)
    x = np.random.default_rng(2).standard_normal((3, DESIGN_DIM))
    a = guidance_gradient(x, p_net, t_net, stats, GuidanceConfig(t_fixed=0.0, eta=0.01))
    b = guidance_gradient(x, p_net, t_net, stats, GuidanceConfig(t_fixed=0.0, eta=0.5))
    assert np.array_equal(a, b)


def test_gradient_is_linear_in_loss_weights():
    p_net, t_net = make_net(0), make_net(1)
    stats = interior_stats(p_net)
    x = np.random.default_rng(3).standard_normal((2, DESIGN_DIM))
    base = GuidanceConfig(t_fixed=0.0, lambda_p=0.4, lambda_t=0.4)  # hinge active
    double = GuidanceConfig(t_fixed=0.0, lambda_p=0.8, lambda_t=0.8)
    g1 = guidance_gradient(x, p_net, t_net, stats, base)
    g2 = guidance_gradient(x, p_net, t_net, stats, double)
    assert np.allclose(g2, 2.0 * g1, rtol=1e-12, atol=0)


def test_gradient_drops_temperature_term_inside_band():
    p_net, t_net = make_net(0), make_net(1)
    stats = interior_stats(p_net)
    x = np.random.default_rng(4).standard_normal((1, DESIGN_DIM))
    from sinkgen.surrogate import predict
    from sinkgen.geometry import destandardize
    t_here = float(predict(t_net, destandardize(x, stats)[0]))
    banded = GuidanceConfig(t_fixed=t_here, lambda_p=0.4, lambda_t=0.4, delta_t=5.0)
    p_only = GuidanceConfig(t_fixed=t_here, lambda_p=0.4, lambda_t=0.0, delta_t=5.0)
    assert np.array_equal(
        guidance_gradient(x, p_net, t_net, stats, banded),
        guidance_gradient(x, p_net, t_net, stats, p_only),
    )


def test_gradient_matches_finite_differences_of_pipeline():
    from sinkgen.surrogate import predict
    from sinkgen.geometry import destandardize
    p_net, t_net = make_net(5), make_net(6)
    stats = interior_stats(p_net)
    cfg = GuidanceConfig(t_fixed=-200.0, lambda_p=0.4, lambda_t=0.4, delta_t=5.0)

    def loss_at(x_row):
        raw = destandardize(x_row[None, :], stats)
        return guidance_loss(predict(p_net, raw)[0], predict(t_net, raw)[0], cfg)

    x = np.random.default_rng(7).standard_normal(DESIGN_DIM) * 0.5
    g = guidance_gradient(x, p_net, t_net, stats, cfg)[0]
    h = 1e-4
    g_fd = np.empty(DESIGN_DIM)
    for i in range(DESIGN_DIM):
        e = np.zeros(DESIGN_DIM)
        e[i] = h
        g_fd[i] = (loss_at(x + e) - loss_at(x - e)) / (2.0 * h)
    assert np.max(np.abs(g - g_fd)) / max(1.0, np.max(np.abs(g_fd))) < 1e-4


# ---------------------------------------------------------------- hook and step

def test_zero_eta_yields_no_hook():
    p_net, t_net = make_net(0), make_net(1)
    cfg = GuidanceConfig(t_fixed=400.0, eta=0.0)
    assert make_guidance_hook(p_net, t_net, interior_stats(p_net), cfg) is None


def test_hook_applies_scaled_gradient_descent():
    p_net, t_net = make_net(0), make_net(1)
    stats = interior_stats(p_net)
    cfg = GuidanceConfig(t_fixed=0.0, eta=0.02)
    hook = make_guidance_hook(p_net, t_net, stats, cfg)
    x = np.random.default_rng(8).standard_normal((3, 1, DESIGN_DIM))
    g = guidance_gradient(x[:, 0, :], p_net, t_net, stats, cfg)
    assert np.array_equal(hook(x, 5), x - 0.02 * g[:, None, :])


def test_hook_skips_nonfinite_gradient_rows(caplog):
    p_net, t_net = make_net(0), make_net(1)
    p_net.params["head.w"].data[:] = np.inf  # poisons every pressure gradient
    stats = interior_stats(p_net)
    cfg = GuidanceConfig(t_fixed=1e9, eta=0.05, lambda_t=0.0)  # temp term off
    hook = make_guidance_hook(p_net, t_net, stats, cfg)
    x = np.random.default_rng(9).standard_normal((2, 1, DESIGN_DIM))
    with np.errstate(all="ignore"), caplog.at_level(logging.WARNING, logger="sinkgen.guidance"):
        out = hook(x, 3)
    assert np.array_equal(out, x)
    assert any("non-finite" in rec.message for rec in caplog.records)


def test_linear_net_perturbs_by_eta_times_coefficient():
    # stem weights positive with a large bias keep ReLU affine; zeroed
    # BatchNorm gains silence every residual block, so the net is exactly
    # head(W x + b) and the guidance update is x - eta * c
    rng = np.random.default_rng(10)
    cfg_net = SurrogateConfig(hidden=8, n_knots=2)
    params, buffers = init_params(cfg_net, rng)
    params["stem.w"].data = rng.uniform(0.1, 0.5, size=(48, 8))
    params["stem.b"].data = np.full(8, 100.0)
    for i in range(4):
        params[f"block{i}.bn.g"].data[:] = 0.0
        params[f"block{i}.bn.b"].data[:] = 0.0
    head = rng.standard_normal((8, 1))
    params["head.w"].data = head
    qmap = QuantileMap.fit(np.vstack([np.zeros(48), np.ones(48)]), 2)  # identity on [0,1]
    p_net = SurrogateModel(cfg=cfg_net, params=params, buffers=buffers, qmap=qmap,
                           target_mean=0.0, target_std=2.0)
    t_net = make_net(11)
    stats = FeatureStats(mean=np.full(48, 0.5), std=np.full(48, 0.1))
    cfg = GuidanceConfig(t_fixed=1e9, eta=0.03, lambda_p=1.0, lambda_t=0.0)
    hook = make_guidance_hook(p_net, t_net, stats, cfg)
    x = rng.standard_normal((1, 1, DESIGN_DIM)) * 0.5
    # d(pred)/d(raw) = std_target * W @ head; times feature std for latents
    c = 2.0 * (params["stem.w"].data @ head)[:, 0] * 0.1
    out = hook(x.copy(), 2)
    assert np.allclose(out, x - 0.03 * c[None, None, :], rtol=1e-12, atol=1e-15)


def test_guided_step_with_zero_eta_matches_unguided():
    model = small_model()
    p_net, t_net = make_net(0), make_net(1)
    cfg = GuidanceConfig(t_fixed=400.0, eta=0.0)
    rng = np.random.default_rng(12)
    x = rng.standard_normal((2, 1, DESIGN_DIM))
    z = rng.standard_normal((2, 1, DESIGN_DIM))
    got = guided_reverse_step(x, 7, model, p_net, t_net, cfg, z)
    eps = diffusion.unet_forward(diffusion.Tape(recording=False), model.params,
                                 model.cfg, x, np.full(2, 7)).data
    want = diffusion.reverse_step(x, 7, eps, z, model.schedule)
    assert np.array_equal(got, want)


def test_guided_step_with_inert_surrogates_matches_unguided():
    model = small_model()
    p_net, t_net = make_net(0), make_net(1)
    p_net.params["head.w"].data[:] = 0.0
    t_net.params["head.w"].data[:] = 0.0
    t_pred_const = 60.0  # destandardized head bias; keep it inside the band
    cfg = GuidanceConfig(t_fixed=t_pred_const, eta=0.7, delta_t=50.0)
    rng = np.random.default_rng(13)
    x = rng.standard_normal((2, 1, DESIGN_DIM))
    z = rng.standard_normal((2, 1, DESIGN_DIM))
    got = guided_reverse_step(x, 4, model, p_net, t_net, cfg, z)
    eps = diffusion.unet_forward(diffusion.Tape(recording=False), model.params,
                                 model.cfg, x, np.full(2, 4)).data
    want = diffusion.reverse_step(x, 4, eps, z, model.schedule)
    assert np.array_equal(got, want)


# ---------------------------------------------------------------- reporting

def test_empty_generation_reports_zero_feasibility():
    model = small_model()
    p_net, t_net = make_net(0), make_net(1)
    cfg = GuidanceConfig(t_fixed=400.0, eta=0.01, n_samples=0)
    report = generate_guided(model, p_net, t_net, OracleConfig(), cfg, master_seed=0)
    assert report.designs.shape == (0, DESIGN_DIM)
    assert report.feasibility_rate == 0.0
    assert report.elite_index is None
    assert report.elite_record() is None


def test_zero_eta_generation_is_bitwise_unguided():
    model = small_model()
    p_net, t_net = make_net(0), make_net(1)
    cfg = GuidanceConfig(t_fixed=400.0, eta=0.0, n_samples=3)
    report = generate_guided(model, p_net, t_net, OracleConfig(), cfg, master_seed=21)
    plain = diffusion.sample(model, 3, master_seed=21)
    assert np.array_equal(report.designs, plain)


def test_assessment_mask_is_consistent_with_reported_columns():
    model = small_model()
    p_net, t_net = make_net(0), make_net(1)
    cfg = GuidanceConfig(t_fixed=420.0, eta=0.01, n_samples=4)
    report = generate_guided(model, p_net, t_net, OracleConfig(), cfg, master_seed=5)
    with np.errstate(invalid="ignore", divide="ignore"):
        rel_p = np.abs(report.p_pred - report.dp_oracle) / np.abs(report.dp_oracle)
        rel_t = np.abs(report.t_pred - report.t_oracle) / np.abs(report.t_oracle)
        want = (report.valid & (rel_p <= 0.05) & (rel_t <= 0.05)
                & (report.t_oracle <= cfg.t_fixed + cfg.delta_t))
    assert np.array_equal(report.feasible, want)
    assert np.all(report.valid == np.isfinite(report.dp_oracle))


def fabricated_report(feasible, dp):
    n = len(dp)
    cfg = GuidanceConfig(t_fixed=400.0)
    return GuidedSampleReport(
        config=cfg,
        designs=np.zeros((n, DESIGN_DIM)),
        p_pred=np.asarray(dp, dtype=float),
        t_pred=np.full(n, 399.0),
        dp_oracle=np.asarray(dp, dtype=float),
        t_oracle=np.full(n, 399.0),
        valid=np.ones(n, bool),
        feasible=np.asarray(feasible, bool),
        master_seed=0,
    )


def test_elite_is_cheapest_feasible_design():
    report = fabricated_report([True, False, True, True], [40.0, 5.0, 22.0, 31.0])
    assert report.elite_index == 2  # the 5.0 row is infeasible
    rec = report.elite_record()
    assert rec["dp_pa"] == 22.0
    assert report.feasibility_rate == 0.75


def test_no_feasible_designs_has_no_elite():
    report = fabricated_report([False, False], [1.0, 2.0])
    assert report.elite_index is None
    assert report.feasibility_rate == 0.0


def test_report_files_round_trip(tmp_path):
    report = fabricated_report([True, False], [12.0, 30.0])
    csv_path = tmp_path / "samples.csv"
    json_path = tmp_path / "report.json"
    write_report_csv(csv_path, report)
    write_report_json(json_path, report)
    lines = csv_path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == ",".join(REPORT_CSV_HEADER)
    assert len(lines) == 3
    payload = json.loads(json_path.read_text(encoding="utf-8"))
    assert payload["feasibility_rate"] == 0.5
    assert payload["n_designs"] == 2
    assert payload["elite"]["dp_pa"] == 12.0
    assert payload["config"]["t_fixed"] == 400.0


# ---------------------------------------------------------------- densities

def test_kde_peak_sits_at_the_normal_mode():
    # the mode of a Silverman-bandwidth KDE on 1e5 normal draws has a
    # measured seed-to-seed sd of 0.062, so 0.2 is a 3-sigma gate
    values = np.random.default_rng(0).standard_normal(100_000)
    table = density_report(values)
    assert table.kind == "kde"
    assert abs(density_mode(table)) < 0.2


def test_two_point_sample_is_symmetric_bimodal():
    table = density_report(np.array([0.0, 1.0]))
    assert np.allclose(table.density, table.density[::-1], rtol=0, atol=1e-12)
    mid = table.density[table.x.size // 2]
    at_zero = table.density[np.argmin(np.abs(table.x))]
    at_one = table.density[np.argmin(np.abs(table.x - 1.0))]
    assert at_zero > mid and at_one > mid


def test_kde_grid_spans_three_bandwidths():
    values = np.random.default_rng(1).uniform(2.0, 9.0, 500)
    table = density_report(values)
    assert table.x[0] == values.min() - 3.0 * table.bandwidth
    assert table.x[-1] == values.max() + 3.0 * table.bandwidth
    assert table.x.size == 256


def test_kde_mass_is_normalized():
    values = np.random.default_rng(2).standard_normal(5000)
    table = density_report(values)
    assert abs(np.trapezoid(table.density, table.x) - 1.0) < 0.02


def test_degenerate_sample_falls_back_to_histogram():
    table = density_report(np.full(10, 3.0))
    assert table.kind == "histogram"
    assert table.bandwidth == 0.0
    # one unit-width bin centered on the atom carrying all the mass
    assert np.array_equal(table.x, [3.0])
    assert np.array_equal(table.density, [1.0])


def test_density_needs_two_values():
    with pytest.raises(ValueError):
        density_report(np.array([1.0]))


def test_density_csv_layout(tmp_path):
    table = density_report(np.random.default_rng(3).standard_normal(100))
    path = tmp_path / "kde.csv"
    write_density_csv(path, table)
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "value,density"
    assert len(lines) == 257
