import csv
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helmdd.grid import CartesianGrid, FrequencySpec, InvalidArgument, ModelLoadError, PointSource, VelocityModel
from helmdd.oracle import (CbsConfig, CbsConvergenceError, ErrorMetricConfig, analytic_homogeneous, analytic_on_grid,
                           born_parameters, cbs_solve, distance_from, error_metric, export_slice_csv, load_field,
                           save_field, smooth_step)

from conftest import homogeneous

K = 2 * np.pi / 100.0


def test_green_function_is_spherically_symmetric():
    src = np.array([3.0, -2.0, 1.0])
    dirs = np.array([[1, 0, 0], [0, -1, 0], [0.6, 0.8, 0], [1, 1, 1] / np.sqrt(3)])
    u = analytic_homogeneous(K, src, src + 37.0 * dirs)
    np.testing.assert_allclose(u, u[0], rtol=1e-14)
    assert u[0] == pytest.approx(-np.exp(1j * K * 37.0) / (4 * np.pi * 37.0))


@given(st.floats(1.0, 500.0))
def test_green_function_decays_as_one_over_r(r):
    u = analytic_homogeneous(K, (0, 0, 0), [[r, 0, 0], [2 * r, 0, 0]])
    assert abs(u[1]) / abs(u[0]) == pytest.approx(0.5, rel=1e-12)


def test_green_function_solves_helmholtz_away_from_source():
    lam = 2 * np.pi / K
    d = lam / 50
    # 6th-order central second difference
    c = np.array([1 / 90, -3 / 20, 3 / 2, -49 / 18, 3 / 2, -3 / 20, 1 / 90])
    offs = np.arange(-3, 4) * d
    for x0 in ([3 * lam, 0, 0], [2 * lam, 2 * lam, 1.5 * lam], [-1, 4 * lam, -0.5]):
        x0 = np.asarray(x0, float)
        lap = 0.0
        for a in range(3):
            pts = np.tile(x0, (7, 1))
            pts[:, a] += offs
            lap += c @ analytic_homogeneous(K, (0, 0, 0), pts) / d ** 2
        u0 = analytic_homogeneous(K, (0, 0, 0), x0[None])[0]
        assert abs(lap + K ** 2 * u0) <= 1e-6 * abs(K ** 2 * u0)


def test_attenuation_decays_faster():
    r = np.linspace(10.0, 1000.0, 50)
    pts = np.stack([r, 0 * r, 0 * r], axis=1)
    lossless = np.abs(analytic_homogeneous(K, (0, 0, 0), pts))
    lossy = np.abs(analytic_homogeneous(K * (1 + 0.005j), (0, 0, 0), pts))
    assert np.all(lossy < lossless)


def test_green_function_rejects_source_point_and_growing_k():
    with pytest.raises(InvalidArgument):
        analytic_homogeneous(K, (1, 1, 1), [[1, 1, 1]])
    with pytest.raises(InvalidArgument):
        analytic_homogeneous(K * (1 - 0.01j), (0, 0, 0), [[5, 0, 0]])


def test_analytic_on_grid_zeroes_the_source_node():
    g = CartesianGrid(5, 5, 5, 10.0)
    u = analytic_on_grid(g, K, (20.0, 20.0, 20.0))
    assert u[2, 2, 2] == 0
    assert u[0, 2, 2] == pytest.approx(analytic_homogeneous(K, (20, 20, 20), [[0, 20, 20]])[0])
    assert distance_from(g, (0, 0, 0))[1, 1, 1] == pytest.approx(np.sqrt(300.0))


def _fields(rng, shape=(8, 8, 8)):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def test_error_metric_trivial_cases(rng):
    g = CartesianGrid(8, 8, 8, 1.0)
    cfg = ErrorMetricConfig((3.0, 3.0, 3.0), wavelength=1.5)
    u = _fields(rng)
    assert error_metric(u, u, g, cfg) == 0.0
    assert error_metric(u, 2 * u, g, cfg) == pytest.approx(2.0, rel=1e-14)
    assert error_metric(u, np.zeros_like(u), g, cfg) == pytest.approx(2.0, rel=1e-14)


def test_error_metric_against_hand_evaluation(rng):
    g = CartesianGrid(8, 8, 8, 0.5, origin=(1.0, 0.0, -1.0))
    src = (2.2, 1.4, 0.3)
    cfg = ErrorMetricConfig(src, wavelength=0.8, mute_wavelengths=1.0)
    ref, test = _fields(rng), _fields(rng)
    num_re = num_im = den_re = den_im = 0.0
    for i in range(8):
        for j in range(8):
            for k in range(8):
                x = np.array([1.0 + 0.5 * i, 0.5 * j, -1.0 + 0.5 * k])
                r = float(np.sqrt(np.sum((x - np.array(src)) ** 2)))
                w = r if r >= 0.8 else 0.0
                num_re += abs(w * (ref[i, j, k] - test[i, j, k]).real)
                num_im += abs(w * (ref[i, j, k] - test[i, j, k]).imag)
                den_re += abs(w * ref[i, j, k].real)
                den_im += abs(w * ref[i, j, k].imag)
    expect = num_re / den_re + num_im / den_im
    assert error_metric(ref, test, g, cfg) == pytest.approx(expect, rel=1e-12)


@given(st.floats(1e-3, 1e3))
def test_error_metric_invariant_under_positive_scaling(alpha):
    rng = np.random.default_rng(11)
    g = CartesianGrid(8, 8, 8, 1.0)
    cfg = ErrorMetricConfig((4.0, 4.0, 4.0), wavelength=2.0)
    u, v = _fields(rng), _fields(rng)
    assert error_metric(alpha * u, alpha * v, g, cfg) == pytest.approx(error_metric(u, v, g, cfg), rel=1e-12)


def test_error_metric_not_invariant_under_complex_scaling(rng):
    g = CartesianGrid(8, 8, 8, 1.0)
    cfg = ErrorMetricConfig((4.0, 4.0, 4.0), wavelength=2.0)
    u, v = _fields(rng), _fields(rng)
    # a quarter turn only swaps the two terms, so use a generic phase
    z = np.exp(0.7j)
    assert error_metric(z * u, z * v, g, cfg) != pytest.approx(error_metric(u, v, g, cfg), rel=1e-6)


def test_error_metric_rejects_degenerate_inputs(rng):
    g = CartesianGrid(8, 8, 8, 1.0)
    u = _fields(rng)
    with pytest.raises(InvalidArgument):
        error_metric(u, u, g, ErrorMetricConfig((4.0, 4.0, 4.0), wavelength=100.0))
    with pytest.raises(InvalidArgument):
        error_metric(np.zeros_like(u), u, g, ErrorMetricConfig((4.0, 4.0, 4.0), wavelength=1.0))
    with pytest.raises(InvalidArgument):
        ErrorMetricConfig((0, 0, 0), wavelength=1.0, mute_wavelengths=-1)


def test_metric_config_uses_local_wavelength():
    g = CartesianGrid(4, 4, 4, 10.0)
    c = np.full(g.shape, 1500.0)
    c[0] = 3000.0
    cfg = ErrorMetricConfig.for_model(VelocityModel(g, c), FrequencySpec(5.0), (0.0, 10.0, 10.0), 2.0)
    assert cfg.wavelength == 600.0 and cfg.mute_wavelengths == 2.0


def test_smooth_step_is_monotone_ramp():
    t = np.linspace(-0.5, 1.5, 201)
    s = smooth_step(t)
    assert s[0] == 0.0 and s[-1] == 1.0 and smooth_step(0.5) == pytest.approx(0.5)
    assert np.all(np.diff(s) >= 0)


def test_born_parameters_rule():
    k2 = np.array([1.0, 2.0, 3.0 - 0.1j])
    k0sq, eps = born_parameters(k2)
    assert k0sq == 2.0
    assert eps == pytest.approx(1.05 * abs(k2[2] - 2.0))
    assert born_parameters(np.full(3, 4.0))[1] == pytest.approx(4e-3)
    with pytest.raises(InvalidArgument):
        born_parameters(k2, eps=0.5)


def _small_layered(n=11, G=6.0):
    c = np.ones((n, n, n)) * 1000.0
    c[:, :, n // 2:] = 1400.0
    h = 1000.0 / 10.0 / G
    return VelocityModel(CartesianGrid(n, n, n, h), c), FrequencySpec(10.0)


def test_cbs_zero_source_returns_zero():
    model, freq = homogeneous(7)
    res = cbs_solve(model, freq, [PointSource((100.0,) * 3, amplitude=0.0)])
    assert res.iterations == [0] and res.converged == [True]
    assert not res.fields.any()


@pytest.mark.parametrize("green", ["periodic", "free-space"])
def test_cbs_homogeneous_backward_error_and_monotone(green):
    model, freq = homogeneous(9, G=5.0)
    src = PointSource((4 * model.grid.h,) * 3)
    res = cbs_solve(model, freq, [src], CbsConfig(green=green, boundary_wavelengths=1.0))
    assert res.converged == [True]
    assert res.final_backward_error[0] <= 1e-12
    h = np.array(res.history[0])
    assert np.all(np.diff(h[10:]) <= 1e-9 * h[10:-1])
    assert res.fields.shape == (9, 9, 9, 1)


def test_cbs_layered_medium_converges_monotonically():
    model, freq = _small_layered()
    src = PointSource((5 * model.grid.h,) * 3)
    res = cbs_solve(model, freq, [src], CbsConfig(boundary_wavelengths=1.0))
    h = np.array(res.history[0])
    assert res.converged == [True] and h[-1] <= 1e-12
    assert np.all(np.diff(h[10:]) <= 1e-9 * h[10:-1])
    assert res.eps >= np.abs(model.k2(freq) - res.k0_squared).max()


def test_cbs_periodic_field_is_close_to_analytic():
    model, freq = homogeneous(13, G=4.0)
    lam = 100.0
    src = PointSource((6 * model.grid.h,) * 3)
    res = cbs_solve(model, freq, [src], CbsConfig(refine=2, source_width=0.175 * lam))
    ua = analytic_on_grid(model.grid, freq.omega / 1000.0, src.position)
    m = distance_from(model.grid, src.position) >= lam
    rel = np.linalg.norm(res.column()[m] - ua[m]) / np.linalg.norm(ua[m])
    assert rel <= 2e-2


def test_cbs_multiple_sources_are_independent():
    model, freq = homogeneous(7, G=5.0)
    h = model.grid.h
    a, b = PointSource((2 * h, 3 * h, 3 * h)), PointSource((4 * h, 3 * h, 2 * h), amplitude=2.0)
    cfg = CbsConfig(boundary_wavelengths=1.0)
    both = cbs_solve(model, freq, [a, b], cfg)
    np.testing.assert_allclose(both.column(1), cbs_solve(model, freq, [b], cfg).column(0), rtol=1e-12)


def test_cbs_eps_below_bound_is_rejected():
    model, freq = _small_layered(7)
    with pytest.raises(InvalidArgument):
        cbs_solve(model, freq, [PointSource((300.0,) * 3)], CbsConfig(eps=1e-8, boundary_wavelengths=1.0))


def test_cbs_iteration_cap_raises_with_partial_result():
    model, freq = homogeneous(7, G=5.0)
    with pytest.raises(CbsConvergenceError) as info:
        cbs_solve(model, freq, [PointSource((3 * model.grid.h,) * 3)],
                  CbsConfig(max_iterations=3, boundary_wavelengths=1.0))
    assert info.value.result is not None and info.value.result.converged == [False]


def test_cbs_config_validation():
    for bad in (dict(green="spectral"), dict(tol=2.0), dict(refine=0), dict(source_width=0.0),
                dict(boundary_wavelengths=-1)):
        with pytest.raises(InvalidArgument):
            CbsConfig(**bad)


@pytest.mark.parametrize("dtype", ["complex64", "complex128"])
def test_field_round_trip(tmp_path, rng, dtype):
    g = CartesianGrid(4, 5, 6, 12.5, origin=(1.0, 2.0, 3.0))
    u = rng.standard_normal((4, 5, 6, 2)) + 1j * rng.standard_normal((4, 5, 6, 2))
    save_field(tmp_path / "u.json", tmp_path / "u.bin", u, g, dtype, meta={"frequency": 5.0})
    v, g2, header = load_field(tmp_path / "u.json", tmp_path / "u.bin")
    assert g2 == g and header["meta"]["frequency"] == 5.0
    assert v.shape == u.shape
    np.testing.assert_array_equal(v, u.astype(dtype))
    # x varies fastest on disk
    raw = np.fromfile(tmp_path / "u.bin", dtype=dtype)
    assert raw[1] == u[1, 0, 0, 0].astype(dtype)


def test_field_load_errors(tmp_path, rng):
    g = CartesianGrid(3, 3, 3, 1.0)
    save_field(tmp_path / "u.json", tmp_path / "u.bin", np.zeros(g.shape, complex), g)
    with open(tmp_path / "u.bin", "ab") as fh:
        fh.write(b"\0" * 16)
    with pytest.raises(ModelLoadError):
        load_field(tmp_path / "u.json", tmp_path / "u.bin")
    h = json.loads((tmp_path / "u.json").read_text())
    h["dtype"] = "float32"
    (tmp_path / "v.json").write_text(json.dumps(h))
    with pytest.raises(ModelLoadError):
        load_field(tmp_path / "v.json", tmp_path / "u.bin")
    with pytest.raises(InvalidArgument):
        save_field(tmp_path / "w.json", tmp_path / "w.bin", np.zeros(g.shape), g, "float64")


def test_slice_csv(tmp_path):
    g = CartesianGrid(3, 4, 5, 2.0)
    u = np.arange(60).reshape(3, 4, 5) * (1 + 2j)
    export_slice_csv(tmp_path / "s.csv", u, g)
    rows = list(csv.reader((tmp_path / "s.csv").open()))
    assert rows[0] == ["x", "y", "real", "imag"]
    assert len(rows) == 1 + 12
    x, y, re, im = map(float, rows[5])
    i, j = int(x / 2), int(y / 2)
    assert re == u[i, j, 2].real and im == u[i, j, 2].imag
    with pytest.raises(InvalidArgument):
        export_slice_csv(tmp_path / "t.csv", u, g, axis=0, index=7)
