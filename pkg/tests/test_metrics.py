import math

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from helixct.errors import ConfigError, StageContractError
from helixct.metrics import (FULL_RANGE, DisplayWindow, MetricsReport,
                             apply_window, ct_number, mse, nps, ssim,
                             tile_rois, ttf)
from helixct.phantom import Ellipsoid, Phantom, rasterize_slice
from helixct.recon import SliceImage
from oracles import oracle_ssim

WIN = DisplayWindow(40.0, 300.0)


def test_mse_identity(rng):
    a = rng.standard_normal((32, 32)) * 100
    assert mse(a, a, WIN) == 0.0
    assert mse(a, a) == 0.0


def test_mse_one_display_unit():
    # one display unit = width/255 HU inside the window
    a = np.full((16, 16), 40.0)
    b = a + 300.0 / 255.0
    assert mse(a, b, WIN) == pytest.approx(1.0, rel=1e-9)


def test_mse_matches_direct_sum(rng):
    a = rng.standard_normal((24, 24)) * 50
    b = rng.standard_normal((24, 24)) * 50
    total = 0.0
    for i in range(24):
        for j in range(24):
            da = apply_window(a[i, j], WIN)
            db = apply_window(b[i, j], WIN)
            total += (da - db) ** 2
    assert mse(a, b, WIN) == pytest.approx(total / (24 * 24), rel=1e-9)


def test_mse_symmetry_and_shape_check(rng):
    a = rng.standard_normal((16, 16))
    b = rng.standard_normal((16, 16))
    assert mse(a, b, WIN) == mse(b, a, WIN)
    with pytest.raises(StageContractError):
        mse(a, rng.standard_normal((8, 8)), WIN)


def test_ssim_self_is_one(rng):
    a = rng.standard_normal((32, 32)) * 60
    assert ssim(a, a, WIN) == pytest.approx(1.0, abs=1e-12)


def test_ssim_anticorrelated_negative(rng):
    # bimodal display-range image against its inversion
    ident = DisplayWindow(127.5, 255.0)
    a = np.where(rng.standard_normal((48, 48)) > 0, 255.0, 0.0)
    b = 255.0 - a
    assert ssim(a, b, ident) < 0.0


def test_ssim_matches_reference_implementation(rng):
    a = rng.standard_normal((64, 64)) * 80 + 10
    b = a + rng.standard_normal((64, 64)) * 40
    da = apply_window(a, WIN)
    db = apply_window(b, WIN)
    ref = oracle_ssim(da, db)
    assert ssim(a, b, WIN) == pytest.approx(ref, abs=1e-6)


def test_ssim_symmetry_and_window_guard(rng):
    a = rng.standard_normal((32, 32)) * 50
    b = rng.standard_normal((32, 32)) * 50
    assert ssim(a, b, WIN) == pytest.approx(ssim(b, a, WIN), abs=1e-12)
    with pytest.raises(StageContractError):
        ssim(a[:8, :8], b[:8, :8], WIN)


def test_full_range_window_label():
    assert FULL_RANGE.label == "full-range"
    lo = FULL_RANGE.level_hu - 0.5 * FULL_RANGE.width_hu
    hi = FULL_RANGE.level_hu + 0.5 * FULL_RANGE.width_hu
    assert (lo, hi) == (-1024.0, 3071.0)


def test_window_invariants():
    with pytest.raises(ConfigError):
        DisplayWindow(0.0, 0.0)


def test_nps_white_noise_flat(rng):
    sigma = 12.0
    rois = [rng.standard_normal((32, 32)) * sigma for _ in range(80)]
    res = nps(rois, pixel_mm=1.0)
    # ignore the DC bin (detrending drains it) and average the rest
    level = res.power[1:].mean()
    assert np.all(np.abs(res.power[2:] - level) <= 0.10 * level)


def test_nps_parseval(rng):
    rois = [rng.standard_normal((32, 32)) * 7.0 for _ in range(16)]
    res = nps(rois, pixel_mm=0.8)
    nx = 32
    df = 1.0 / (nx * 0.8)
    integral = res.nps2d.sum() * df * df
    variances = []
    ys, xs = np.mgrid[0:nx, 0:nx]
    design = np.stack([np.ones(nx * nx), xs.ravel() - xs.mean(),
                       ys.ravel() - ys.mean(),
                       ((xs - xs.mean()) ** 2).ravel(),
                       ((xs - xs.mean()) * (ys - ys.mean())).ravel(),
                       ((ys - ys.mean()) ** 2).ravel()], axis=1)
    pinv = np.linalg.pinv(design)
    for roi in rois:
        fit = (design @ (pinv @ roi.ravel())).reshape(roi.shape)
        variances.append(np.var(roi - fit))
    assert integral == pytest.approx(np.mean(variances), rel=0.05)


def test_nps_zero_noise(rng):
    rois = [np.zeros((16, 16)) for _ in range(4)]
    res = nps(rois, pixel_mm=1.0)
    assert np.all(res.power == 0.0)


def test_nps_roi_order_invariance(rng):
    rois = [rng.standard_normal((16, 16)) for _ in range(10)]
    a = nps(rois, 1.0)
    b = nps(rois[::-1], 1.0)
    np.testing.assert_allclose(a.power, b.power, atol=1e-12)


def test_nps_flags_structured_roi(rng):
    flat = [rng.standard_normal((16, 16)) for _ in range(6)]
    ramp = 50.0 * np.linspace(0, 1, 16)[None, :].repeat(16, axis=0)
    res = nps(flat + [ramp + rng.standard_normal((16, 16))], 1.0)
    assert res.n_flagged == 1
    assert res.n_rois == 6


def test_nps_needs_enough_rois(rng):
    with pytest.raises(StageContractError):
        nps([rng.standard_normal((16, 16))], 1.0)
    with pytest.raises(StageContractError):
        nps([rng.standard_normal((16, 8)), rng.standard_normal((16, 8))], 1.0)


def test_tile_rois_inside_circle():
    img = np.zeros((64, 64))
    rois = tile_rois([img], 16, (31.5, 31.5), 24.0)
    assert len(rois) >= 4
    for roi in rois:
        assert roi.shape == (16, 16)


def disk_image(size, pixel_mm, radius_mm, contrast, center=(0.0, 0.0)):
    half = 0.5 * (size - 1)
    x = (np.arange(size) - half) * pixel_mm
    xx, yy = np.meshgrid(x, x)
    rr = np.hypot(xx - center[0], yy - center[1])
    return np.where(rr <= radius_mm, contrast, 0.0)


def test_ttf_normalized_at_zero(rng):
    img = disk_image(128, 1.0, 24.0, 200.0)
    res = ttf(img, 1.0, (0.0, 0.0), 24.0, 200.0)
    assert res.modulation[0] == 1.0


def test_ttf_sharp_edge_stays_high(rng):
    img = disk_image(160, 1.0, 30.0, 300.0)
    res = ttf(img, 1.0, (0.4, -0.6), 30.0, 300.0)
    nyquist_half = 0.25  # half of 1/(2*pixel)
    sel = res.freq_per_mm <= nyquist_half
    assert np.min(res.modulation[sel]) >= 0.9


def test_ttf_gaussian_blur_closed_form(rng):
    pixel = 1.0
    sigma_px = 2.0
    img = gaussian_filter(disk_image(192, pixel, 36.0, 250.0), sigma_px)
    res = ttf(img, pixel, (0.0, 0.0), 36.0, 250.0)
    sigma_mm = sigma_px * pixel
    expected = np.exp(-2.0 * math.pi ** 2 * sigma_mm ** 2 * res.freq_per_mm ** 2)
    sel = expected >= 0.10
    np.testing.assert_allclose(res.modulation[sel], expected[sel],
                               rtol=0.05, atol=0.01)


def test_ttf_f50_lookup(rng):
    pixel = 1.0
    img = gaussian_filter(disk_image(192, pixel, 36.0, 250.0), 2.0)
    res = ttf(img, pixel, (0.0, 0.0), 36.0, 250.0)
    f50 = res.freq_at(0.5)
    # closed form: f50 = sqrt(ln 2 / 2) / (pi * sigma)
    expected = math.sqrt(math.log(2.0) / 2.0) / (math.pi * 2.0)
    assert f50 == pytest.approx(expected, rel=0.05)


def test_ttf_negative_contrast(rng):
    img = disk_image(128, 1.0, 20.0, -400.0)
    res = ttf(img, 1.0, (0.0, 0.0), 20.0, -400.0)
    assert res.modulation[0] == 1.0
    assert np.min(res.modulation[res.freq_per_mm <= 0.2]) > 0.8


def test_ttf_low_contrast_rejected(rng):
    img = disk_image(64, 1.0, 10.0, 10.0)
    with pytest.raises(StageContractError):
        ttf(img, 1.0, (0.0, 0.0), 10.0, 10.0)


def test_ttf_center_divergence_rejected(rng):
    img = np.zeros((96, 96))
    with pytest.raises(StageContractError):
        ttf(img, 1.0, (10.0, 10.0), 8.0, 300.0)


def test_ct_number_constant_region():
    img = SliceImage(np.full((32, 32), 120.0), z_mm=0.0, pixel_mm=1.0)
    mean, std = ct_number(img, (0.0, 0.0), 8.0)
    assert (mean, std) == (120.0, 0.0)


def test_ct_number_rasterized_air():
    ph = Phantom((), background_mu_per_mm=0.0, mu_water_per_mm=0.02)
    img = rasterize_slice(ph, 0.0, 64, 1.0)
    mean, std = ct_number(img, (5.0, -3.0), 10.0)
    assert (mean, std) == (-1000.0, 0.0)


def test_ct_number_empty_roi():
    img = SliceImage(np.zeros((16, 16)), z_mm=0.0, pixel_mm=1.0)
    with pytest.raises(StageContractError):
        ct_number(img, (100.0, 100.0), 0.5)


def test_report_round_trip(tmp_path):
    rep = MetricsReport(meta={"mode": "mpd+mir", "dose_fraction": "0.25"})
    rep.add_scalar("mse", "mean", 123.456, x="display")
    rep.add_curve("nps", "refined", [0.0, 0.1, 0.2], [5.0, 4.0, 3.0])
    path = tmp_path / "report.csv"
    rep.write_csv(path)
    again = MetricsReport.read_csv(path)
    assert again.meta["mode"] == "mpd+mir"
    assert again.scalar("mse", "mean", "display") == pytest.approx(123.456)
    xs, ys = again.curve("nps", "refined")
    np.testing.assert_allclose(xs, [0.0, 0.1, 0.2])
    np.testing.assert_allclose(ys, [5.0, 4.0, 3.0])
    again.write_csv(tmp_path / "report2.csv")
    assert (tmp_path / "report.csv").read_bytes() == \
        (tmp_path / "report2.csv").read_bytes()


def test_report_schema_mismatch(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("section,key,value\nmse,mean,1.0\n")
    with pytest.raises(ConfigError) as err:
        MetricsReport.read_csv(path)
    assert "x" in str(err.value)
