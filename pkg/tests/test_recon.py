import math

import numpy as np
import pytest

from helixct.errors import ConfigError, StageContractError
from helixct.geometry import ScannerGeometry, row_offsets
from helixct.phantom import Ellipsoid, Phantom, forward_project, rasterize_slice
from helixct.rebinning import build_rebin_plan, direct_rebin
from helixct.recon import (FilterKernel, cosine_row_weights, filter_projection,
                           reconstruct_sequence, reconstruct_slice,
                           shepp_logan_kernel, uniform_row_weights, z_weight)

MU_W = 0.02


@pytest.fixture
def recon_geom():
    # wide enough fan that a 64 px / 2 mm image is fully inside support
    return ScannerGeometry(focal_length_mm=300.0, detector_rows=6,
                           detector_cols=128, channel_angle_step_rad=0.005,
                           row_spacing_iso_mm=1.5, views_per_rotation=128,
                           table_feed_mm=7.2, slice_thickness_mm=3.0,
                           z_start_mm=-18.0)


def water_cylinder(radius=35.0):
    body = Ellipsoid((0.0, 0.0, 0.0), (radius, radius, 1e6), 0.0, MU_W)
    return Phantom((body,), mu_water_per_mm=MU_W)


def make_filtered(geom, phantom, views=420, kernel_length=193, method="fft"):
    stream = forward_project(phantom, geom, views).stack()
    plan = build_rebin_plan(geom, views)
    sino = direct_rebin(stream, plan)
    kernel = shepp_logan_kernel(kernel_length, sino.distance_step)
    return filter_projection(sino, kernel, method=method), sino


def test_kernel_center_tap():
    k = shepp_logan_kernel(9, 2.0)
    assert k.taps[4] == pytest.approx(2.0 / (math.pi ** 2 * 4.0), rel=1e-12)


def test_kernel_symmetry():
    k = shepp_logan_kernel(257, 1.3)
    np.testing.assert_array_equal(k.taps, k.taps[::-1])


def test_kernel_sum_telescopes():
    k = shepp_logan_kernel(1025, 1.0)
    assert abs(k.taps.sum()) <= 1e-3


def test_kernel_rejects_even_length():
    with pytest.raises(ConfigError):
        shepp_logan_kernel(12, 1.0)
    with pytest.raises(ConfigError):
        FilterKernel(taps=np.array([1.0, 2.0]), sample_spacing_mm=1.0)


def _sino_from_array(geom, data, views):
    plan = build_rebin_plan(geom, views)
    return direct_rebin(data, plan)


def test_filter_impulse_returns_kernel(recon_geom, rng):
    views = 60
    sino = _sino_from_array(
        recon_geom, np.zeros((views, recon_geom.detector_rows,
                              recon_geom.detector_cols)), views)
    mid = sino.data.shape[2] // 2
    sino.data[:, :, :] = 0.0
    sino.data[5, 2, mid] = 1.0
    kernel = shepp_logan_kernel(31, sino.distance_step)
    out = filter_projection(sino, kernel)
    got = out.data[5, 2, mid - 15:mid + 16]
    np.testing.assert_allclose(got, kernel.taps * sino.distance_step,
                               rtol=0, atol=1e-12)


def test_filter_constant_row_is_small():
    # interior samples of a wide constant row see the full kernel, whose sum
    # telescopes to ~2e-4 at the default length
    from helixct.rebinning import RebinnedSinogram
    n = 1400
    sino = RebinnedSinogram(data=np.ones((2, 1, n)),
                            angles=np.array([0.0, 0.1]),
                            distances=np.arange(n, dtype=float),
                            support=np.ones((2, n), dtype=bool),
                            z_central=np.zeros((2, 1)), geom=None)
    kernel = shepp_logan_kernel(1025, 1.0)
    out = filter_projection(sino, kernel)
    interior = out.data[:, :, 512:n - 512]
    assert np.all(np.abs(interior) <= 1e-3)


def test_filter_linearity(recon_geom, rng):
    views = 50
    shape = (views, recon_geom.detector_rows, recon_geom.detector_cols)
    x = _sino_from_array(recon_geom, rng.standard_normal(shape), views)
    y = _sino_from_array(recon_geom, rng.standard_normal(shape), views)
    kernel = shepp_logan_kernel(65, x.distance_step)
    a, b = 1.3, -0.4
    combo = _sino_from_array(recon_geom, np.zeros(shape), views)
    combo.data = a * x.data + b * y.data
    lhs = filter_projection(combo, kernel).data
    rhs = a * filter_projection(x, kernel).data + b * filter_projection(y, kernel).data
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12)


def test_filter_direct_and_fft_agree(recon_geom, rng):
    views = 48
    shape = (views, recon_geom.detector_rows, recon_geom.detector_cols)
    sino = _sino_from_array(recon_geom, rng.standard_normal(shape), views)
    kernel = shepp_logan_kernel(129, sino.distance_step)
    a = filter_projection(sino, kernel, method="fft").data
    b = filter_projection(sino, kernel, method="direct").data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-10)


def test_filter_spacing_mismatch(recon_geom, rng):
    views = 48
    shape = (views, recon_geom.detector_rows, recon_geom.detector_cols)
    sino = _sino_from_array(recon_geom, rng.standard_normal(shape), views)
    with pytest.raises(StageContractError):
        filter_projection(sino, shepp_logan_kernel(65, sino.distance_step * 2))


def test_z_weight_triangle():
    assert z_weight(0.0, 3.0) == 1.0
    assert z_weight(3.0, 3.0) == 0.0
    assert z_weight(1.5, 3.0) == 0.5
    assert z_weight(-1.5, 3.0, row_weight=0.5) == 0.25
    assert z_weight(3.01, 3.0) == 0.0
    assert np.all(z_weight(np.array([4.0, 9.0]), 3.0) == 0.0)


def test_row_weight_builders():
    assert np.all(uniform_row_weights(5) == 1.0)
    w = cosine_row_weights(6)
    assert np.all(w > 0) and np.all(w <= 1.0)
    np.testing.assert_allclose(w, w[::-1], atol=1e-15)


def test_zero_sinogram_reconstructs_air(recon_geom):
    views = 420
    shape = (views, recon_geom.detector_rows, recon_geom.detector_cols)
    filt, _ = _filtered_zeros(recon_geom, shape, views)
    img = reconstruct_slice(filt, recon_geom, 0.0, 32, 2.0, MU_W)
    assert img.n_sentinel == 0
    np.testing.assert_allclose(img.data, -1000.0, rtol=0, atol=1e-9)


def _filtered_zeros(geom, shape, views):
    sino = _sino_from_array(geom, np.zeros(shape), views)
    kernel = shepp_logan_kernel(65, sino.distance_step)
    return filter_projection(sino, kernel), sino


def test_water_cylinder_center_roi(recon_geom):
    filt, _ = make_filtered(recon_geom, water_cylinder())
    img = reconstruct_slice(filt, recon_geom, 0.0, 64, 2.0, MU_W)
    truth = rasterize_slice(water_cylinder(), 0.0, 64, 2.0)
    assert img.n_sentinel == 0
    roi = np.s_[28:36, 28:36]
    assert abs(img.data[roi].mean() - truth.data[roi].mean()) < 10.0


def test_recon_linearity_end_to_end(recon_geom, rng):
    # linear map check runs on the offset-free calibration so that sums of
    # sinograms correspond to sums of images
    views = 300
    phantom_a = water_cylinder(30.0)
    phantom_b = Phantom((Ellipsoid((12.0, -8.0, 0.0), (10.0, 14.0, 1e6),
                                   0.4, 0.01),), mu_water_per_mm=MU_W)
    sa = forward_project(phantom_a, recon_geom, views).stack()
    sb = forward_project(phantom_b, recon_geom, views).stack()
    plan = build_rebin_plan(recon_geom, views)
    kernel = shepp_logan_kernel(129, build_rebin_plan(recon_geom, views)
                                .grid.distance_step)

    def recon(stack):
        sino = direct_rebin(stack, plan)
        filt = filter_projection(sino, kernel)
        return reconstruct_slice(filt, recon_geom, 0.0, 48, 2.0, MU_W,
                                 residual=True).data

    lhs = recon(sa + sb)
    rhs = recon(sa) + recon(sb)
    scale = np.abs(lhs).max()
    assert np.max(np.abs(lhs - rhs)) <= 1e-5 * scale


def test_shared_projections_between_adjacent_slices(recon_geom):
    # slices closer than the slice thickness share contributing rays
    views = 420
    shape = (views, recon_geom.detector_rows, recon_geom.detector_cols)
    _, sino = _filtered_zeros(recon_geom, shape, views)
    d = recon_geom.slice_thickness_mm
    for z in (0.0, 1.0):
        sets = []
        for zq in (z, z + 0.5 * d):
            h = np.maximum(0.0, 1.0 - np.abs(sino.z_central - zq) / d)
            sets.append({(a, r) for a, r in zip(*np.nonzero(h > 0))})
        assert sets[0] & sets[1]


def test_coverage_flag_and_sentinels(recon_geom):
    views = 120
    shape = (views, recon_geom.detector_rows, recon_geom.detector_cols)
    filt, _ = _filtered_zeros(recon_geom, shape, views)
    img = reconstruct_slice(filt, recon_geom, 500.0, 16, 2.0, MU_W)
    assert not img.coverage_ok
    assert img.n_sentinel == 16 * 16
    assert np.all(img.data == -32768.0)


def test_views_per_rotation_convergence(recon_geom):
    base = recon_geom.to_dict()
    means = []
    for vpr, feed, views in ((128, 7.2, 420), (256, 7.2, 840)):
        g = ScannerGeometry(**{**base, "views_per_rotation": vpr,
                               "table_feed_mm": feed})
        filt, _ = make_filtered(g, water_cylinder(), views=views)
        img = reconstruct_slice(filt, g, 0.0, 48, 2.0, MU_W)
        means.append(img.data[20:28, 20:28].mean())
    assert abs(means[1] - means[0]) < 2.0


def test_reconstruct_sequence_grids(recon_geom):
    views = 420
    shape = (views, recon_geom.detector_rows, recon_geom.detector_cols)
    filt, _ = _filtered_zeros(recon_geom, shape, views)

    vol = reconstruct_sequence(filt, recon_geom, -2.0, 3, 2.0, 0, 16, 2.0, MU_W)
    np.testing.assert_allclose(vol.z_positions(), [-2.0, 0.0, 2.0], atol=1e-12)
    assert vol.target_indices() == [0, 1, 2]
    assert vol.refinable_target_indices() == [0, 1, 2]

    vol = reconstruct_sequence(filt, recon_geom, -2.0, 3, 2.0, 1, 16, 2.0, MU_W)
    np.testing.assert_allclose(vol.z_positions(),
                               [-2.0, -1.0, 0.0, 1.0, 2.0], atol=1e-12)
    # 1-based odd indices are the requested-grid targets
    assert [k + 1 for k in vol.target_indices()] == [1, 3, 5]
    assert vol.refinable_target_indices() == [2]

    vol = reconstruct_sequence(filt, recon_geom, 0.0, 3, 3.0, 2, 16, 2.0, MU_W)
    assert len(vol) == 7


def test_sequence_invariants(recon_geom):
    views = 420
    shape = (views, recon_geom.detector_rows, recon_geom.detector_cols)
    filt, _ = _filtered_zeros(recon_geom, shape, views)
    from helixct.recon import SliceImage, VolumeSequence
    a = SliceImage(np.zeros((4, 4)), z_mm=0.0, pixel_mm=1.0)
    b = SliceImage(np.zeros((4, 4)), z_mm=0.0, pixel_mm=1.0)
    with pytest.raises(StageContractError):
        VolumeSequence(slices=[a, b], intermediate_factor=0)
