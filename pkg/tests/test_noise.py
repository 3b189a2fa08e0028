import math

import numpy as np
import pytest

from helixct.errors import ConfigError, StageContractError
from helixct.geometry import ScannerGeometry
from helixct.noise import (DoseProfile, counts_to_line_integral, frame_rng,
                           inject_noise, make_dose_profile, noise_prior,
                           simulate_low_dose)


def test_counts_identity():
    assert counts_to_line_integral(1e5, 1e5) == 0.0


def test_counts_one_decade():
    assert counts_to_line_integral(1e5 / math.e, 1e5) == pytest.approx(1.0, abs=1e-12)


def test_counts_half():
    # direct evaluation of the log transform
    assert counts_to_line_integral(5e4, 1e5) == pytest.approx(math.log(2.0),
                                                              abs=1e-12)


def test_counts_clamp_and_stats():
    stats = {}
    p = counts_to_line_integral(np.array([-3.0, 0.0, 10.0]), 1e4, stats=stats)
    assert stats["clamped"] == 2
    assert p[0] == p[1] == pytest.approx(math.log(1e4))
    assert p[2] == pytest.approx(math.log(1e3))


def test_counts_rejects_bad_n0():
    with pytest.raises(StageContractError):
        counts_to_line_integral(10.0, 0.0)


def test_counts_round_trip():
    n0 = 1e6
    p = np.linspace(0.0, 10.0, 101)
    back = counts_to_line_integral(n0 * np.exp(-p), n0)
    np.testing.assert_allclose(back, p, rtol=0, atol=1e-12)


def test_inject_noise_vanishing_limit():
    rng = np.random.default_rng(3)
    p_c = np.linspace(0.0, 1.0, 64 * 64).reshape(64, 64)
    p_n = inject_noise(p_c, np.full_like(p_c, 1e12), rng)
    assert np.max(np.abs(p_n - p_c)) < 1e-5


def test_inject_noise_std():
    rng = np.random.default_rng(4)
    p_c = np.zeros(100000)
    p_n = inject_noise(p_c, np.full_like(p_c, 1e4), rng)
    assert p_n.std() == pytest.approx(0.01, rel=0.02)


def test_inject_noise_deterministic():
    p_c = np.linspace(0, 2, 1000)
    n0 = np.full_like(p_c, 1e4)
    a = inject_noise(p_c, n0, np.random.default_rng(77))
    b = inject_noise(p_c, n0, np.random.default_rng(77))
    np.testing.assert_array_equal(a, b)


def test_low_dose_equal_doses_is_identity():
    rng = np.random.default_rng(5)
    p_f = np.linspace(0, 2, 512)
    n0 = np.full_like(p_f, 1e5)
    np.testing.assert_array_equal(simulate_low_dose(p_f, n0, n0, rng), p_f)


def test_low_dose_added_std():
    rng = np.random.default_rng(6)
    p_f = np.zeros(100000)
    n_f0 = np.full_like(p_f, 1e5)
    p_l = simulate_low_dose(p_f, n_f0, 0.25 * n_f0, rng)
    # added std = sqrt(1/2.5e4 - 1/1e5) = sqrt(3e-5)
    assert (p_l - p_f).std() == pytest.approx(math.sqrt(3e-5), rel=0.02)


def test_low_dose_reduces_to_injection_when_full_dose_clean():
    rng = np.random.default_rng(7)
    p = np.zeros(100000)
    n_l0 = np.full_like(p, 2.5e3)
    lowered = simulate_low_dose(p, np.full_like(p, 1e12), n_l0, rng)
    injected = inject_noise(p, n_l0, np.random.default_rng(8))
    assert lowered.var() == pytest.approx(injected.var(), rel=0.02)


def test_low_dose_rejects_dose_increase():
    rng = np.random.default_rng(9)
    p = np.zeros(4)
    with pytest.raises(StageContractError):
        simulate_low_dose(p, np.full(4, 1e4), np.full(4, 2e4), rng)


@pytest.mark.parametrize("frac", [0.17, 0.25, 0.5, 0.8])
def test_low_dose_variance_law(frac):
    # empirical variance of the added noise matches the dose-pair prediction
    rng = np.random.default_rng(int(frac * 1000))
    p_f = np.full(100000, 0.8)
    n_f0 = np.full_like(p_f, 1e5)
    n_l0 = frac * n_f0
    p_l = simulate_low_dose(p_f, n_f0, n_l0, rng)
    predicted = (1.0 / n_l0[0] - 1.0 / n_f0[0]) * math.exp(p_f[0])
    assert (p_l - p_f).var() == pytest.approx(predicted, rel=0.05)


def test_prior_zero_at_equal_dose():
    p = np.linspace(0, 2, 100)
    n0 = np.full_like(p, 1e5)
    prior = noise_prior(p, n0, n0)
    assert np.all(prior.phi == 0.0)


def test_prior_value():
    phi = noise_prior(np.zeros(1), np.full(1, 2.5e4), np.full(1, 1e5)).phi
    assert phi[0] == pytest.approx(math.sqrt(3e-5), rel=1e-12)


def test_prior_monotone_in_signal():
    p = np.linspace(0, 3, 50)
    phi = noise_prior(p, np.full_like(p, 2.5e4), np.full_like(p, 1e5)).phi
    assert np.all(np.diff(phi) > 0)


def test_prior_squared_matches_variance_prediction():
    # algebraic identity when the prior is evaluated at the full-dose signal
    p_f = np.linspace(0, 2.5, 200)
    n_f0 = np.full_like(p_f, 1e5)
    n_l0 = 0.17 * n_f0
    phi = noise_prior(p_f, n_l0, n_f0).phi
    predicted = (1.0 / n_l0 - 1.0 / n_f0) * np.exp(p_f)
    np.testing.assert_allclose(phi ** 2, predicted, rtol=0, atol=1e-12)


def test_noise_whiteness_along_channels():
    rng = np.random.default_rng(11)
    p_c = np.zeros(100001)
    p_n = inject_noise(p_c, np.full_like(p_c, 1e4), rng)
    d = p_n - p_c
    r1 = np.corrcoef(d[:-1], d[1:])[0, 1]
    assert abs(r1) < 0.01


def test_frame_rng_order_independent():
    a = frame_rng(123, 5).standard_normal(10)
    _ = frame_rng(123, 9).standard_normal(3)
    b = frame_rng(123, 5).standard_normal(10)
    np.testing.assert_array_equal(a, b)


@pytest.fixture
def odd_geom():
    return ScannerGeometry(focal_length_mm=300.0, detector_rows=4,
                           detector_cols=129, channel_angle_step_rad=0.004,
                           row_spacing_iso_mm=1.0, views_per_rotation=64,
                           table_feed_mm=4.0, slice_thickness_mm=2.0)


def test_dose_profile_uniform(odd_geom):
    prof = make_dose_profile(odd_geom, "uniform", num_views=10, base_n0=5e4)
    n0 = prof.n0_stack()
    assert n0.shape == (10, 4, 129)
    assert np.all(n0 == 5e4)


def test_dose_profile_bowtie(odd_geom):
    prof = make_dose_profile(odd_geom, "bowtie", num_views=4, bowtie_exponent=2.0)
    pc = prof.per_channel_scale
    assert pc[0, 64] == pytest.approx(1.0, abs=1e-15)
    gmax = odd_geom.max_fan_angle_rad
    assert pc[0, 0] == pytest.approx(math.cos(gmax) ** 2, rel=1e-12)
    assert pc[0, -1] == pytest.approx(math.cos(gmax) ** 2, rel=1e-12)


def test_dose_profile_aec_range_and_period(odd_geom):
    views = 3 * odd_geom.views_per_rotation
    prof = make_dose_profile(odd_geom, "aec_sine", num_views=views,
                             aec_min=0.5, aec_max=1.0,
                             aec_period_mm=odd_geom.table_feed_mm)
    pv = prof.per_view_scale
    assert pv.min() >= 0.5 - 1e-12
    assert pv.max() <= 1.0 + 1e-12
    assert pv.max() == pytest.approx(1.0, abs=1e-6)
    # one period per rotation of table travel
    np.testing.assert_allclose(pv[: views - odd_geom.views_per_rotation],
                               pv[odd_geom.views_per_rotation:], atol=1e-12)


def test_dose_profile_rejects_bad_params(odd_geom):
    with pytest.raises(ConfigError):
        make_dose_profile(odd_geom, "aec_sine", 10, aec_min=0.0)
    with pytest.raises(ConfigError):
        make_dose_profile(odd_geom, "nope", 10)
    with pytest.raises(ConfigError):
        DoseProfile(np.ones(3), np.ones((2, 2)), base_n0=-1.0)


def test_dose_profile_scaled():
    prof = DoseProfile(np.ones(3), np.ones((2, 2)), base_n0=1e5)
    assert prof.scaled(0.17).base_n0 == pytest.approx(1.7e4)
    with pytest.raises(ConfigError):
        prof.scaled(1.5)
