"""End-to-end orchestration: acquisition planning, simulation, the two-stage
denoising run, training data assembly, and metric evaluation.

Stage order in a run: integer_slice -> projection denoiser -> weighted_sum
-> filter -> reconstruct (targets + intermediates) -> image refiner ->
metrics.  All randomness flows from the single config seed through labeled
per-frame substreams.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import metrics as iq
from .config import config_hash, geometry_from_config
from .errors import ConfigError, StageContractError
from .geometry import row_offsets
from .nn import (MIRModel, MPDModel, TrainConfig, apply_mpd_to_stream,
                 baseline_denoise, gaussian_window_weights, sliding_window_apply,
                 train)
from .nn import autodiff as ad
from .noise import frame_rng, inject_noise, make_dose_profile, noise_prior, \
    simulate_low_dose
from .phantom import (forward_project, iq_insert_centers, iq_phantom,
                      load_phantom, random_phantom)
from .rebinning import build_rebin_plan, integer_slice, weighted_sum
from .recon import (cosine_row_weights, filter_projection, reconstruct_sequence,
                    reconstruct_slice, shepp_logan_kernel, uniform_row_weights)

__all__ = ["AcquisitionPlan", "plan_acquisition", "phantom_from_config",
           "SimulationData", "simulate", "RunResult", "run_pipeline",
           "evaluate_run", "train_mpd", "train_mir"]

# rng substream labels; fixed so reruns agree
RNG_FULL_DOSE = 1
RNG_LOW_DOSE_BASE = 100


@dataclass
class AcquisitionPlan:
    """Derived quantities tying the recon request to the helical scan."""

    geom: object
    num_views: int
    recon_z_start_mm: float
    recon_num_targets: int
    fine_spacing_mm: float
    requested_z_mm: list
    intermediate_factor: int
    window_half_width: int


def plan_acquisition(cfg):
    """Choose z_start and the view count so every requested slice is covered.

    Margins include the triangular-weight support, the detector row span,
    the fan-angle z slew, the rebinning neighborhoods, and the denoiser
    window trim at both stream ends.
    """
    recon = cfg["recon"]
    f = int(recon["intermediate_factor"])
    f_mpd = int(cfg["denoiser"]["window_half_width"])
    n_req = int(recon["num_slices"])
    s = float(recon["slice_spacing_mm"])
    geom0 = geometry_from_config(cfg, z_start_mm=0.0)
    ext = 1 if f >= 1 else 0
    z_req_start = recon["z_center_mm"] - 0.5 * (n_req - 1) * s
    recon_z_start = z_req_start - ext * s
    n_recon = n_req + 2 * ext
    fine = s / (f + 1)
    fine_count = (n_recon - 1) * (f + 1) + 1
    z_lo = recon_z_start
    z_hi = recon_z_start + (fine_count - 1) * fine

    feed = geom0.table_feed_mm
    vpr = geom0.views_per_rotation
    d_thick = geom0.slice_thickness_mm
    off_max = float(np.abs(row_offsets(geom0)).max())
    slew = feed * geom0.max_fan_angle_rad / (2.0 * math.pi)
    zc_lo = z_lo - d_thick - off_max - slew
    zc_hi = z_hi + d_thick + off_max + slew

    dtheta = 2.0 * math.pi / vpr
    m0 = int(math.ceil(geom0.max_fan_angle_rad / dtheta)) + 1
    max_m = int(math.floor((m0 * dtheta + geom0.max_fan_angle_rad) / dtheta))
    margin_views = m0 + f_mpd + 4
    z_start = zc_lo - margin_views * feed / vpr
    geom = geometry_from_config(cfg, z_start_mm=z_start)
    # last usable target angle must reach zc_hi plus the window trim
    theta_hi = (zc_hi - z_start) * 2.0 * math.pi / feed + (f_mpd + 4) * dtheta
    num_angles = int(math.ceil(theta_hi / dtheta)) - m0 + 1
    num_views = num_angles + 1 + max_m
    requested = [z_req_start + i * s for i in range(n_req)]
    return AcquisitionPlan(geom=geom, num_views=num_views,
                           recon_z_start_mm=recon_z_start,
                           recon_num_targets=n_recon, fine_spacing_mm=fine,
                           requested_z_mm=requested, intermediate_factor=f,
                           window_half_width=f_mpd)


def phantom_from_config(cfg, rng=None):
    ph = cfg["phantom"]
    if ph["kind"] == "file":
        return load_phantom(ph["path"])
    if ph["kind"] == "iq":
        return iq_phantom(body_radius_mm=ph["body_radius_mm"],
                          insert_radius_mm=ph["insert_radius_mm"],
                          insert_ring_mm=ph["insert_ring_mm"],
                          mu_water_per_mm=ph["mu_water_per_mm"])
    if ph["kind"] == "uniform":
        full = iq_phantom(body_radius_mm=ph["body_radius_mm"],
                          mu_water_per_mm=ph["mu_water_per_mm"])
        from .phantom import Phantom
        return Phantom(full.ellipsoids[:1], background_mu_per_mm=0.0,
                       mu_water_per_mm=ph["mu_water_per_mm"])
    if ph["kind"] == "random":
        if rng is None:
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=cfg["seed"],
                                       spawn_key=(7, ph["random_seed_offset"])))
        return random_phantom(rng, body_radius_mm=ph["body_radius_mm"],
                              mu_water_per_mm=ph["mu_water_per_mm"])
    raise ConfigError(f"unknown phantom kind {ph['kind']!r}")


@dataclass
class SimulationData:
    """In-memory product of the simulation stage."""

    plan: AcquisitionPlan
    phantom: object
    clean: np.ndarray
    full: np.ndarray
    n0_full: np.ndarray
    low: dict = field(default_factory=dict)
    n0_low: dict = field(default_factory=dict)
    prior: dict = field(default_factory=dict)


def _inject_stream(p_stack, n0_stack, seed, label):
    out = np.empty_like(p_stack)
    for v in range(p_stack.shape[0]):
        out[v] = inject_noise(p_stack[v], n0_stack[v], frame_rng(seed, v, label))
    return out


def _lower_stream(p_full, n0_full, n0_low, seed, label):
    out = np.empty_like(p_full)
    for v in range(p_full.shape[0]):
        out[v] = simulate_low_dose(p_full[v], n0_full[v], n0_low[v],
                                   frame_rng(seed, v, label))
    return out


def simulate(cfg, phantom=None, plan=None, fractions=None):
    """Clean + full-dose + per-fraction low-dose streams with priors."""
    if plan is None:
        plan = plan_acquisition(cfg)
    if phantom is None:
        phantom = phantom_from_config(cfg)
    seed = int(cfg["seed"])
    dose = cfg["dose"]
    stream = forward_project(phantom, plan.geom, plan.num_views)
    clean = stream.stack()
    profile = make_dose_profile(plan.geom, dose["profile"], plan.num_views,
                                base_n0=dose["base_n0"],
                                bowtie_exponent=dose["bowtie_exponent"],
                                aec_min=dose["aec_min"], aec_max=dose["aec_max"],
                                aec_period_mm=dose["aec_period_mm"])
    n0_full = profile.n0_stack()
    full = _inject_stream(clean, n0_full, seed, RNG_FULL_DOSE)
    sim = SimulationData(plan=plan, phantom=phantom, clean=clean, full=full,
                         n0_full=n0_full)
    if fractions is None:
        fractions = dose["fractions"]
    for idx, frac in enumerate(fractions):
        n0_low = n0_full * float(frac)
        low = _lower_stream(full, n0_full, n0_low, seed, RNG_LOW_DOSE_BASE + idx)
        phi = noise_prior(low, n0_low, n0_full).phi
        key = _frac_key(frac)
        sim.low[key] = low
        sim.n0_low[key] = n0_low
        sim.prior[key] = phi
    return sim


def _frac_key(frac):
    return f"{float(frac):.4g}"


def _temporal_baseline(stack, f, sigma=None):
    """Gaussian-weighted temporal average; centers only, edges untouched."""
    out = stack.copy()
    if f == 0:
        return out
    weights = gaussian_window_weights(f, sigma)
    denoised = sliding_window_apply(stack, f, lambda w: baseline_denoise(w, weights))
    out[f:stack.shape[0] - f] = np.stack(denoised)
    return out


def _trim_angle_support(sino, margin):
    if margin > 0:
        sino.support[:margin] = False
        sino.support[len(sino.angles) - margin:] = False
        sino.data[:margin] = 0.0
        sino.data[len(sino.angles) - margin:] = 0.0
    return sino


def _row_weights(cfg, rows):
    if cfg["recon"]["row_weighting"] == "cosine":
        return cosine_row_weights(rows)
    return uniform_row_weights(rows)


@dataclass
class RunResult:
    refined: list
    noisy: list
    reference: list
    mode: str
    dose_key: str
    noisy_vol: object = None
    residual_vol: object = None
    sinos: dict = field(default_factory=dict)
    report: object = None


def run_pipeline(cfg, sim, dose_fraction, mpd_model=None, mir_model=None,
                 keep_intermediates=False, with_reference=True):
    """Execute the two-stage pipeline at one dose level.

    Returns refined / raw-noisy / clean-reference slices on the requested z
    grid plus (optionally) the intermediate volumes and sinograms.
    """
    plan = sim.plan
    geom = plan.geom
    recon_cfg = cfg["recon"]
    den_cfg = cfg["denoiser"]
    mode = den_cfg["mode"]
    f_mpd = int(den_cfg["window_half_width"])
    key = _frac_key(dose_fraction)
    if key not in sim.low:
        raise ConfigError(f"dose fraction {key} was not simulated "
                          f"(have {sorted(sim.low)})")
    low = sim.low[key]
    phi = sim.prior[key]

    rplan = build_rebin_plan(geom, plan.num_views)
    cand = integer_slice(low, rplan)
    cand_phi = integer_slice(phi, rplan)

    if mode == "baseline":
        d_l = _temporal_baseline(cand.left, f_mpd, den_cfg["baseline_sigma"])
        d_r = _temporal_baseline(cand.right, f_mpd, den_cfg["baseline_sigma"])
        res_pair = None
    elif mode in ("mpd", "mpd+mir"):
        if mpd_model is None:
            raise ConfigError(f"mode {mode} needs a projection-stage checkpoint")
        if mpd_model.F != f_mpd:
            raise StageContractError(
                f"stage 'mpd': checkpoint window F={mpd_model.F} differs "
                f"from config F={f_mpd}")
        r_l = apply_mpd_to_stream(mpd_model, cand.left, cand_phi.left)
        r_r = apply_mpd_to_stream(mpd_model, cand.right, cand_phi.right)
        d_l = cand.left + r_l
        d_r = cand.right + r_r
        res_pair = (r_l, r_r)
    else:
        raise ConfigError(f"unknown denoiser mode {mode!r}")

    sino_noisy = _trim_angle_support(weighted_sum(cand, rplan), f_mpd)
    sino_den = _trim_angle_support(
        weighted_sum(cand, rplan, data_override=(d_l, d_r)), f_mpd)
    sino_res = None
    if res_pair is not None:
        sino_res = _trim_angle_support(
            weighted_sum(cand, rplan, data_override=res_pair), f_mpd)

    kernel = shepp_logan_kernel(recon_cfg["kernel_length"], sino_noisy.distance_step)
    method = recon_cfg["filter_method"]
    filt_noisy = filter_projection(sino_noisy, kernel, method=method)
    filt_den = filter_projection(sino_den, kernel, method=method)
    filt_res = None if sino_res is None else \
        filter_projection(sino_res, kernel, method=method)

    mu_w = sim.phantom.mu_water_per_mm
    rw = _row_weights(cfg, geom.detector_rows)
    size = recon_cfg["image_size"]
    pix = recon_cfg["pixel_mm"]
    f = plan.intermediate_factor

    noisy_vol = reconstruct_sequence(
        filt_noisy, geom, plan.recon_z_start_mm, plan.recon_num_targets,
        recon_cfg["slice_spacing_mm"], f, size, pix, mu_w, row_weights=rw,
        provenance="raw")
    z_fine = noisy_vol.z_positions()
    req = plan.requested_z_mm
    req_idx = [int(np.argmin(np.abs(z_fine - z))) for z in req]
    noisy_req = [noisy_vol.slices[i] for i in req_idx]

    residual_vol = None
    if mode == "mpd+mir":
        if mir_model is None:
            raise ConfigError("mode mpd+mir needs an image-stage checkpoint")
        if mir_model.F != f:
            raise StageContractError(
                f"stage 'mir': refiner window F={mir_model.F} differs from "
                f"the intermediate factor {f}")
        residual_vol = reconstruct_sequence(
            filt_res, geom, plan.recon_z_start_mm, plan.recon_num_targets,
            recon_cfg["slice_spacing_mm"], f, size, pix, mu_w, row_weights=rw,
            provenance="residual", residual=True)
        refined = apply_mir(mir_model, noisy_vol, residual_vol)
        refined = [s for s in refined
                   if any(abs(s.z_mm - z) < 1e-6 for z in req)]
    else:
        provenance = "denoised-projection" if mode != "baseline" else "baseline"
        refined = [reconstruct_slice(filt_den, geom, z, size, pix, mu_w,
                                     row_weights=rw, provenance=provenance)
                   for z in req]

    reference = []
    if with_reference:
        cand_clean = integer_slice(sim.clean, rplan)
        sino_clean = _trim_angle_support(weighted_sum(cand_clean, rplan), f_mpd)
        filt_clean = filter_projection(sino_clean, kernel, method=method)
        reference = [reconstruct_slice(filt_clean, geom, z, size, pix, mu_w,
                                       row_weights=rw, provenance="clean")
                     for z in req]

    result = RunResult(refined=refined, noisy=noisy_req, reference=reference,
                       mode=mode, dose_key=key)
    if keep_intermediates:
        result.noisy_vol = noisy_vol
        result.residual_vol = residual_vol
        result.sinos = {"noisy": sino_noisy, "denoised": sino_den,
                        "residual": sino_res}
    return result


def apply_mir(mir_model, noisy_vol, residual_vol):
    """Refine every refinable target slice from window pairs.

    The window walks the fine grid with the (F+1) stride rule; the noisy and
    residual volumes must share one z grid.
    """
    if residual_vol is not None:
        zn = noisy_vol.z_positions()
        zr = residual_vol.z_positions()
        if len(zn) != len(zr) or not np.allclose(zn, zr, atol=1e-9):
            raise StageContractError(
                "stage 'mir': image/residual volumes come from different "
                "z grids")
    f = noisy_vol.intermediate_factor
    if mir_model.F != f:
        raise StageContractError(
            f"refiner window F={mir_model.F} differs from volume F={f}")
    out = []
    targets = noisy_vol.refinable_target_indices()
    if not targets:
        raise StageContractError("no refinable targets inside the volume")
    images = noisy_vol.stack()
    residuals = residual_vol.stack() if residual_vol is not None else None
    wins_i = np.stack([images[k - f:k + f + 1] for k in targets])
    wins_r = None if residuals is None else \
        np.stack([residuals[k - f:k + f + 1] for k in targets])
    r_hu = mir_model.residual_hu(wins_i, wins_r)
    from .recon import SliceImage
    tag = "refined" if mir_model.decoupled else "refined-coupled"
    for j, k in enumerate(targets):
        base = noisy_vol.slices[k]
        out.append(SliceImage(data=base.data + r_hu[j], z_mm=base.z_mm,
                              pixel_mm=base.pixel_mm, provenance=tag))
    return out


# ---------------------------------------------------------------------------
# metric evaluation


def _mm_to_px(x_mm, y_mm, size, pixel_mm):
    half = 0.5 * (size - 1)
    return x_mm / pixel_mm + half, y_mm / pixel_mm + half


def evaluate_run(cfg, result, extra_meta=None):
    """MetricsReport for one pipeline run (refined vs clean reference)."""
    m_cfg = cfg["metrics"]
    window = iq.DisplayWindow(m_cfg["window"]["level_hu"],
                              m_cfg["window"]["width_hu"],
                              label=f"wl{m_cfg['window']['level_hu']:g}"
                                    f"_ww{m_cfg['window']['width_hu']:g}")
    report = iq.MetricsReport()
    report.meta.update({
        "tool": "helixct", "command": "run",
        "mode": result.mode, "dose_fraction": result.dose_key,
        "seed": str(cfg["seed"]), "config_hash": config_hash(cfg),
        "display_window": window.label, "reference": "clean-recon",
        "refinement": result.refined[0].provenance if result.refined else "",
    })
    if extra_meta:
        report.meta.update(extra_meta)

    if result.reference:
        for label, mapped in (("display", window), ("raw", None)):
            vals_r = [iq.mse(a, b, mapped) for a, b in
                      zip(result.refined, result.reference)]
            vals_n = [iq.mse(a, b, mapped) for a, b in
                      zip(result.noisy, result.reference)]
            report.add_scalar("mse", "mean", np.mean(vals_r), x=label)
            report.add_scalar("mse", "std", np.std(vals_r), x=label)
            report.add_scalar("mse_noisy", "mean", np.mean(vals_n), x=label)
            report.add_scalar("mse_noisy", "std", np.std(vals_n), x=label)
        ssim_r = [iq.ssim(a, b, window) for a, b in
                  zip(result.refined, result.reference)]
        ssim_n = [iq.ssim(a, b, window) for a, b in
                  zip(result.noisy, result.reference)]
        report.add_scalar("ssim", "mean", np.mean(ssim_r), x="display")
        report.add_scalar("ssim", "std", np.std(ssim_r), x="display")
        report.add_scalar("ssim_noisy", "mean", np.mean(ssim_n), x="display")

    pix = result.refined[0].pixel_mm
    size = result.refined[0].data.shape[0]
    region = m_cfg["nps_region"]
    cx_px, cy_px = _mm_to_px(region["cx_mm"], region["cy_mm"], size, pix)
    radius_px = region["radius_mm"] / pix
    roi = int(m_cfg["nps_roi_size_px"])
    for label, slices in (("refined", result.refined), ("noisy", result.noisy)):
        if not slices:
            continue
        rois = iq.tile_rois(slices, roi, (cy_px, cx_px), radius_px)
        if len(rois) >= 2:
            res = iq.nps(rois, pix)
            report.add_curve("nps", label, res.freq_per_mm, res.power)
            report.add_scalar("nps_meta", f"{label}_rois", res.n_rois)

    if cfg["phantom"]["kind"] == "iq":
        ring = cfg["phantom"]["insert_ring_mm"]
        r_ins = cfg["phantom"]["insert_radius_mm"]
        shrink = m_cfg["ct_roi_shrink"]
        water_r = min(max(ring - r_ins - 3.0, shrink * r_ins), 14.0)
        rois = [(name, cx, cy, hu, shrink * r_ins)
                for name, cx, cy, hu in iq_insert_centers(ring)]
        rois.append(("water", 0.0, 0.0, 0.0, water_r))
        for name, cx, cy, hu, radius in rois:
            stats = [iq.ct_number(s, (cx, cy), radius) for s in result.refined]
            report.add_scalar("ct_number", name,
                              float(np.mean([m for m, _ in stats])), x="mean")
            report.add_scalar("ct_number", name,
                              float(np.mean([s for _, s in stats])), x="std")
            report.add_scalar("ct_number_nominal", name, hu, x="mean")
        insert_name = m_cfg["ttf_insert"]
        ins = {n: (x, y, hu) for n, x, y, hu in iq_insert_centers(ring)}
        if insert_name in ins:
            x, y, hu = ins[insert_name]
            for label, slices in (("refined", result.refined),
                                  ("noisy", result.noisy)):
                if not slices:
                    continue
                try:
                    t = iq.ttf(slices, pix, (x, y), r_ins, hu)
                    report.add_curve("ttf", label, t.freq_per_mm, t.modulation)
                    report.add_scalar("ttf_f50", label, t.freq_at(0.5))
                except StageContractError:
                    pass
    result.report = report
    return report


# ---------------------------------------------------------------------------
# training


def _train_geometry(cfg):
    return geometry_from_config(cfg, z_start_mm=0.0)


def _mpd_pool(cfg, phantom, seed, label):
    """Per-phantom full-dose candidate pools for projection-stage training.

    Low-dose windows are re-simulated per training sample (fresh noise and a
    fresh dose fraction every draw), so only the full-dose gathers and their
    incident-count maps are stored.
    """
    tcfg = cfg["denoiser"]["train"]
    geom = _train_geometry(cfg)
    views = int(tcfg["train_views"])
    clean = forward_project(phantom, geom, views).stack()
    profile = make_dose_profile(geom, cfg["dose"]["profile"], views,
                                base_n0=cfg["dose"]["base_n0"],
                                bowtie_exponent=cfg["dose"]["bowtie_exponent"],
                                aec_min=cfg["dose"]["aec_min"],
                                aec_max=cfg["dose"]["aec_max"],
                                aec_period_mm=cfg["dose"]["aec_period_mm"])
    n0_full = profile.n0_stack()
    full = _inject_stream(clean, n0_full, seed, label)
    rplan = build_rebin_plan(geom, views)
    c_full = integer_slice(full, rplan)
    c_n0 = integer_slice(n0_full, rplan)
    return {"full": (c_full.left, c_full.right),
            "n0": (c_n0.left, c_n0.right)}


def _crop_origin(rng, h, w, ph, pw):
    y0 = 0 if h <= ph else int(rng.integers(0, h - ph + 1))
    x0 = 0 if w <= pw else int(rng.integers(0, w - pw + 1))
    return y0, x0


def _flip_axes(rng, arrays, axis_pairs):
    """Jointly mirror spatial axes; a valid scan of the mirrored object."""
    out = list(arrays)
    for axes in axis_pairs:
        if rng.integers(0, 2):
            out = [np.flip(a, axis=ax) for a, ax in zip(out, axes)]
    return out


def _sample_mpd_batch(pools, f, patch, rng, batch_size, dose_range=(0.15, 0.85)):
    """Training windows with a fresh dose fraction and noise draw per sample."""
    frames, priors, targets = [], [], []
    for _ in range(batch_size):
        pool = pools[int(rng.integers(0, len(pools)))]
        side = int(rng.integers(0, 2))
        full = pool["full"][side]
        n0 = pool["n0"][side]
        t_count, h, w = full.shape
        t = int(rng.integers(f, t_count - f))
        ph = min(patch, h)
        pw = min(patch, w)
        y0, x0 = _crop_origin(rng, h, w, ph, pw)
        sl = (slice(t - f, t + f + 1), slice(y0, y0 + ph), slice(x0, x0 + pw))
        p_f = full[sl]
        n_f0 = n0[sl]
        frac = float(rng.uniform(*dose_range))
        p_l = simulate_low_dose(p_f, n_f0, frac * n_f0, rng)
        phi = noise_prior(p_l, frac * n_f0, n_f0).phi
        tg = p_f[f] - p_l[f]
        fr, pr, tg = _flip_axes(rng, (p_l, phi, tg), [(1, 1, 0), (2, 2, 1)])
        frames.append(fr)
        priors.append(pr)
        targets.append(tg)
    return (np.stack(frames), np.stack(priors), np.stack(targets))


def _mpd_loss(model, batch):
    frames, priors, targets = batch
    out = model.forward(frames, priors)
    return ad.l1_loss(out, targets[:, None])


def train_mpd(cfg, model=None, start_step=0):
    """Train the projection-stage model on random phantoms; returns
    (model, history).  Pass a loaded model with ``start_step`` to resume."""
    tcfg = cfg["denoiser"]["train"]
    den = cfg["denoiser"]
    seed = int(cfg["seed"])
    root = np.random.SeedSequence(entropy=seed, spawn_key=(11,))
    ph_rng, init_rng, loop_rng, val_rng = [np.random.default_rng(s)
                                           for s in root.spawn(4)]
    n_ph = int(tcfg["num_phantoms"])
    fov = cfg["phantom"]["body_radius_mm"]
    pools = []
    for i in range(n_ph + 1):
        phantom = random_phantom(ph_rng, body_radius_mm=fov,
                                 mu_water_per_mm=cfg["phantom"]["mu_water_per_mm"])
        pools.append(_mpd_pool(cfg, phantom, seed, label=1000 + 10 * i))
    val_pool = [pools.pop()]  # held-out phantom for the plateau detector
    f = int(den["window_half_width"])
    if model is None:
        model = MPDModel(init_rng, window_half_width=f,
                         widths=tuple(den["widths"]),
                         frame_scale=den["frame_scale"],
                         prior_scale=den["prior_scale"],
                         priors_to_step2=den["priors_to_step2"])
    patch = int(tcfg["patch"])
    val_batch = _sample_mpd_batch(val_pool, f, patch, val_rng, 16,
                                  dose_range=(0.25, 0.25))
    tc = TrainConfig(steps=int(tcfg["steps_mpd"]), batch_size=int(tcfg["batch_size"]),
                     lr=float(tcfg["lr"]), val_every=int(tcfg["val_every"]),
                     patience=int(tcfg["patience"]))
    hist = train(model, lambda r, b: _sample_mpd_batch(pools, f, patch, r, b),
                 _mpd_loss, tc, loop_rng, val_batch=val_batch,
                 start_step=start_step)
    return model, hist


def train_mir(cfg, mpd_model, model=None, start_step=0):
    """Train the image-stage refiner; needs the projection-stage model."""
    tcfg = cfg["denoiser"]["train"]
    den = cfg["denoiser"]
    recon_cfg = cfg["recon"]
    seed = int(cfg["seed"])
    root = np.random.SeedSequence(entropy=seed, spawn_key=(13,))
    ph_rng, init_rng, loop_rng, val_rng = [np.random.default_rng(s)
                                           for s in root.spawn(4)]
    fracs = tcfg["dose_fractions"]
    n_ph = int(tcfg["num_phantoms_mir"])
    f = int(recon_cfg["intermediate_factor"])
    pools = []
    for i in range(n_ph + 1):
        phantom = random_phantom(ph_rng,
                                 body_radius_mm=cfg["phantom"]["body_radius_mm"],
                                 mu_water_per_mm=cfg["phantom"]["mu_water_per_mm"])
        frac = 0.25 if i == n_ph else float(fracs[i % len(fracs)])
        sub_cfg = {**cfg, "seed": seed + 977 * (i + 1),
                   "recon": {**cfg["recon"],
                             "num_slices": int(tcfg["train_num_slices"])}}
        sim = simulate(sub_cfg, phantom=phantom, fractions=[frac])
        pools.append(_mir_windows(sub_cfg, sim, mpd_model, _frac_key(frac)))
    val_pool = [pools.pop()]
    if model is None:
        model = MIRModel(init_rng, window_half_width=f,
                         widths=tuple(den["widths"]),
                         decoupled=den["decoupled"],
                         image_scale=den["image_scale"])
    patch = int(tcfg.get("patch_mir", tcfg["patch"]))
    val_batch = _sample_mir_batch(val_pool, patch, val_rng, 8)
    tc = TrainConfig(steps=int(tcfg["steps_mir"]), batch_size=int(tcfg["batch_size"]),
                     lr=float(tcfg["lr"]), val_every=int(tcfg["val_every"]),
                     patience=int(tcfg["patience"]))
    hist = train(model, lambda r, b: _sample_mir_batch(pools, patch, r, b),
                 _mir_loss, tc, loop_rng, val_batch=val_batch,
                 start_step=start_step)
    return model, hist


def _mir_windows(cfg, sim, mpd_model, key):
    """Build (image window, residual window, target residual) stacks."""
    plan = sim.plan
    geom = plan.geom
    recon_cfg = cfg["recon"]
    f_mpd = int(cfg["denoiser"]["window_half_width"])
    f = plan.intermediate_factor
    rplan = build_rebin_plan(geom, plan.num_views)
    low = sim.low[key]
    phi = sim.prior[key]
    cand = integer_slice(low, rplan)
    cand_phi = integer_slice(phi, rplan)
    r_l = apply_mpd_to_stream(mpd_model, cand.left, cand_phi.left)
    r_r = apply_mpd_to_stream(mpd_model, cand.right, cand_phi.right)
    sino_noisy = _trim_angle_support(weighted_sum(cand, rplan), f_mpd)
    sino_res = _trim_angle_support(
        weighted_sum(cand, rplan, data_override=(r_l, r_r)), f_mpd)
    cand_full = integer_slice(sim.full, rplan)
    sino_full = _trim_angle_support(weighted_sum(cand_full, rplan), f_mpd)
    kernel = shepp_logan_kernel(recon_cfg["kernel_length"], sino_noisy.distance_step)
    method = recon_cfg["filter_method"]
    mu_w = sim.phantom.mu_water_per_mm
    rw = _row_weights(cfg, geom.detector_rows)
    size = recon_cfg["image_size"]
    pix = recon_cfg["pixel_mm"]
    noisy_vol = reconstruct_sequence(
        filter_projection(sino_noisy, kernel, method=method), geom,
        plan.recon_z_start_mm, plan.recon_num_targets,
        recon_cfg["slice_spacing_mm"], f, size, pix, mu_w, row_weights=rw)
    res_vol = reconstruct_sequence(
        filter_projection(sino_res, kernel, method=method), geom,
        plan.recon_z_start_mm, plan.recon_num_targets,
        recon_cfg["slice_spacing_mm"], f, size, pix, mu_w, row_weights=rw,
        provenance="residual", residual=True)
    filt_full = filter_projection(sino_full, kernel, method=method)
    targets = noisy_vol.refinable_target_indices()
    images = noisy_vol.stack()
    residuals = res_vol.stack()
    wins_i, wins_r, tgt = [], [], []
    for k in targets:
        z = noisy_vol.slices[k].z_mm
        full_img = reconstruct_slice(filt_full, geom, z, size, pix, mu_w,
                                     row_weights=rw, provenance="full")
        wins_i.append(images[k - f:k + f + 1])
        wins_r.append(residuals[k - f:k + f + 1])
        tgt.append(full_img.data - images[k])
    return {"images": np.stack(wins_i), "residuals": np.stack(wins_r),
            "targets": np.stack(tgt)}


def _sample_mir_batch(pools, patch, rng, batch_size):
    images, residuals, targets = [], [], []
    for _ in range(batch_size):
        pool = pools[int(rng.integers(0, len(pools)))]
        n, _, h, w = pool["images"].shape
        j = int(rng.integers(0, n))
        ph = min(patch, h)
        pw = min(patch, w)
        y0, x0 = _crop_origin(rng, h, w, ph, pw)
        sl = (slice(y0, y0 + ph), slice(x0, x0 + pw))
        im = pool["images"][j][(slice(None),) + sl]
        re = pool["residuals"][j][(slice(None),) + sl]
        tg = pool["targets"][j][sl]
        im, re, tg = _flip_axes(rng, (im, re, tg), [(1, 1, 0), (2, 2, 1)])
        images.append(im)
        residuals.append(re)
        targets.append(tg)
    return (np.stack(images), np.stack(residuals), np.stack(targets))


def _mir_loss(model, batch):
    images, residuals, targets = batch
    out = model.forward(images, residuals)
    return ad.l1_loss(out, targets[:, None] * model.image_scale)
