"""Command-line surface: simulate, train, run, metrics, report.

Exit codes: 0 success, 2 configuration error, 3 stage contract violation,
4 numeric failure.
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import pipeline
from .config import config_hash, dump_config, load_config
from .errors import ConfigError, HelixctError, StageContractError
from .io import read_artifact, write_artifact
from .nn import load_checkpoint, save_checkpoint
from .phantom import save_phantom
from .recon import SliceImage
from .reporting import render_report

STREAM_AXES = ["view", "row", "channel"]
VOLUME_AXES = ["slice", "y", "x"]


def _prov_step(command, cfg, **params):
    return {"command": command, "config_hash": config_hash(cfg),
            "seed": int(cfg["seed"]), "params": params}


def _write_volume(base, slices, kind, cfg, provenance, extra_meta=None):
    meta = {
        "z_mm": [s.z_mm for s in slices],
        "pixel_mm": slices[0].pixel_mm,
        "hu_convention": "air=-1000; sentinel=-32768 marks coverage gaps",
        "slice_provenance": [s.provenance for s in slices],
    }
    if extra_meta:
        meta.update(extra_meta)
    return write_artifact(base, np.stack([s.data for s in slices]),
                          kind=kind, axes=VOLUME_AXES, meta=meta,
                          provenance=provenance)


def _read_volume(base):
    data, header = read_artifact(base)
    z = header.meta["z_mm"]
    pix = header.meta["pixel_mm"]
    tags = header.meta.get("slice_provenance", ["raw"] * len(z))
    slices = [SliceImage(data=data[i], z_mm=z[i], pixel_mm=pix,
                         provenance=tags[i]) for i in range(len(z))]
    return slices, header


def cmd_simulate(args):
    cfg = load_config(args.config, args.overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    sim = pipeline.simulate(cfg)
    prov = [_prov_step("simulate", cfg)]
    dump_config(cfg, out / "config.resolved.json")
    save_phantom(sim.phantom, out / "phantom.json")
    meta = {"geometry": sim.plan.geom.to_dict(), "num_views": sim.plan.num_views,
            "dose_profile": cfg["dose"]["profile"],
            "base_n0": cfg["dose"]["base_n0"]}
    write_artifact(out / "clean", sim.clean, "projection_stream", STREAM_AXES,
                   meta={**meta, "dose": "clean"}, provenance=prov)
    write_artifact(out / "full", sim.full, "projection_stream", STREAM_AXES,
                   meta={**meta, "dose": "full",
                         "n0_artifact": "full_n0"}, provenance=prov)
    write_artifact(out / "full_n0", sim.n0_full, "n0_maps", STREAM_AXES,
                   meta=meta, provenance=prov)
    for key in sim.low:
        kmeta = {**meta, "dose": key, "n0_artifact": f"low_{key}_n0"}
        write_artifact(out / f"low_{key}", sim.low[key], "projection_stream",
                       STREAM_AXES, meta=kmeta, provenance=prov)
        write_artifact(out / f"low_{key}_n0", sim.n0_low[key], "n0_maps",
                       STREAM_AXES, meta=kmeta, provenance=prov)
        write_artifact(out / f"prior_{key}", sim.prior[key], "noise_prior",
                       STREAM_AXES, meta=kmeta, provenance=prov)
    print(f"simulated {sim.plan.num_views} views "
          f"({len(sim.low)} dose fraction(s)) into {out} "
          f"[{time.time() - t0:.1f}s]")
    return 0


def _load_sim_from_dir(cfg, simdir, dose_key):
    simdir = Path(simdir)
    plan = pipeline.plan_acquisition(cfg)
    clean, hdr = read_artifact(simdir / "clean")
    if hdr.meta["geometry"] != plan.geom.to_dict():
        raise StageContractError(
            "stage 'load': simulated geometry differs from the config plan; "
            "re-run simulate with this config")
    if clean.shape[0] != plan.num_views:
        raise StageContractError(
            f"stage 'load': stream has {clean.shape[0]} views, plan needs "
            f"{plan.num_views}")
    full, _ = read_artifact(simdir / "full")
    n0_full, _ = read_artifact(simdir / "full_n0")
    from .phantom import load_phantom
    phantom = load_phantom(simdir / "phantom.json")
    sim = pipeline.SimulationData(plan=plan, phantom=phantom, clean=clean,
                                  full=full, n0_full=n0_full)
    low, low_hdr = read_artifact(simdir / f"low_{dose_key}")
    prior, _ = read_artifact(simdir / f"prior_{dose_key}")
    n0_low, _ = read_artifact(simdir / f"low_{dose_key}_n0")
    sim.low[dose_key] = low
    sim.prior[dose_key] = prior
    sim.n0_low[dose_key] = n0_low
    return sim, low_hdr.provenance


def _pick_dose(cfg, arg_dose, simdir):
    if arg_dose is not None:
        return pipeline._frac_key(arg_dose)
    fractions = cfg["dose"]["fractions"]
    if len(fractions) == 1:
        return pipeline._frac_key(fractions[0])
    have = sorted(p.name[4:-5] for p in Path(simdir).glob("low_*.json")
                  if not p.name.endswith("_n0.json"))
    raise ConfigError(f"--dose is required (simulated fractions: {have})")


def cmd_run(args):
    cfg = load_config(args.config, args.overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dose_key = _pick_dose(cfg, args.dose, args.sim)
    sim, prov_in = _load_sim_from_dir(cfg, args.sim, dose_key)
    den = cfg["denoiser"]
    mpd_model = mir_model = None
    if den["mode"] in ("mpd", "mpd+mir"):
        if not den["mpd_checkpoint"]:
            raise ConfigError("denoiser.mpd_checkpoint is required for mode "
                              + den["mode"])
        mpd_model, _ = load_checkpoint(den["mpd_checkpoint"])
    if den["mode"] == "mpd+mir":
        if not den["mir_checkpoint"]:
            raise ConfigError("denoiser.mir_checkpoint is required for mode mpd+mir")
        mir_model, _ = load_checkpoint(den["mir_checkpoint"])
    t0 = time.time()
    result = pipeline.run_pipeline(cfg, sim, float(dose_key),
                                   mpd_model=mpd_model, mir_model=mir_model,
                                   keep_intermediates=args.keep_intermediates)
    prov = list(prov_in) + [_prov_step("run", cfg, dose=dose_key,
                                       mode=den["mode"],
                                       deterministic=bool(args.deterministic))]
    _write_volume(out / "refined", result.refined, "volume", cfg, prov)
    _write_volume(out / "noisy", result.noisy, "volume", cfg, prov)
    if result.reference:
        _write_volume(out / "reference", result.reference, "volume", cfg, prov)
    if args.keep_intermediates:
        for name, sino in result.sinos.items():
            if sino is None:
                continue
            write_artifact(out / f"sino_{name}", sino.data, "rebinned_sinogram",
                           ["angle", "row", "distance"],
                           meta={"angles_rad": list(map(float, sino.angles)),
                                 "distances_mm": list(map(float, sino.distances)),
                                 "provenance_tag": sino.provenance},
                           provenance=prov)
            write_artifact(out / f"sino_{name}_support",
                           sino.support.astype(float), "support_mask",
                           ["angle", "distance"], provenance=prov)
        for name, vol in (("vol_noisy_fine", result.noisy_vol),
                          ("vol_residual_fine", result.residual_vol)):
            if vol is not None:
                _write_volume(out / name, vol.slices, "volume", cfg, prov,
                              extra_meta={"intermediate_factor":
                                          vol.intermediate_factor})
    report = pipeline.evaluate_run(
        cfg, result, extra_meta={"label": f"{den['mode']}@{dose_key}"})
    report.write_csv(out / "report.csv")
    print(f"run mode={den['mode']} dose={dose_key}: "
          f"{len(result.refined)} refined slice(s) into {out} "
          f"[{time.time() - t0:.1f}s]")
    return 0


def cmd_train(args):
    cfg = load_config(args.config, args.overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    resume_model = None
    start_step = 0
    if args.resume:
        resume_model, manifest = load_checkpoint(args.resume)
        start_step = int(manifest.get("step") or 0)
        expected = "mpd" if args.stage == "mpd" else "mir"
        if manifest["kind"] != expected:
            raise ConfigError(f"--resume checkpoint is a {manifest['kind']} "
                              f"model, not {expected}")
    if args.stage == "mpd":
        model, hist = pipeline.train_mpd(cfg, model=resume_model,
                                         start_step=start_step)
        base = out / "mpd"
    else:
        mpd_path = args.mpd_checkpoint or cfg["denoiser"]["mpd_checkpoint"]
        if not mpd_path:
            raise ConfigError("training the image stage needs the projection-"
                              "stage checkpoint (--mpd-checkpoint)")
        mpd_model, _ = load_checkpoint(mpd_path)
        model, hist = pipeline.train_mir(cfg, mpd_model, model=resume_model,
                                         start_step=start_step)
        base = out / "mir"
    save_checkpoint(model, base, seed=int(cfg["seed"]),
                    step=hist.steps[-1] if hist.steps else start_step)
    hist.to_csv(str(base) + "_loss.csv")
    print(f"trained {args.stage}: steps {start_step + 1}..{hist.steps[-1]}, "
          f"final loss {hist.loss[-1]:.6g}, checkpoint {base} "
          f"[{time.time() - t0:.1f}s]")
    return 0


def cmd_metrics(args):
    cfg = load_config(args.config, args.overrides)
    refined, header = _read_volume(args.volume)
    reference = []
    noisy = []
    if args.reference:
        reference, _ = _read_volume(args.reference)
    if args.noisy:
        noisy, _ = _read_volume(args.noisy)
    result = pipeline.RunResult(refined=refined, noisy=noisy,
                                reference=reference,
                                mode=header.meta.get("mode", "unknown"),
                                dose_key=header.meta.get("dose", ""))
    report = pipeline.evaluate_run(cfg, result,
                                   extra_meta={"command": "metrics"})
    report.write_csv(args.out)
    print(f"metrics for {args.volume} -> {args.out}")
    return 0


def cmd_report(args):
    written = render_report(args.inputs, args.out, labels=args.labels)
    print(f"report: wrote {len(written)} file(s) into {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="helixct",
        description="Helical multi-slice CT simulation, two-stage denoising, "
                    "and image-quality reporting.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("-c", "--config", help="config JSON (defaults apply)")
        p.add_argument("--set", dest="overrides", action="append", metavar="K=V",
                       help="dotted config override, e.g. dose.base_n0=1e5")

    p = sub.add_parser("simulate", help="forward-project and inject noise")
    common(p)
    p.add_argument("-o", "--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a denoising stage")
    common(p)
    p.add_argument("--stage", choices=["mpd", "mir"], required=True)
    p.add_argument("--mpd-checkpoint", help="projection-stage checkpoint base "
                                            "(needed for --stage mir)")
    p.add_argument("--resume", help="checkpoint base to continue training from")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("run", help="denoise, reconstruct, refine, measure")
    common(p)
    p.add_argument("-i", "--sim", required=True, help="simulate output directory")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--dose", type=float, help="dose fraction to process")
    p.add_argument("--keep-intermediates", action="store_true")
    p.add_argument("--deterministic", action="store_true",
                   help="force ordered reductions (runs are single-process; "
                        "recorded in provenance)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("metrics", help="measure a persisted volume")
    common(p)
    p.add_argument("--volume", required=True, help="volume artifact base path")
    p.add_argument("--reference", help="reference volume base path")
    p.add_argument("--noisy", help="noisy volume base path")
    p.add_argument("-o", "--out", required=True, help="output CSV")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("report", help="tables and figures from metrics CSVs")
    p.add_argument("-i", "--inputs", nargs="+", required=True)
    p.add_argument("--labels", nargs="*")
    p.add_argument("-o", "--out", required=True, help="output directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except HelixctError as exc:
        print(f"helixct {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
