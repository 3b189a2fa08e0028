import json
from pathlib import Path

import numpy as np
import pytest

from helixct.cli import main
from helixct.metrics import MetricsReport

TINY = {
    "seed": 91,
    "geometry": {
        "focal_length_mm": 250.0,
        "detector_rows": 4,
        "detector_cols": 64,
        "channel_angle_step_rad": 0.007,
        "row_spacing_iso_mm": 1.5,
        "views_per_rotation": 64,
        "table_feed_mm": 4.8,
        "slice_thickness_mm": 2.4,
    },
    "phantom": {"kind": "iq", "body_radius_mm": 20.0, "insert_radius_mm": 4.0,
                "insert_ring_mm": 11.0},
    "dose": {"base_n0": 2.0e4, "fractions": [0.25]},
    "recon": {"kernel_length": 65, "image_size": 24, "pixel_mm": 2.0,
              "num_slices": 2, "slice_spacing_mm": 2.4, "z_center_mm": 0.0,
              "intermediate_factor": 1},
    "denoiser": {"mode": "baseline", "window_half_width": 1,
                 "widths": [4, 6],
                 "train": {"steps_mpd": 12, "steps_mir": 12, "batch_size": 2,
                           "patch": 16, "patch_mir": 16, "num_phantoms": 1,
                           "num_phantoms_mir": 1, "train_num_slices": 2,
                           "train_views": 150, "val_every": 6,
                           "dose_fractions": [0.25]}},
    "metrics": {"nps_roi_size_px": 6,
                "nps_region": {"cx_mm": 0.0, "cy_mm": 0.0, "radius_mm": 16.0}},
}


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


@pytest.fixture(scope="module")
def simdir(tiny_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "-c", tiny_config, "-o", str(out)]) == 0
    return out


def tree_bytes(root):
    return {p.name: p.read_bytes() for p in sorted(Path(root).iterdir())
            if p.is_file()}


def test_simulate_outputs(simdir):
    names = {p.name for p in Path(simdir).iterdir()}
    for want in ("clean.f32", "clean.json", "full.f32", "full_n0.f32",
                 "low_0.25.f32", "low_0.25_n0.f32", "prior_0.25.f32",
                 "phantom.json", "config.resolved.json"):
        assert want in names
    header = json.loads((simdir / "low_0.25.json").read_text())
    assert header["magic"] == "HELIXCT-ARTIFACT"
    assert header["provenance"][0]["command"] == "simulate"
    prior = np.fromfile(simdir / "prior_0.25.f32", dtype="<f4")
    assert np.all(prior > 0)


def test_simulate_deterministic(tiny_config, simdir, tmp_path):
    out2 = tmp_path / "sim2"
    assert main(["simulate", "-c", tiny_config, "-o", str(out2)]) == 0
    a = tree_bytes(simdir)
    b = tree_bytes(out2)
    assert a.keys() == b.keys()
    for name in a:
        assert a[name] == b[name], name


@pytest.fixture(scope="module")
def rundir(tiny_config, simdir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = main(["run", "-c", tiny_config, "-i", str(simdir), "-o", str(out),
                 "--deterministic", "--keep-intermediates"])
    assert code == 0
    return out


def test_run_outputs_and_report(rundir):
    names = {p.name for p in Path(rundir).iterdir()}
    for want in ("refined.f32", "refined.json", "noisy.f32", "reference.f32",
                 "report.csv", "sino_noisy.f32", "vol_noisy_fine.f32"):
        assert want in names
    rep = MetricsReport.read_csv(rundir / "report.csv")
    assert rep.meta["mode"] == "baseline"
    assert rep.scalar("mse", "mean", "display") >= 0.0
    header = json.loads((rundir / "refined.json").read_text())
    commands = [step["command"] for step in header["provenance"]]
    assert commands == ["simulate", "run"]


def test_run_deterministic_rerun(tiny_config, simdir, rundir, tmp_path):
    out2 = tmp_path / "run2"
    assert main(["run", "-c", tiny_config, "-i", str(simdir), "-o", str(out2),
                 "--deterministic", "--keep-intermediates"]) == 0
    a = tree_bytes(rundir)
    b = tree_bytes(out2)
    assert a.keys() == b.keys()
    for name in a:
        assert a[name] == b[name], name


def test_metrics_command_matches_run_report(tiny_config, rundir, tmp_path):
    out_csv = tmp_path / "metrics.csv"
    assert main(["metrics", "-c", tiny_config,
                 "--volume", str(rundir / "refined"),
                 "--reference", str(rundir / "reference"),
                 "--noisy", str(rundir / "noisy"),
                 "-o", str(out_csv)]) == 0
    rep_run = MetricsReport.read_csv(rundir / "report.csv")
    rep_cmd = MetricsReport.read_csv(out_csv)
    for section, key, x in (("mse", "mean", "display"), ("mse", "mean", "raw"),
                            ("ssim", "mean", "display")):
        assert rep_cmd.scalar(section, key, x) == \
            pytest.approx(rep_run.scalar(section, key, x), rel=1e-6)


def test_report_command(rundir, tmp_path):
    out = tmp_path / "report"
    assert main(["report", "-i", str(rundir / "report.csv"),
                 "-o", str(out), "--labels", "baseline"]) == 0
    assert (out / "summary.csv").exists()
    svgs = list(out.glob("*.svg"))
    assert svgs, "expected at least one figure"
    summary = (out / "summary.csv").read_text().splitlines()
    assert summary[0].startswith("label,")
    assert summary[1].startswith("baseline,")


def test_report_deterministic(rundir, tmp_path):
    outs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        main(["report", "-i", str(rundir / "report.csv"), "-o", str(out)])
        outs.append(tree_bytes(out))
    assert outs[0].keys() == outs[1].keys()
    for name in outs[0]:
        assert outs[0][name] == outs[1][name], name


def test_train_and_learned_run(tiny_config, simdir, tmp_path):
    ck = tmp_path / "ck"
    assert main(["train", "-c", tiny_config, "--stage", "mpd",
                 "-o", str(ck)]) == 0
    assert (ck / "mpd.f32").exists() and (ck / "mpd.json").exists()
    loss_lines = (ck / "mpd_loss.csv").read_text().splitlines()
    assert loss_lines[0] == "step,loss,lr,val_loss"
    assert len(loss_lines) == 13

    assert main(["train", "-c", tiny_config, "--stage", "mir",
                 "--mpd-checkpoint", str(ck / "mpd"), "-o", str(ck)]) == 0
    assert (ck / "mir.f32").exists()

    out = tmp_path / "learned"
    code = main(["run", "-c", tiny_config, "-i", str(simdir), "-o", str(out),
                 "--set", "denoiser.mode=mpd+mir",
                 "--set", f"denoiser.mpd_checkpoint={ck / 'mpd'}",
                 "--set", f"denoiser.mir_checkpoint={ck / 'mir'}"])
    assert code == 0
    rep = MetricsReport.read_csv(out / "report.csv")
    assert rep.meta["mode"] == "mpd+mir"


def test_train_mir_without_mpd_fails(tiny_config, tmp_path, capsys):
    code = main(["train", "-c", tiny_config, "--stage", "mir",
                 "-o", str(tmp_path)])
    assert code == 2
    assert "projection-stage checkpoint" in capsys.readouterr().err


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"dose": {"fractions": [2.0]}}')
    code = main(["simulate", "-c", str(bad), "-o", str(tmp_path / "o")])
    assert code == 2


def test_stage_contract_exit_code(tiny_config, simdir, tmp_path, capsys):
    code = main(["run", "-c", tiny_config, "-i", str(simdir),
                 "-o", str(tmp_path / "o"),
                 "--set", "geometry.detector_rows=6"])
    assert code == 3
    assert "stage 'load'" in capsys.readouterr().err


def test_numeric_error_exit_code(tiny_config, simdir, tmp_path):
    import shutil
    broken = tmp_path / "broken_sim"
    shutil.copytree(simdir, broken)
    data = np.fromfile(broken / "low_0.25.f32", dtype="<f4")
    data[: data.size // 2] = np.nan
    data.tofile(broken / "low_0.25.f32")
    code = main(["run", "-c", tiny_config, "-i", str(broken),
                 "-o", str(tmp_path / "o")])
    assert code == 4


def test_unknown_dose_rejected(tiny_config, simdir, tmp_path):
    code = main(["run", "-c", tiny_config, "-i", str(simdir),
                 "-o", str(tmp_path / "o"), "--dose", "0.5"])
    assert code == 2
