"""Comparison reports: summary tables plus SVG figures rendered from one or
more metrics CSVs (NPS/TTF overlays and dose sweeps).

Figures are written deterministically (fixed SVG hash salt, no embedded
date) so report outputs can be byte-compared across reruns.
"""

import csv
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .errors import ConfigError
from .metrics import MetricsReport

__all__ = ["render_report", "load_reports"]

matplotlib.rcParams.update({
    "svg.hashsalt": "helixct",
    "figure.figsize": (6.0, 4.0),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
})

_SAVEFIG = {"format": "svg", "metadata": {"Date": None}}


def load_reports(paths, labels=None):
    reports = []
    for i, path in enumerate(paths):
        rep = MetricsReport.read_csv(path)
        if labels and i < len(labels):
            label = labels[i]
        else:
            label = rep.meta.get("label") or Path(path).stem
        reports.append((label, rep))
    return reports


def _maybe(rep, section, key, x=""):
    try:
        return rep.scalar(section, key, x)
    except KeyError:
        return None


def _summary_rows(reports):
    rows = []
    materials = []
    for _, rep in reports:
        for key in rep.keys("ct_number"):
            if key not in materials:
                materials.append(key)
    for label, rep in reports:
        row = {
            "label": label,
            "mode": rep.meta.get("mode", ""),
            "dose_fraction": rep.meta.get("dose_fraction", ""),
            "mse_display": _maybe(rep, "mse", "mean", "display"),
            "mse_raw": _maybe(rep, "mse", "mean", "raw"),
            "ssim": _maybe(rep, "ssim", "mean", "display"),
            "ttf_f50_refined": _maybe(rep, "ttf_f50", "refined"),
        }
        for mat in materials:
            row[f"ct_{mat}"] = _maybe(rep, "ct_number", mat, "mean")
        rows.append(row)
    return rows


def _write_summary(rows, path):
    if not rows:
        return
    fields = list(rows[0].keys())
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if v is None else v) for k, v in row.items()})


def _plot_curves(reports, section, key, title, xlabel, ylabel, path,
                 logy=False):
    fig, ax = plt.subplots()
    plotted = False
    for label, rep in reports:
        xs, ys = rep.curve(section, key)
        if len(xs) == 0:
            continue
        ax.plot(xs, ys, label=label, linewidth=1.2)
        plotted = True
    if not plotted:
        plt.close(fig)
        return False
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)
    return True


def _plot_dose_sweep(reports, outdir, written):
    by_dose = []
    for label, rep in reports:
        try:
            dose = float(rep.meta.get("dose_fraction", ""))
        except ValueError:
            continue
        by_dose.append((dose, label, rep))
    if len(by_dose) < 2:
        return
    by_dose.sort(key=lambda t: t[0])
    materials = []
    for _, _, rep in by_dose:
        for key in rep.keys("ct_number"):
            if key not in materials:
                materials.append(key)
    if materials:
        fig, ax = plt.subplots()
        for mat in materials:
            doses = [d for d, _, rep in by_dose
                     if _maybe(rep, "ct_number", mat, "mean") is not None]
            vals = [_maybe(rep, "ct_number", mat, "mean")
                    for d, _, rep in by_dose
                    if _maybe(rep, "ct_number", mat, "mean") is not None]
            if doses:
                ax.plot([100 * d for d in doses], vals, marker="o",
                        markersize=3, label=mat)
        ax.set_xlabel("dose level [% of full]")
        ax.set_ylabel("ROI mean [HU]")
        ax.set_title("CT number vs dose level")
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = Path(outdir) / "dose_sweep_ct.svg"
        fig.savefig(path, **_SAVEFIG)
        plt.close(fig)
        written.append(path)
    fig, ax = plt.subplots()
    plotted = False
    for dose, label, rep in by_dose:
        xs, ys = rep.curve("nps", "refined")
        if len(xs):
            ax.plot(xs, ys, label=f"{100 * dose:g}%", linewidth=1.2)
            plotted = True
    if plotted:
        ax.set_xlabel("spatial frequency [1/mm]")
        ax.set_ylabel("NPS [HU$^2$ mm$^2$]")
        ax.set_title("Refined-image NPS across dose levels")
        ax.legend(fontsize=7, title="dose")
        fig.tight_layout()
        path = Path(outdir) / "dose_sweep_nps.svg"
        fig.savefig(path, **_SAVEFIG)
        written.append(path)
    plt.close(fig)


def render_report(csv_paths, outdir, labels=None):
    """Summary CSV plus NPS/TTF overlay and dose-sweep figures.

    Returns the list of files written.  Raises ConfigError on incompatible
    input schemas (missing columns are named by the CSV reader).
    """
    if not csv_paths:
        raise ConfigError("report needs at least one metrics CSV")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    reports = load_reports(csv_paths, labels)
    written = []
    summary = outdir / "summary.csv"
    _write_summary(_summary_rows(reports), summary)
    written.append(summary)
    for key, name in (("refined", "nps_refined"), ("noisy", "nps_noisy")):
        path = outdir / f"{name}.svg"
        if _plot_curves(reports, "nps", key,
                        f"Noise power spectrum ({key})",
                        "spatial frequency [1/mm]", "NPS [HU$^2$ mm$^2$]", path):
            written.append(path)
    for key in ("refined", "noisy"):
        path = outdir / f"ttf_{key}.svg"
        if _plot_curves(reports, "ttf", key, f"Transfer function ({key})",
                        "spatial frequency [1/mm]", "TTF", path):
            written.append(path)
    _plot_dose_sweep(reports, outdir, written)
    return written
