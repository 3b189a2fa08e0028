"""Image-quality metrology: MSE/SSIM under display windowing, noise power
spectrum, task-based transfer function, and CT-number ROI statistics.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, StageContractError

__all__ = ["DisplayWindow", "FULL_RANGE", "MetricsReport", "apply_window",
           "mse", "ssim", "nps", "tile_rois", "ttf", "ct_number"]


@dataclass(frozen=True)
class DisplayWindow:
    """CT display window (level/width), mapped to 8-bit display units."""

    level_hu: float
    width_hu: float
    label: str = ""

    def __post_init__(self):
        if self.width_hu <= 0:
            raise ConfigError("display window width must be > 0")


# "full-range" evaluation window: [-1024, 3071] HU
FULL_RANGE = DisplayWindow(level_hu=1023.5, width_hu=4095.0, label="full-range")


def apply_window(hu, window):
    """Map HU to display units in [0, 255] under a level/width window."""
    lo = window.level_hu - 0.5 * window.width_hu
    return np.clip((np.asarray(hu, dtype=float) - lo) / window.width_hu, 0.0, 1.0) * 255.0


def _as_array(img):
    # accepts SliceImage-like wrappers and plain arrays; mind that ndarrays
    # expose a .data buffer attribute themselves
    if isinstance(img, np.ndarray):
        return np.asarray(img, dtype=float)
    if hasattr(img, "data"):
        return np.asarray(img.data, dtype=float)
    return np.asarray(img, dtype=float)


def mse(a, b, window=None):
    """Mean squared difference, in display units when a window is given."""
    a = _as_array(a)
    b = _as_array(b)
    if a.shape != b.shape:
        raise StageContractError(f"shape mismatch: {a.shape} vs {b.shape}")
    if window is not None:
        a = apply_window(a, window)
        b = apply_window(b, window)
    return float(np.mean((a - b) ** 2))


def _gaussian_window2d(size=11, sigma=1.5):
    k = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (k / sigma) ** 2)
    w = np.outer(g, g)
    return w / w.sum()


def _valid_corr(img, kernel):
    win = sliding_window_view(img, kernel.shape)
    return np.tensordot(win, kernel, axes=([2, 3], [0, 1]))


def ssim(a, b, window=None, k1=0.01, k2=0.03, win_size=11, sigma=1.5):
    """Mean local structural similarity with Gaussian weighting.

    Uses the standard 11x11 sigma=1.5 Gaussian window on 'valid' positions
    and a dynamic range of 255 display units.  Pass ``window=None`` to run
    on the full-range display mapping.
    """
    a = _as_array(a)
    b = _as_array(b)
    if a.shape != b.shape:
        raise StageContractError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape) < win_size:
        raise StageContractError(
            f"image {a.shape} smaller than the {win_size}x{win_size} local window")
    w = window if window is not None else FULL_RANGE
    x = apply_window(a, w)
    y = apply_window(b, w)
    g = _gaussian_window2d(win_size, sigma)
    mu_x = _valid_corr(x, g)
    mu_y = _valid_corr(y, g)
    sxx = _valid_corr(x * x, g) - mu_x * mu_x
    syy = _valid_corr(y * y, g) - mu_y * mu_y
    sxy = _valid_corr(x * y, g) - mu_x * mu_y
    c1 = (k1 * 255.0) ** 2
    c2 = (k2 * 255.0) ** 2
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


@dataclass
class NpsResult:
    freq_per_mm: np.ndarray
    power: np.ndarray
    nps2d: np.ndarray
    pixel_mm: float
    n_rois: int
    n_flagged: int


def _detrend_roi(roi, design, pinv):
    coef = pinv @ roi.ravel()
    fit = (design @ coef).reshape(roi.shape)
    return roi - fit, fit


def nps(rois, pixel_mm, detrend_flag_threshold=0.5):
    """Radially averaged noise power spectrum of uniform-region ROIs.

    Each ROI is detrended by a fitted second-order 2D polynomial before the
    periodogram; spectra are ensemble-averaged and binned radially.  ROIs
    where the polynomial explains more than ``detrend_flag_threshold`` of
    the variance (structure, e.g. a phantom edge) are flagged and excluded.

    Returns
    -------
    NpsResult with power in HU^2 * mm^2 over frequency in 1/mm.
    """
    rois = [np.asarray(r, dtype=float) for r in rois]
    if len(rois) < 2:
        raise StageContractError("need at least 2 ROIs for an NPS estimate")
    ny, nx = rois[0].shape
    if ny != nx:
        raise StageContractError("NPS ROIs must be square")
    if any(r.shape != (ny, nx) for r in rois):
        raise StageContractError("all NPS ROIs must share one shape")
    ys, xs = np.mgrid[0:ny, 0:nx]
    xs = xs - xs.mean()
    ys = ys - ys.mean()
    design = np.stack([np.ones(nx * ny), xs.ravel(), ys.ravel(),
                       (xs * xs).ravel(), (xs * ys).ravel(), (ys * ys).ravel()],
                      axis=1)
    pinv = np.linalg.pinv(design)
    acc = np.zeros((ny, nx))
    used = 0
    flagged = 0
    for roi in rois:
        detr, fit = _detrend_roi(roi, design, pinv)
        var_tot = float(np.var(roi))
        var_fit = float(np.var(fit))
        if var_tot > 0 and var_fit / var_tot > detrend_flag_threshold:
            flagged += 1
            continue
        acc += np.abs(np.fft.fft2(detr)) ** 2
        used += 1
    if used < 2:
        raise StageContractError(
            f"only {used} usable ROIs after edge flagging ({flagged} flagged)")
    nps2d = acc / used * (pixel_mm * pixel_mm) / (nx * ny)
    fx = np.fft.fftfreq(nx, d=pixel_mm)
    fr = np.hypot(fx[None, :], fx[:, None])
    df = 1.0 / (nx * pixel_mm)
    nbins = nx // 2 + 1
    idx = np.minimum(np.round(fr / df).astype(int), nbins - 1)
    sums = np.bincount(idx.ravel(), weights=nps2d.ravel(), minlength=nbins)
    counts = np.bincount(idx.ravel(), minlength=nbins)
    power = sums / np.maximum(counts, 1)
    freq = np.arange(nbins) * df
    return NpsResult(freq_per_mm=freq, power=power, nps2d=nps2d,
                     pixel_mm=pixel_mm, n_rois=used, n_flagged=flagged)


def tile_rois(images, roi_size, center_px, region_radius_px, overlap=0.5):
    """Square ROIs tiled with overlap inside a circular uniform region."""
    out = []
    step = max(1, int(round(roi_size * (1.0 - overlap))))
    cy, cx = center_px
    for img in images:
        arr = _as_array(img)
        h, w = arr.shape
        for y0 in range(0, h - roi_size + 1, step):
            for x0 in range(0, w - roi_size + 1, step):
                corners = [(y0, x0), (y0 + roi_size - 1, x0),
                           (y0, x0 + roi_size - 1),
                           (y0 + roi_size - 1, x0 + roi_size - 1)]
                if all((y - cy) ** 2 + (x - cx) ** 2 <= region_radius_px ** 2
                       for y, x in corners):
                    out.append(arr[y0:y0 + roi_size, x0:x0 + roi_size])
    return out


@dataclass
class TtfResult:
    freq_per_mm: np.ndarray
    modulation: np.ndarray
    center_mm: tuple
    esf_r_mm: np.ndarray
    esf: np.ndarray

    def freq_at(self, level):
        """First frequency where modulation falls to ``level`` (interpolated)."""
        m = self.modulation
        below = np.nonzero(m <= level)[0]
        if len(below) == 0:
            return float(self.freq_per_mm[-1])
        i = below[0]
        if i == 0:
            return 0.0
        f0, f1 = self.freq_per_mm[i - 1], self.freq_per_mm[i]
        m0, m1 = m[i - 1], m[i]
        return float(f0 + (m0 - level) * (f1 - f0) / (m0 - m1))


def _pixel_grid_mm(shape, pixel_mm):
    half_y = 0.5 * (shape[0] - 1)
    half_x = 0.5 * (shape[1] - 1)
    x = (np.arange(shape[1]) - half_x) * pixel_mm
    y = (np.arange(shape[0]) - half_y) * pixel_mm
    return np.meshgrid(x, y)


def _refine_center(arr, pixel_mm, cx, cy, radius, positive):
    xx, yy = _pixel_grid_mm(arr.shape, pixel_mm)
    for _ in range(2):
        rr = np.hypot(xx - cx, yy - cy)
        inside = rr < 0.7 * radius
        ring = (rr > 1.3 * radius) & (rr < 1.9 * radius)
        if not inside.any() or not ring.any():
            raise StageContractError("insert not found: reference regions empty")
        thr = 0.5 * (arr[inside].mean() + arr[ring].mean())
        mask = ((arr > thr) if positive else (arr < thr)) & (rr < 1.25 * radius)
        if not mask.any():
            raise StageContractError("insert not found: empty threshold mask")
        cx = float(xx[mask].mean())
        cy = float(yy[mask].mean())
    return cx, cy


def ttf(images, pixel_mm, center_mm, radius_mm, contrast_hu,
        band_mm=None, bin_mm=None):
    """Task-based transfer function from a circular insert's edge spread.

    The radially binned edge-spread function (accumulated over all given
    slices for noise averaging) is differentiated to a line-spread function
    whose DFT magnitude, normalized at zero frequency, is the TTF.

    Parameters
    ----------
    images : SliceImage/array or list of them
    center_mm : (x, y) nominal insert center; refined internally.
    contrast_hu : nominal insert-minus-background contrast; |contrast| must
        be at least 20 HU (low-contrast TTF is noise-dominated).
    band_mm : half-width of the radial fit band around the edge.
    """
    if abs(contrast_hu) < 20.0:
        raise StageContractError("TTF needs |contrast| >= 20 HU")
    if not isinstance(images, (list, tuple)):
        images = [images]
    arrs = [_as_array(im) for im in images]
    if bin_mm is None:
        bin_mm = 0.25 * pixel_mm
    if band_mm is None:
        band_mm = min(0.9 * radius_mm, max(6.0 * pixel_mm, 0.25 * radius_mm))
    cx, cy = _refine_center(arrs[0], pixel_mm, center_mm[0], center_mm[1],
                            radius_mm, contrast_hu > 0)
    if math.hypot(cx - center_mm[0], cy - center_mm[1]) > radius_mm:
        raise StageContractError("insert not found: center estimate diverged")
    r_lo = radius_mm - band_mm
    nbins = max(8, int(math.ceil(2.0 * band_mm / bin_mm)))
    r_hi = r_lo + nbins * bin_mm
    sums = np.zeros(nbins)
    counts = np.zeros(nbins)
    for arr in arrs:
        xx, yy = _pixel_grid_mm(arr.shape, pixel_mm)
        rr = np.hypot(xx - cx, yy - cy).ravel()
        sel = (rr >= r_lo) & (rr < r_hi)
        idx = np.minimum(((rr[sel] - r_lo) / bin_mm).astype(int), nbins - 1)
        np.add.at(sums, idx, arr.ravel()[sel])
        np.add.at(counts, idx, 1.0)
    have = counts > 0
    if have.sum() < nbins // 2:
        raise StageContractError("too few samples for the edge-spread function")
    r_centers = r_lo + (np.arange(nbins) + 0.5) * bin_mm
    esf = np.interp(r_centers, r_centers[have], sums[have] / counts[have])
    lsf = np.gradient(esf, bin_mm)
    spectrum = np.abs(np.fft.rfft(lsf))
    if spectrum[0] == 0:
        raise StageContractError("degenerate edge: zero net contrast")
    modulation = spectrum / spectrum[0]
    freq = np.fft.rfftfreq(nbins, d=bin_mm)
    return TtfResult(freq_per_mm=freq, modulation=modulation,
                     center_mm=(cx, cy), esf_r_mm=r_centers, esf=esf)


def ct_number(image, center_mm, radius_mm):
    """(mean, std) HU over pixels whose center lies inside the circle."""
    arr = _as_array(image)
    pixel_mm = image.pixel_mm if hasattr(image, "pixel_mm") else 1.0
    xx, yy = _pixel_grid_mm(arr.shape, pixel_mm)
    mask = (xx - center_mm[0]) ** 2 + (yy - center_mm[1]) ** 2 <= radius_mm ** 2
    if not mask.any():
        raise StageContractError("CT-number ROI contains no pixels")
    vals = arr[mask]
    return float(vals.mean()), float(vals.std())


CSV_HEADER = ["section", "key", "x", "value"]


@dataclass
class MetricsReport:
    """Long-format metric rows plus free-form metadata.

    Rows are (section, key, x, value); metadata is serialized as
    section="meta" rows so one CSV carries everything.
    """

    meta: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)

    def add_scalar(self, section, key, value, x=""):
        self.rows.append((section, key, str(x), float(value)))

    def add_curve(self, section, key, xs, values):
        for x, v in zip(xs, values):
            self.rows.append((section, key, format(float(x), ".10g"), float(v)))

    def curve(self, section, key):
        xs = [float(r[2]) for r in self.rows if r[0] == section and r[1] == key]
        vs = [float(r[3]) for r in self.rows if r[0] == section and r[1] == key]
        return np.array(xs), np.array(vs)

    def scalar(self, section, key, x=""):
        for r in self.rows:
            if r[0] == section and r[1] == key and r[2] == str(x):
                return float(r[3])
        raise KeyError((section, key, x))

    def sections(self):
        return sorted({r[0] for r in self.rows})

    def keys(self, section):
        out = []
        for r in self.rows:
            if r[0] == section and r[1] not in out:
                out.append(r[1])
        return out

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            for k in sorted(self.meta):
                writer.writerow(["meta", k, "", str(self.meta[k])])
            for section, key, x, value in self.rows:
                writer.writerow([section, key, x, format(value, ".10g")])

    @classmethod
    def read_csv(cls, path):
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise ConfigError(f"{path}: empty metrics CSV") from None
            if header != CSV_HEADER:
                missing = [c for c in CSV_HEADER if c not in header]
                raise ConfigError(
                    f"{path}: metrics CSV schema mismatch; missing columns "
                    f"{missing or header}")
            report = cls()
            for row in reader:
                if len(row) != 4:
                    raise ConfigError(f"{path}: malformed metrics row {row!r}")
                section, key, x, value = row
                if section == "meta":
                    report.meta[key] = value
                else:
                    report.rows.append((section, key, x, float(value)))
        return report
