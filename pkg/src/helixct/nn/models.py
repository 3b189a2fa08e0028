"""Two-stage multi-frame denoisers and the non-learned baseline.

The projection-domain model (two cascaded ResUNets) sees a window of
candidate frames interleaved with their noise-prior maps; its second step
re-reads the untouched frames next to the first-step residual so artifacts
cannot accumulate.  The image-domain model (one ResUNet) sees window pairs
of the raw reconstruction and the separately reconstructed residual.  Both
emit only the residual for the window center; adding it to the input is the
caller's business, which keeps the decoupled image-domain path exact.
"""

import numpy as np

from ..errors import StageContractError
from . import autodiff as ad
from .layers import Module, ResUNet

__all__ = ["MPDModel", "MIRModel", "mpd_forward", "mir_forward",
           "sliding_window_apply", "baseline_denoise", "gaussian_window_weights",
           "apply_mpd_to_stream"]


class MPDModel(Module):
    """Projection-domain denoiser: two ResUNets bridged by the residual.

    Step 1 consumes 2*(2F+1) channels (frame, prior) interleaved per window
    position; step 2 consumes the 2F+1 untouched frames plus the step-1
    residual.  ``frame_scale`` and ``prior_scale`` are fixed input
    normalizations (the latter also conditions the step-1 residual fed to
    step 2); the residual output is always in frame units.
    """

    def __init__(self, rng, window_half_width=1, widths=(16, 32),
                 frame_scale=1.0, prior_scale=32.0, priors_to_step2=False):
        self.F = int(window_half_width)
        self.widths = tuple(widths)
        self.frame_scale = float(frame_scale)
        self.prior_scale = float(prior_scale)
        self.priors_to_step2 = bool(priors_to_step2)
        n = 2 * self.F + 1
        step2_in = n + 1 + (n if priors_to_step2 else 0)
        self.step1 = ResUNet(2 * n, rng, widths)
        self.step2 = ResUNet(step2_in, rng, widths)

    @property
    def window(self):
        return 2 * self.F + 1

    def forward(self, frames, priors):
        """Batched residual prediction.

        frames, priors: (B, 2F+1, H, W) arrays. Returns a (B, 1, H, W)
        Tensor in frame units.
        """
        n = self.window
        if frames.shape[1] != n or priors.shape[1] != n:
            raise StageContractError(
                f"window length must be {n}, got {frames.shape[1]}")
        b, _, h, w = frames.shape
        in1 = np.empty((b, 2 * n, h, w))
        in1[:, 0::2] = frames * self.frame_scale
        in1[:, 1::2] = priors * self.prior_scale
        r1 = self.step1(ad.constant(in1))
        parts = [ad.constant(frames * self.frame_scale), ad.scale(r1, self.prior_scale)]
        if self.priors_to_step2:
            parts.append(ad.constant(priors * self.prior_scale))
        return self.step2(ad.concat(parts, axis=1))

    def manifest(self):
        return {"kind": "mpd", "F": self.F, "widths": list(self.widths),
                "frame_scale": self.frame_scale, "prior_scale": self.prior_scale,
                "priors_to_step2": self.priors_to_step2}


class MIRModel(Module):
    """Image-domain refiner over window pairs (image, residual recon).

    In the coupled ablation the pairs collapse to their sum, halving the
    input channels; the mode is recorded in provenance everywhere.
    """

    def __init__(self, rng, window_half_width=1, widths=(16, 32),
                 decoupled=True, image_scale=1.0e-3):
        self.F = int(window_half_width)
        self.widths = tuple(widths)
        self.decoupled = bool(decoupled)
        self.image_scale = float(image_scale)
        n = 2 * self.F + 1
        self.net = ResUNet((2 * n) if decoupled else n, rng, widths)

    @property
    def window(self):
        return 2 * self.F + 1

    def forward(self, images, residuals=None):
        """Batched residual prediction in normalized units.

        images, residuals: (B, 2F+1, H, W) in HU; physical residual is
        ``out / image_scale``.
        """
        n = self.window
        if images.shape[1] != n:
            raise StageContractError(f"window length must be {n}, got {images.shape[1]}")
        if self.decoupled:
            if residuals is None:
                raise StageContractError("decoupled refiner needs residual slices")
            b, _, h, w = images.shape
            x = np.empty((b, 2 * n, h, w))
            x[:, 0::2] = images * self.image_scale
            x[:, 1::2] = residuals * self.image_scale
        else:
            x = (images if residuals is None else images + residuals) * self.image_scale
        return self.net(ad.constant(x))

    def residual_hu(self, images, residuals=None):
        with ad.no_grad():
            out = self.forward(images, residuals)
        return out.data[:, 0] / self.image_scale

    def manifest(self):
        return {"kind": "mir", "F": self.F, "widths": list(self.widths),
                "decoupled": self.decoupled, "image_scale": self.image_scale}


def mpd_forward(model, window_frames, window_priors):
    """Residual for the middle frame of one window (uncombined)."""
    frames = np.stack(window_frames)[None]
    priors = np.stack(window_priors)[None]
    with ad.no_grad():
        out = model.forward(frames, priors)
    return out.data[0, 0]


def mir_forward(model, window_images, window_residuals=None):
    """Residual image for the middle slice of one window."""
    images = np.stack(window_images)[None]
    residuals = None if window_residuals is None else np.stack(window_residuals)[None]
    return model.residual_hu(images, residuals)[0]


def sliding_window_apply(frames, window_half_width, stage_fn):
    """Apply a window-consuming function at every interior center.

    frames is an ordered sequence of K items; returns the K - 2F outputs for
    centers F..K-1-F (edges are not padded).
    """
    f = int(window_half_width)
    k = len(frames)
    if k <= 2 * f:
        raise StageContractError(f"need more than {2 * f} frames, got {k}")
    return [stage_fn(frames[t - f:t + f + 1]) for t in range(f, k - f)]


def gaussian_window_weights(window_half_width, sigma=None):
    """Normalized Gaussian weights over 2F+1 taps."""
    f = int(window_half_width)
    if sigma is None:
        sigma = max(f, 0.5)
    k = np.arange(-f, f + 1, dtype=float)
    w = np.exp(-0.5 * (k / sigma) ** 2)
    return w / w.sum()


def baseline_denoise(window, weights=None):
    """Weighted temporal average across the window (non-learned reference)."""
    if len(window) == 0:
        raise StageContractError("baseline denoiser received an empty window")
    frames = np.stack(window)
    if weights is None:
        weights = gaussian_window_weights((len(window) - 1) // 2)
    weights = np.asarray(weights, dtype=float)
    if len(weights) != len(window):
        raise StageContractError("weights must match the window length")
    weights = weights / weights.sum()
    return np.tensordot(weights, frames, axes=(0, 0))


def _batched_windows(stack, f):
    """(T-2F, 2F+1, H, W) view of all interior windows of a (T, H, W) stack."""
    from numpy.lib.stride_tricks import sliding_window_view
    win = sliding_window_view(stack, 2 * f + 1, axis=0)
    return np.moveaxis(win, -1, 1)


def apply_mpd_to_stream(model, frames, priors, batch_size=16):
    """Residual frames for every interior center of a candidate stream.

    frames, priors: (T, H, W).  Returns (T, H, W) residuals, zero outside
    the valid center range [F, T-1-F].
    """
    f = model.F
    t = frames.shape[0]
    if t <= 2 * f:
        raise StageContractError(f"stream too short for window 2F+1={2 * f + 1}")
    wins_f = _batched_windows(frames, f)
    wins_p = _batched_windows(priors, f)
    out = np.zeros_like(frames)
    with ad.no_grad():
        for lo in range(0, wins_f.shape[0], batch_size):
            hi = min(lo + batch_size, wins_f.shape[0])
            res = model.forward(np.ascontiguousarray(wins_f[lo:hi]),
                                np.ascontiguousarray(wins_p[lo:hi]))
            out[f + lo:f + hi] = res.data[:, 0]
    return out
