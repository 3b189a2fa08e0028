"""Fan-to-parallel rebinning, decomposed so a denoiser can sit inside it.

A source ray at gantry angle ``beta`` and fan angle ``gamma`` equals the
parallel sample ``theta = beta + gamma``, ``d = R*sin(gamma)``.  Resampling
onto a regular (theta, d) grid is a 2D bilinear interpolation over (view,
channel).  It is split into:

* ``integer_slice``  -- pure gathers of the four integer-indexed neighbors
  (no arithmetic), preserving element-wise noise independence; and
* ``weighted_sum``   -- the bilinear combination with weights that add to 1.

``direct_rebin`` performs both halves in one pass and is the equivalence
oracle for the decomposition.

The default target grid keeps the angle step equal to the source view step.
That makes the gather pattern identical for every target angle (the source
view is ``j`` plus a per-column offset), which is what turns the candidate
gathers into a time sequence a sliding-window denoiser can run over.  The
decomposed path requires such a view-aligned grid; ``direct_rebin`` accepts
any grid.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, StageContractError
from .geometry import row_offsets

__all__ = ["TargetGrid", "RebinPlan", "CandidateStreams", "RebinnedSinogram",
           "default_target_grid", "build_rebin_plan", "integer_slice",
           "weighted_sum", "direct_rebin"]


@dataclass(frozen=True)
class TargetGrid:
    """Regular parallel grid: angles (rad, unwrapped) x signed distances (mm)."""

    angles: np.ndarray
    distances: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "angles", np.asarray(self.angles, dtype=float))
        object.__setattr__(self, "distances", np.asarray(self.distances, dtype=float))

    @property
    def angle_step(self):
        return float(self.angles[1] - self.angles[0]) if len(self.angles) > 1 else 0.0

    @property
    def distance_step(self):
        return float(self.distances[1] - self.distances[0])


@dataclass
class RebinPlan:
    """Neighbor indices and bilinear weights for every target element.

    ``view_t[j, i]`` and ``chan_l[i]`` are the lower integer neighbors; the
    four weights pair (t, l), (t, r), (t+1, l), (t+1, r) in that order and
    sum to one.  ``support`` marks targets whose four neighbors all exist.
    ``view_offset`` holds the per-column shift m with view_t = j + m for
    view-aligned grids (None otherwise).
    """

    grid: TargetGrid
    view_t: np.ndarray
    chan_l: np.ndarray
    w00: np.ndarray
    w01: np.ndarray
    w10: np.ndarray
    w11: np.ndarray
    support: np.ndarray
    num_source_views: int
    geom: object
    view_offset: np.ndarray = None

    @property
    def aligned(self):
        return self.view_offset is not None

    @property
    def num_angles(self):
        return len(self.grid.angles)

    @property
    def num_distances(self):
        return len(self.grid.distances)


@dataclass
class CandidateStreams:
    """Left/right channel candidates gathered at integer views.

    Frame ``t`` of either stream holds, for every target column, the source
    value at view ``t + m`` and the left (right) channel neighbor.  Values
    are untouched copies; ``valid`` marks elements whose source view exists.
    """

    left: np.ndarray
    right: np.ndarray
    valid: np.ndarray
    plan: RebinPlan

    def __len__(self):
        return self.left.shape[0]


@dataclass
class RebinnedSinogram:
    """Pseudo-parallel projections on the target grid.

    data is (angles, rows, distances); ``z_central[j, r]`` is the table
    position of the central-channel ray of frame j, row r.
    """

    data: np.ndarray
    angles: np.ndarray
    distances: np.ndarray
    support: np.ndarray
    z_central: np.ndarray
    geom: object
    provenance: str = "rebinned"

    def __post_init__(self):
        if not np.all(np.isfinite(self.data[self.support[:, None, :]
                                            .repeat(self.data.shape[1], axis=1)])):
            raise NumericError("non-finite rebinned data inside support")

    @property
    def distance_step(self):
        return float(self.distances[1] - self.distances[0])


def default_target_grid(geom, num_source_views):
    """View-aligned grid with native sampling density and full support.

    vpr/2 angles per half-turn (step = source view step); detector_cols
    distance samples spaced R*sin(channel step).
    """
    if geom.views_per_rotation % 2 != 0:
        raise ConfigError("the default grid needs an even views_per_rotation")
    vpr = geom.views_per_rotation
    dtheta = 2.0 * math.pi / vpr
    r = geom.focal_length_mm
    gmax = geom.max_fan_angle_rad
    cols = geom.detector_cols
    dd = r * math.sin(geom.channel_angle_step_rad)
    distances = (np.arange(cols) - 0.5 * (cols - 1)) * dd
    m0 = int(math.ceil(gmax / dtheta)) + 1
    max_m = int(math.floor((m0 * dtheta + gmax) / dtheta))
    num_angles = num_source_views - 1 - max_m
    if num_angles < 1:
        raise StageContractError(
            f"{num_source_views} source views leave no room for rebinning "
            f"margins (need > {1 + max_m})")
    angles = (m0 + np.arange(num_angles)) * dtheta
    return TargetGrid(angles=angles, distances=distances)


def build_rebin_plan(geom, num_source_views, grid=None):
    """Decompose the fan-to-parallel map into neighbors and weights."""
    if grid is None:
        grid = default_target_grid(geom, num_source_views)
    r = geom.focal_length_mm
    step = geom.channel_angle_step_rad
    cols = geom.detector_cols
    vpr = geom.views_per_rotation
    d = grid.distances
    th = grid.angles
    fan_ok = np.abs(d) < r * math.sin(geom.max_fan_angle_rad)
    gamma = np.arcsin(np.clip(d / r, -1.0, 1.0))
    col_star = gamma / step + 0.5 * (cols - 1)
    chan_l = np.floor(col_star).astype(np.int64)
    fc = col_star - chan_l
    chan_ok = (chan_l >= 0) & (chan_l + 1 <= cols - 1) & fan_ok

    dtheta = grid.angle_step
    aligned = len(th) > 1 and abs(dtheta * vpr / (2.0 * math.pi) - 1.0) < 1e-9
    if aligned:
        # per-column offset from the first angle; every later angle shifts by 1
        c0 = (th[0] - gamma) * vpr / (2.0 * math.pi)
        m = np.floor(np.round(c0, 9)).astype(np.int64)
        fv0 = np.clip(c0 - m, 0.0, 1.0)
        j = np.arange(len(th), dtype=np.int64)
        view_t = j[:, None] + m[None, :]
        fv = np.broadcast_to(fv0, (len(th), len(d)))
        view_offset = m
    else:
        view_star = (th[:, None] - gamma[None, :]) * vpr / (2.0 * math.pi)
        view_t = np.floor(view_star).astype(np.int64)
        fv = view_star - view_t
        view_offset = None

    view_ok = (view_t >= 0) & (view_t + 1 <= num_source_views - 1)
    support = view_ok & chan_ok[None, :]
    fc2 = np.broadcast_to(fc, fv.shape)
    return RebinPlan(grid=grid, view_t=view_t, chan_l=chan_l,
                     w00=(1.0 - fv) * (1.0 - fc2), w01=(1.0 - fv) * fc2,
                     w10=fv * (1.0 - fc2), w11=fv * fc2,
                     support=support, num_source_views=num_source_views,
                     geom=geom, view_offset=view_offset)


def integer_slice(stack, plan):
    """Gather left/right channel candidates at integer views (no arithmetic).

    ``stack`` is any (K, rows, cols) array sharing the plan's source layout
    (projections, noise priors, n0 maps).  Returns J+1 candidate frames so
    the weighted summation of target j can combine frames j and j+1.
    """
    if not plan.aligned:
        raise StageContractError(
            "integer slicing needs a view-aligned target grid; use "
            "direct_rebin for arbitrary grids")
    stack = np.asarray(stack)
    k = stack.shape[0]
    if k != plan.num_source_views:
        raise StageContractError(
            f"stream has {k} views but the plan was built for "
            f"{plan.num_source_views}")
    m = plan.view_offset
    l = plan.chan_l
    num_frames = plan.num_angles + 1
    t = np.arange(num_frames, dtype=np.int64)[:, None] + m[None, :]
    valid = (t >= 0) & (t <= k - 1)
    tc = np.clip(t, 0, k - 1)
    lc = np.clip(l, 0, stack.shape[2] - 1)
    rc = np.clip(l + 1, 0, stack.shape[2] - 1)
    rows = np.arange(stack.shape[1])
    s_l = stack[tc[:, None, :], rows[None, :, None], lc[None, None, :]]
    s_r = stack[tc[:, None, :], rows[None, :, None], rc[None, None, :]]
    return CandidateStreams(left=s_l, right=s_r, valid=valid, plan=plan)


def weighted_sum(candidates, plan, data_override=None):
    """Bilinear combination of candidate frames j and j+1 onto the grid.

    ``data_override`` substitutes (left, right) arrays shaped like the
    candidate data (e.g. denoised copies); validity and plan still come from
    ``candidates``.
    """
    if candidates.plan is not plan:
        raise StageContractError("candidate streams were sliced with a different plan")
    s_l, s_r = (candidates.left, candidates.right) if data_override is None \
        else data_override
    j = plan.num_angles
    valid = candidates.valid[:j] & candidates.valid[1:j + 1]
    support = plan.support & valid
    data = (plan.w00[:, None, :] * s_l[:j]
            + plan.w01[:, None, :] * s_r[:j]
            + plan.w10[:, None, :] * s_l[1:j + 1]
            + plan.w11[:, None, :] * s_r[1:j + 1])
    data = np.where(support[:, None, :], data, 0.0)
    return _make_sinogram(data, support, plan)


def direct_rebin(stack, plan):
    """Single-pass bilinear rebinning; the oracle for the decomposition."""
    stack = np.asarray(stack)
    k, rows, cols = stack.shape
    if k != plan.num_source_views:
        raise StageContractError(
            f"stream has {k} views but the plan was built for "
            f"{plan.num_source_views}")
    t = np.clip(plan.view_t, 0, k - 1)
    t1 = np.clip(plan.view_t + 1, 0, k - 1)
    l = np.clip(plan.chan_l, 0, cols - 1)
    r = np.clip(plan.chan_l + 1, 0, cols - 1)
    ridx = np.arange(rows)[None, :, None]
    s_l = stack[t[:, None, :], ridx, l[None, None, :]]
    s_r = stack[t[:, None, :], ridx, r[None, None, :]]
    s_l1 = stack[t1[:, None, :], ridx, l[None, None, :]]
    s_r1 = stack[t1[:, None, :], ridx, r[None, None, :]]
    data = (plan.w00[:, None, :] * s_l
            + plan.w01[:, None, :] * s_r
            + plan.w10[:, None, :] * s_l1
            + plan.w11[:, None, :] * s_r1)
    data = np.where(plan.support[:, None, :], data, 0.0)
    return _make_sinogram(data, plan.support.copy(), plan)


def _make_sinogram(data, support, plan):
    geom = plan.geom
    offs = row_offsets(geom)
    z_central = geom.z_at_angle(plan.grid.angles)[:, None] + offs[None, :]
    return RebinnedSinogram(data=data, angles=plan.grid.angles.copy(),
                            distances=plan.grid.distances.copy(),
                            support=support, z_central=z_central, geom=geom)
