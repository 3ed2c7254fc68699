"""Velocity and displacement fields on voxel grids.

Displacements are kept in voxel units throughout; the map sending a
fixed-frame voxel x to its moving-frame source is x + u(x). A stationary
velocity field integrates to a displacement by scaling and squaring: halve
the field ``steps`` times, then self-compose ``steps`` times. Region fields
merge into one global field by hard per-voxel selection on the fixed
segmentation, which is what preserves discontinuities at region boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    AllVoxelsFolded,
    BoxOutOfRange,
    DuplicateLabel,
    GridMismatch,
    MissingRegionField,
)
from .interp import SamplePlan, identity_coords, nearest_indices, plan_for_displacement
from .volume import Box, Grid, LabelMap, Volume, check_same_grid


def _validate_vectors(grid: Grid, vectors: np.ndarray) -> np.ndarray:
    v = np.asarray(vectors, dtype=np.float64)
    if v.shape != grid.dims + (3,):
        raise ValueError(f"vector shape {v.shape} != {grid.dims + (3,)}")
    if not np.all(np.isfinite(v)):
        raise ValueError("field components must be finite")
    v = np.ascontiguousarray(v)
    v.flags.writeable = False
    return v


@dataclass(frozen=True)
class VelocityField:
    """Stationary velocity field, one 3-vector per voxel (voxel units)."""

    grid: Grid
    vectors: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vectors", _validate_vectors(self.grid, self.vectors))


@dataclass(frozen=True)
class DisplacementField:
    """Displacement u with warp map x + u(x) (voxel units)."""

    grid: Grid
    vectors: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vectors", _validate_vectors(self.grid, self.vectors))


def zero_displacement(grid: Grid) -> DisplacementField:
    return DisplacementField(grid, np.zeros(grid.dims + (3,)))


# ---------------------------------------------------------------------------
# scaling-and-squaring integration (forward + exact reverse-mode adjoint)

def _squaring_forward(dims, v_flat: np.ndarray, steps: int):
    """Returns (final u, list of pre-step fields), all as (n_voxels, 3)."""
    u = v_flat * (0.5 ** steps)
    cache = []
    for _ in range(steps):
        cache.append(u)
        plan = plan_for_displacement(dims, u)
        inc = np.empty_like(u)
        for c in range(3):
            inc[:, c] = plan.gather(u[:, c])
        u = u + inc
    return u, cache


def _squaring_adjoint(dims, cache, grad_u: np.ndarray, steps: int) -> np.ndarray:
    """Pull a gradient w.r.t. the integrated displacement back to the velocity.

    Each squaring step u' = u + u(x + u(x)) contributes three pathways:
    the identity term, the sampled values (adjoint = weighted scatter), and
    the sample positions (adjoint = spatial gradient of the interpolant).
    """
    g = grad_u
    for u_k in reversed(cache):
        plan = plan_for_displacement(dims, u_k)
        g_in = g.copy()
        for c in range(3):
            corners = plan.gather_corners(u_k[:, c])
            g_in += g[:, c][:, None] * plan.point_gradient(corners)
            g_in[:, c] += plan.scatter_sum(g[:, c])
        g = g_in
    return g * (0.5 ** steps)


def integrate_velocity(v: VelocityField, steps: int = 7) -> DisplacementField:
    """Time-1 flow of the stationary velocity via scaling and squaring."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    u, _ = _squaring_forward(v.grid.dims, v.vectors.reshape(-1, 3), steps)
    return DisplacementField(v.grid, u.reshape(v.grid.dims + (3,)))


# ---------------------------------------------------------------------------
# warping

def warp_volume(vol: Volume, u: DisplacementField) -> Volume:
    """Resample: output(x) = vol(x + u(x)), trilinear with border clamp."""
    check_same_grid(vol, u)
    plan = plan_for_displacement(vol.grid.dims, u.vectors)
    out = plan.gather(vol.samples).reshape(vol.grid.dims)
    return Volume(vol.grid, out.astype(vol.samples.dtype))


def warp_labelmap(lm: LabelMap, u: DisplacementField) -> LabelMap:
    """Nearest-neighbor label transport; never invents labels."""
    check_same_grid(lm, u)
    dims = lm.grid.dims
    ix, iy, iz = identity_coords(dims)
    vec = u.vectors.reshape(-1, 3)
    jx, jy, jz = nearest_indices(dims, ix + vec[:, 0], iy + vec[:, 1], iz + vec[:, 2])
    out = lm.labels[jx, jy, jz].reshape(dims)
    return LabelMap(lm.grid, out)


# ---------------------------------------------------------------------------
# discontinuity-preserving composition

def compose_fields(
    region_fields: list[tuple[int, DisplacementField]], fixed_seg: LabelMap
) -> DisplacementField:
    """Select, at each voxel, the field of the region owning that voxel.

    The owning region is decided by the fixed segmentation, so the composed
    map stays a fixed-frame-to-moving-frame lookup. Hard selection, no
    blending: the label masks partition the grid.
    """
    by_label: dict[int, DisplacementField] = {}
    for label, fld in region_fields:
        if label in by_label:
            raise DuplicateLabel(label)
        if fld.grid != fixed_seg.grid:
            raise GridMismatch(f"{fld.grid} != {fixed_seg.grid}")
        by_label[label] = fld
    for label in fixed_seg.label_set:
        if label not in by_label:
            raise MissingRegionField(label)

    flat_labels = fixed_seg.labels.ravel()
    out = np.zeros((flat_labels.size, 3))
    for label in fixed_seg.label_set:
        sel = flat_labels == label
        out[sel] = by_label[label].vectors.reshape(-1, 3)[sel]
    return DisplacementField(fixed_seg.grid, out.reshape(fixed_seg.grid.dims + (3,)))


# ---------------------------------------------------------------------------
# Jacobian analysis

def jacobian_determinant(u: DisplacementField) -> Volume:
    """det(I + grad u) per voxel; central differences, one-sided at borders."""
    vec = u.vectors
    dims = u.grid.dims
    jac = np.empty((3, 3) + dims)
    for c in range(3):
        for axis in range(3):
            if dims[axis] == 1:
                jac[c, axis] = 0.0
            else:
                jac[c, axis] = np.gradient(vec[..., c], axis=axis)
        jac[c, c] += 1.0
    det = (
        jac[0, 0] * (jac[1, 1] * jac[2, 2] - jac[1, 2] * jac[2, 1])
        - jac[0, 1] * (jac[1, 0] * jac[2, 2] - jac[1, 2] * jac[2, 0])
        + jac[0, 2] * (jac[1, 0] * jac[2, 1] - jac[1, 1] * jac[2, 0])
    )
    return Volume(u.grid, det)


def sdlogj(
    jac: Volume,
    mask: np.ndarray | None = None,
    *,
    eps: float = 1e-9,
    policy: str = "exclude",
) -> float:
    """Standard deviation of log(J).

    ``policy='exclude'`` drops voxels with J <= eps (the default);
    ``policy='clamp'`` keeps them, clamped to eps before the log. Use
    :func:`sdlogj_detail` when the dropped/clamped count is needed.
    """
    return sdlogj_detail(jac, mask, eps=eps, policy=policy)[0]


def sdlogj_detail(
    jac: Volume,
    mask: np.ndarray | None = None,
    *,
    eps: float = 1e-9,
    policy: str = "exclude",
) -> tuple[float, int]:
    """(sdlogj, number of voxels at or below eps)."""
    vals = jac.astype64().ravel() if mask is None else jac.astype64()[mask].ravel()
    n_low = int(np.count_nonzero(vals <= eps))
    if policy == "exclude":
        vals = vals[vals > eps]
        if vals.size == 0:
            raise AllVoxelsFolded("no voxel has a positive Jacobian determinant")
    elif policy == "clamp":
        if n_low == vals.size:
            raise AllVoxelsFolded("no voxel has a positive Jacobian determinant")
        vals = np.clip(vals, eps, None)
    else:
        raise ValueError(f"unknown sdlogj policy {policy!r}")
    # np.std is two-pass (mean, then deviations): deterministic reduction
    return float(np.std(np.log(vals))), n_low


def folding_count(jac: Volume, mask: np.ndarray | None = None) -> int:
    """Number of voxels where the map locally inverts orientation (J <= 0)."""
    vals = jac.samples if mask is None else jac.samples[mask]
    return int(np.count_nonzero(vals <= 0.0))


# ---------------------------------------------------------------------------
# cropping

def crop_field(f: DisplacementField | VelocityField, box: Box):
    box.check_inside(f.grid)
    origin = tuple(
        o + l * s for o, l, s in zip(f.grid.origin, box.lo, f.grid.spacing)
    )
    sub = Grid(box.dims, f.grid.spacing, origin)
    return type(f)(sub, f.vectors[box.slices])


def uncrop_displacement(
    f: DisplacementField, box: Box, full_grid: Grid
) -> DisplacementField:
    """Embed a cropped field into the full grid; zero displacement outside."""
    box.check_inside(full_grid)
    if box.dims != f.grid.dims:
        raise BoxOutOfRange(
            f"box dims {box.dims} != field dims {f.grid.dims}"
        )
    out = np.zeros(full_grid.dims + (3,))
    out[box.slices] = f.vectors
    return DisplacementField(full_grid, out)
