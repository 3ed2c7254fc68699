"""Regular-grid scalar volumes and integer label maps.

Conventions used across the package:

* arrays are indexed ``[x, y, z]``; files are written x-fastest;
* displacement/velocity vectors are in voxel units — physical spacing only
  enters distance metrics and report output;
* 2D inputs are volumes with a size-1 z axis;
* all objects are immutable after construction and safe to share between
  threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BoxOutOfRange, GridMismatch, LabelNotFound
from .interp import SamplePlan, nearest_indices

Triple = tuple[float, float, float]


@dataclass(frozen=True)
class Grid:
    """Regular 3D voxel lattice with physical spacing and origin (mm)."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        if len(self.dims) != 3 or any(d < 1 for d in self.dims):
            raise ValueError(f"dims must be three positive integers, got {self.dims}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive reals, got {self.spacing}")
        if len(self.origin) != 3:
            raise ValueError("origin must have three components")

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Volume:
    """Scalar intensity samples on a grid; float32 or float64."""

    grid: Grid
    samples: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.dtype not in (np.float32, np.float64):
            s = s.astype(np.float64)
        if s.shape != self.grid.dims:
            raise ValueError(f"samples shape {s.shape} != grid dims {self.grid.dims}")
        if not np.all(np.isfinite(s)):
            raise ValueError("volume samples must be finite")
        object.__setattr__(self, "samples", _freeze(s))

    def astype64(self) -> np.ndarray:
        return np.asarray(self.samples, dtype=np.float64)


@dataclass(frozen=True)
class LabelMap:
    """Integer region labels on a grid; label 0 is background."""

    grid: Grid
    labels: np.ndarray
    label_set: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if not np.issubdtype(lab.dtype, np.integer):
            raise ValueError("labels must be integers")
        if lab.shape != self.grid.dims:
            raise ValueError(f"labels shape {lab.shape} != grid dims {self.grid.dims}")
        if lab.min() < 0:
            raise ValueError("labels must be non-negative")
        lab = lab.astype(np.int32, copy=False)
        object.__setattr__(self, "labels", _freeze(lab))
        object.__setattr__(
            self, "label_set", tuple(int(v) for v in np.unique(lab))
        )

    def mask(self, label: int) -> np.ndarray:
        """Boolean support of ``label`` (no presence check)."""
        return self.labels == label

    def require(self, label: int) -> None:
        if int(label) not in self.label_set:
            raise LabelNotFound(label)


@dataclass(frozen=True)
class Box:
    """Axis-aligned voxel box with inclusive bounds."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(int(v) for v in self.lo))
        object.__setattr__(self, "hi", tuple(int(v) for v in self.hi))
        if any(h < l for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"empty box {self.lo}..{self.hi}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(h - l + 1 for l, h in zip(self.lo, self.hi))

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(l, h + 1) for l, h in zip(self.lo, self.hi))

    def check_inside(self, grid: Grid) -> None:
        if any(l < 0 for l in self.lo) or any(
            h >= d for h, d in zip(self.hi, grid.dims)
        ):
            raise BoxOutOfRange(f"box {self.lo}..{self.hi} exceeds grid {grid.dims}")


def full_box(grid: Grid) -> Box:
    return Box((0, 0, 0), tuple(d - 1 for d in grid.dims))


def check_same_grid(a, b) -> None:
    if a.grid != b.grid:
        raise GridMismatch(f"{a.grid} != {b.grid}")


def trilinear_sample(vol: Volume, p) -> float:
    """Trilinear interpolation at continuous voxel coordinate ``p``.

    Coordinates outside [0, dim-1] are clamped per axis, which makes the
    operation total.
    """
    p = np.asarray(p, dtype=np.float64)
    plan = SamplePlan(vol.grid.dims, p[0:1], p[1:2], p[2:3])
    return float(plan.gather(vol.astype64())[0])


def nearest_sample(lm: LabelMap, p) -> int:
    """Label of the nearest voxel (border clamp, half-up tie break)."""
    p = np.asarray(p, dtype=np.float64)
    ix, iy, iz = nearest_indices(lm.grid.dims, p[0:1], p[1:2], p[2:3])
    return int(lm.labels[ix[0], iy[0], iz[0]])


def mask_apply(vol: Volume, lm: LabelMap, label: int) -> Volume:
    """Zero the volume outside ``lm == label`` (the region-masked image)."""
    check_same_grid(vol, lm)
    lm.require(label)
    out = np.where(lm.labels == label, vol.samples, 0).astype(vol.samples.dtype)
    return Volume(vol.grid, out)


def bounding_box(lm: LabelMap, label: int, margin: int = 0) -> Box:
    """Tightest box holding ``label``, dilated by ``margin``, grid-clipped."""
    lm.require(label)
    if margin < 0:
        raise ValueError("margin must be non-negative")
    where = np.nonzero(lm.labels == label)
    lo, hi = [], []
    for axis in range(3):
        lo.append(max(0, int(where[axis].min()) - margin))
        hi.append(min(lm.grid.dims[axis] - 1, int(where[axis].max()) + margin))
    return Box(tuple(lo), tuple(hi))


def union_box(a: Box, b: Box) -> Box:
    return Box(
        tuple(min(x, y) for x, y in zip(a.lo, b.lo)),
        tuple(max(x, y) for x, y in zip(a.hi, b.hi)),
    )


def crop_grid(grid: Grid, box: Box) -> Grid:
    origin = tuple(
        o + l * s for o, l, s in zip(grid.origin, box.lo, grid.spacing)
    )
    return Grid(box.dims, grid.spacing, origin)


def crop(obj, box: Box):
    """Extract the sub-grid of a Volume or LabelMap; origin follows the box."""
    box.check_inside(obj.grid)
    sub_grid = crop_grid(obj.grid, box)
    if isinstance(obj, Volume):
        return Volume(sub_grid, obj.samples[box.slices])
    if isinstance(obj, LabelMap):
        return LabelMap(sub_grid, obj.labels[box.slices])
    raise TypeError(f"cannot crop {type(obj).__name__}")
