"""Synthetic phantoms with analytic ground-truth deformations.

Phantoms provide what real data cannot: an exact per-region displacement to
score solvers against. The fixed image and labels are generated first; each
region then receives its own rigid/affine ground-truth map, and the moving
image is the fixed image pushed through the inverse maps region by region.
The resulting motion is smooth inside every region and discontinuous across
region boundaries.

Textures are band-limited random fields (plus a per-region intensity
offset), so both MSE and local cross-correlation have usable gradients;
pure piecewise-constant images are a deliberately hard mode, not the
default. Everything is deterministic for a fixed spec seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ParseError, SpecInfeasible
from .fields import DisplacementField, compose_fields
from .interp import SamplePlan, identity_coords, nearest_indices
from .volume import Grid, LabelMap, Volume

_IDENTITY = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))


@dataclass(frozen=True)
class RegionMotion:
    """Ground-truth map of one region: x -> linear @ (x - c) + c + translation,
    with c the region centroid."""

    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    linear: tuple[tuple[float, float, float], ...] = _IDENTITY

    def matrix(self) -> np.ndarray:
        return np.asarray(self.linear, dtype=np.float64).reshape(3, 3)

    def is_identity(self) -> bool:
        return (
            np.allclose(self.matrix(), np.eye(3))
            and tuple(self.translation) == (0.0, 0.0, 0.0)
        )


@dataclass(frozen=True)
class PhantomSpec:
    """Everything needed to rebuild a phantom bit-for-bit."""

    dims: tuple[int, int, int]
    n_regions: int
    layout: str = "nested_blobs"  # half_spaces | nested_blobs | voronoi
    motions: dict[int, RegionMotion] = field(default_factory=dict)
    texture_corr: float = 6.0
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if self.layout not in ("half_spaces", "nested_blobs", "voronoi"):
            raise ValueError(f"unknown layout {self.layout!r}")
        if self.n_regions < 1:
            raise ValueError("n_regions must be >= 1")
        if self.texture_corr < 1.0:
            raise ValueError("texture correlation length must be >= 1 voxel")
        if self.noise_sigma < 0.0:
            raise ValueError("noise_sigma must be >= 0")

    def motion(self, label: int) -> RegionMotion:
        return self.motions.get(label, RegionMotion())


@dataclass(frozen=True)
class PhantomData:
    moving: Volume
    fixed: Volume
    moving_seg: LabelMap
    fixed_seg: LabelMap
    gt_fields: dict[int, DisplacementField]
    gt_composed: DisplacementField
    spec: PhantomSpec


# ---------------------------------------------------------------------------
# region layouts

def _layout_labels(spec: PhantomSpec) -> np.ndarray:
    dims = spec.dims
    nx, ny, nz = dims
    ix, iy, iz = np.meshgrid(
        np.arange(nx, dtype=np.float64),
        np.arange(ny, dtype=np.float64),
        np.arange(nz, dtype=np.float64),
        indexing="ij",
    )
    if spec.layout == "half_spaces":
        axis = int(np.argmax(dims))
        coord = (ix, iy, iz)[axis]
        edges = np.linspace(0, dims[axis], spec.n_regions + 1)[1:-1]
        return np.digitize(coord, edges).astype(np.int32)

    if spec.layout == "voronoi":
        rng = np.random.default_rng(spec.seed + 1)
        seeds = rng.random((spec.n_regions, 3)) * (np.asarray(dims) - 1)
        best = np.full(dims, np.inf)
        labels = np.zeros(dims, dtype=np.int32)
        for i, s in enumerate(seeds):
            d2 = (ix - s[0]) ** 2 + (iy - s[1]) ** 2 + (iz - s[2]) ** 2
            closer = d2 < best
            labels[closer] = i
            best[closer] = d2[closer]
        return labels

    # nested_blobs: one rounded body inside background, sliced into
    # n_regions - 1 side-by-side lobes along x so adjacent lobes share a
    # flat interface (the discontinuity surface of interest).
    c = (np.asarray(dims, dtype=np.float64) - 1.0) / 2.0
    semi = np.maximum(((np.asarray(dims) - 1) / 2.0) * (0.78, 0.62, 0.62), 1.0)
    body = (
        ((ix - c[0]) / semi[0]) ** 2
        + ((iy - c[1]) / semi[1]) ** 2
        + ((iz - c[2]) / semi[2]) ** 2
    ) <= 1.0
    labels = np.zeros(dims, dtype=np.int32)
    n_lobes = spec.n_regions - 1
    if n_lobes <= 0:
        return labels
    if n_lobes == 1:
        labels[body] = 1
        return labels
    edges = np.linspace(c[0] - semi[0], c[0] + semi[0], n_lobes + 1)[1:-1]
    lobe = np.digitize(ix, edges)
    labels[body] = (lobe[body] + 1).astype(np.int32)
    return labels


# ---------------------------------------------------------------------------
# textures

def _texture(spec: PhantomSpec, labels: np.ndarray) -> np.ndarray:
    rng = np.random.default_rng(spec.seed)
    noise = rng.standard_normal(spec.dims)
    tex = ndimage.gaussian_filter(noise, sigma=spec.texture_corr / 2.0, mode="reflect")
    tex = tex / max(tex.std(), 1e-12)
    n_labels = int(labels.max()) + 1
    offsets = 0.15 + 0.7 * np.arange(n_labels) / max(n_labels - 1, 1)
    img = offsets[labels] + 0.18 * tex
    return img


# ---------------------------------------------------------------------------
# generation

def _centroids(labels: np.ndarray, label_values) -> dict[int, np.ndarray]:
    cents = {}
    for lab in label_values:
        pts = np.argwhere(labels == lab)
        cents[int(lab)] = pts.mean(axis=0)
    return cents


def _forward_map(motion: RegionMotion, center: np.ndarray, pts: np.ndarray) -> np.ndarray:
    return (pts - center) @ motion.matrix().T + center + np.asarray(motion.translation)


def _inverse_map(motion: RegionMotion, center: np.ndarray, pts: np.ndarray) -> np.ndarray:
    inv = np.linalg.inv(motion.matrix())
    return (pts - center - np.asarray(motion.translation)) @ inv.T + center


def make_phantom(spec: PhantomSpec) -> PhantomData:
    """Build a phantom pair plus its analytic ground-truth fields.

    The fixed frame owns the ground truth: u_i(x) = T_i(x) - x for each
    region map T_i, so warping the moving image with the composed field
    reproduces the fixed image up to interpolation error. Region maps are
    validated to keep their regions inside the grid.
    """
    dims = spec.dims
    grid = Grid(dims)
    fixed_labels = _layout_labels(spec)
    label_values = [int(v) for v in np.unique(fixed_labels)]
    clean_fixed = _texture(spec, fixed_labels)
    centers = _centroids(fixed_labels, label_values)

    bounds = np.asarray(dims, dtype=np.float64) - 1.0
    ix, iy, iz = identity_coords(dims)
    coords = np.stack([ix, iy, iz], axis=1)

    gt_fields: dict[int, DisplacementField] = {}
    for lab in label_values:
        motion = spec.motion(lab)
        mapped = _forward_map(motion, centers[lab], coords)
        region_sel = (fixed_labels.ravel() == lab)
        region_pts = mapped[region_sel]
        if region_pts.size and (
            region_pts.min() < 0.0 or (region_pts > bounds[None, :]).any()
        ):
            raise SpecInfeasible(
                f"region {lab} leaves the grid under its ground-truth map"
            )
        u = (mapped - coords).reshape(dims + (3,))
        gt_fields[lab] = DisplacementField(grid, u)

    fixed_seg = LabelMap(grid, fixed_labels)
    gt_composed = compose_fields(sorted(gt_fields.items()), fixed_seg)

    # moving frame: start from the background's inverse map, then stamp in
    # each foreground region where its inverse lands inside that region
    # (ascending label order, so higher labels win contested voxels)
    bg_motion = spec.motion(label_values[0])
    pts0 = _inverse_map(bg_motion, centers[label_values[0]], coords)
    plan0 = SamplePlan(dims, pts0[:, 0], pts0[:, 1], pts0[:, 2])
    moving_img = plan0.gather(clean_fixed)
    moving_lab = np.zeros(fixed_labels.size, dtype=np.int32)
    for lab in label_values:
        if lab == label_values[0] and spec.motion(lab).is_identity():
            continue  # background identity is already the initial state
        motion = spec.motion(lab)
        pts = _inverse_map(motion, centers[lab], coords)
        jx, jy, jz = nearest_indices(dims, pts[:, 0], pts[:, 1], pts[:, 2])
        claim = fixed_labels[jx, jy, jz] == lab
        if not claim.any():
            continue
        plan = SamplePlan(dims, pts[claim, 0], pts[claim, 1], pts[claim, 2])
        moving_img[claim] = plan.gather(clean_fixed)
        moving_lab[claim] = lab

    rng = np.random.default_rng(spec.seed + 2)
    fixed_img = clean_fixed + spec.noise_sigma * rng.standard_normal(dims)
    moving_img = moving_img.reshape(dims) + spec.noise_sigma * rng.standard_normal(dims)

    return PhantomData(
        moving=Volume(grid, moving_img),
        fixed=Volume(grid, fixed_img),
        moving_seg=LabelMap(grid, moving_lab.reshape(dims)),
        fixed_seg=fixed_seg,
        gt_fields=gt_fields,
        gt_composed=gt_composed,
        spec=spec,
    )


_FACE = ndimage.generate_binary_structure(3, 1)


def gt_field_error(
    estimated: DisplacementField,
    phantom: PhantomData,
    label: int,
    erode: int = 2,
) -> tuple[float, float]:
    """(mean, p95) voxel error vs the analytic field inside the eroded region."""
    if estimated.grid != phantom.fixed_seg.grid:
        raise ValueError("field grid does not match the phantom grid")
    region = phantom.fixed_seg.labels == label
    if erode > 0:
        shrunk = ndimage.binary_erosion(region, structure=_FACE, iterations=erode)
        if shrunk.any():
            region = shrunk
    diff = estimated.vectors - phantom.gt_fields[label].vectors
    err = np.sqrt(np.sum(diff * diff, axis=-1))[region]
    err_sorted = np.sort(err)
    rank = min(max(int(np.ceil(0.95 * err.size)), 1), err.size)
    return float(err.mean()), float(err_sorted[rank - 1])


# ---------------------------------------------------------------------------
# spec file round trip (key = value sidecar)

def format_phantom_spec(spec: PhantomSpec) -> str:
    lines = [
        "dims = " + ",".join(str(d) for d in spec.dims),
        f"n_regions = {spec.n_regions}",
        f"layout = {spec.layout}",
        f"texture_corr = {spec.texture_corr!r}",
        f"noise_sigma = {spec.noise_sigma!r}",
        f"seed = {spec.seed}",
    ]
    for lab in sorted(spec.motions):
        m = spec.motions[lab]
        lines.append(
            f"region.{lab}.translation = "
            + ",".join(repr(t) for t in m.translation)
        )
        if not np.allclose(m.matrix(), np.eye(3)):
            flat = ",".join(repr(v) for v in m.matrix().ravel())
            lines.append(f"region.{lab}.linear = {flat}")
    return "\n".join(lines) + "\n"


def parse_phantom_spec(text: str) -> PhantomSpec:
    fields: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {line!r}", line=lineno)
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()

    def pop(key, default=None):
        if key in fields:
            return fields.pop(key)
        if default is None:
            raise ParseError(f"missing required key {key!r}")
        return default

    dims = tuple(int(t) for t in pop("dims").split(","))
    n_regions = int(pop("n_regions"))
    layout = pop("layout", "nested_blobs")
    texture_corr = float(pop("texture_corr", "6.0"))
    noise_sigma = float(pop("noise_sigma", "0.0"))
    seed = int(pop("seed", "0"))

    motions: dict[int, dict] = {}
    for key in list(fields):
        parts = key.split(".")
        if len(parts) != 3 or parts[0] != "region":
            raise ParseError(f"unknown key {key!r}")
        lab, attr = int(parts[1]), parts[2]
        vals = [float(t) for t in fields.pop(key).split(",")]
        entry = motions.setdefault(lab, {})
        if attr == "translation":
            if len(vals) != 3:
                raise ParseError(f"{key} needs 3 components")
            entry["translation"] = tuple(vals)
        elif attr == "linear":
            if len(vals) != 9:
                raise ParseError(f"{key} needs 9 components")
            entry["linear"] = tuple(tuple(vals[i * 3:i * 3 + 3]) for i in range(3))
        else:
            raise ParseError(f"unknown region attribute {attr!r}")

    return PhantomSpec(
        dims=dims,
        n_regions=n_regions,
        layout=layout,
        motions={lab: RegionMotion(**kw) for lab, kw in motions.items()},
        texture_corr=texture_corr,
        noise_sigma=noise_sigma,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# bundled phantoms used by the CLI and the acceptance suite

def _rot_z(degrees: float, scale: float = 1.0):
    a = np.deg2rad(degrees)
    m = scale * np.array(
        [[np.cos(a), -np.sin(a), 0.0], [np.sin(a), np.cos(a), 0.0], [0.0, 0.0, 1.0]]
    )
    return tuple(tuple(float(v) for v in row) for row in m)


BUILTIN_SPECS: dict[str, PhantomSpec] = {
    # two foreground lobes moving apart: a 6-voxel jump across their interface
    "two-block-48": PhantomSpec(
        dims=(48, 48, 48),
        n_regions=3,
        layout="nested_blobs",
        motions={
            1: RegionMotion(translation=(-3.0, 0.0, 0.0)),
            2: RegionMotion(translation=(3.0, 0.0, 0.0)),
        },
        texture_corr=6.0,
        noise_sigma=0.005,
        seed=7,
    ),
    "two-block-24": PhantomSpec(
        dims=(24, 24, 24),
        n_regions=3,
        layout="nested_blobs",
        motions={
            1: RegionMotion(translation=(-2.0, 0.0, 0.0)),
            2: RegionMotion(translation=(2.0, 0.0, 0.0)),
        },
        texture_corr=4.0,
        noise_sigma=0.005,
        seed=11,
    ),
    "translate-32": PhantomSpec(
        dims=(32, 32, 32),
        n_regions=2,
        layout="nested_blobs",
        motions={1: RegionMotion(translation=(2.5, -1.5, 1.0))},
        texture_corr=5.0,
        noise_sigma=0.005,
        seed=5,
    ),
    "affine-32": PhantomSpec(
        dims=(32, 32, 32),
        n_regions=2,
        layout="nested_blobs",
        motions={
            1: RegionMotion(translation=(1.0, 0.5, 0.0), linear=_rot_z(5.0, 1.04)),
        },
        texture_corr=5.0,
        noise_sigma=0.005,
        seed=9,
    ),
}


def builtin_phantom(name: str) -> PhantomData:
    if name not in BUILTIN_SPECS:
        known = ", ".join(sorted(BUILTIN_SPECS))
        raise ValueError(f"unknown phantom {name!r} (known: {known})")
    return make_phantom(BUILTIN_SPECS[name])
