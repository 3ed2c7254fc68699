"""Registration evaluation: Dice, HD95 (mm), SDlogJ, folding count.

HD95 uses nearest-rank percentiles of directed boundary distances so that
external tools can reproduce the numbers bit-exactly. Boundaries are
6-connected foreground faces (the volume edge counts as background).
SDlogJ is reported over the full grid; Jacobian values at or below an
epsilon are excluded from the log and counted separately.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import EmptySurface, GridMismatch
from .fields import DisplacementField, folding_count, jacobian_determinant, sdlogj_detail
from .volume import LabelMap

_FACE = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True)
class LabelMetrics:
    dice: float
    hd95_mm: float


@dataclass(frozen=True)
class MetricsReport:
    """Per-label overlap/surface metrics plus global field smoothness."""

    per_label: dict[int, LabelMetrics]
    sdlogj: float
    folding_count: int
    folding_fraction: float
    sdlogj_excluded_count: int

    def mean_dice(self) -> float:
        if not self.per_label:
            return 1.0
        return float(np.mean([m.dice for m in self.per_label.values()]))

    def to_json(self) -> str:
        """Deterministic JSON with fixed 6-decimal float formatting."""
        lines = ["{", '  "per_label": {']
        items = sorted(self.per_label.items())
        for i, (label, m) in enumerate(items):
            comma = "," if i < len(items) - 1 else ""
            lines.append(
                f'    "{label}": {{"dice": {m.dice:.6f}, '
                f'"hd95_mm": {m.hd95_mm:.6f}}}{comma}'
            )
        lines.append("  },")
        lines.append(f'  "sdlogj": {self.sdlogj:.6f},')
        lines.append(f'  "folding_count": {self.folding_count},')
        lines.append(f'  "folding_fraction": {self.folding_fraction:.6f},')
        lines.append(f'  "sdlogj_excluded_count": {self.sdlogj_excluded_count}')
        lines.append("}")
        return "\n".join(lines) + "\n"


def dice(a: LabelMap, b: LabelMap, label: int) -> float:
    """Overlap 2|A∩B| / (|A| + |B|); two empty masks count as 1.0."""
    if a.grid != b.grid:
        raise GridMismatch(f"{a.grid} != {b.grid}")
    ma = a.labels == label
    mb = b.labels == label
    na, nb = int(np.count_nonzero(ma)), int(np.count_nonzero(mb))
    if na + nb == 0:
        return 1.0
    inter = int(np.count_nonzero(ma & mb))
    return 2.0 * inter / (na + nb)


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one background face-neighbor.

    The grid boundary counts as background, so foreground touching the
    volume edge is surface.
    """
    mask = np.asarray(mask, dtype=bool)
    interior = ndimage.binary_erosion(mask, structure=_FACE, border_value=0)
    return mask & ~interior


def _surface_points_mm(mask: np.ndarray, spacing) -> np.ndarray:
    surf = surface_voxels(mask)
    pts = np.argwhere(surf).astype(np.float64)
    return pts * np.asarray(spacing, dtype=np.float64)


def _percentile_nearest_rank(sorted_vals: np.ndarray, q: float) -> float:
    rank = int(np.ceil(q * sorted_vals.size))
    rank = min(max(rank, 1), sorted_vals.size)
    return float(sorted_vals[rank - 1])


def hd95(a: LabelMap, b: LabelMap, label: int, spacing=None) -> float:
    """95% Hausdorff distance in mm between one label's boundaries.

    Directed boundary distances are computed both ways with anisotropic
    spacing applied; the result is the larger of the two nearest-rank 95th
    percentiles.
    """
    if a.grid != b.grid:
        raise GridMismatch(f"{a.grid} != {b.grid}")
    if spacing is None:
        spacing = a.grid.spacing
    pa = _surface_points_mm(a.labels == label, spacing)
    pb = _surface_points_mm(b.labels == label, spacing)
    if pa.shape[0] == 0:
        raise EmptySurface("first", label)
    if pb.shape[0] == 0:
        raise EmptySurface("second", label)
    d_ab = np.sort(cKDTree(pb).query(pa)[0])
    d_ba = np.sort(cKDTree(pa).query(pb)[0])
    return max(
        _percentile_nearest_rank(d_ab, 0.95),
        _percentile_nearest_rank(d_ba, 0.95),
    )


def field_smoothness(u: DisplacementField) -> tuple[float, int, float]:
    """(sdlogj, folding_count, folding_fraction) of one displacement field."""
    jac = jacobian_determinant(u)
    sd, _ = sdlogj_detail(jac)
    folds = folding_count(jac)
    return sd, folds, folds / u.grid.n_voxels


def compute_report(
    warped_labels: LabelMap,
    fixed_seg: LabelMap,
    field: DisplacementField,
) -> MetricsReport:
    """Evaluate a composed field: per-foreground-label Dice/HD95 of the
    warped moving labels against the fixed labels, plus field smoothness."""
    if warped_labels.grid != fixed_seg.grid:
        raise GridMismatch(f"{warped_labels.grid} != {fixed_seg.grid}")
    per_label: dict[int, LabelMetrics] = {}
    for label in fixed_seg.label_set:
        if label == 0:
            continue
        per_label[label] = LabelMetrics(
            dice=dice(warped_labels, fixed_seg, label),
            hd95_mm=hd95(warped_labels, fixed_seg, label),
        )
    jac = jacobian_determinant(field)
    sd, n_low = sdlogj_detail(jac)
    folds = folding_count(jac)
    return MetricsReport(
        per_label=per_label,
        sdlogj=sd,
        folding_count=folds,
        folding_fraction=folds / field.grid.n_voxels,
        sdlogj_excluded_count=n_low,
    )
