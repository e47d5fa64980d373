"""Registration-quality metrics: Dice overlap, surface distances, folding count.

Distances are Euclidean in millimetres (voxel positions scaled by spacing);
the Hausdorff distance is exact (100th percentile) unless a percentile is
requested explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.spatial import cKDTree

from .core import LabelMask, ValidationError, check_same_shape

CSV_COLUMNS = ("pair", "label", "dsc", "hd_mm", "asd_mm", "neg_jdet", "seconds")


@dataclass(frozen=True)
class MetricRow:
    """Evaluation result for one image pair (label-averaged) plus the
    per-label breakdown {label: (dsc, hd_mm, asd_mm)}."""

    dsc: float
    hd_mm: float
    asd_mm: float
    neg_jdet: float  # an integer count per pair, a mean in aggregate rows
    per_label: Mapping[int, tuple[float, float, float]] = field(default_factory=dict)
    pair: str = ""
    seconds: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.dsc <= 1.0:
            raise ValidationError(f"dsc must be in [0, 1], got {self.dsc}")
        if self.asd_mm < 0 or self.hd_mm < self.asd_mm - 1e-12:
            raise ValidationError("hd_mm >= asd_mm >= 0 violated")
        if self.neg_jdet < 0:
            raise ValidationError("neg_jdet must be >= 0")
        object.__setattr__(self, "per_label", dict(self.per_label))


def dice(a: LabelMask, b: LabelMask) -> float:
    """2|A n B| / (|A| + |B|); two empty masks count as a perfect match."""
    check_same_shape(a, b, "masks")
    na, nb = a.foreground_count, b.foreground_count
    if na == 0 and nb == 0:
        return 1.0
    inter = int(np.count_nonzero((a.data > 0) & (b.data > 0)))
    return 2.0 * inter / (na + nb)


def surface_voxels(m: LabelMask) -> np.ndarray:
    """Foreground voxels with at least one 6-neighbour background voxel.

    The volume boundary counts as background, so a mask touching the edge is
    surface there.  Returns an (n, 3) int array of positions.
    """
    if m.foreground_count == 0:
        raise ValidationError("surface_voxels needs a nonempty mask")
    fg = m.data > 0
    padded = np.pad(fg, 1, constant_values=False)
    exposed = np.zeros_like(fg)
    for axis in range(3):
        for step in (-1, 1):
            # wrap-around entries of roll land in the padding ring, cropped below
            exposed |= ~np.roll(padded, step, axis=axis)[1:-1, 1:-1, 1:-1]
    return np.argwhere(fg & exposed)


def _surface_points_mm(m: LabelMask, spacing) -> np.ndarray:
    s = np.asarray(spacing, dtype=np.float64)
    if s.shape != (3,) or np.any(s <= 0):
        raise ValidationError(f"spacing must be 3 positive values, got {spacing!r}")
    return surface_voxels(m).astype(np.float64) * s


def hausdorff(a: LabelMask, b: LabelMask, spacing=(1.0, 1.0, 1.0), percentile: float = 100.0) -> float:
    """Symmetric surface Hausdorff distance in mm (exact by default)."""
    check_same_shape(a, b, "masks")
    pa, pb = _surface_points_mm(a, spacing), _surface_points_mm(b, spacing)
    d_ab = cKDTree(pb).query(pa)[0]
    d_ba = cKDTree(pa).query(pb)[0]
    if percentile >= 100.0:
        return float(max(d_ab.max(), d_ba.max()))
    return float(max(np.percentile(d_ab, percentile), np.percentile(d_ba, percentile)))


def asd(a: LabelMask, b: LabelMask, spacing=(1.0, 1.0, 1.0)) -> float:
    """Average symmetric surface distance in mm: mean of the two directed means."""
    check_same_shape(a, b, "masks")
    pa, pb = _surface_points_mm(a, spacing), _surface_points_mm(b, spacing)
    d_ab = cKDTree(pb).query(pa)[0]
    d_ba = cKDTree(pa).query(pb)[0]
    return float(0.5 * (d_ab.mean() + d_ba.mean()))


def rows_to_csv(rows, mean_row: MetricRow | None = None) -> str:
    """Serialize metric rows to CSV in the fixed CSV_COLUMNS order.

    One line per (pair, label), an 'all' line per pair with the
    label-averaged numbers, and optionally a final 'mean' pair line.
    """
    out = [",".join(CSV_COLUMNS)]

    def fmt(x: float) -> str:
        return f"{x:.9g}"

    def emit(row: MetricRow):
        for label in sorted(row.per_label):
            d, h, s = row.per_label[label]
            out.append(f"{row.pair},{label},{fmt(d)},{fmt(h)},{fmt(s)},,")
        out.append(
            f"{row.pair},all,{fmt(row.dsc)},{fmt(row.hd_mm)},{fmt(row.asd_mm)},"
            f"{row.neg_jdet},{fmt(row.seconds)}"
        )

    for row in rows:
        emit(row)
    if mean_row is not None:
        emit(mean_row)
    return "\n".join(out) + "\n"
