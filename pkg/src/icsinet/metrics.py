"""Segmentation/tip metrics and operator-agreement statistics.

Polygon vertices are continuous image-plane coordinates: pixel ``(row i,
col j)`` covers ``[j, j+1) x [i, i+1)`` and its center is ``(j + 0.5, i +
0.5)``. Tip points are in pixel-center units (center of pixel ``j`` is
``j``); only differences of tips are used here, so the half-pixel offset
between the two conventions never matters.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .errors import DegenerateTestError, InputError, ShapeError

CLASSES = ("oolemma", "pipette")


# --- rasterization -------------------------------------------------------------
def polygon_to_mask(poly, size, dtype=np.uint8) -> np.ndarray:
    """Even-odd scanline fill; a pixel is set iff its center lies inside.

    ``size`` is ``S`` (square) or ``(height, width)``.
    """
    pts = np.asarray(poly, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
        raise InputError(f"polygon needs at least 3 (x, y) vertices, got shape {pts.shape}")
    h, w = (size, size) if np.isscalar(size) else size
    mask = np.zeros((h, w), dtype=dtype)
    x0, y0 = pts[:, 0], pts[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    lo = max(0, int(math.floor(pts[:, 1].min() - 0.5)))
    hi = min(h - 1, int(math.ceil(pts[:, 1].max())))
    for i in range(lo, hi + 1):
        yc = i + 0.5
        hit = (y0 > yc) != (y1 > yc)
        if not hit.any():
            continue
        xs = np.sort((x1[hit] - x0[hit]) * (yc - y0[hit]) / (y1[hit] - y0[hit]) + x0[hit])
        for a, b in zip(xs[0::2], xs[1::2]):
            # centers j + 0.5 with a <= j + 0.5 < b
            j0 = max(0, math.ceil(a - 0.5))
            j1 = min(w, math.ceil(b - 0.5))
            if j1 > j0:
                mask[i, j0:j1] = 1
    return mask


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union; two empty masks agree perfectly (1.0)."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"iou: mask shapes differ {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def tip_distance(a, b) -> float:
    return math.hypot(float(a[0]) - float(b[0]), float(a[1]) - float(b[1]))


# --- statistics ----------------------------------------------------------------------
@dataclass
class WelchResult:
    t: float
    df: float
    p: float


def welch_t_test(a, b) -> WelchResult:
    """Two-sided Welch's unequal-variance t-test."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise InputError(f"welch_t_test needs >= 2 values per sample, got {len(a)} and {len(b)}")
    va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    if va == 0 and vb == 0:
        raise DegenerateTestError("welch_t_test: both samples have zero variance; p is undefined")
    t = (a.mean() - b.mean()) / math.sqrt(va + vb)
    df = (va + vb) ** 2 / (va**2 / (len(a) - 1) + vb**2 / (len(b) - 1))
    # two-sided tail of Student's t via the regularized incomplete beta
    p = float(special.betainc(df / 2, 0.5, df / (df + t * t)))
    return WelchResult(float(t), float(df), min(1.0, p))


def error_histogram(distances, bin_width: float) -> list[tuple[float, float, int]]:
    """Counts per ``[k*w, (k+1)*w)`` bin from 0 up to the bin holding the maximum."""
    if not bin_width > 0:
        raise InputError(f"bin_width must be > 0, got {bin_width}")
    d = np.asarray(list(distances), dtype=np.float64)
    if d.size == 0:
        return []
    if (d < 0).any():
        raise InputError("distances must be non-negative")
    idx = np.floor(d / bin_width).astype(int)
    counts = np.bincount(idx, minlength=idx.max() + 1)
    return [(k * bin_width, (k + 1) * bin_width, int(c)) for k, c in enumerate(counts)]


def histogram_csv(rows) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\r\n")
    wr.writerow(["bin_start", "bin_end", "count"])
    for lo, hi, c in rows:
        wr.writerow([f"{lo:g}", f"{hi:g}", c])
    return buf.getvalue()


# --- agreement -------------------------------------------------------------------------
@dataclass
class AnnotationRecord:
    frame_id: str
    operator_id: str
    round: int
    polygons: dict[str, list]
    tip: tuple[float, float]
    image_size: tuple[int, int] = (512, 512)  # (width, height)

    def __post_init__(self):
        for name, poly in self.polygons.items():
            if len(poly) < 3:
                raise InputError(f"{self.frame_id}/{self.operator_id}: polygon '{name}' has fewer than 3 vertices")
        w, h = self.image_size
        if not (0 <= self.tip[0] <= w - 1 and 0 <= self.tip[1] <= h - 1):
            raise InputError(f"{self.frame_id}/{self.operator_id}: tip {self.tip} outside {w}x{h} frame")

    def mask(self, cls: str) -> np.ndarray:
        w, h = self.image_size
        return polygon_to_mask(self.polygons[cls], (h, w))


@dataclass
class AgreementReport:
    mode: str
    iou_values: dict[str, list[float]] = field(default_factory=dict)
    tip_values: list[float] = field(default_factory=list)

    @staticmethod
    def _stats(v):
        arr = np.sort(np.asarray(v, dtype=np.float64))  # fixed summation order
        return float(arr.mean()), float(arr.std())  # population stddev

    def iou_mean(self, cls):
        return self._stats(self.iou_values[cls])[0]

    def iou_std(self, cls):
        return self._stats(self.iou_values[cls])[1]

    @property
    def tip_mean(self):
        return self._stats(self.tip_values)[0]

    @property
    def tip_std(self):
        return self._stats(self.tip_values)[1]

    def statistics(self) -> dict[str, list[float]]:
        out = {f"{c}_iou": self.iou_values[c] for c in self.iou_values}
        out["needle_px"] = self.tip_values
        return out


def _pair_values(records, classes):
    ious = {c: [] for c in classes}
    tips = []
    for a, b in records:
        for c in classes:
            ious[c].append(iou(a.mask(c), b.mask(c)))
        tips.append(tip_distance(a.tip, b.tip))
    return ious, tips


def pairwise_agreement(records: list[AnnotationRecord], mode: str, classes=CLASSES) -> AgreementReport:
    """Pairwise IoU and tip distances between operators (inter) or rounds (intra).

    Pairs are enumerated in sorted key order so the values, and therefore
    the aggregates, do not depend on record order.
    """
    if mode not in ("inter", "intra"):
        raise InputError(f"mode must be 'inter' or 'intra', got {mode!r}")
    groups: dict[tuple, dict] = defaultdict(dict)
    for r in records:
        if mode == "inter":
            key, member = (r.frame_id, r.round), r.operator_id
        else:
            key, member = (r.operator_id, r.frame_id), r.round
        if member in groups[key]:
            raise InputError(f"duplicate annotation for {key} / {member}")
        groups[key][member] = r

    pairs = []
    for key in sorted(groups, key=lambda k: tuple(map(str, k))):
        members = groups[key]
        for m1, m2 in itertools.combinations(sorted(members, key=str), 2):
            pairs.append((members[m1], members[m2]))
    if not pairs:
        need = "at least 2 operators sharing a frame in the same round" if mode == "inter" else "at least 2 rounds per operator and frame"
        raise InputError(f"no {mode}-operator pairings: need {need}")
    ious, tips = _pair_values(pairs, classes)
    return AgreementReport(mode=mode, iou_values=ious, tip_values=tips)


_ROW_LABELS = {"oolemma": "Oolemma (IoU)", "pipette": "Pipette (IoU)"}


def render_table(reports: dict[str, AgreementReport], p_values: dict[str, str] | None = None) -> str:
    """Plain-text table: one row per statistic, one "mean [stddev]" column per mode."""
    modes = [m for m in ("inter", "intra") if m in reports]
    headers = [""] + [{"inter": "Interoperator", "intra": "Intraoperator"}[m] for m in modes]
    if p_values:
        headers.append("p (Welch)")
    first = reports[modes[0]]
    rows = []
    for cls in first.iou_values:
        row = [_ROW_LABELS.get(cls, f"{cls.title()} (IoU)")]
        row += [f"{reports[m].iou_mean(cls):.3f} [{reports[m].iou_std(cls):.3f}]" for m in modes]
        if p_values:
            row.append(p_values.get(f"{cls}_iou", ""))
        rows.append(row)
    row = ["Needle (pixels)"] + [f"{reports[m].tip_mean:.3f} [{reports[m].tip_std:.3f}]" for m in modes]
    if p_values:
        row.append(p_values.get("needle_px", ""))
    rows.append(row)
    widths = [max(len(r[i]) for r in rows + [headers]) for i in range(len(headers))]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [
        "Mean operator performance (population standard deviations in square brackets)",
        fmt.format(*headers),
        "  ".join("-" * w for w in widths),
    ]
    lines += [fmt.format(*r) for r in rows]
    return "\n".join(lines) + "\n"


def report_csv(reports: dict[str, AgreementReport], p_values: dict[str, str] | None = None) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\r\n")
    wr.writerow(["statistic", "mode", "n", "mean", "std_population", "p_welch"])
    for mode, rep in reports.items():
        for stat, values in rep.statistics().items():
            arr = np.sort(np.asarray(values, dtype=np.float64))
            p = (p_values or {}).get(stat, "")
            wr.writerow([stat, mode, len(arr), f"{arr.mean():.6f}", f"{arr.std():.6f}", p])
    return buf.getvalue()
