"""Segmentation evaluation: DSC, mean surface distance and 95% Hausdorff distance.

Surfaces are the 6-connected boundary voxels of a structure (the volume
border counts as outside); distances run between voxel centers in mm.
MSD is symmetric (average of the two directed means) and HD95 is the 95th
percentile of the pooled directed distances, linearly interpolated.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import io
import math
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import EmptyStructureError, FormatError, ShapeError

STRUCTURES = ("background", "bladder", "prostate", "seminal_vesicles", "rectum")
DISPLAY_ORDER = ("prostate", "seminal_vesicles", "rectum", "bladder")
DISPLAY_NAMES = {"prostate": "Prostate", "seminal_vesicles": "Seminal vesicles",
                 "rectum": "Rectum", "bladder": "Bladder"}


@dataclass
class LabelVolume:
    labels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    names: tuple = STRUCTURES

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 3:
            raise ShapeError(f"label volume must be 3D, got {self.labels.shape}")
        if any(s <= 0 for s in self.spacing):
            raise ShapeError(f"spacing must be positive, got {self.spacing}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.names)):
            raise ShapeError("labels outside [0, num_structures)")


def _arr(v):
    return v.labels if isinstance(v, LabelVolume) else np.asarray(v)


def _spacing(v, spacing):
    if spacing is not None:
        return tuple(float(s) for s in spacing)
    if isinstance(v, LabelVolume):
        return tuple(float(s) for s in v.spacing)
    return (1.0, 1.0, 1.0)


def dsc(pred, truth, label: int) -> float:
    """2|P & T| / (|P| + |T|); two empty masks score 1 (see :func:`dsc_flagged`)."""
    return dsc_flagged(pred, truth, label)[0]


def dsc_flagged(pred, truth, label: int):
    p, t = _arr(pred) == label, _arr(truth) == label
    if p.shape != t.shape:
        raise ShapeError(f"shape mismatch {p.shape} vs {t.shape}")
    sp, st = int(p.sum()), int(t.sum())
    if sp + st == 0:
        return 1.0, True
    return 2.0 * int(np.logical_and(p, t).sum()) / (sp + st), False


def extract_surface(mask: np.ndarray) -> np.ndarray:
    """Integer coordinates (K, 3) of mask voxels with a face neighbor outside."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyStructureError("cannot take the surface of an empty structure")
    padded = np.pad(mask, 1, constant_values=False)
    interior = padded[1:-1, 1:-1, 1:-1].copy()
    for ax in range(3):
        for sh in (-1, 1):
            interior &= np.roll(padded, sh, axis=ax)[1:-1, 1:-1, 1:-1]
    return np.argwhere(mask & ~interior)


def _directed_brute(a: np.ndarray, b: np.ndarray, spacing) -> np.ndarray:
    sp = np.asarray(spacing, dtype=np.float64)
    A, B = a * sp, b * sp
    out = np.empty(len(A))
    chunk = max(1, 2_000_000 // max(len(B), 1))
    for i in range(0, len(A), chunk):
        d2 = ((A[i:i + chunk, None, :] - B[None, :, :]) ** 2).sum(axis=2)
        out[i:i + chunk] = np.sqrt(d2.min(axis=1))
    return out


def _directed_edt(a: np.ndarray, b: np.ndarray, shape, spacing) -> np.ndarray:
    target = np.ones(shape, dtype=bool)
    target[tuple(b.T)] = False
    dist = ndimage.distance_transform_edt(target, sampling=spacing)
    return dist[tuple(a.T)]


BRUTE_LIMIT = 4_000_000


def surface_distances(pred, truth, label: int, spacing=None, method: str = "auto"):
    """Directed surface distances (pred->truth, truth->pred) in mm."""
    p, t = _arr(pred) == label, _arr(truth) == label
    if p.shape != t.shape:
        raise ShapeError(f"shape mismatch {p.shape} vs {t.shape}")
    spacing = _spacing(pred if isinstance(pred, LabelVolume) else truth, spacing)
    sa, sb = extract_surface(p), extract_surface(t)
    if method == "auto":
        method = "brute" if len(sa) * len(sb) <= BRUTE_LIMIT else "edt"
    if method == "brute":
        return _directed_brute(sa, sb, spacing), _directed_brute(sb, sa, spacing)
    if method == "edt":
        return _directed_edt(sa, sb, p.shape, spacing), _directed_edt(sb, sa, p.shape, spacing)
    raise ValueError(f"unknown method {method!r}")


def mean_surface_distance(pred, truth, label: int, spacing=None, method: str = "auto") -> float:
    d_pt, d_tp = surface_distances(pred, truth, label, spacing, method)
    return 0.5 * (float(d_pt.mean()) + float(d_tp.mean()))


def hd95(pred, truth, label: int, spacing=None, method: str = "auto") -> float:
    d_pt, d_tp = surface_distances(pred, truth, label, spacing, method)
    return percentile95(np.concatenate([d_pt, d_tp]))


def percentile95(values) -> float:
    """95th percentile with linear interpolation at rank 0.95 * (n - 1)."""
    return float(np.percentile(np.asarray(values, dtype=np.float64), 95))


def max_hausdorff(pred, truth, label: int, spacing=None) -> float:
    d_pt, d_tp = surface_distances(pred, truth, label, spacing)
    return float(max(d_pt.max(), d_tp.max()))


def evaluate_case(pred, truth, spacing=None, names: Sequence[str] = STRUCTURES) -> dict:
    """Per-structure metrics for one case; surface metrics are None when either side is empty."""
    pa, ta = _arr(pred), _arr(truth)
    spacing = _spacing(pred if isinstance(pred, LabelVolume) else truth, spacing)
    out = {}
    for label, name in enumerate(names):
        if label == 0:
            continue
        d, _ = dsc_flagged(pa, ta, label)
        p_empty = not (pa == label).any()
        t_empty = not (ta == label).any()
        if p_empty or t_empty:
            out[name] = {"dsc": d, "msd": None, "hd95": None, "failed": p_empty}
            continue
        d_pt, d_tp = surface_distances(pa, ta, label, spacing)
        out[name] = {
            "dsc": d,
            "msd": 0.5 * (float(d_pt.mean()) + float(d_tp.mean())),
            "hd95": percentile95(np.concatenate([d_pt, d_tp])),
            "failed": False,
        }
    return out


@dataclass
class Aggregate:
    mean: float
    std: float
    median: float
    n: int
    n_failed: int = 0


def aggregate(values: Sequence[Optional[float]]) -> Aggregate:
    """Mean, population std and median of the non-None values; None marks a failure."""
    vals = [float(v) for v in values if v is not None]
    failed = sum(1 for v in values if v is None)
    if not vals:
        return Aggregate(math.nan, math.nan, math.nan, 0, failed)
    a = np.asarray(vals)
    return Aggregate(float(a.mean()), float(a.std()), float(np.median(a)), len(vals), failed)


METRICS = ("msd", "dsc", "hd95")
METRIC_TITLES = {"msd": "MSD (mm)", "dsc": "DSC", "hd95": "95% HD (mm)"}
CASE_HEADER = ("method", "path", "structure", "case", "dsc", "msd", "hd95", "failed")


@dataclass
class CaseEntry:
    method: str
    path: str
    structure: str
    case: str
    dsc: float
    msd: Optional[float]
    hd95: Optional[float]
    failed: bool = False


@dataclass
class MetricsReport:
    """Per-case metric rows grouped by (method, output path)."""

    entries: list = field(default_factory=list)

    def add_case(self, method: str, path: str, case: str, case_metrics: dict):
        for structure, m in case_metrics.items():
            self.entries.append(CaseEntry(method, path, structure, case, m["dsc"], m["msd"], m["hd95"],
                                          bool(m.get("failed", False))))

    def groups(self) -> list:
        seen = []
        for e in self.entries:
            if (e.method, e.path) not in seen:
                seen.append((e.method, e.path))
        return seen

    def structures(self) -> list:
        order = []
        for e in self.entries:
            if e.structure not in order:
                order.append(e.structure)
        return [s for s in DISPLAY_ORDER if s in order] + [s for s in order if s not in DISPLAY_ORDER]

    def values(self, method, path, structure, metric) -> list:
        return [getattr(e, metric) for e in self.entries
                if e.method == method and e.path == path and e.structure == structure]

    def summary(self, method, path, structure, metric) -> Aggregate:
        agg = aggregate(self.values(method, path, structure, metric))
        agg.n_failed = sum(1 for e in self.entries if e.method == method and e.path == path
                           and e.structure == structure and e.failed)
        return agg

    def selection(self, method: str, metric: str = "msd") -> dict:
        """Per structure, the output path of ``method`` with the lowest mean ``metric``."""
        paths = [p for m, p in self.groups() if m == method]
        pick = max if metric == "dsc" else min
        choice = {}
        for s in self.structures():
            scored = [(self.summary(method, p, s, metric).mean, p) for p in paths]
            valid = [t for t in scored if not math.isnan(t[0])]
            choice[s] = pick(valid, key=lambda t: t[0])[1] if valid else paths[0]
        return choice

    # serialization --------------------------------------------------------

    def to_tsv(self) -> str:
        lines = ["\t".join(CASE_HEADER)]
        for e in self.entries:
            lines.append("\t".join([e.method, e.path, e.structure, e.case, repr(float(e.dsc)),
                                    "" if e.msd is None else repr(float(e.msd)),
                                    "" if e.hd95 is None else repr(float(e.hd95)),
                                    "1" if e.failed else "0"]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_tsv(cls, text: str) -> "MetricsReport":
        lines = [l for l in text.splitlines() if l.strip()]
        if not lines or tuple(lines[0].split("\t")) != CASE_HEADER:
            raise FormatError("missing case table header")
        rep = cls()
        for l in lines[1:]:
            f = l.split("\t")
            if len(f) != len(CASE_HEADER):
                raise FormatError(f"malformed case row: {l!r}")
            rep.entries.append(CaseEntry(f[0], f[1], f[2], f[3], float(f[4]),
                                         None if f[5] == "" else float(f[5]),
                                         None if f[6] == "" else float(f[6]), f[7] == "1"))
        return rep

    def to_text(self) -> str:
        out = io.StringIO()
        out.write("crossreg evaluation report\n")
        structs = self.structures()
        methods = []
        for m, _ in self.groups():
            if m not in methods:
                methods.append(m)
        for metric in METRICS:
            out.write(f"\n== {METRIC_TITLES[metric]} ==\n")
            head = ["Method", "Output Path"]
            for s in structs:
                name = DISPLAY_NAMES.get(s, s)
                head += [f"{name} mu +- sigma", f"{name} Median"]
            rows = [head]
            for m in methods:
                paths = [p for mm, p in self.groups() if mm == m]
                for i, p in enumerate(paths):
                    row = [m if i == 0 else "", p]
                    for s in structs:
                        a = self.summary(m, p, s, metric)
                        row += [f"{a.mean:.3f} +- {a.std:.3f}", f"{a.median:.3f}"]
                    rows.append(row)
                if len(paths) > 1:
                    sel = self.selection(m)
                    row = ["", "Selected"]
                    for s in structs:
                        a = self.summary(m, sel[s], s, metric)
                        row += [f"{a.mean:.3f} +- {a.std:.3f} [{sel[s]}]", f"{a.median:.3f}"]
                    rows.append(row)
            widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
            for r in rows:
                out.write(" | ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() + "\n")
        out.write("\n== Failures (empty prediction) ==\n")
        for m, p in self.groups():
            for s in structs:
                a = self.summary(m, p, s, "msd")
                if a.n_failed:
                    out.write(f"{m} | {p} | {s} | {a.n_failed} of {a.n + a.n_failed} cases\n")
        out.write("\n== Cases ==\n")
        out.write(self.to_tsv())
        return out.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        marker = "\n== Cases ==\n"
        if marker not in text:
            raise FormatError("report has no case section")
        return cls.from_tsv(text.split(marker, 1)[1])
