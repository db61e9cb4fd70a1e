"""Region-level scoring with epithelium as the positive class.

Confusion counts skip excluded pixels (lumina, background). Regions are
aggregated unweighted, one sample per region, with population standard
deviation, into the rows All, Benign, Cancer and Grade group 1..5.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DimensionMismatch, EmptyInput, EmptyRegion, InputError, InvalidGrade
from .tilestore import RegionSpec

METRICS = ("accuracy", "f1", "jaccard")
SUMMARY_GROUPS = ("All", "Benign", "Cancer") + tuple(f"Grade group {g}" for g in range(1, 6))
REPORT_COLUMNS = ["region_id", "label", "grade_group", "tp", "fp", "fn", "tn",
                  "accuracy", "f1", "jaccard", "no_positives"]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    f1: float
    jaccard: float
    no_positives: bool = False  # f1 = jaccard = 1 by convention


@dataclass
class RegionReport:
    region_id: str
    counts: ConfusionCounts
    metrics: Metrics
    label: str = "benign"
    grade_group: Optional[int] = None
    spec: Optional[RegionSpec] = None

    @property
    def accuracy(self):
        return self.metrics.accuracy

    @property
    def f1(self):
        return self.metrics.f1

    @property
    def jaccard(self):
        return self.metrics.jaccard


def confusion(pred, truth, exclusion=None) -> ConfusionCounts:
    p = np.asarray(pred).astype(bool)
    t = np.asarray(truth).astype(bool)
    if p.shape != t.shape:
        raise DimensionMismatch(f"prediction {p.shape} and truth {t.shape} differ")
    keep = np.ones(p.shape, bool)
    if exclusion is not None:
        e = np.asarray(exclusion).astype(bool)
        if e.shape != p.shape:
            raise DimensionMismatch(f"exclusion {e.shape} and truth {t.shape} differ")
        keep = ~e
    p, t = p[keep], t[keep]
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, fn, int(p.size) - tp - fp - fn)


def metrics(c: ConfusionCounts) -> Metrics:
    if c.total <= 0:
        raise EmptyRegion("no pixels left to score")
    acc = (c.tp + c.tn) / c.total
    denom = c.tp + c.fp + c.fn
    if denom == 0:
        return Metrics(acc, 1.0, 1.0, True)
    return Metrics(acc, 2 * c.tp / (2 * c.tp + c.fp + c.fn), c.tp / denom)


# grading ------------------------------------------------------------------

def grade_group(grades: Sequence[int]) -> int:
    """ISUP grade group from (primary, secondary[, tertiary]) Gleason patterns.

    The score is the primary pattern plus the highest of the remaining ones.
    Pattern 2 counts as 3.
    """
    g = list(grades) if grades is not None else []
    if len(g) == 3 and g[2] is None:
        g = g[:2]
    if len(g) not in (2, 3):
        raise InvalidGrade(f"expected 2 or 3 Gleason patterns, got {grades!r}")
    for v in g:
        if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or not 2 <= v <= 5:
            raise InvalidGrade(f"Gleason pattern {v!r} outside 2..5")
    g = [max(int(v), 3) for v in g]
    primary, rest = g[0], max(g[1:])
    score = primary + rest
    if score <= 6:
        return 1
    if score == 7:
        return 2 if primary == 3 else 3
    if score == 8:
        return 4
    return 5


def stratified_split(groups: Dict[str, int], fractions: Sequence[float] = (0.6, 0.4),
                     seed: int = 0) -> List[List[str]]:
    """Partition slide ids so each group is split in proportion to ``fractions``.

    Per group, each part gets the floor of its exact share. Leftover slides go
    to the parts with the largest remainders (ties broken at random) as long as
    the part is below its cohort-wide target, so every per-group count stays
    within one slide of proportional and part sizes match the fractions.
    """
    fr = np.asarray(fractions, float)
    if fr.ndim != 1 or fr.size < 2 or np.any(fr < 0) or abs(fr.sum() - 1) > 1e-9:
        raise InputError("fractions must be non-negative and sum to 1")
    rng = np.random.default_rng(seed)
    by_group: Dict[int, List[str]] = {}
    for sid in sorted(groups):
        by_group.setdefault(groups[sid], []).append(sid)
    keys = sorted(by_group)
    for g in keys:
        if len(by_group[g]) < fr.size:
            warnings.warn(f"EmptyGroup: grade group {g} has {len(by_group[g])} slide(s) for {fr.size} parts",
                          RuntimeWarning, stacklevel=2)
    exact = np.array([fr * len(by_group[g]) for g in keys]).reshape(len(keys), fr.size)
    counts = np.floor(exact).astype(int)
    # part totals follow the same largest-remainder rule over the whole cohort
    n = len(groups)
    total = np.floor(fr * n).astype(int)
    rem = fr * n - total
    total[np.lexsort((rng.random(fr.size), -rem))[:n - total.sum()]] += 1
    deficit = total - counts.sum(axis=0)
    left = np.array([len(by_group[g]) for g in keys]) - counts.sum(axis=1)
    frac = exact - counts
    cand = [(gi, k) for gi in range(len(keys)) for k in range(fr.size) if frac[gi, k] > 0]
    tiebreak = rng.random(len(cand))
    cand = [c for _, c in sorted(zip(tiebreak, cand), key=lambda z: (-frac[z[1]], z[0]))]
    for relax in (False, True):
        for gi, k in cand:
            if left[gi] > 0 and counts[gi, k] == np.floor(exact[gi, k]) and (relax or deficit[k] > 0):
                counts[gi, k] += 1
                left[gi] -= 1
                deficit[k] -= 1
    parts: List[List[str]] = [[] for _ in fr]
    for gi, g in enumerate(keys):
        ids = by_group[g]
        perm = rng.permutation(len(ids))
        start = 0
        for k, c in enumerate(counts[gi]):
            parts[k].extend(ids[i] for i in perm[start:start + c])
            start += c
    return [sorted(p) for p in parts]


# external set ----------------------------------------------------------------

EXTERNAL_CLASSES = {"stroma": 0, "benign": 1, "gleason3": 2, "gleason4": 3}


def external_protocol(pred, truth_multiclass, background_mask, region_id: str = "external",
                      label: str = "tumor") -> RegionReport:
    """Merge the epithelial classes (1, 2, 3) into one and score with background excluded."""
    t = np.asarray(truth_multiclass)
    if t.size and (t.min() < 0 or t.max() > 3):
        raise InputError("external truth classes must be in 0..3")
    c = confusion(pred, t > 0, background_mask)
    return RegionReport(region_id, c, metrics(c), label)


# aggregation -----------------------------------------------------------------

@dataclass
class SummaryRow:
    group: str
    n: int
    stats: Dict[str, Tuple[float, float, float, float]] = field(default_factory=dict)  # mean, std, min, max


def _group_members(reports, group):
    if group == "All":
        return list(reports)
    if group == "Benign":
        return [r for r in reports if r.label == "benign"]
    if group == "Cancer":
        return [r for r in reports if r.label == "tumor"]
    g = int(group.rsplit(" ", 1)[1])
    return [r for r in reports if r.label == "tumor" and r.grade_group == g]


def aggregate(reports: Sequence[RegionReport], group_by: str = "all") -> List[SummaryRow]:
    """Per-group mean, population std, min and max of every metric.

    ``group_by`` is ``"all"`` (every row), ``"label"`` (All, Benign, Cancer)
    or ``"grade_group"`` (Grade group 1..5). Empty groups get ``n = 0`` and NaN
    statistics.
    """
    reports = list(reports)
    if not reports:
        raise EmptyInput("no region reports to aggregate")
    groups = {"all": SUMMARY_GROUPS, "label": SUMMARY_GROUPS[:3],
              "grade_group": SUMMARY_GROUPS[3:]}.get(group_by)
    if groups is None:
        raise InputError(f"unknown grouping {group_by!r}")
    rows = []
    for g in groups:
        members = _group_members(reports, g)
        row = SummaryRow(g, len(members))
        for m in METRICS:
            v = np.array([getattr(r, m) for r in members], float)
            row.stats[m] = ((float(v.mean()), float(v.std()), float(v.min()), float(v.max()))
                            if v.size else (float("nan"),) * 4)
        rows.append(row)
    return rows


# region manifests and reports -----------------------------------------------------

def load_regions(path) -> List[Tuple[str, RegionSpec]]:
    try:
        items = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise InputError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(items, list):
        raise InputError(f"{path}: expected a list of regions")
    out = []
    for it in items:
        try:
            grades = it.get("grades")
            spec = RegionSpec(str(it["slide_id"]), int(it["x"]), int(it["y"]), int(it["width_px"]),
                              int(it["height_px"]), float(it["mpp"]), it.get("label", "benign"),
                              tuple(grades) if grades else None)
            out.append((str(it["id"]), spec))
        except KeyError as e:
            raise InputError(f"{path}: region missing field {e}") from e
    ids = [i for i, _ in out]
    if len(set(ids)) != len(ids):
        raise InputError(f"{path}: duplicate region ids")
    return out


def score_region(region_id: str, pred, truth, exclusion=None, spec: Optional[RegionSpec] = None) -> RegionReport:
    c = confusion(pred, truth, exclusion)
    label = spec.label if spec else "benign"
    gg = grade_group(spec.grades) if spec is not None and spec.grades and label == "tumor" else None
    return RegionReport(region_id, c, metrics(c), label, gg, spec)


def write_report(path, reports: Iterable[RegionReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in reports:
            c = r.counts
            w.writerow([r.region_id, r.label, "" if r.grade_group is None else r.grade_group,
                        c.tp, c.fp, c.fn, c.tn, repr(r.accuracy), repr(r.f1), repr(r.jaccard),
                        int(r.metrics.no_positives)])


def write_summary(path, rows: Sequence[SummaryRow]) -> None:
    header = ["group", "n"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "std", "min", "max")]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            vals = []
            for m in METRICS:
                vals += ["" if np.isnan(x) else repr(x) for x in row.stats[m]]
            w.writerow([row.group, row.n] + vals)


def overlay(pred, truth, image=None, exclusion=None) -> np.ndarray:
    """RGB overlay: true positives green, false positives red, false negatives blue.

    True negatives show ``image`` (white without one); excluded pixels are grey.
    """
    p = np.asarray(pred).astype(bool)
    t = np.asarray(truth).astype(bool)
    if p.shape != t.shape:
        raise DimensionMismatch("prediction and truth differ in shape")
    if image is None:
        out = np.full(p.shape + (3,), 255, np.uint8)
    else:
        out = np.asarray(image, np.uint8)
        out = (np.repeat(out[..., None], 3, -1) if out.ndim == 2 else out[..., :3]).copy()
    out[p & t] = (0, 255, 0)
    out[p & ~t] = (255, 0, 0)
    out[~p & t] = (0, 0, 255)
    if exclusion is not None:
        out[np.asarray(exclusion).astype(bool)] = (128, 128, 128)
    return out
