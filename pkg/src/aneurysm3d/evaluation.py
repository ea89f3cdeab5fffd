"""
Detection scoring: cube-overlap matching, sensitivity, false positives per
case, size subgroups and fold summaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .detection import Detection
from .errors import NoPositives

HIT_FRACTION = 0.30
SIZE_BINS: Tuple[Tuple[str, float, float], ...] = (
    ("<3.0", -math.inf, 3.0),
    ("3.0-4.9", 3.0, 5.0),
    ("5.0-9.9", 5.0, 10.0),
    (">=10.0", 10.0, math.inf),
)


@dataclass
class GroundTruth:
    case_id: str
    aneurysms: List[np.ndarray]  # (N, 3) voxel indices (x, y, z)
    diameters_mm: List[float] = field(default_factory=list)

    def __post_init__(self):
        self.aneurysms = [np.asarray(a, dtype=np.int64).reshape(-1, 3) for a in self.aneurysms]
        if any(len(a) == 0 for a in self.aneurysms):
            raise ValueError(f"case {self.case_id!r}: empty aneurysm voxel set")
        if self.diameters_mm and len(self.diameters_mm) != len(self.aneurysms):
            raise ValueError(f"case {self.case_id!r}: {len(self.diameters_mm)} diameters for {len(self.aneurysms)} aneurysms")


def overlap_fraction(det: Detection, voxels: np.ndarray) -> float:
    return float(det.contains(voxels).sum()) / len(voxels)


def match_case(dets: Sequence[Detection], gts: Sequence[np.ndarray]):
    """Single-credit matching under the strict > 30% in-box rule.

    Candidate pairs are taken greedily by descending overlap fraction, ties
    broken by detection order then aneurysm order.  Returns
    (tp, fp, fn, assignment) with assignment mapping detection index to
    aneurysm index.
    """
    pairs = []
    for i, d in enumerate(dets):
        for j, g in enumerate(gts):
            f = overlap_fraction(d, g)
            if f > HIT_FRACTION:
                pairs.append((-f, i, j))
    pairs.sort()
    assignment: Dict[int, int] = {}
    taken = set()
    for _, i, j in pairs:
        if i in assignment or j in taken:
            continue
        assignment[i] = j
        taken.add(j)
    tp = len(assignment)
    return tp, len(dets) - tp, len(gts) - tp, assignment


def sensitivity(tp: int, fn: int) -> float:
    if tp + fn <= 0:
        raise NoPositives("sensitivity is undefined without positive aneurysms")
    return tp / (tp + fn)


def fp_per_case(fp: int, n_cases: int) -> float:
    if n_cases <= 0:
        raise ValueError("n_cases must be positive")
    return fp / n_cases


def format_percent(x: float, digits: int = 1) -> str:
    return f"{100.0 * x:.{digits}f}%"


@dataclass
class CaseResult:
    case_id: str
    tp: int
    fp: int
    fn: int
    detections: List[Detection]
    assignment: Dict[int, int]
    diameters_mm: List[float]

    @property
    def hit(self) -> List[bool]:
        """Per ground-truth aneurysm: was it matched."""
        matched = set(self.assignment.values())
        return [j in matched for j in range(self.tp + self.fn)]


@dataclass
class EvalReport:
    tp: int
    fp: int
    fn: int
    sensitivity: Optional[float]
    fp_per_case: float
    per_case: List[CaseResult]
    size_bins: Dict[str, Dict[str, float]]

    @property
    def n_cases(self) -> int:
        return len(self.per_case)

    def to_dict(self):
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "sensitivity": self.sensitivity,
            "fp_per_case": self.fp_per_case,
            "n_cases": self.n_cases,
            "size_bins": self.size_bins,
            "cases": [
                {
                    "case_id": c.case_id,
                    "tp": c.tp,
                    "fp": c.fp,
                    "fn": c.fn,
                    "detections": [d.to_dict() for d in c.detections],
                    "assignment": {str(k): v for k, v in sorted(c.assignment.items())},
                    "diameters_mm": list(c.diameters_mm),
                }
                for c in self.per_case
            ],
        }


def size_bin(diameter_mm: float) -> str:
    for name, lo, hi in SIZE_BINS:
        if lo <= diameter_mm < hi:
            return name
    raise ValueError(f"diameter {diameter_mm} fits no bin")


def subgroup_by_size(diameters_mm: Sequence[float], hits: Sequence[bool]) -> Dict[str, Dict[str, float]]:
    """Per size bin: count, hits and sensitivity.  Empty bins are omitted."""
    if len(diameters_mm) != len(hits):
        raise ValueError("one hit flag per diameter required")
    out: Dict[str, Dict[str, float]] = {}
    for name, _, _ in SIZE_BINS:
        flags = [h for d, h in zip(diameters_mm, hits) if size_bin(d) == name]
        if flags:
            out[name] = {"n": len(flags), "tp": int(sum(flags)), "sensitivity": sum(flags) / len(flags)}
    return out


def evaluate(case_dets: Sequence[Sequence[Detection]], truths: Sequence[GroundTruth]) -> EvalReport:
    if len(case_dets) != len(truths):
        raise ValueError("one detection list per ground-truth case required")
    per_case = []
    diam, hits = [], []
    for dets, gt in zip(case_dets, truths):
        tp, fp, fn, assign = match_case(dets, gt.aneurysms)
        res = CaseResult(gt.case_id, tp, fp, fn, list(dets), assign, list(gt.diameters_mm))
        per_case.append(res)
        if gt.diameters_mm:
            diam.extend(gt.diameters_mm)
            hits.extend(res.hit)
    return report_from_cases(per_case, subgroup_by_size(diam, hits))


def report_from_cases(per_case: Sequence[CaseResult], size_bins=None) -> EvalReport:
    """Aggregate metrics recomputed from the per-case rows."""
    tp = sum(c.tp for c in per_case)
    fp = sum(c.fp for c in per_case)
    fn = sum(c.fn for c in per_case)
    sens = sensitivity(tp, fn) if tp + fn > 0 else None
    if size_bins is None:
        diam = [d for c in per_case for d in c.diameters_mm]
        hits = [h for c in per_case if c.diameters_mm for h in c.hit]
        size_bins = subgroup_by_size(diam, hits)
    return EvalReport(tp, fp, fn, sens, fp_per_case(fp, len(per_case)) if per_case else 0.0, list(per_case), size_bins)


@dataclass(frozen=True)
class CrossvalSummary:
    mean: float
    std: float
    best: float
    best_fold: int

    def __iter__(self):
        yield self.mean
        yield self.std

    def format(self) -> str:
        return f"{100 * self.mean:.2f} ± {100 * self.std:.2f}%"


def crossval_summary(per_fold: Sequence[float]) -> CrossvalSummary:
    """Mean, population standard deviation and the best fold."""
    v = np.asarray(per_fold, dtype=np.float64)
    if v.size < 2:
        raise ValueError("at least two folds are required")
    if np.any((v < 0) | (v > 1)) or not np.all(np.isfinite(v)):
        raise ValueError("fold values must lie in [0, 1]")
    mean = float(v.mean())
    std = float(np.sqrt(np.mean((v - mean) ** 2)))
    best = int(np.argmax(v))
    return CrossvalSummary(mean, std, float(v[best]), best)
