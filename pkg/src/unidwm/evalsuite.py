"""Chamfer distance per horizon, the Copy&Paste baseline, ROUGE-L, and CSV reports."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .toyworld.dataset import FrameSample

REPORT_COLUMNS = ("label", "scene", "horizon_s", "model_cd", "copy_paste_cd", "rouge_l", "exact_match", "config")
SUMMARY_SCENE = "mean"


class UndefinedMetric(ValueError):
    """A metric has no value for this input (e.g. an empty point cloud)."""


# ---------------------------------------------------------------- point clouds


def range_filter(points, bounds: dict) -> np.ndarray:
    """Keep points inside the axis-aligned box, boundary included."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    keep = ((p[:, 0] >= bounds["x_min"]) & (p[:, 0] <= bounds["x_max"])
            & (p[:, 1] >= bounds["y_min"]) & (p[:, 1] <= bounds["y_max"])
            & (p[:, 2] >= bounds["z_min"]) & (p[:, 2] <= bounds["z_max"]))
    return p[keep]


def _pair_dist2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared distances of matched rows, summed in x, y, z order."""
    d = a - b
    return (d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1]) + d[..., 2] * d[..., 2]


def _nearest_dist2(src: np.ndarray, dst: np.ndarray, k: int = 8) -> np.ndarray:
    """Exact min over dst of the squared distance to each src point.

    The tree proposes candidates; distances are then recomputed with the
    same arithmetic as the brute-force formula so both agree bit for bit.
    Rows whose k-th candidate is not clearly farther than the first fall
    back to a ball query that captures every rounding-level tie.
    """
    tree = cKDTree(dst)
    k = min(k, len(dst))
    dist, idx = tree.query(src, k=k)
    dist = dist.reshape(len(src), k)
    idx = idx.reshape(len(src), k)
    exact = _pair_dist2(src[:, None, :], dst[idx]).min(axis=1)
    slack = dist[:, 0] * (1.0 + 1e-9) + 1e-12
    unsure = np.flatnonzero(dist[:, -1] <= slack) if k < len(dst) else np.zeros(0, dtype=np.int64)
    for i in unsure:
        cand = tree.query_ball_point(src[i], slack[i])
        exact[i] = _pair_dist2(src[i], dst[cand]).min()
    return exact


def chamfer(P, Q, squared: bool = False) -> float:
    """Symmetric mean of directed mean nearest-neighbour distances."""
    P = np.asarray(P, dtype=np.float64).reshape(-1, 3)
    Q = np.asarray(Q, dtype=np.float64).reshape(-1, 3)
    if len(P) == 0 or len(Q) == 0:
        raise UndefinedMetric("chamfer distance of an empty cloud")
    a, b = _nearest_dist2(P, Q), _nearest_dist2(Q, P)
    if not squared:
        a, b = np.sqrt(a), np.sqrt(b)
    return float(0.5 * (a.mean() + b.mean()))


def chamfer_bruteforce(P, Q, squared: bool = False) -> float:
    """All-pairs reference implementation."""
    P = np.asarray(P, dtype=np.float64).reshape(-1, 3)
    Q = np.asarray(Q, dtype=np.float64).reshape(-1, 3)
    if len(P) == 0 or len(Q) == 0:
        raise UndefinedMetric("chamfer distance of an empty cloud")
    d2 = _pair_dist2(P[:, None, :], Q[None, :, :])
    a, b = d2.min(axis=1), d2.min(axis=0)
    if not squared:
        a, b = np.sqrt(a), np.sqrt(b)
    return float(0.5 * (a.mean() + b.mean()))


def copy_paste_baseline(current, futures: Sequence, bounds: Optional[dict] = None,
                        squared: bool = False) -> List[float]:
    """Chamfer of the current cloud against each future cloud."""
    cur = range_filter(current, bounds) if bounds else np.asarray(current, dtype=np.float64)
    return [chamfer(cur, range_filter(f, bounds) if bounds else f, squared) for f in futures]


# ---------------------------------------------------------------- text


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str) -> float:
    """LCS F-score with equal weight on precision and recall."""
    c, r = candidate.split(), reference.split()
    if not c and not r:
        return 1.0
    if not c or not r:
        return 0.0
    lcs = lcs_length(c, r)
    if lcs == 0:
        return 0.0
    prec, rec = lcs / len(c), lcs / len(r)
    return 2.0 * prec * rec / (prec + rec)


# ---------------------------------------------------------------- reports


@dataclass
class SceneRow:
    scene: int
    horizon_s: int
    model_cd: float
    copy_paste_cd: float
    rouge_l: float
    exact_match: float


@dataclass
class EvalReport:
    label: str
    config: str  # config digest
    rows: List[SceneRow] = field(default_factory=list)
    undefined: List[int] = field(default_factory=list)

    @property
    def scenes(self) -> List[int]:
        return sorted({r.scene for r in self.rows})

    @property
    def horizons(self) -> List[int]:
        return sorted({r.horizon_s for r in self.rows})

    def mean(self, column: str, horizon: Optional[int] = None) -> float:
        vals = [getattr(r, column) for r in self.rows if horizon is None or r.horizon_s == horizon]
        vals = [v for v in vals if not math.isnan(v)]
        return float(np.mean(vals)) if vals else math.nan

    def summary_rows(self) -> List[SceneRow]:
        return [SceneRow(-1, h, self.mean("model_cd", h), self.mean("copy_paste_cd", h),
                         self.mean("rouge_l", h), self.mean("exact_match", h)) for h in self.horizons]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.rows:
            w.writerow([self.label, r.scene, r.horizon_s, repr(r.model_cd), repr(r.copy_paste_cd),
                        repr(r.rouge_l), repr(r.exact_match), self.config])
        for r in self.summary_rows():
            w.writerow([self.label, SUMMARY_SCENE, r.horizon_s, repr(r.model_cd), repr(r.copy_paste_cd),
                        repr(r.rouge_l), repr(r.exact_match), self.config])
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "EvalReport":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        if tuple(header) != REPORT_COLUMNS:
            raise ValueError(f"unexpected report columns {header}")
        label, config, rows, undefined = "", "", [], set()
        for rec in reader:
            label, config = rec[0], rec[7]
            if rec[1] == SUMMARY_SCENE:
                continue
            row = SceneRow(int(rec[1]), int(rec[2]), *(float(v) for v in rec[3:7]))
            if math.isnan(row.model_cd) or math.isnan(row.copy_paste_cd):
                undefined.add(row.scene)
            rows.append(row)
        return cls(label, config, rows, sorted(undefined))

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_csv(Path(path).read_text())


def comparison_csv(reports: Sequence[EvalReport]) -> str:
    """One summary row per report: per-horizon model and Copy&Paste Chamfer, ROUGE-L, exact match."""
    horizons = sorted({h for r in reports for h in r.horizons})
    cols = ["label"] + [f"model_cd_{h}s" for h in horizons] + [f"copy_paste_cd_{h}s" for h in horizons]
    cols += ["rouge_l", "exact_match", "n_scenes", "config"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for rep in reports:
        w.writerow([rep.label] + [repr(rep.mean("model_cd", h)) for h in horizons]
                   + [repr(rep.mean("copy_paste_cd", h)) for h in horizons]
                   + [repr(rep.mean("rouge_l", 0)), repr(rep.mean("exact_match", 0)), len(rep.scenes), rep.config])
    return buf.getvalue()


# ---------------------------------------------------------------- evaluation

# predictor(sample) -> (answer text, generated clouds per frame in each frame's own ego coordinates)
Predictor = Callable[[FrameSample], Tuple[str, List[np.ndarray]]]


def oracle_predictor(sample: FrameSample):
    """Returns the ground truth itself; an upper bound for harness tests."""
    return sample.answer, [np.asarray(c, dtype=np.float64) for c in sample.point_clouds]


def evaluate(samples: Sequence[FrameSample], predictor: Predictor, bounds: dict, label: str = "model",
             config: str = "", squared: bool = False,
             on_scene: Optional[Callable[[FrameSample, str, List[np.ndarray]], None]] = None) -> EvalReport:
    """Score every scene at horizons 0..dt; undefined metrics are recorded as nan."""
    report = EvalReport(label, config)
    for sample in samples:
        answer, clouds = predictor(sample)
        if on_scene is not None:
            on_scene(sample, answer, clouds)
        rl = rouge_l(answer, sample.answer)
        em = float(answer == sample.answer)
        gt = [range_filter(c, bounds) for c in sample.point_clouds]
        bad = False
        for h in range(len(gt)):
            try:
                cd = chamfer(range_filter(clouds[h], bounds), gt[h], squared)
            except UndefinedMetric:
                cd, bad = math.nan, True
            try:
                cp = chamfer(gt[0], gt[h], squared)
            except UndefinedMetric:
                cp, bad = math.nan, True
            report.rows.append(SceneRow(int(sample.seed), h, cd, cp, rl, em))
        if bad:
            report.undefined.append(int(sample.seed))
    return report
