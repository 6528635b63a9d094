"""Evaluation of the digital twin against ground truth.

Ground-truth frames are paired with the nearest twin frame in time, the
twin states are advanced by the residual offset with a constant-velocity
prediction, and the two object sets are associated per frame with a
gated Hungarian assignment.  The gate is an ellipse around each
ground-truth object, elongated along the driving direction, so nearby
vehicles on adjacent lanes are never associated.  Metrics follow from
the surviving associations: RMSE split into longitudinal and lateral
parts, frame-summed precision and recall, error percentiles, and a
spatial error map over the testbed.
"""

from __future__ import annotations

import math
from bisect import bisect_left
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

_UNGATED = 1e9


class NoTwinFrame(Exception):
    """A ground-truth frame has no twin frame within half the ground-truth
    period; the streams do not overlap usably."""


@dataclass(frozen=True)
class EvalConfig:
    semi_major: float = 6.75  # longitudinal semi-axis of the gating ellipse (m)
    semi_minor: float = 1.1  # lateral semi-axis (m)
    boundary_width: float = 0.0  # m at each stretch end; 0 disables interior recall
    cell_size: float = 10.0  # error-map cell edge (m)
    region_x: tuple | None = (0.0, 440.0)  # evaluated stretch; None disables clipping
    # classes scored by the metrics; other vehicles still take part in the
    # association so their (real) twin objects are not counted as false
    # positives.  None scores everything.
    eval_classes: tuple | None = ("car",)
    # unscored classes are longer vehicles whose detection anchor wanders
    # over more of their body, so they absorb twin objects with a
    # proportionally wider ellipse
    unscored_gate_scale: float = 2.0

    def validate(self):
        if not self.semi_major > self.semi_minor > 0:
            raise ValueError("need semi_major > semi_minor > 0")
        if self.boundary_width < 0 or self.cell_size <= 0:
            raise ValueError("boundary_width >= 0 and cell_size > 0 required")

    def scores(self, vclass) -> bool:
        return self.eval_classes is None or vclass in self.eval_classes


@dataclass(frozen=True)
class EvalFrame:
    """Position/velocity snapshot used on both sides of the comparison."""

    t: float
    ids: tuple
    pos: np.ndarray  # (N, 2)
    vel: np.ndarray  # (N, 2)
    classes: tuple = ()

    @classmethod
    def build(cls, t, ids, pos, vel, classes=None) -> "EvalFrame":
        n = len(ids)
        if classes is None:
            classes = (None,) * n
        return cls(float(t), tuple(ids),
                   np.asarray(pos, dtype=float).reshape(n, 2),
                   np.asarray(vel, dtype=float).reshape(n, 2),
                   tuple(classes))


@dataclass(frozen=True)
class Association:
    gt_id: int
    twin_id: int
    dx: float  # twin minus ground truth, longitudinal
    dy: float
    t: float
    gt_x: float
    gt_y: float

    @property
    def error(self) -> float:
        return math.hypot(self.dx, self.dy)


def align_frames(gt_frames: list, twin_frames: list, gt_period: float | None = None):
    """Pair each ground-truth frame with the nearest twin frame and advance
    the twin states by the time offset.  Raises NoTwinFrame when a frame
    has no twin within half the ground-truth period."""
    if not gt_frames:
        return []
    if not twin_frames:
        raise NoTwinFrame("twin stream is empty")
    if gt_period is None:
        ts = [f.t for f in gt_frames]
        gt_period = (np.median(np.diff(ts)) if len(ts) > 1 else 1.0)
    twin_ts = [f.t for f in twin_frames]
    pairs = []
    for gt in gt_frames:
        i = bisect_left(twin_ts, gt.t)
        nearest = min((j for j in (i - 1, i) if 0 <= j < len(twin_ts)),
                      key=lambda j: abs(twin_ts[j] - gt.t))
        dt = gt.t - twin_ts[nearest]
        if abs(dt) > 0.5 * gt_period:
            raise NoTwinFrame(
                f"ground-truth frame at t={gt.t:.3f} has no twin frame within "
                f"{0.5 * gt_period:.3f} s")
        twin = twin_frames[nearest]
        pairs.append((gt, EvalFrame(gt.t, twin.ids, twin.pos + dt * twin.vel,
                                    twin.vel.copy(), twin.classes), dt))
    return pairs


def hungarian(cost: np.ndarray):
    """Exact minimum-cost one-to-one assignment; rectangular inputs assign
    every row or column of the smaller side."""
    cost = np.asarray(cost, dtype=float)
    if cost.size and not np.all(np.isfinite(cost)):
        raise ValueError("costs must be finite")
    rows, cols = linear_sum_assignment(cost)
    return list(zip(rows.tolist(), cols.tolist()))


def ellipse_distance(dx: float, dy: float, cfg: EvalConfig) -> float:
    """Weighted planar distance; <= 1 lies inside the gating ellipse."""
    return math.hypot(dx / cfg.semi_major, dy / cfg.semi_minor)


def _clip_region(frame: EvalFrame, cfg: EvalConfig) -> EvalFrame:
    if cfg.region_x is None:
        return frame
    lo, hi = cfg.region_x
    keep = (frame.pos[:, 0] >= lo) & (frame.pos[:, 0] <= hi)
    if np.all(keep):
        return frame
    ids = tuple(i for i, k in zip(frame.ids, keep) if k)
    classes = tuple(c for c, k in zip(frame.classes, keep) if k)
    return EvalFrame(frame.t, ids, frame.pos[keep], frame.vel[keep], classes)


def gate_and_associate(gt: EvalFrame, twin: EvalFrame, cfg: EvalConfig):
    """Hungarian assignment over ellipse distances; pairs outside the
    ellipse are stripped after the assignment.

    The assignment runs over every ground-truth object so that twin
    objects belonging to unscored vehicle classes are not misread as
    false positives, but only scored classes produce associations and
    misses.  Returns (associations, unmatched scored ground-truth
    positions, number of unmatched twin objects), all restricted to the
    evaluated region.
    """
    gt = _clip_region(gt, cfg)
    twin = _clip_region(twin, cfg)
    n_gt, n_twin = len(gt.ids), len(twin.ids)
    scored = [cfg.scores(c) for c in gt.classes] if gt.classes else []
    if n_gt == 0 or n_twin == 0:
        return [], [tuple(p) for p, s in zip(gt.pos, scored) if s], n_twin
    diff = twin.pos[None, :, :] - gt.pos[:, None, :]
    dist = np.hypot(diff[:, :, 0] / cfg.semi_major, diff[:, :, 1] / cfg.semi_minor)
    scale = np.where(np.asarray(scored), 1.0, cfg.unscored_gate_scale)
    dist = dist / scale[:, None]
    pairs = hungarian(np.where(dist <= 1.0, dist, _UNGATED))
    associations = []
    matched_gt, matched_twin = set(), set()
    for r, c in pairs:
        if dist[r, c] > 1.0:
            continue
        matched_gt.add(r)
        matched_twin.add(c)
        if scored[r]:
            associations.append(Association(
                gt.ids[r], twin.ids[c], float(diff[r, c, 0]), float(diff[r, c, 1]),
                gt.t, float(gt.pos[r, 0]), float(gt.pos[r, 1])))
    unmatched_gt = [tuple(gt.pos[r]) for r in range(n_gt)
                    if r not in matched_gt and scored[r]]
    return associations, unmatched_gt, n_twin - len(matched_twin)


def percentile(sorted_values: np.ndarray, q: float) -> float:
    """Linear-interpolation percentile of pre-sorted data."""
    n = len(sorted_values)
    if n == 0:
        raise ValueError("no data")
    rank = q / 100.0 * (n - 1)
    lo = int(math.floor(rank))
    hi = min(lo + 1, n - 1)
    frac = rank - lo
    return float(sorted_values[lo] * (1.0 - frac) + sorted_values[hi] * frac)


def error_map(associations: list, cfg: EvalConfig):
    """Mean absolute planar error and count per testbed cell, keyed by
    (x index, y index) of the ground-truth position."""
    cells: dict = {}
    x0 = cfg.region_x[0] if cfg.region_x else 0.0
    for a in associations:
        key = (int(math.floor((a.gt_x - x0) / cfg.cell_size)),
               int(math.floor(a.gt_y / cfg.cell_size)))
        total, count = cells.get(key, (0.0, 0))
        cells[key] = (total + a.error, count + 1)
    return {key: (total / count, count) for key, (total, count) in sorted(cells.items())}


@dataclass
class MetricsReport:
    rmse: float | None
    rmse_x: float | None
    rmse_y: float | None
    precision: float | None
    recall: float | None
    p50: float | None
    p95: float | None
    tp: int
    fp: int
    fn: int
    mean_abs_dt: float | None
    boundary_width: float
    recall_interior: float | None
    tp_interior: int
    fn_interior: int
    error_grid: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "rmse": self.rmse, "rmse_x": self.rmse_x, "rmse_y": self.rmse_y,
            "precision": self.precision, "recall": self.recall,
            "p50": self.p50, "p95": self.p95,
            "tp": self.tp, "fp": self.fp, "fn": self.fn,
            "mean_abs_dt": self.mean_abs_dt,
            "boundary_width": self.boundary_width,
            "recall_interior": self.recall_interior,
            "tp_interior": self.tp_interior, "fn_interior": self.fn_interior,
            "error_grid": [[ix, iy, mean, count]
                           for (ix, iy), (mean, count) in self.error_grid],
        }


def _interior(x: float, cfg: EvalConfig) -> bool:
    if cfg.region_x is None or cfg.boundary_width <= 0:
        return True
    lo, hi = cfg.region_x
    return lo + cfg.boundary_width <= x <= hi - cfg.boundary_width


def compute_metrics(associations: list, unmatched_gt_positions: list,
                    unmatched_twin: int, cfg: EvalConfig,
                    dts: list | None = None) -> MetricsReport:
    """Aggregate metrics over all frames.

    `unmatched_gt_positions` carries the (x, y) of every missed
    ground-truth object so the boundary band can be excluded from recall.
    With no associations the error statistics are reported as absent.
    """
    tp = len(associations)
    fp = unmatched_twin
    fn = len(unmatched_gt_positions)
    precision = tp / (tp + fp) if tp + fp > 0 else None
    recall = tp / (tp + fn) if tp + fn > 0 else None

    rmse = rmse_x = rmse_y = p50 = p95 = None
    if tp > 0:
        dx = np.array([a.dx for a in associations])
        dy = np.array([a.dy for a in associations])
        rmse_x = float(np.sqrt(np.mean(dx ** 2)))
        rmse_y = float(np.sqrt(np.mean(dy ** 2)))
        rmse = float(np.sqrt(np.mean(dx ** 2 + dy ** 2)))
        planar = np.sort(np.hypot(dx, dy))
        p50 = percentile(planar, 50.0)
        p95 = percentile(planar, 95.0)

    recall_interior = None
    tp_interior = sum(1 for a in associations if _interior(a.gt_x, cfg))
    fn_interior = sum(1 for x, _ in unmatched_gt_positions if _interior(x, cfg))
    if cfg.boundary_width > 0 and tp_interior + fn_interior > 0:
        recall_interior = tp_interior / (tp_interior + fn_interior)

    mean_abs_dt = float(np.mean(np.abs(dts))) if dts else None
    grid = list(error_map(associations, cfg).items())
    return MetricsReport(rmse, rmse_x, rmse_y, precision, recall, p50, p95,
                         tp, fp, fn, mean_abs_dt, cfg.boundary_width,
                         recall_interior, tp_interior, fn_interior, grid)


def evaluate_streams(gt_frames: list, twin_frames: list,
                     cfg: EvalConfig) -> MetricsReport:
    """Full methodology: align, associate per frame, aggregate."""
    cfg.validate()
    pairs = align_frames(gt_frames, twin_frames)
    associations: list[Association] = []
    unmatched_gt: list = []
    unmatched_twin = 0
    dts = []
    for gt, twin, dt in pairs:
        assoc, miss_gt, miss_twin = gate_and_associate(gt, twin, cfg)
        associations.extend(assoc)
        unmatched_gt.extend(miss_gt)
        unmatched_twin += miss_twin
        dts.append(dt)
    return compute_metrics(associations, unmatched_gt, unmatched_twin, cfg, dts)
