"""Detection metrics: rotated 3D IoU and 11-point interpolated AP.

The analytic IoU reduces box rotations to yaw about the vertical axis,
intersects the bird's-eye-view footprints exactly (convex polygon
clipping, jit-compiled) and multiplies by the vertical overlap. A
point-sampling estimator over fully general rotations serves as an
independent cross-check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numba
import numpy as np

from .detector import Detection
from .geometry import Box3D, CameraModel, Vec3, planar_range, projected_box_height_px, yaw_angle

EASY_MIN_HEIGHT_PX = 42.0
MIN_SAMPLED_POINTS = 10_000
RECALL_POINTS = np.linspace(0.0, 1.0, 11)


@numba.njit(cache=True)
def _bev_overlap_pairs(params_a, params_b, out):  # pragma: no cover - jitted
    """Footprint intersection areas for paired rows of (cx, cz, hw, hl, yaw)."""
    poly = np.empty((16, 2))
    buf = np.empty((16, 2))
    clip = np.empty((4, 2))
    for k in range(params_a.shape[0]):
        cxa, cza, hwa, hla, ya = params_a[k]
        cxb, czb, hwb, hlb, yb = params_b[k]
        ca, sa = np.cos(ya), np.sin(ya)
        cb, sb = np.cos(yb), np.sin(yb)
        # corner rings are counterclockwise in the x-z plane seen from above
        poly[0, 0] = cxa + hwa * ca + hla * sa
        poly[0, 1] = cza - hwa * sa + hla * ca
        poly[1, 0] = cxa - hwa * ca + hla * sa
        poly[1, 1] = cza + hwa * sa + hla * ca
        poly[2, 0] = cxa - hwa * ca - hla * sa
        poly[2, 1] = cza + hwa * sa - hla * ca
        poly[3, 0] = cxa + hwa * ca - hla * sa
        poly[3, 1] = cza - hwa * sa - hla * ca
        clip[0, 0] = cxb + hwb * cb + hlb * sb
        clip[0, 1] = czb - hwb * sb + hlb * cb
        clip[1, 0] = cxb - hwb * cb + hlb * sb
        clip[1, 1] = czb + hwb * sb + hlb * cb
        clip[2, 0] = cxb - hwb * cb - hlb * sb
        clip[2, 1] = czb + hwb * sb - hlb * cb
        clip[3, 0] = cxb + hwb * cb - hlb * sb
        clip[3, 1] = czb - hwb * sb - hlb * cb
        cnt = 4
        for e in range(4):
            if cnt == 0:
                break
            ax, az = clip[e, 0], clip[e, 1]
            ex = clip[(e + 1) % 4, 0] - ax
            ez = clip[(e + 1) % 4, 1] - az
            m = 0
            px, pz = poly[cnt - 1, 0], poly[cnt - 1, 1]
            dp = ex * (pz - az) - ez * (px - ax)
            for i in range(cnt):
                qx, qz = poly[i, 0], poly[i, 1]
                dq = ex * (qz - az) - ez * (qx - ax)
                if dq >= 0.0:
                    if dp < 0.0:
                        t = dp / (dp - dq)
                        buf[m, 0] = px + t * (qx - px)
                        buf[m, 1] = pz + t * (qz - pz)
                        m += 1
                    buf[m, 0] = qx
                    buf[m, 1] = qz
                    m += 1
                elif dp >= 0.0:
                    t = dp / (dp - dq)
                    buf[m, 0] = px + t * (qx - px)
                    buf[m, 1] = pz + t * (qz - pz)
                    m += 1
                px, pz, dp = qx, qz, dq
            cnt = m
            for i in range(m):
                poly[i, 0] = buf[i, 0]
                poly[i, 1] = buf[i, 1]
        area = 0.0
        if cnt >= 3:
            for i in range(cnt):
                j = (i + 1) % cnt
                area += poly[i, 0] * poly[j, 1] - poly[j, 0] * poly[i, 1]
            area = 0.5 * abs(area)
        out[k] = area


def _bev_params(box: Box3D) -> tuple[float, float, float, float, float]:
    return (
        box.center.x,
        box.center.z,
        box.size[0] / 2.0,
        box.size[2] / 2.0,
        yaw_angle(box.rotation),
    )


def _vertical_overlap(a: Box3D, b: Box3D) -> float:
    lo = max(a.center.y - a.size[1] / 2.0, b.center.y - b.size[1] / 2.0)
    hi = min(a.center.y + a.size[1] / 2.0, b.center.y + b.size[1] / 2.0)
    return max(0.0, hi - lo)


def iou3d(a: Box3D, b: Box3D) -> float:
    """Analytic 3D IoU with rotations reduced to yaw about the vertical axis."""
    if a.frame is not b.frame:
        raise ValueError("boxes must be expressed in the same frame")
    dy = _vertical_overlap(a, b)
    if dy == 0.0:
        return 0.0
    pa = np.array([_bev_params(a)], dtype=np.float64)
    pb = np.array([_bev_params(b)], dtype=np.float64)
    out = np.empty(1, dtype=np.float64)
    _bev_overlap_pairs(pa, pb, out)
    inter = out[0] * dy
    if inter == 0.0:
        return 0.0
    union = a.volume() + b.volume() - inter
    return inter / union


def iou3d_sampled(a: Box3D, b: Box3D, samples: int = 1_000_000, seed: int = 0) -> float:
    """Point-sampling IoU estimate over the union's axis-aligned bounds.

    Handles fully general rotations; used as the independent oracle for
    the yaw-reduced analytic path.
    """
    if samples < MIN_SAMPLED_POINTS:
        raise ValueError(f"need at least {MIN_SAMPLED_POINTS} samples, got {samples}")
    if a.frame is not b.frame:
        raise ValueError("boxes must be expressed in the same frame")
    corners = np.array(
        [[c.x, c.y, c.z] for c in a.corners()] + [[c.x, c.y, c.z] for c in b.corners()]
    )
    lo = corners.min(axis=0)
    hi = corners.max(axis=0)
    rng = np.random.default_rng(seed)
    points = rng.uniform(lo, hi, size=(samples, 3))
    inside_a = _points_in_box(points, a)
    inside_b = _points_in_box(points, b)
    n_or = np.count_nonzero(inside_a | inside_b)
    if n_or == 0:
        return 0.0
    n_and = np.count_nonzero(inside_a & inside_b)
    return n_and / n_or


def _points_in_box(points: np.ndarray, box: Box3D) -> np.ndarray:
    q = box.rotation.conjugate()
    # rows of the world->local rotation matrix
    ex = q.rotate(Vec3(1.0, 0.0, 0.0))
    ey = q.rotate(Vec3(0.0, 1.0, 0.0))
    ez = q.rotate(Vec3(0.0, 0.0, 1.0))
    rot = np.array([[ex.x, ey.x, ez.x], [ex.y, ey.y, ez.y], [ex.z, ey.z, ez.z]])
    local = (points - np.array([box.center.x, box.center.y, box.center.z])) @ rot
    half = np.array([box.size[0] / 2.0, box.size[1] / 2.0, box.size[2] / 2.0])
    return np.all(np.abs(local) <= half, axis=1)


def iou_matrix(boxes_a: Sequence[Box3D], boxes_b: Sequence[Box3D]) -> np.ndarray:
    """Pairwise analytic IoU, with far-apart pairs gated to zero up front."""
    n, m = len(boxes_a), len(boxes_b)
    out = np.zeros((n, m), dtype=np.float64)
    if n == 0 or m == 0:
        return out
    pa = np.array([_bev_params(b) for b in boxes_a], dtype=np.float64)
    pb = np.array([_bev_params(b) for b in boxes_b], dtype=np.float64)
    centers_a = np.array([[b.center.x, b.center.y, b.center.z] for b in boxes_a])
    centers_b = np.array([[b.center.x, b.center.y, b.center.z] for b in boxes_b])
    sizes_a = np.array([b.size for b in boxes_a])
    sizes_b = np.array([b.size for b in boxes_b])
    radius_a = 0.5 * np.linalg.norm(sizes_a, axis=1)
    radius_b = 0.5 * np.linalg.norm(sizes_b, axis=1)
    dist = np.linalg.norm(centers_a[:, None, :] - centers_b[None, :, :], axis=2)
    ai, bi = np.nonzero(dist <= radius_a[:, None] + radius_b[None, :])
    if ai.size == 0:
        return out
    areas = np.empty(ai.size, dtype=np.float64)
    _bev_overlap_pairs(np.ascontiguousarray(pa[ai]), np.ascontiguousarray(pb[bi]), areas)
    y_lo = np.maximum(
        centers_a[ai, 1] - sizes_a[ai, 1] / 2.0, centers_b[bi, 1] - sizes_b[bi, 1] / 2.0
    )
    y_hi = np.minimum(
        centers_a[ai, 1] + sizes_a[ai, 1] / 2.0, centers_b[bi, 1] + sizes_b[bi, 1] / 2.0
    )
    inter = areas * np.maximum(0.0, y_hi - y_lo)
    vol_a = np.prod(sizes_a[ai], axis=1)
    vol_b = np.prod(sizes_b[bi], axis=1)
    union = vol_a + vol_b - inter
    nonzero = inter > 0.0
    out[ai[nonzero], bi[nonzero]] = inter[nonzero] / union[nonzero]
    return out


def range_filter(boxes: Sequence[Box3D], r_min: float, r_max: float) -> list[Box3D]:
    """Keep boxes whose planar range r satisfies r_min < r <= r_max."""
    return [b for b in boxes if r_min < planar_range(b.center) <= r_max]


def easy_filter(
    boxes: Sequence[Box3D], cam: CameraModel, min_height_px: float = EASY_MIN_HEIGHT_PX
) -> list[Box3D]:
    """Keep boxes whose projected height exceeds the threshold; boxes with
    corners behind the camera are dropped."""
    kept = []
    for box in boxes:
        height = projected_box_height_px(box, cam)
        if height is not None and height > min_height_px:
            kept.append(box)
    return kept


@dataclass(frozen=True)
class APConfig:
    """Settings for one AP evaluation pass."""

    iou_threshold: float = 0.5
    min_height_px: float | None = EASY_MIN_HEIGHT_PX
    range_limits: tuple[float, float] | None = None

    def __post_init__(self) -> None:
        if not (0.0 < self.iou_threshold <= 1.0):
            raise ValueError("iou_threshold must be in (0, 1]")


@dataclass(frozen=True)
class EvalFrame:
    """Ground truth, detections and camera for a single frame."""

    gt: tuple[Box3D, ...]
    detections: tuple[Detection, ...]
    camera: CameraModel | None = None


@dataclass(frozen=True)
class APResult:
    """11-point interpolated AP; `ap` is None when no ground truth remains."""

    ap: float | None
    curve: tuple[tuple[float, float], ...]
    gt_count: int
    detection_count: int


def _filtered_frame(frame: EvalFrame, cfg: APConfig) -> tuple[list[Box3D], list[Detection]]:
    gt = list(frame.gt)
    dets = list(frame.detections)
    if cfg.range_limits is not None:
        lo, hi = cfg.range_limits
        gt = range_filter(gt, lo, hi)
        dets = [d for d in dets if lo < planar_range(d.box.center) <= hi]
    if cfg.min_height_px is not None:
        if frame.camera is None:
            raise ValueError("camera required for the projected-height filter")
        gt = easy_filter(gt, frame.camera, cfg.min_height_px)
    return gt, dets


def ap11(frames: Sequence[EvalFrame], cfg: APConfig) -> APResult:
    """11-point interpolated AP over all frames.

    Detections are ranked by score; each claims the highest-IoU unmatched
    ground-truth box in its frame when that IoU clears the threshold,
    otherwise it counts as a false positive.
    """
    per_frame: list[tuple[list[Box3D], list[Detection], np.ndarray]] = []
    pooled: list[tuple[float, int, int]] = []
    gt_total = 0
    det_total = 0
    for f_idx, frame in enumerate(frames):
        gt, dets = _filtered_frame(frame, cfg)
        gt_total += len(gt)
        det_total += len(dets)
        ious = iou_matrix(gt, [d.box for d in dets])
        per_frame.append((gt, dets, ious))
        for d_idx, det in enumerate(dets):
            pooled.append((det.score, f_idx, d_idx))
    if gt_total == 0:
        return APResult(ap=None, curve=(), gt_count=0, detection_count=det_total)
    pooled.sort(key=lambda item: (-item[0], item[1], item[2]))
    claimed = [np.zeros(len(gt), dtype=bool) for gt, _, _ in per_frame]
    tp = 0
    fp = 0
    curve: list[tuple[float, float]] = []
    for _, f_idx, d_idx in pooled:
        gt, _, ious = per_frame[f_idx]
        best_gt = -1
        best_iou = -1.0
        for g_idx in range(len(gt)):
            if claimed[f_idx][g_idx]:
                continue
            value = ious[g_idx, d_idx]
            if value >= cfg.iou_threshold and value > best_iou:
                best_iou = value
                best_gt = g_idx
        if best_gt >= 0:
            claimed[f_idx][best_gt] = True
            tp += 1
        else:
            fp += 1
        curve.append((tp / gt_total, tp / (tp + fp)))
    recalls = np.array([point[0] for point in curve])
    precisions = np.array([point[1] for point in curve])
    total = 0.0
    for level in RECALL_POINTS:
        mask = recalls >= level
        total += float(precisions[mask].max()) if mask.any() else 0.0
    return APResult(
        ap=total / 11.0,
        curve=tuple(curve),
        gt_count=gt_total,
        detection_count=det_total,
    )


@dataclass(frozen=True)
class APReportRow:
    """One range regime of the detection report (AP values in [0, 1])."""

    range_limits: tuple[float, float]
    instance_count: int
    strict_ap: float | None
    loose_ap: float | None

    @property
    def mean_ap(self) -> float | None:
        if self.strict_ap is None or self.loose_ap is None:
            return None
        return (self.strict_ap + self.loose_ap) / 2.0


DEFAULT_RANGE_REGIMES: tuple[tuple[float, float], ...] = (
    (0.0, math.inf),
    (0.0, 10.0),
    (0.0, 20.0),
    (0.0, 30.0),
    (0.0, 50.0),
    (10.0, 20.0),
    (20.0, 50.0),
    (30.0, 50.0),
    (50.0, math.inf),
)


def ap_report(
    frames: Sequence[EvalFrame],
    regimes: Sequence[tuple[float, float]] = DEFAULT_RANGE_REGIMES,
    strict_iou: float = 0.5,
    loose_iou: float = 0.25,
    min_height_px: float | None = EASY_MIN_HEIGHT_PX,
) -> list[APReportRow]:
    """Strict/loose AP across range regimes."""
    rows = []
    for limits in regimes:
        strict = ap11(
            frames,
            APConfig(iou_threshold=strict_iou, min_height_px=min_height_px, range_limits=limits),
        )
        loose = ap11(
            frames,
            APConfig(iou_threshold=loose_iou, min_height_px=min_height_px, range_limits=limits),
        )
        rows.append(
            APReportRow(
                range_limits=limits,
                instance_count=strict.gt_count,
                strict_ap=strict.ap,
                loose_ap=loose.ap,
            )
        )
    return rows


def format_range(limits: tuple[float, float]) -> str:
    lo, hi = limits
    hi_text = "inf" if math.isinf(hi) else f"{hi:g}"
    return f"({lo:g}, {hi_text}]"


def parse_range(text: str) -> tuple[float, float]:
    """Parse 'lo:hi' range text; 'inf' is accepted for the upper limit."""
    try:
        lo_text, hi_text = text.split(":")
        lo = float(lo_text)
        hi = float(hi_text)
    except ValueError as exc:
        raise ValueError(f"range must look like 'lo:hi', got {text!r}") from exc
    if not lo < hi:
        raise ValueError(f"range lower bound must be below upper bound, got {text!r}")
    return lo, hi


def _format_ap(value: float | None) -> str:
    return "undefined" if value is None else f"{value * 100.0:.2f}"


DETECTION_CSV_HEADER = [
    "Model",
    "Range",
    "Instance",
    "3D_AP11_easy_strict",
    "3D_AP11_easy_loose",
    "Mean",
]


def detection_csv_rows(rows: Sequence[APReportRow], model: str) -> list[list[str]]:
    """Rows for the detection report CSV, AP values scaled to percent."""
    out = [list(DETECTION_CSV_HEADER)]
    for row in rows:
        out.append(
            [
                model,
                format_range(row.range_limits),
                str(row.instance_count),
                _format_ap(row.strict_ap),
                _format_ap(row.loose_ap),
                _format_ap(row.mean_ap),
            ]
        )
    return out


def eval_frames_from_annotations(
    frames: Sequence,
    detections_by_frame: Mapping[int, Sequence[Detection]],
    image_width: int,
    image_height: int,
) -> list[EvalFrame]:
    """Pair stored frame annotations with detections for evaluation."""
    out = []
    for frame in frames:
        out.append(
            EvalFrame(
                gt=tuple(box.to_box3d() for box in frame.boxes),
                detections=tuple(detections_by_frame.get(frame.frame_index, ())),
                camera=frame.sensor.camera(image_width, image_height),
            )
        )
    return out
