"""Proximity hazard classification, prediction matching and its evaluation.

Workers are sorted into four danger categories from their sensor-frame
position and torso orientation:

* I (Dangerous): planar range r < r_exclusion.
* II (Potentially Dangerous): r_exclusion <= r < r_warning and the worker
  is oriented toward the camera (ground angle theta >= 0).
* III (Concerned): same band but oriented away (theta < 0).
* IV (Safe): r >= r_warning.

A ground-truth worker whose box attracts no matching detection is
reported as Unknown.
"""

from __future__ import annotations

import math
import time
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

from .dataset import BoxRecord, FrameAnnotation
from .detector import Detection
from .geometry import Box3D, DegenerateOrientation, planar_range, signed_ground_angle
from .metrics import iou_matrix


class ProximityCategory(Enum):
    DANGEROUS = "I"
    POTENTIALLY_DANGEROUS = "II"
    CONCERNED = "III"
    SAFE = "IV"
    UNKNOWN = "Unknown"


REAL_CATEGORIES = (
    ProximityCategory.DANGEROUS,
    ProximityCategory.POTENTIALLY_DANGEROUS,
    ProximityCategory.CONCERNED,
    ProximityCategory.SAFE,
)

DANGER_CATEGORIES = (ProximityCategory.DANGEROUS, ProximityCategory.POTENTIALLY_DANGEROUS)


@dataclass(frozen=True)
class ClassifierConfig:
    """Radii of the exclusion zone (category I) and warning zone (II/III)."""

    r_exclusion: float
    r_warning: float

    def __post_init__(self) -> None:
        if not (0.0 < self.r_exclusion < self.r_warning):
            raise ValueError(
                f"need 0 < r_exclusion < r_warning, got {self.r_exclusion}, {self.r_warning}"
            )

    @classmethod
    def from_exclusion(cls, r_exclusion: float, warning_factor: float = 2.0) -> "ClassifierConfig":
        """Config with the warning radius a fixed multiple of the exclusion radius."""
        return cls(r_exclusion=r_exclusion, r_warning=r_exclusion * warning_factor)


@dataclass(frozen=True)
class MatcherConfig:
    """IoU gate for registering a prediction to a ground-truth worker."""

    iou_threshold: float = 0.25

    def __post_init__(self) -> None:
        if not (0.0 < self.iou_threshold <= 1.0):
            raise ValueError(f"iou_threshold must be in (0, 1], got {self.iou_threshold}")


def classify(box: Box3D, theta: float | None, cfg: ClassifierConfig) -> ProximityCategory:
    """Category of a sensor-frame box given its ground angle theta.

    Only the x and z center coordinates matter; theta is consulted only in
    the warning band, where it must not be None.
    """
    r = planar_range(box.center)
    if r < cfg.r_exclusion:
        return ProximityCategory.DANGEROUS
    if r < cfg.r_warning:
        if theta is None:
            raise DegenerateOrientation("theta required inside the warning band")
        if theta >= 0.0:
            return ProximityCategory.POTENTIALLY_DANGEROUS
        return ProximityCategory.CONCERNED
    return ProximityCategory.SAFE


def match_predictions(
    gt_boxes: Sequence[Box3D],
    predictions: Sequence[Detection],
    cfg: MatcherConfig,
) -> list[Detection | None]:
    """One-to-one registration of predictions to ground-truth boxes.

    Each ground-truth box takes the highest-scoring prediction whose IoU
    clears the threshold. Contended predictions go to the assignment with
    the higher score (ties: lower prediction index, then lower ground-truth
    index) and the losing box falls back to its next candidate, so no
    prediction is handed to two ground-truth boxes.
    """
    n = len(gt_boxes)
    assigned: list[Detection | None] = [None] * n
    if n == 0 or not predictions:
        return assigned
    ious = iou_matrix(gt_boxes, [p.box for p in predictions])
    candidates: list[list[int]] = []
    for i in range(n):
        js = [j for j in range(len(predictions)) if ious[i, j] >= cfg.iou_threshold]
        js.sort(key=lambda j: (-predictions[j].score, j))
        candidates.append(js)
    cursor = [0] * n
    pending = set(range(n))
    claimed: set[int] = set()
    while pending:
        best: tuple[float, int, int] | None = None
        for i in pending:
            js = candidates[i]
            k = cursor[i]
            while k < len(js) and js[k] in claimed:
                k += 1
            cursor[i] = k
            if k == len(js):
                continue
            j = js[k]
            key = (-predictions[j].score, j, i)
            if best is None or key < best:
                best = key
        if best is None:
            break
        _, j, i = best
        assigned[i] = predictions[j]
        claimed.add(j)
        pending.discard(i)
    return assigned


def _safe_ground_angle(box: Box3D) -> float | None:
    try:
        return signed_ground_angle(box)
    except DegenerateOrientation:
        return None


@dataclass(frozen=True)
class ProximityRecord:
    """Classification outcome for one subject (a detection, or a ground-truth
    worker via its matched detection)."""

    instance_id: int | None
    detection: Detection | None
    range_m: float
    theta: float | None
    category: ProximityCategory


@dataclass(frozen=True)
class WorkerRecord:
    """Ground truth and prediction for one worker in one frame."""

    frame_index: int
    instance_id: int
    gt_category: ProximityCategory
    gt_range: float
    gt_theta: float | None
    predicted: ProximityRecord


@dataclass(frozen=True)
class DangerEvent:
    """Raised for every category I or II subject in a frame."""

    frame_index: int
    instance_id: int | None
    category: ProximityCategory
    range_m: float
    theta: float | None


@dataclass
class FrameReport:
    """Per-frame monitoring output."""

    frame_index: int
    mode: str
    counts: dict[ProximityCategory, int]
    records: list[ProximityRecord]
    worker_records: list[WorkerRecord] = field(default_factory=list)
    events: list[DangerEvent] = field(default_factory=list)
    processing_time_s: float = 0.0


def _classify_detection(
    det: Detection, instance_id: int | None, cfg: ClassifierConfig
) -> ProximityRecord:
    theta = _safe_ground_angle(det.box)
    return ProximityRecord(
        instance_id=instance_id,
        detection=det,
        range_m=planar_range(det.box.center),
        theta=theta,
        category=classify(det.box, theta, cfg),
    )


def monitor_frame(
    frame: FrameAnnotation | None,
    detections: Sequence[Detection],
    classifier_cfg: ClassifierConfig,
    matcher_cfg: MatcherConfig | None = None,
    mode: str = "live",
) -> FrameReport:
    """Classify one frame.

    In "live" mode every detection is classified as a worker. In "eval"
    mode each ground-truth worker is classified through its matched
    detection (Unknown when unmatched), which is what the classification
    metrics consume.
    """
    start = time.perf_counter()
    if mode not in ("live", "eval"):
        raise ValueError(f"mode must be 'live' or 'eval', got {mode!r}")
    counts: dict[ProximityCategory, int] = {c: 0 for c in ProximityCategory}
    records: list[ProximityRecord] = []
    worker_records: list[WorkerRecord] = []
    frame_index = frame.frame_index if frame is not None else -1
    if mode == "live":
        for det in detections:
            record = _classify_detection(det, None, classifier_cfg)
            records.append(record)
            counts[record.category] += 1
    else:
        if frame is None:
            raise ValueError("eval mode requires the ground-truth frame")
        if matcher_cfg is None:
            raise ValueError("eval mode requires a matcher config")
        gt_boxes = [box.to_box3d() for box in frame.boxes]
        matches = match_predictions(gt_boxes, detections, matcher_cfg)
        for record_gt, gt_box, match in zip(frame.boxes, gt_boxes, matches):
            gt_theta = _safe_ground_angle(gt_box)
            gt_category = classify(gt_box, gt_theta, classifier_cfg)
            if match is None:
                predicted = ProximityRecord(
                    instance_id=record_gt.instance_id,
                    detection=None,
                    range_m=planar_range(gt_box.center),
                    theta=None,
                    category=ProximityCategory.UNKNOWN,
                )
            else:
                predicted = _classify_detection(match, record_gt.instance_id, classifier_cfg)
            records.append(predicted)
            counts[predicted.category] += 1
            worker_records.append(
                WorkerRecord(
                    frame_index=frame_index,
                    instance_id=record_gt.instance_id,
                    gt_category=gt_category,
                    gt_range=planar_range(gt_box.center),
                    gt_theta=gt_theta,
                    predicted=predicted,
                )
            )
    events = [
        DangerEvent(frame_index, r.instance_id, r.category, r.range_m, r.theta)
        for r in records
        if r.category in DANGER_CATEGORIES
    ]
    return FrameReport(
        frame_index=frame_index,
        mode=mode,
        counts=counts,
        records=records,
        worker_records=worker_records,
        events=events,
        processing_time_s=time.perf_counter() - start,
    )


def monitor_dataset(
    frames: Sequence[FrameAnnotation],
    detections_by_frame: Mapping[int, Sequence[Detection]],
    classifier_cfg: ClassifierConfig,
    matcher_cfg: MatcherConfig | None = None,
    mode: str = "eval",
) -> list[FrameReport]:
    return [
        monitor_frame(
            frame,
            detections_by_frame.get(frame.frame_index, ()),
            classifier_cfg,
            matcher_cfg,
            mode=mode,
        )
        for frame in frames
    ]


@dataclass(frozen=True)
class CategoryMetrics:
    """Counts and derived scores for one category; scores are None when the
    denominator is zero (undefined, not zero)."""

    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float | None:
        total = self.tp + self.fp
        return self.tp / total if total else None

    @property
    def recall(self) -> float | None:
        total = self.tp + self.fn
        return self.tp / total if total else None

    @property
    def f1(self) -> float | None:
        p, r = self.precision, self.recall
        if p is None or r is None or p + r == 0.0:
            return None
        return 2.0 * p * r / (p + r)


@dataclass(frozen=True)
class ClassificationReport:
    """Per-category metrics with the confusion matrix they derive from.

    The confusion matrix maps (true category, predicted category) to a
    count; predicted may be Unknown, which contributes false negatives to
    the true category and false positives nowhere.
    """

    per_category: dict[ProximityCategory, CategoryMetrics]
    confusion: dict[tuple[ProximityCategory, ProximityCategory], int]
    worker_count: int
    range_limits: tuple[float, float] | None = None

    def _mean(self, attribute: str) -> float | None:
        values = [
            getattr(self.per_category[c], attribute)
            for c in REAL_CATEGORIES
            if getattr(self.per_category[c], attribute) is not None
        ]
        return sum(values) / len(values) if values else None

    @property
    def mean_precision(self) -> float | None:
        return self._mean("precision")

    @property
    def mean_recall(self) -> float | None:
        return self._mean("recall")

    @property
    def mean_f1(self) -> float | None:
        return self._mean("f1")


def evaluate_classification(
    records: Iterable[WorkerRecord],
    range_limits: tuple[float, float] | None = None,
) -> ClassificationReport:
    """Precision/recall/F1 per category over per-worker records.

    With range_limits (lo, hi), ground-truth workers whose true planar
    range r falls outside lo < r <= hi are dropped before counting.
    """
    confusion: Counter[tuple[ProximityCategory, ProximityCategory]] = Counter()
    total = 0
    for record in records:
        if range_limits is not None:
            lo, hi = range_limits
            if not (lo < record.gt_range <= hi):
                continue
        confusion[(record.gt_category, record.predicted.category)] += 1
        total += 1
    per_category: dict[ProximityCategory, CategoryMetrics] = {}
    for category in REAL_CATEGORIES:
        tp = confusion.get((category, category), 0)
        fp = sum(
            count
            for (true_cat, pred_cat), count in confusion.items()
            if pred_cat is category and true_cat is not category
        )
        fn = sum(
            count
            for (true_cat, pred_cat), count in confusion.items()
            if true_cat is category and pred_cat is not category
        )
        per_category[category] = CategoryMetrics(tp=tp, fp=fp, fn=fn)
    return ClassificationReport(
        per_category=per_category,
        confusion=dict(confusion),
        worker_count=total,
        range_limits=range_limits,
    )


CLASSIFICATION_CSV_HEADER = [
    "Range",
    "R_exclusion",
    "Proximity category",
    "TP",
    "FP",
    "FN",
    "Precision",
    "Recall",
    "F1",
]


def _format_metric(value: float | None) -> str:
    return "undefined" if value is None else f"{value:.2f}"


def _format_range_label(limits: tuple[float, float] | None) -> str:
    if limits is None:
        return "(0, inf]"
    lo, hi = limits
    hi_text = "inf" if math.isinf(hi) else f"{hi:g}"
    return f"({lo:g}, {hi_text}]"


def classification_csv_rows(
    report: ClassificationReport, r_exclusion: float
) -> list[list[str]]:
    """Category rows plus the mean row, shaped for the evaluation CSV."""
    range_label = _format_range_label(report.range_limits)
    rows = []
    for category in REAL_CATEGORIES:
        metrics = report.per_category[category]
        rows.append(
            [
                range_label,
                f"{r_exclusion:g}",
                category.value,
                str(metrics.tp),
                str(metrics.fp),
                str(metrics.fn),
                _format_metric(metrics.precision),
                _format_metric(metrics.recall),
                _format_metric(metrics.f1),
            ]
        )
    rows.append(
        [
            range_label,
            f"{r_exclusion:g}",
            "Mean",
            "/",
            "/",
            "/",
            _format_metric(report.mean_precision),
            _format_metric(report.mean_recall),
            _format_metric(report.mean_f1),
        ]
    )
    return rows
