"""Detection sources: a seeded ground-truth perturbation oracle and an
ingestion path for externally produced detections.

Both sources honor the same contract: per frame, a list of sensor-frame
boxes (center, size, rotation) with a confidence score in [0, 1].
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import IO, Mapping, Sequence

import numpy as np

from .dataset import (
    BoxRecord,
    DatasetError,
    IoFailure,
    ParseError,
    SchemaError,
    _parse_floats,
    _parse_quaternion,
)
from .geometry import Box3D, CameraModel, Frame, UnitQuaternion, Vec3, planar_range, signed_ground_angle


class UnknownPreset(KeyError):
    """No noise preset with that name."""


class FrameMismatch(DatasetError):
    """A detections document refers to a frame the dataset does not have."""


@dataclass(frozen=True)
class Detection:
    """A predicted sensor-frame box with its confidence score."""

    box: Box3D
    score: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must be in [0, 1], got {self.score}")


@dataclass(frozen=True)
class NoiseModel:
    """Parametric error model applied to ground truth in the sensor frame.

    Depth noise grows linearly with planar range r
    (sigma = depth_noise_base + depth_noise_per_meter * r), reflecting that
    depth is the weak axis of single-camera 3D estimation. Detection
    probability follows a logistic falloff in r, heading flips are biased
    toward the leaving direction (negative ground angle), and scores decay
    linearly in r with Gaussian jitter.
    """

    depth_noise_base: float = 0.0
    depth_noise_per_meter: float = 0.0
    lateral_noise: float = 0.0
    size_noise: float = 0.0
    heading_noise: float = 0.0
    flip_probability: float = 0.0
    flip_negative_bias: float = 0.5
    detection_prob_near: float = 1.0
    detection_range_midpoint: float = math.inf
    detection_range_falloff: float = 10.0
    false_positive_rate: float = 0.0
    false_positive_depth: tuple[float, float] = (2.0, 120.0)
    score_base: float = 1.0
    score_range_slope: float = 0.0
    score_jitter: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("depth_noise_base", "depth_noise_per_meter", "lateral_noise",
                     "size_noise", "heading_noise", "score_jitter"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("flip_probability", "flip_negative_bias", "detection_prob_near"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.false_positive_rate < 0:
            raise ValueError("false_positive_rate must be >= 0")
        if self.detection_range_falloff <= 0:
            raise ValueError("detection_range_falloff must be > 0")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")

    def detection_probability(self, r: float) -> float:
        if math.isinf(self.detection_range_midpoint):
            return self.detection_prob_near
        x = (self.detection_range_midpoint - r) / self.detection_range_falloff
        if x >= 0:
            return self.detection_prob_near / (1.0 + math.exp(-x))
        e = math.exp(x)
        return self.detection_prob_near * e / (1.0 + e)

    def depth_sigma(self, r: float) -> float:
        return self.depth_noise_base + self.depth_noise_per_meter * r


_FP_NOMINAL_SIZE = (0.6, 1.75, 0.6)


def perturb(
    gt: Sequence[BoxRecord],
    cam: CameraModel,
    nm: NoiseModel,
    frame_index: int,
) -> list[Detection]:
    """Turn ground-truth boxes into noisy detections.

    Fully deterministic given (nm.seed, frame_index): every ground-truth box
    consumes a fixed number of random draws whether or not it is kept.
    """
    rng = np.random.default_rng((nm.seed, frame_index))
    detections: list[Detection] = []
    for record in gt:
        center = record.translation
        r = planar_range(center)
        keep = rng.random() < nm.detection_probability(r)
        dx, dy = rng.normal(0.0, nm.lateral_noise, size=2)
        dz = rng.normal(0.0, nm.depth_sigma(r))
        size_factors = np.maximum(rng.normal(1.0, nm.size_noise, size=3), 0.05)
        heading_jitter = rng.normal(0.0, nm.heading_noise)
        u_flip = rng.random()
        u_direction = rng.random()
        score_noise = rng.normal(0.0, nm.score_jitter)
        if not keep:
            continue
        new_center = Vec3(center.x + dx, center.y + dy, center.z + dz)
        rotation = UnitQuaternion.from_yaw(heading_jitter).multiply(record.rotation)
        box = Box3D(
            center=new_center,
            size=(
                record.size[0] * float(size_factors[0]),
                record.size[1] * float(size_factors[1]),
                record.size[2] * float(size_factors[2]),
            ),
            rotation=rotation,
            frame=Frame.SENSOR,
        )
        if u_flip < nm.flip_probability:
            box = _flip_toward(box, negative=u_direction < nm.flip_negative_bias)
        new_r = planar_range(box.center)
        score = _clamp(nm.score_base - nm.score_range_slope * new_r + score_noise)
        detections.append(Detection(box=box, score=score))
    n_fp = int(rng.poisson(nm.false_positive_rate))
    for _ in range(n_fp):
        detections.append(_false_positive(rng, cam, nm))
    return detections


def _clamp(value: float) -> float:
    return min(1.0, max(0.0, value))


def _flip_toward(box: Box3D, negative: bool) -> Box3D:
    """Reverse the heading when its ground-angle sign differs from the target."""
    theta = signed_ground_angle(box)
    if (theta < 0.0) == negative:
        return box
    flipped = UnitQuaternion.from_yaw(math.pi).multiply(box.rotation)
    return replace(box, rotation=flipped)


def _false_positive(rng: np.random.Generator, cam: CameraModel, nm: NoiseModel) -> Detection:
    z = rng.uniform(*nm.false_positive_depth)
    u = rng.uniform(0.05 * cam.image_width, 0.95 * cam.image_width)
    v = rng.uniform(0.05 * cam.image_height, 0.95 * cam.image_height)
    x = (u - cam.cx) * z / cam.fx
    y = (cam.cy - v) * z / cam.fy
    factors = np.maximum(rng.normal(1.0, 0.1, size=3), 0.5)
    yaw = rng.uniform(-math.pi, math.pi)
    box = Box3D(
        center=Vec3(x, y, z),
        size=(
            _FP_NOMINAL_SIZE[0] * float(factors[0]),
            _FP_NOMINAL_SIZE[1] * float(factors[1]),
            _FP_NOMINAL_SIZE[2] * float(factors[2]),
        ),
        rotation=UnitQuaternion.from_yaw(yaw),
        frame=Frame.SENSOR,
    )
    score = _clamp(nm.score_base - nm.score_range_slope * planar_range(box.center)
                   + rng.normal(0.0, nm.score_jitter))
    return Detection(box=box, score=score)


_PRESETS = {
    # Pass-through: detections equal ground truth with score 1.
    "perfect": NoiseModel(),
    # Mimics a trained single-camera detector: reliable out to ~20 m,
    # nearly blind past 50 m, and with direction flips biased toward the
    # leaving orientation.
    "realistic": NoiseModel(
        depth_noise_base=0.05,
        depth_noise_per_meter=0.02,
        lateral_noise=0.10,
        size_noise=0.05,
        heading_noise=0.15,
        flip_probability=0.25,
        flip_negative_bias=0.85,
        detection_prob_near=0.98,
        detection_range_midpoint=45.0,
        detection_range_falloff=6.0,
        false_positive_rate=0.5,
        score_base=0.95,
        score_range_slope=0.006,
        score_jitter=0.08,
    ),
    # Deliberately poor detector for robustness testing.
    "stress": NoiseModel(
        depth_noise_base=0.2,
        depth_noise_per_meter=0.05,
        lateral_noise=0.3,
        size_noise=0.15,
        heading_noise=0.5,
        flip_probability=0.4,
        flip_negative_bias=0.7,
        detection_prob_near=0.9,
        detection_range_midpoint=25.0,
        detection_range_falloff=8.0,
        false_positive_rate=3.0,
        score_base=0.8,
        score_range_slope=0.008,
        score_jitter=0.15,
    ),
}


def preset_names() -> tuple[str, ...]:
    return tuple(_PRESETS)


def calibrate_preset(name: str, seed: int = 0) -> NoiseModel:
    """Named noise model; the seed replaces the preset default."""
    try:
        model = _PRESETS[name]
    except KeyError:
        raise UnknownPreset(f"unknown noise preset {name!r}; expected one of {preset_names()}")
    return replace(model, seed=seed)


def _detection_to_dict(det: Detection) -> dict:
    return {
        "translation": [det.box.center.x, det.box.center.y, det.box.center.z],
        "size": list(det.box.size),
        "rotation": [det.box.rotation.w, det.box.rotation.x, det.box.rotation.y, det.box.rotation.z],
        "score": det.score,
    }


def _detection_from_dict(doc: dict, where: str) -> Detection:
    translation = _parse_floats(_require_key(doc, "translation", where), 3, f"{where}.translation")
    size = _parse_floats(_require_key(doc, "size", where), 3, f"{where}.size")
    if any(s <= 0 for s in size):
        raise SchemaError(f"{where}.size must be positive")
    rotation = _parse_quaternion(_require_key(doc, "rotation", where), f"{where}.rotation")
    score = _require_key(doc, "score", where)
    if isinstance(score, bool) or not isinstance(score, (int, float)):
        raise SchemaError(f"{where}.score must be a number")
    if not 0.0 <= score <= 1.0:
        raise SchemaError(f"{where}.score must be in [0, 1], got {score}")
    box = Box3D(
        center=Vec3(*translation),
        size=(size[0], size[1], size[2]),
        rotation=rotation,
        frame=Frame.SENSOR,
    )
    return Detection(box=box, score=float(score))


def _require_key(doc: dict, key: str, where: str):
    if not isinstance(doc, dict):
        raise SchemaError(f"{where} must be an object")
    if key not in doc:
        raise SchemaError(f"missing field '{key}' in {where}")
    return doc[key]


def export_detections(
    detections_by_frame: Mapping[int, Sequence[Detection]],
    sink: str | Path | IO[str],
) -> int:
    """Write all frames' detections as one document; returns bytes written."""
    doc = {
        "frames": {
            str(index): [_detection_to_dict(d) for d in detections_by_frame[index]]
            for index in sorted(detections_by_frame)
        }
    }
    text = json.dumps(doc, indent=2) + "\n"
    data = text.encode("utf-8")
    try:
        if isinstance(sink, (str, Path)):
            Path(sink).write_bytes(data)
        else:
            sink.write(text)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return len(data)


def ingest_external(
    source: str | Path | IO[str],
    frame_indices: Sequence[int],
) -> dict[int, list[Detection]]:
    """Parse a detections document and align it to the dataset's frames.

    Frames without entries come back as empty lists; entries for unknown
    frames raise FrameMismatch.
    """
    try:
        if isinstance(source, (str, Path)):
            text = Path(source).read_text(encoding="utf-8")
        else:
            text = source.read()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(str(exc)) from exc
    if not isinstance(doc, dict):
        raise ParseError("top-level document must be an object")
    frames_doc = _require_key(doc, "frames", "detections")
    if not isinstance(frames_doc, dict):
        raise SchemaError("detections.frames must be an object")
    known = set(frame_indices)
    result: dict[int, list[Detection]] = {index: [] for index in frame_indices}
    for key, items in frames_doc.items():
        try:
            index = int(key)
        except ValueError:
            raise SchemaError(f"frame key {key!r} is not an integer") from None
        if index not in known:
            raise FrameMismatch(f"detections refer to unknown frame_index {index}")
        if not isinstance(items, list):
            raise SchemaError(f"frame {index} detections must be a list")
        result[index] = [
            _detection_from_dict(item, f"frame {index} detection {i}")
            for i, item in enumerate(items)
        ]
    return result
