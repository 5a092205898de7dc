"""Annotation storage: JSON frame documents, dataset manifests and validation.

On-disk layout of one camera sequence::

    <dataset>/
        manifest.json
        frame_000000.json
        frame_000001.json
        ...

Frame documents use a fixed key order and Python's shortest round-trip
float formatting, so writing the same frame twice is byte-identical.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Sequence

from .geometry import Box3D, CameraModel, Frame, Pose, UnitQuaternion, Vec3

QUAT_NORM_TOLERANCE = 1e-6

CAMERA_SIDES = ("front", "rear", "left", "right")
MOVE_SCHEMES = ("random", "predefined", "static")


class DatasetError(Exception):
    """Base class for annotation storage errors."""


class ParseError(DatasetError):
    """The document is not well-formed."""


class SchemaError(DatasetError):
    """A required field is missing, renamed or has the wrong shape."""


class InvalidRecord(DatasetError):
    """Field values violate a record invariant."""


class IoFailure(DatasetError):
    """Reading or writing the underlying file failed."""


@dataclass(frozen=True)
class SensorRecord:
    """Camera state at capture time: global pose plus intrinsics."""

    sensor_id: str
    translation: Vec3
    rotation: UnitQuaternion
    camera_intrinsic: tuple[tuple[float, float, float], ...]

    def __post_init__(self) -> None:
        if len(self.camera_intrinsic) != 3 or any(len(r) != 3 for r in self.camera_intrinsic):
            raise InvalidRecord("camera_intrinsic must be a 3x3 matrix")
        if not all(math.isfinite(v) for row in self.camera_intrinsic for v in row):
            raise InvalidRecord("camera_intrinsic entries must be finite")
        if not self.translation.is_finite():
            raise InvalidRecord("sensor translation must be finite")

    def pose(self) -> Pose:
        return Pose(self.translation, self.rotation)

    def camera(self, image_width: int, image_height: int) -> CameraModel:
        return CameraModel.from_intrinsic_matrix(
            self.camera_intrinsic, image_width, image_height, self.pose()
        )


@dataclass(frozen=True)
class BoxRecord:
    """One worker's 3D bounding box in the sensor frame."""

    label_id: int
    label_name: str
    instance_id: int
    translation: Vec3
    size: tuple[float, float, float]
    rotation: UnitQuaternion

    def __post_init__(self) -> None:
        if self.instance_id < 0:
            raise InvalidRecord(f"instance_id must be >= 0, got {self.instance_id}")
        if any(not (s > 0 and math.isfinite(s)) for s in self.size):
            raise InvalidRecord(f"box size must be positive, got {self.size}")
        if not self.translation.is_finite():
            raise InvalidRecord("box translation must be finite")

    def to_box3d(self) -> Box3D:
        return Box3D(self.translation, self.size, self.rotation, Frame.SENSOR)


@dataclass(frozen=True)
class FrameAnnotation:
    """Everything captured for one frame: camera state and visible boxes."""

    frame_index: int
    timestamp: float
    sensor: SensorRecord
    boxes: tuple[BoxRecord, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        object.__setattr__(self, "boxes", tuple(self.boxes))


@dataclass(frozen=True)
class DatasetManifest:
    """Per-sequence metadata."""

    name: str
    scene_id: str
    camera_side: str
    carrier: str
    move_scheme: str
    frame_count: int
    seed: int

    def __post_init__(self) -> None:
        if self.camera_side not in CAMERA_SIDES:
            raise InvalidRecord(f"camera_side must be one of {CAMERA_SIDES}")
        if self.move_scheme not in MOVE_SCHEMES:
            raise InvalidRecord(f"move_scheme must be one of {MOVE_SCHEMES}")
        if self.frame_count < 0:
            raise InvalidRecord("frame_count must be >= 0")


def _vec3_to_list(v: Vec3) -> list[float]:
    return [float(v.x), float(v.y), float(v.z)]


def _quat_to_list(q: UnitQuaternion) -> list[float]:
    return [float(q.w), float(q.x), float(q.y), float(q.z)]


def frame_to_dict(frame: FrameAnnotation) -> dict:
    seen: set[int] = set()
    for box in frame.boxes:
        if box.instance_id in seen:
            raise InvalidRecord(f"duplicate instance_id {box.instance_id} in frame")
        seen.add(box.instance_id)
    return {
        "frame_index": frame.frame_index,
        "timestamp": frame.timestamp,
        "sensor": {
            "sensor_id": frame.sensor.sensor_id,
            "translation": _vec3_to_list(frame.sensor.translation),
            "rotation": _quat_to_list(frame.sensor.rotation),
            "camera_intrinsic": [list(row) for row in frame.sensor.camera_intrinsic],
        },
        "boxes": [
            {
                "label_id": box.label_id,
                "label_name": box.label_name,
                "instance_id": box.instance_id,
                "translation": _vec3_to_list(box.translation),
                "size": [float(s) for s in box.size],
                "rotation": _quat_to_list(box.rotation),
            }
            for box in frame.boxes
        ],
    }


def _require(mapping: dict, key: str, where: str):
    if not isinstance(mapping, dict):
        raise SchemaError(f"{where} must be an object")
    if key not in mapping:
        raise SchemaError(f"missing field '{key}' in {where}")
    return mapping[key]


def _parse_floats(value, count: int, where: str) -> list[float]:
    if not isinstance(value, (list, tuple)) or len(value) != count:
        raise SchemaError(f"{where} must be a list of {count} numbers")
    out = []
    for item in value:
        if isinstance(item, bool) or not isinstance(item, (int, float)):
            raise SchemaError(f"{where} must contain numbers only")
        out.append(float(item))
    if not all(math.isfinite(v) for v in out):
        raise InvalidRecord(f"{where} must be finite")
    return out


def _parse_quaternion(value, where: str) -> UnitQuaternion:
    w, x, y, z = _parse_floats(value, 4, where)
    norm = math.sqrt(w * w + x * x + y * y + z * z)
    if abs(norm - 1.0) > QUAT_NORM_TOLERANCE:
        raise InvalidRecord(f"{where} has norm {norm:.9g}, expected 1 within {QUAT_NORM_TOLERANCE}")
    return UnitQuaternion(w, x, y, z)


def _parse_vec3(value, where: str) -> Vec3:
    x, y, z = _parse_floats(value, 3, where)
    return Vec3(x, y, z)


def _parse_int(value, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaError(f"{where} must be an integer")
    return value


def sensor_from_dict(doc: dict) -> SensorRecord:
    sensor_id = _require(doc, "sensor_id", "sensor")
    if not isinstance(sensor_id, str):
        raise SchemaError("sensor.sensor_id must be a string")
    matrix = _require(doc, "camera_intrinsic", "sensor")
    if not isinstance(matrix, list) or len(matrix) != 3:
        raise SchemaError("sensor.camera_intrinsic must be a 3x3 matrix")
    rows = tuple(tuple(_parse_floats(row, 3, "sensor.camera_intrinsic")) for row in matrix)
    return SensorRecord(
        sensor_id=sensor_id,
        translation=_parse_vec3(_require(doc, "translation", "sensor"), "sensor.translation"),
        rotation=_parse_quaternion(_require(doc, "rotation", "sensor"), "sensor.rotation"),
        camera_intrinsic=rows,
    )


def box_from_dict(doc: dict) -> BoxRecord:
    label_name = _require(doc, "label_name", "box")
    if not isinstance(label_name, str):
        raise SchemaError("box.label_name must be a string")
    size = _parse_floats(_require(doc, "size", "box"), 3, "box.size")
    return BoxRecord(
        label_id=_parse_int(_require(doc, "label_id", "box"), "box.label_id"),
        label_name=label_name,
        instance_id=_parse_int(_require(doc, "instance_id", "box"), "box.instance_id"),
        translation=_parse_vec3(_require(doc, "translation", "box"), "box.translation"),
        size=(size[0], size[1], size[2]),
        rotation=_parse_quaternion(_require(doc, "rotation", "box"), "box.rotation"),
    )


def frame_from_dict(doc: dict) -> FrameAnnotation:
    boxes_doc = _require(doc, "boxes", "frame")
    if not isinstance(boxes_doc, list):
        raise SchemaError("frame.boxes must be a list")
    timestamp = _require(doc, "timestamp", "frame")
    if isinstance(timestamp, bool) or not isinstance(timestamp, (int, float)):
        raise SchemaError("frame.timestamp must be a number")
    return FrameAnnotation(
        frame_index=_parse_int(_require(doc, "frame_index", "frame"), "frame.frame_index"),
        timestamp=float(timestamp),
        sensor=sensor_from_dict(_require(doc, "sensor", "frame")),
        boxes=tuple(box_from_dict(b) for b in boxes_doc),
    )


def _dump(doc: dict, sink: str | Path | IO[str]) -> int:
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


def _load(source: str | Path | IO[str]) -> dict:
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
    return doc


def write_frame(frame: FrameAnnotation, sink: str | Path | IO[str]) -> int:
    """Serialize one frame; returns the number of bytes written."""
    return _dump(frame_to_dict(frame), sink)


def read_frame(source: str | Path | IO[str]) -> FrameAnnotation:
    return frame_from_dict(_load(source))


def manifest_to_dict(manifest: DatasetManifest) -> dict:
    return {
        "name": manifest.name,
        "scene_id": manifest.scene_id,
        "camera_side": manifest.camera_side,
        "carrier": manifest.carrier,
        "move_scheme": manifest.move_scheme,
        "frame_count": manifest.frame_count,
        "seed": manifest.seed,
    }


def manifest_from_dict(doc: dict) -> DatasetManifest:
    for key in ("name", "scene_id", "camera_side", "carrier", "move_scheme"):
        value = _require(doc, key, "manifest")
        if not isinstance(value, str):
            raise SchemaError(f"manifest.{key} must be a string")
    return DatasetManifest(
        name=doc["name"],
        scene_id=doc["scene_id"],
        camera_side=doc["camera_side"],
        carrier=doc["carrier"],
        move_scheme=doc["move_scheme"],
        frame_count=_parse_int(_require(doc, "frame_count", "manifest"), "manifest.frame_count"),
        seed=_parse_int(_require(doc, "seed", "manifest"), "manifest.seed"),
    )


def write_manifest(manifest: DatasetManifest, sink: str | Path | IO[str]) -> int:
    return _dump(manifest_to_dict(manifest), sink)


def read_manifest(source: str | Path | IO[str]) -> DatasetManifest:
    return manifest_from_dict(_load(source))


def frame_filename(frame_index: int) -> str:
    return f"frame_{frame_index:06d}.json"


def write_sequence(
    frames: Sequence[FrameAnnotation],
    manifest: DatasetManifest,
    directory: str | Path,
) -> int:
    """Write manifest plus one file per frame; returns total bytes."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    total = write_manifest(manifest, directory / "manifest.json")
    for frame in frames:
        total += write_frame(frame, directory / frame_filename(frame.frame_index))
    return total


def read_sequence(directory: str | Path) -> tuple[DatasetManifest, list[FrameAnnotation]]:
    """Read a sequence directory; frames come back in lexicographic file order."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise IoFailure(f"no manifest.json in {directory}")
    manifest = read_manifest(manifest_path)
    frames = [read_frame(path) for path in sorted(directory.glob("frame_*.json"))]
    return manifest, frames


def validate_sequence(frames: Iterable[FrameAnnotation]) -> list[str]:
    """Cross-frame consistency findings; an empty list means the sequence is clean.

    Checks strictly increasing timestamps, per-frame instance uniqueness and
    constant camera intrinsics across the sequence.
    """
    findings: list[str] = []
    prev_timestamp: float | None = None
    intrinsics: tuple | None = None
    for frame in frames:
        if prev_timestamp is not None and frame.timestamp <= prev_timestamp:
            findings.append(
                f"frame {frame.frame_index}: timestamp {frame.timestamp!r} does not "
                f"increase over {prev_timestamp!r}"
            )
        prev_timestamp = frame.timestamp
        seen: set[int] = set()
        for box in frame.boxes:
            if box.instance_id in seen:
                findings.append(
                    f"frame {frame.frame_index}: duplicate instance_id {box.instance_id}"
                )
            seen.add(box.instance_id)
        if intrinsics is None:
            intrinsics = frame.sensor.camera_intrinsic
        elif frame.sensor.camera_intrinsic != intrinsics:
            findings.append(
                f"frame {frame.frame_index}: camera_intrinsic changed mid-sequence"
            )
    return findings
