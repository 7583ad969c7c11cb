"""JSONL log format shared by the simulator and the pipeline commands.

One record per line.  A sensor log starts with a single ``calib`` record
(camera intrinsics as [fx, fy, cx, cy] plus the camera-in-LiDAR pose) and
then carries ``odom`` {t, frame, pose}, ``cloud`` {frame, points} and
``texts`` {t, detections} records; ground-truth files hold ``gt`` {frame,
pose} records.  Poses serialize as translation + unit quaternion, floats
at full round-trip precision (the default for json on this side).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .entities import CalibratedRig, TextDetection
from .geometry import CameraIntrinsics, Pose


class LogFormatError(ValueError):
    """Malformed log record; the message names the offending line."""


@dataclass(frozen=True)
class LogRecord:
    kind: str
    line: int
    payload: dict


def calib_record(rig: CalibratedRig) -> dict:
    k = rig.intrinsics
    return {
        "type": "calib",
        "intrinsics": [k.fx, k.fy, k.cx, k.cy],
        "extrinsic": rig.camera_in_lidar.to_json(),
    }


def odom_record(t: float, frame: int, pose: Pose) -> dict:
    return {"type": "odom", "t": float(t), "frame": int(frame), "pose": pose.to_json()}


def cloud_record(frame: int, points: np.ndarray) -> dict:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    return {"type": "cloud", "frame": int(frame), "points": pts.tolist()}


def texts_record(t: float, detections) -> dict:
    return {
        "type": "texts",
        "t": float(t),
        "detections": [
            {"text": d.content, "conf": float(d.confidence), "quad": d.quad.tolist()}
            for d in detections
        ],
    }


def gt_record(frame: int, pose: Pose) -> dict:
    return {"type": "gt", "frame": int(frame), "pose": pose.to_json()}


def write_log(path, records) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record, separators=(",", ":")) + "\n")


_REQUIRED_FIELDS = {
    "calib": ("intrinsics", "extrinsic"),
    "odom": ("t", "frame", "pose"),
    "cloud": ("frame", "points"),
    "texts": ("t", "detections"),
    "gt": ("frame", "pose"),
}


def read_log(path):
    """Yield LogRecord items; raise LogFormatError with the 1-based line number."""
    with open(path, "r", encoding="utf-8") as handle:
        for number, raw in enumerate(handle, start=1):
            if not raw.strip():
                continue
            try:
                payload = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise LogFormatError(f"line {number}: invalid JSON ({exc.msg})") from exc
            if not isinstance(payload, dict) or "type" not in payload:
                raise LogFormatError(f"line {number}: record must be an object with a type")
            kind = payload["type"]
            required = _REQUIRED_FIELDS.get(kind)
            if required is None:
                raise LogFormatError(f"line {number}: unknown record type {kind!r}")
            for fieldname in required:
                if fieldname not in payload:
                    raise LogFormatError(f"line {number}: {kind} record missing {fieldname!r}")
            yield LogRecord(kind, number, payload)


def parse_pose(obj: dict, line: int) -> Pose:
    try:
        return Pose.from_json(obj)
    except Exception as exc:
        raise LogFormatError(f"line {line}: bad pose ({exc})") from exc


def parse_calib(payload: dict, line: int) -> CalibratedRig:
    values = payload["intrinsics"]
    if not isinstance(values, list) or len(values) != 4:
        raise LogFormatError(f"line {line}: intrinsics must be [fx, fy, cx, cy]")
    return CalibratedRig(
        intrinsics=CameraIntrinsics(*[float(v) for v in values]),
        camera_in_lidar=parse_pose(payload["extrinsic"], line),
    )


def parse_detections(payload: dict, line: int) -> list[TextDetection]:
    out = []
    for entry in payload["detections"]:
        try:
            out.append(
                TextDetection(
                    content=entry["text"],
                    confidence=float(entry["conf"]),
                    quad=np.asarray(entry["quad"], dtype=float),
                    timestamp=float(payload["t"]),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise LogFormatError(f"line {line}: bad detection entry ({exc})") from exc
    return out


def simulation_to_records(result) -> tuple[list[dict], list[dict]]:
    """Sensor-log records and ground-truth records for a simulator output."""
    log: list[dict] = [calib_record(result.rig)]
    events: list[tuple[float, int, dict]] = []
    for frame, (t, pose) in enumerate(zip(result.stamps, result.odom_poses)):
        events.append((float(t), 0, odom_record(t, frame, pose)))
        events.append((float(t), 1, cloud_record(frame, result.clouds[frame])))
    for t_image, detections in result.camera:
        if detections:
            events.append((float(t_image), 2, texts_record(t_image, detections)))
    events.sort(key=lambda item: (item[0], item[1]))
    log.extend(record for _, _, record in events)
    gt = [gt_record(frame, pose) for frame, pose in enumerate(result.gt_poses)]
    return log, gt


def read_trajectory(path) -> tuple[list[float | None], list[Pose]]:
    """Stamps (None for gt files) and poses from odom/gt records, frame order."""
    rows: list[tuple[int, float | None, Pose]] = []
    for record in read_log(path):
        if record.kind == "odom":
            rows.append(
                (
                    int(record.payload["frame"]),
                    float(record.payload["t"]),
                    parse_pose(record.payload["pose"], record.line),
                )
            )
        elif record.kind == "gt":
            rows.append((int(record.payload["frame"]), None, parse_pose(record.payload["pose"], record.line)))
    rows.sort(key=lambda row: row[0])
    frames = [row[0] for row in rows]
    if frames != list(range(len(frames))):
        raise LogFormatError("trajectory frames must be contiguous from 0")
    return [row[1] for row in rows], [row[2] for row in rows]
