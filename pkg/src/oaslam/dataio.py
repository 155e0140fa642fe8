"""NDJSON dataset contract: sensor events, ground-truth sidecars, and the
map/trajectory/decision outputs.

One JSON object per line. Every record carries a `type` discriminator and a
timestamp `t` in seconds; angles are radians, distances meters throughout.
See docs/format.md for the field tables. Parse errors carry the file path
and 1-based line number.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError, ParseError
from .fusion import SonarPing
from .geometry import Pose3

# stable processing order for records sharing a timestamp
TYPE_ORDER = {
    "odom": 0,
    "partial_pose": 1,
    "abs_fix": 2,
    "beacon_ranges": 3,
    "sonar_ping": 4,
    "camera_frame": 5,
}


@dataclass(frozen=True)
class Detection:
    centroid: np.ndarray            # (u, v) pixels
    embedding: np.ndarray           # run-level dimension
    mask_area: float                # diagnostic only


@dataclass(frozen=True)
class OdometryEvent:
    t: float
    delta: Pose3                    # body motion since the previous odom event


@dataclass(frozen=True)
class PartialPoseEvent:
    t: float
    depth: float
    pitch: float
    roll: float


@dataclass(frozen=True)
class AbsoluteFixEvent:
    t: float
    x: float
    y: float
    heading: float


@dataclass(frozen=True)
class CameraFrameEvent:
    t: float
    detections: tuple[Detection, ...]


@dataclass(frozen=True)
class SonarPingEvent:
    t: float
    ping: SonarPing


@dataclass(frozen=True)
class BeaconRangesEvent:
    t: float
    ranges: tuple[float | None, ...]
    array_bearings: tuple[float | None, ...]


Event = (OdometryEvent | PartialPoseEvent | AbsoluteFixEvent | CameraFrameEvent
         | SonarPingEvent | BeaconRangesEvent)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _floats(values) -> list[float]:
    return [float(v) for v in values]


def pose_to_json(p: Pose3) -> dict:
    """Pose payload keys: q (quaternion wxyz) and p (position); the letter t
    is reserved for timestamps in every record."""
    return {"q": _floats(p.q), "p": _floats(p.t)}


def pose_from_json(d: dict) -> Pose3:
    return Pose3(np.asarray(d["q"], dtype=float), np.asarray(d["p"], dtype=float))


def event_to_record(ev: Event) -> dict:
    if isinstance(ev, OdometryEvent):
        return {"type": "odom", "t": ev.t,
                "dq": _floats(ev.delta.q), "dt": _floats(ev.delta.t)}
    if isinstance(ev, PartialPoseEvent):
        return {"type": "partial_pose", "t": ev.t, "depth": ev.depth,
                "pitch": ev.pitch, "roll": ev.roll}
    if isinstance(ev, AbsoluteFixEvent):
        return {"type": "abs_fix", "t": ev.t, "x": ev.x, "y": ev.y,
                "heading": ev.heading}
    if isinstance(ev, CameraFrameEvent):
        return {"type": "camera_frame", "t": ev.t, "detections": [
            {"centroid": _floats(d.centroid), "embedding": _floats(d.embedding),
             "mask_area": float(d.mask_area)} for d in ev.detections]}
    if isinstance(ev, SonarPingEvent):
        return {"type": "sonar_ping", "t": ev.t, "beams": [
            {"bearing": float(b), "intensities": _floats(row)}
            for b, row in zip(ev.ping.bearings, ev.ping.intensities)]}
    if isinstance(ev, BeaconRangesEvent):
        return {"type": "beacon_ranges", "t": ev.t,
                "ranges": [None if r is None else float(r) for r in ev.ranges],
                "array_bearings": [None if b is None else float(b)
                                   for b in ev.array_bearings]}
    raise InputError(f"cannot serialize event {type(ev).__name__}")


def _require(record: dict, key: str, path: str, line: int):
    if key not in record:
        raise ParseError(path, line, f"record is missing field {key!r}")
    return record[key]


def _finite(value, name: str, path: str, line: int) -> float:
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise ParseError(path, line, f"field {name!r} is not a number")
    if not math.isfinite(v):
        raise ParseError(path, line, f"field {name!r} is not finite")
    return v


def record_to_event(record: dict, path: str = "<memory>", line: int = 0) -> Event:
    rtype = _require(record, "type", path, line)
    t = _finite(_require(record, "t", path, line), "t", path, line)
    try:
        if rtype == "odom":
            delta = Pose3(np.asarray(record["dq"], dtype=float),
                          np.asarray(record["dt"], dtype=float))
            return OdometryEvent(t, delta)
        if rtype == "partial_pose":
            return PartialPoseEvent(
                t,
                _finite(record["depth"], "depth", path, line),
                _finite(record["pitch"], "pitch", path, line),
                _finite(record["roll"], "roll", path, line))
        if rtype == "abs_fix":
            return AbsoluteFixEvent(
                t,
                _finite(record["x"], "x", path, line),
                _finite(record["y"], "y", path, line),
                _finite(record["heading"], "heading", path, line))
        if rtype == "camera_frame":
            dets = []
            for d in record["detections"]:
                emb = np.asarray(d["embedding"], dtype=float)
                cen = np.asarray(d["centroid"], dtype=float)
                if not (np.all(np.isfinite(emb)) and np.all(np.isfinite(cen))):
                    raise ParseError(path, line, "detection has non-finite values")
                dets.append(Detection(cen, emb, float(d.get("mask_area", 0.0))))
            return CameraFrameEvent(t, tuple(dets))
        if rtype == "sonar_ping":
            beams = record["beams"]
            bearings = np.array([b["bearing"] for b in beams], dtype=float)
            intensities = np.array([b["intensities"] for b in beams], dtype=float)
            return SonarPingEvent(t, SonarPing(t, bearings, intensities))
        if rtype == "beacon_ranges":
            ranges = tuple(None if r is None else _finite(r, "ranges", path, line)
                           for r in record["ranges"])
            bearings = tuple(None if b is None else _finite(b, "array_bearings", path, line)
                             for b in record.get("array_bearings", [None] * len(ranges)))
            return BeaconRangesEvent(t, ranges, bearings)
    except KeyError as e:
        raise ParseError(path, line, f"record is missing field {e.args[0]!r}")
    except InputError as e:
        raise ParseError(path, line, str(e))
    raise ParseError(path, line, f"unknown record type {rtype!r}")


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

def write_ndjson(path: str, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_ndjson(path: str) -> list[dict]:
    records = []
    try:
        fh = open(path)
    except OSError as e:
        raise InputError(f"cannot read {path}: {e}")
    with fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(path, line_no, f"invalid JSON: {e.msg}")
            if not isinstance(rec, dict):
                raise ParseError(path, line_no, "record is not a JSON object")
            records.append(rec)
    return records


def read_dataset(path: str) -> list[Event]:
    """Parse and time-merge a dataset stream.

    Validates that `t` is non-decreasing within each record type, then
    returns events stably sorted by (t, type order).
    """
    events: list[Event] = []
    last_t: dict[str, float] = {}
    try:
        fh = open(path)
    except OSError as e:
        raise InputError(f"cannot read {path}: {e}")
    with fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(path, line_no, f"invalid JSON: {e.msg}")
            ev = record_to_event(rec, path, line_no)
            rtype = rec["type"]
            if rtype in last_t and ev.t < last_t[rtype]:
                raise ParseError(path, line_no,
                                 f"timestamps of {rtype!r} records go backwards")
            last_t[rtype] = ev.t
            events.append(ev)
    order = {OdometryEvent: 0, PartialPoseEvent: 1, AbsoluteFixEvent: 2,
             BeaconRangesEvent: 3, SonarPingEvent: 4, CameraFrameEvent: 5}
    events.sort(key=lambda e: (e.t, order[type(e)]))
    return events


def write_dataset(path: str, events) -> None:
    write_ndjson(path, (event_to_record(ev) for ev in events))
