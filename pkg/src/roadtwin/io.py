"""Line-oriented serialization for every pipeline artifact.

One JSON object per line, fixed key order, so identical runs produce
byte-identical files.  Record schemas:

    ground_truth.jsonl  {t, id, x, y, vx, vy, class, length, width}
    detections.jsonl    {t, sensor_id, mp_id, kind, z, class, conf}
    tracks.jsonl        {t, sensor_id, label, x, y, vx, vy, cov, status, class}
    twin.jsonl          {t, gid, x, y, vx, vy, cov, class}

Covariances are the 16 row-major entries of the 4x4 state covariance.
"""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

from .evaluation import EvalFrame, MetricsReport
from .fusion import DigitalTwinFrame
from .scenario import GroundTruthFrame
from .sensing import MeasurementFrame


class MalformedRecord(Exception):
    def __init__(self, path: str, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


def dump_line(record: dict) -> str:
    return json.dumps(record, separators=(", ", ": "))


def write_jsonl(path: str, records) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(dump_line(record))
            fh.write("\n")
            count += 1
    return count


def read_jsonl(path: str):
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as err:
                raise MalformedRecord(path, lineno, f"invalid JSON: {err.msg}")


def atomic_write_text(path: str, text: str):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", text=True)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- encoders ---------------------------------------------------------------

def ground_truth_records(frame: GroundTruthFrame):
    for v in frame.vehicles:
        yield {"t": frame.t, "id": v.agent_id, "x": v.x, "y": v.y,
               "vx": v.vx, "vy": v.vy, "class": v.vclass,
               "length": v.length, "width": v.width}


def detection_records(frame: MeasurementFrame):
    for z, vclass, conf in zip(frame.z, frame.classes, frame.confidences):
        yield {"t": frame.t, "sensor_id": frame.sensor_id, "mp_id": frame.mp_id,
               "kind": frame.kind, "z": [float(v) for v in z],
               "class": vclass, "conf": conf}


def track_records(sensor_id: str, t: float, tracks):
    for track in tracks:
        yield {"t": t, "sensor_id": sensor_id, "label": track.label,
               "x": float(track.state[0]), "y": float(track.state[1]),
               "vx": float(track.state[2]), "vy": float(track.state[3]),
               "cov": [float(v) for v in np.asarray(track.cov).reshape(-1)],
               "status": track.status, "class": track.vclass}


def twin_records(frame: DigitalTwinFrame):
    for obj in frame.tracks:
        yield {"t": frame.t, "gid": obj.gid,
               "x": float(obj.state[0]), "y": float(obj.state[1]),
               "vx": float(obj.state[2]), "vy": float(obj.state[3]),
               "cov": [float(v) for v in np.asarray(obj.cov).reshape(-1)],
               "class": obj.vclass}


# -- decoders ---------------------------------------------------------------

def _require(record: dict, keys, path: str, lineno: int):
    missing = [k for k in keys if k not in record]
    if missing:
        raise MalformedRecord(path, lineno, f"missing fields {missing}")


def load_eval_frames(path: str, kind: str) -> list:
    """ground_truth.jsonl or twin.jsonl into time-ordered EvalFrames."""
    id_key = "id" if kind == "truth" else "gid"
    frames: list[EvalFrame] = []
    current_t = None
    ids, pos, vel, classes = [], [], [], []

    def flush():
        if current_t is not None:
            frames.append(EvalFrame.build(current_t, ids, pos, vel, classes))

    for lineno, record in read_jsonl(path):
        _require(record, ("t", id_key, "x", "y", "vx", "vy"), path, lineno)
        t = float(record["t"])
        if current_t is not None and t < current_t:
            raise MalformedRecord(path, lineno, "timestamps must be non-decreasing")
        if t != current_t:
            flush()
            current_t, ids, pos, vel, classes = t, [], [], [], []
        ids.append(record[id_key])
        pos.append((record["x"], record["y"]))
        vel.append((record["vx"], record["vy"]))
        classes.append(record.get("class"))
    flush()
    return frames


def load_detection_frames(path: str, sensors: dict) -> list:
    """detections.jsonl into MeasurementFrames grouped by (t, sensor_id).

    Raises MalformedRecord on bad fields, unknown sensors, and timestamps
    that go backwards.
    """
    frames: list[MeasurementFrame] = []
    index: dict = {}
    last_t = None
    for lineno, record in read_jsonl(path):
        _require(record, ("t", "sensor_id", "mp_id", "kind", "z", "class", "conf"),
                 path, lineno)
        t = float(record["t"])
        if last_t is not None and t < last_t:
            raise MalformedRecord(path, lineno, "timestamps must be non-decreasing")
        last_t = t
        sensor_id = record["sensor_id"]
        if sensor_id not in sensors:
            raise MalformedRecord(path, lineno, f"unknown sensor {sensor_id!r}")
        kind = record["kind"]
        dim = 2 if kind == "camera" else 4
        z = np.asarray(record["z"], dtype=float)
        if z.shape != (dim,) or not np.all(np.isfinite(z)):
            raise MalformedRecord(path, lineno, f"bad measurement vector {record['z']}")
        key = (t, sensor_id)
        if key not in index:
            frame = MeasurementFrame(sensor_id, record["mp_id"], kind, t, [], [], [])
            index[key] = frame
            frames.append(frame)
        frame = index[key]
        frame.z.append(z)
        frame.classes.append(record["class"])
        frame.confidences.append(record["conf"])
    return frames


def load_track_frames(paths) -> dict:
    """tracks.jsonl files into {(t, sensor_id): list of track dicts}."""
    grouped: dict = {}
    for path in paths:
        for lineno, record in read_jsonl(path):
            _require(record, ("t", "sensor_id", "label", "x", "y", "vx", "vy",
                              "cov", "status"), path, lineno)
            key = (float(record["t"]), record["sensor_id"])
            grouped.setdefault(key, []).append(record)
    return grouped


def write_report(path: str, report: MetricsReport):
    atomic_write_text(path, json.dumps(report.to_dict(), indent=2) + "\n")


def write_error_map_csv(path: str, report: MetricsReport):
    lines = ["x_index,y_index,mean_error,count"]
    for (ix, iy), (mean, count) in report.error_grid:
        lines.append(f"{ix},{iy},{mean:.6f},{count}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_manifest(path: str, manifest: dict):
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
