"""File formats: LiDAR ``.bin`` scans, PLY, transforms, features, correspondences, config."""
from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .errors import EmptyCloud, IoFailure, MalformedFile
from .geometry import PointCloud, RigidTransform
from .matching import CorrespondenceSet

FEATURE_MAGIC = b"DFEA"
_FEATURE_HEADER = struct.Struct("<4sII")


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def _write_bytes(path, data: bytes) -> None:
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def read_kitti_bin(path) -> PointCloud:
    """Records of four little-endian float32: x, y, z, intensity."""
    data = _read_bytes(path)
    if len(data) % 16:
        raise MalformedFile(f"{path}: size {len(data)} is not a multiple of 16 bytes")
    if not data:
        raise EmptyCloud(f"{path}: no points")
    rec = np.frombuffer(data, dtype="<f4").reshape(-1, 4)
    return PointCloud(rec[:, :3].astype(np.float64), rec[:, 3].astype(np.float64))


def write_kitti_bin(path, cloud: PointCloud) -> None:
    rec = np.zeros((len(cloud), 4), dtype="<f4")
    rec[:, :3] = cloud.points
    if cloud.intensity is not None:
        rec[:, 3] = cloud.intensity
    _write_bytes(path, rec.tobytes())


def write_ply(path, cloud) -> None:
    """ASCII PLY with x, y, z vertex properties only."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    header = (
        "ply\nformat ascii 1.0\n"
        f"element vertex {pts.shape[0]}\n"
        "property float x\nproperty float y\nproperty float z\nend_header\n"
    )
    body = "".join(f"{x:.6f} {y:.6f} {z:.6f}\n" for x, y, z in pts)
    try:
        Path(path).write_text(header + body)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def write_transform(path, T: RigidTransform) -> None:
    try:
        Path(path).write_text(T.to_line() + "\n")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def read_transform(path) -> RigidTransform:
    text = _read_bytes(path).decode("utf-8", errors="replace").strip()
    line = text.splitlines()[0] if text else ""
    return RigidTransform.from_line(line)


def write_features(path, features) -> None:
    """Header ``DFEA``, u32 rows, u32 dim, then row-major little-endian float32."""
    f = np.asarray(features, dtype="<f4")
    if f.ndim != 2:
        raise ValueError("features must be 2-D")
    _write_bytes(path, _FEATURE_HEADER.pack(FEATURE_MAGIC, f.shape[0], f.shape[1]) + f.tobytes())


def read_features(path) -> np.ndarray:
    data = _read_bytes(path)
    if len(data) < _FEATURE_HEADER.size:
        raise MalformedFile("feature file shorter than its header")
    magic, n, d = _FEATURE_HEADER.unpack_from(data)
    if magic != FEATURE_MAGIC:
        raise MalformedFile("bad feature-file magic")
    expected = _FEATURE_HEADER.size + 4 * n * d
    if len(data) != expected:
        raise MalformedFile(f"feature file has {len(data)} bytes, expected {expected}")
    return np.frombuffer(data, dtype="<f4", offset=_FEATURE_HEADER.size).reshape(n, d).astype(np.float64)


def write_correspondences(path, sets) -> None:
    """CSV with header ``level,i,j,score``; accepts one set or several."""
    if isinstance(sets, CorrespondenceSet):
        sets = [sets]
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["level", "i", "j", "score"])
            for cs in sets:
                for i, j, s in cs.pairs():
                    w.writerow([cs.level, i, j, repr(s)])
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def read_correspondences(path) -> dict:
    """Level name -> CorrespondenceSet, in file order."""
    rows: dict[str, list] = {}
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["level", "i", "j", "score"]:
                raise MalformedFile(f"unexpected header {reader.fieldnames}")
            for row in reader:
                rows.setdefault(row["level"], []).append((int(row["i"]), int(row["j"]), float(row["score"])))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    except (KeyError, ValueError) as exc:
        raise MalformedFile(str(exc)) from exc
    out = {}
    for level, items in rows.items():
        arr = np.array(items, dtype=np.float64).reshape(-1, 3)
        scores = arr[:, 2]
        out[level] = CorrespondenceSet(level, arr[:, 0], arr[:, 1], scores,
                                       float(scores.min()) if scores.size else 0.0)
    return out


def _parse_value(text: str):
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_config(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise MalformedFile(f"config line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise MalformedFile(f"config line {lineno}: empty key")
        out[key] = _parse_value(value)
    return out


def load_config(path) -> dict:
    return parse_config(_read_bytes(path).decode("utf-8"))


def dump_config(values: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in values.items())
