"""Point-cloud and IMU stream file formats.

Supported formats:
  * ASCII PLY with float properties x, y, z and optional per-point `time`
    (seconds, offset from scan end).
  * CSV point clouds with header `x,y,z,t`.
  * CSV IMU streams with header `t,gx,gy,gz,ax,ay,az` (SI units, monotone t).

Floats are written with shortest round-trip formatting so written files parse
back to identical values.
"""
from __future__ import annotations

import numpy as np

from .imu import ImuStream


def _fmt(x: float) -> str:
    return repr(float(x))


class FileFormatError(ValueError):
    """Malformed input file; message carries the offending line number."""


def write_ply(path, points: np.ndarray, times: np.ndarray | None = None) -> None:
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(points)}",
        "property float64 x",
        "property float64 y",
        "property float64 z",
    ]
    if times is not None:
        times = np.asarray(times, dtype=float).reshape(-1)
        if len(times) != len(points):
            raise ValueError("times length mismatch")
        lines.append("property float64 time")
    lines.append("end_header")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
        for i, p in enumerate(points):
            row = [_fmt(p[0]), _fmt(p[1]), _fmt(p[2])]
            if times is not None:
                row.append(_fmt(times[i]))
            f.write(" ".join(row) + "\n")


def read_ply(path):
    """Read an ASCII PLY; returns (points (N, 3), times (N,) or None)."""
    with open(path) as f:
        raw = f.read().splitlines()
    if not raw or raw[0].strip() != "ply":
        raise FileFormatError(f"{path}:1: not a PLY file")
    n_vertex = None
    props: list[str] = []
    body_at = None
    for i, line in enumerate(raw[1:], start=2):
        tok = line.split()
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "format":
            if tok[1] != "ascii":
                raise FileFormatError(f"{path}:{i}: only ascii PLY supported")
        elif tok[0] == "element":
            if tok[1] != "vertex":
                raise FileFormatError(f"{path}:{i}: unsupported element {tok[1]}")
            n_vertex = int(tok[2])
        elif tok[0] == "property":
            props.append(tok[-1])
        elif tok[0] == "end_header":
            body_at = i
            break
    if n_vertex is None or body_at is None:
        raise FileFormatError(f"{path}: truncated header")
    for name in ("x", "y", "z"):
        if name not in props:
            raise FileFormatError(f"{path}: missing property {name}")
    has_time = "time" in props
    cols = {name: props.index(name) for name in props}
    pts = np.zeros((n_vertex, 3))
    times = np.zeros(n_vertex) if has_time else None
    body = raw[body_at:]
    if len(body) < n_vertex:
        raise FileFormatError(f"{path}: expected {n_vertex} vertices, found {len(body)}")
    for j in range(n_vertex):
        tok = body[j].split()
        lineno = body_at + 1 + j
        if len(tok) < len(props):
            raise FileFormatError(f"{path}:{lineno}: short vertex row")
        try:
            pts[j, 0] = float(tok[cols["x"]])
            pts[j, 1] = float(tok[cols["y"]])
            pts[j, 2] = float(tok[cols["z"]])
            if has_time:
                times[j] = float(tok[cols["time"]])
        except ValueError as exc:
            raise FileFormatError(f"{path}:{lineno}: {exc}") from None
    return pts, times


def write_points_csv(path, points: np.ndarray, times: np.ndarray | None = None) -> None:
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if times is None:
        times = np.zeros(len(points))
    times = np.asarray(times, dtype=float).reshape(-1)
    with open(path, "w") as f:
        f.write("x,y,z,t\n")
        for p, t in zip(points, times):
            f.write(f"{_fmt(p[0])},{_fmt(p[1])},{_fmt(p[2])},{_fmt(t)}\n")


def read_points_csv(path):
    """Read `x,y,z,t` CSV; returns (points (N, 3), times (N,))."""
    with open(path) as f:
        raw = f.read().splitlines()
    if not raw or [c.strip() for c in raw[0].split(",")] != ["x", "y", "z", "t"]:
        raise FileFormatError(f"{path}:1: expected header x,y,z,t")
    pts, times = [], []
    for i, line in enumerate(raw[1:], start=2):
        if not line.strip():
            continue
        tok = line.split(",")
        if len(tok) != 4:
            raise FileFormatError(f"{path}:{i}: expected 4 columns")
        try:
            vals = [float(v) for v in tok]
        except ValueError as exc:
            raise FileFormatError(f"{path}:{i}: {exc}") from None
        pts.append(vals[:3])
        times.append(vals[3])
    return np.array(pts).reshape(-1, 3), np.array(times)


IMU_CSV_HEADER = "t,gx,gy,gz,ax,ay,az"


def write_imu_csv(path, stream: ImuStream) -> None:
    with open(path, "w") as f:
        f.write(IMU_CSV_HEADER + "\n")
        for i in range(len(stream)):
            row = [stream.times[i], *stream.gyro[i], *stream.accel[i]]
            f.write(",".join(_fmt(v) for v in row) + "\n")


def read_imu_csv(path) -> ImuStream:
    with open(path) as f:
        raw = f.read().splitlines()
    if not raw or raw[0].strip() != IMU_CSV_HEADER:
        raise FileFormatError(f"{path}:1: expected header {IMU_CSV_HEADER}")
    rows = []
    for i, line in enumerate(raw[1:], start=2):
        if not line.strip():
            continue
        tok = line.split(",")
        if len(tok) != 7:
            raise FileFormatError(f"{path}:{i}: expected 7 columns")
        try:
            rows.append([float(v) for v in tok])
        except ValueError as exc:
            raise FileFormatError(f"{path}:{i}: {exc}") from None
    arr = np.array(rows).reshape(-1, 7)
    try:
        return ImuStream(arr[:, 0], arr[:, 1:4], arr[:, 4:7])
    except ValueError as exc:
        raise FileFormatError(f"{path}: {exc}") from None
