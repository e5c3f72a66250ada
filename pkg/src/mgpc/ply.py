"""Minimal PLY reader/writer for colored point clouds.

Supports ascii and binary_little_endian files with float/double x,y,z and
uchar red,green,blue vertex properties; unknown properties are skipped.
"""
from __future__ import annotations

import struct

import numpy as np

from .errors import DecodeError

_SIZES = {
    "char": 1, "int8": 1, "uchar": 1, "uint8": 1,
    "short": 2, "int16": 2, "ushort": 2, "uint16": 2,
    "int": 4, "int32": 4, "uint": 4, "uint32": 4,
    "float": 4, "float32": 4,
    "double": 8, "float64": 8,
}

_NP_TYPES = {
    "char": "<i1", "int8": "<i1", "uchar": "<u1", "uint8": "<u1",
    "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
    "float": "<f4", "float32": "<f4",
    "double": "<f8", "float64": "<f8",
}


def read_ply(path) -> np.ndarray:
    """Read a colored point cloud as an [N, 6] float array (xyz, rgb)."""
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(b"ply"):
        raise DecodeError(f"{path}: not a PLY file")
    end = blob.find(b"end_header")
    if end < 0:
        raise DecodeError(f"{path}: missing end_header")
    header = blob[:end].decode("ascii", errors="replace").splitlines()
    body = blob[blob.index(b"\n", end) + 1:]

    fmt = None
    count = 0
    props = []
    in_vertex = False
    for line in header[1:]:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                count = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            if tok[1] == "list":
                raise DecodeError(f"{path}: list properties unsupported on vertices")
            props.append((tok[2], tok[1]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise DecodeError(f"{path}: unsupported format {fmt!r}")
    names = [n for n, _ in props]
    for need in ("x", "y", "z", "red", "green", "blue"):
        if need not in names:
            raise DecodeError(f"{path}: missing vertex property {need!r}")

    out = np.empty((count, 6))
    cols = {"x": 0, "y": 1, "z": 2, "red": 3, "green": 4, "blue": 5}
    if fmt == "ascii":
        rows = body.decode("ascii").split()
        width = len(props)
        if len(rows) < count * width:
            raise DecodeError(f"{path}: truncated ascii body")
        vals = np.array(rows[:count * width], dtype=np.float64).reshape(count, width)
        for i, (name, _) in enumerate(props):
            if name in cols:
                out[:, cols[name]] = vals[:, i]
    else:
        dt = np.dtype([(f"f{i}", _NP_TYPES[t]) for i, (_, t) in enumerate(props)])
        if len(body) < count * dt.itemsize:
            raise DecodeError(f"{path}: truncated binary body")
        rec = np.frombuffer(body, dtype=dt, count=count)
        for i, (name, _) in enumerate(props):
            if name in cols:
                out[:, cols[name]] = rec[f"f{i}"].astype(np.float64)
    return out


def write_ply(path, points: np.ndarray, binary: bool = True) -> None:
    """Write an [N, 6] (xyz float, rgb 0..255) array as a PLY file."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 6)
    n = pts.shape[0]
    header = [
        "ply",
        "format binary_little_endian 1.0" if binary else "format ascii 1.0",
        f"element vertex {n}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    rgb = np.clip(np.rint(pts[:, 3:6]), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            rec = np.empty(n, dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                                     ("r", "u1"), ("g", "u1"), ("b", "u1")])
            rec["x"], rec["y"], rec["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
            rec["r"], rec["g"], rec["b"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
            f.write(rec.tobytes())
        else:
            lines = [
                f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]} {c[1]} {c[2]}"
                for p, c in zip(pts, rgb)
            ]
            f.write(("\n".join(lines) + "\n").encode("ascii"))
