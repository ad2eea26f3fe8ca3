"""Point cloud persistence: binary PDRC files plus ASCII PLY for interop.

PDRC layout: magic "PDRC", version u32, N u64, feature-dim u32 (0 if none),
has-labels u8, then little-endian f64 blocks: positions (3N), features (dN),
labels (N).  Round-trips are bit-exact.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import DataError
from .geometry import PointCloud

MAGIC = b"PDRC"
VERSION = 1


def write_pdrc(path, cloud: PointCloud) -> None:
    feat_dim = 0 if cloud.features is None else cloud.features.shape[1]
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", cloud.n))
        f.write(struct.pack("<I", feat_dim))
        f.write(struct.pack("<B", 0 if cloud.labels is None else 1))
        f.write(np.ascontiguousarray(cloud.points, dtype="<f8").tobytes())
        if cloud.features is not None:
            f.write(np.ascontiguousarray(cloud.features, dtype="<f8").tobytes())
        if cloud.labels is not None:
            f.write(np.ascontiguousarray(cloud.labels, dtype="<f8").tobytes())


def read_pdrc(path) -> PointCloud:
    with open(path, "rb") as f:
        blob = f.read()
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(blob):
            raise DataError(f"truncated PDRC file while reading {what}", offset=off)
        chunk = blob[off:off + n]
        off += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise DataError("not a PDRC file (bad magic)", offset=0)
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise DataError(f"unsupported PDRC version {version}", offset=4)
    (n,) = struct.unpack("<Q", take(8, "point count"))
    (feat_dim,) = struct.unpack("<I", take(4, "feature dim"))
    (has_labels,) = struct.unpack("<B", take(1, "label flag"))
    points = np.frombuffer(take(24 * n, "positions"), dtype="<f8").reshape(n, 3)
    features = None
    if feat_dim:
        features = np.frombuffer(take(8 * n * feat_dim, "features"), dtype="<f8")
        features = features.reshape(n, feat_dim)
    labels = None
    if has_labels:
        labels = np.frombuffer(take(8 * n, "labels"), dtype="<f8")
    return PointCloud(points=points.copy(), features=None if features is None else features.copy(),
                      labels=None if labels is None else labels.copy())


def write_ply(path, cloud: PointCloud) -> None:
    """ASCII PLY with vertex x y z only (features/labels are dropped)."""
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {cloud.n}\n")
        f.write("property double x\nproperty double y\nproperty double z\n")
        f.write("end_header\n")
        for p in cloud.points:
            f.write(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r}\n")


def read_ply(path) -> PointCloud:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise DataError(f"{path}: not a PLY file")
    n = None
    body_at = None
    for i, line in enumerate(lines[1:], start=1):
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        if parts[:1] == ["end_header"]:
            body_at = i + 1
            break
    if n is None or body_at is None:
        raise DataError(f"{path}: PLY header missing vertex element or end_header")
    rows = lines[body_at:body_at + n]
    if len(rows) < n:
        raise DataError(f"{path}: PLY body has {len(rows)} of {n} vertices")
    points = np.array([[float(v) for v in row.split()[:3]] for row in rows])
    return PointCloud(points=points)
