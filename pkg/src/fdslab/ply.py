"""Binary PLY parsing/serialization for trained 3D Gaussian point clouds.

Only binary-little-endian PLY is supported (the de-facto export format of
splatting trainers); ASCII files are rejected with a clear message. The
vertex element must carry x, y, z, opacity, scale_0..2, rot_0..3 and
f_dc_0..2; extra fixed-size properties are skipped. Records keep the raw
float32 values so parse -> serialize -> parse round-trips bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class PlyParseError(ValueError):
    """Malformed header, truncated payload, or missing required property."""


_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}

REQUIRED = ("x", "y", "z", "opacity", "scale_0", "scale_1", "scale_2",
            "rot_0", "rot_1", "rot_2", "rot_3", "f_dc_0", "f_dc_1", "f_dc_2")


@dataclass
class SplatRecord3D:
    """One parsed 3D Gaussian: raw values as stored in the file (float32).

    scale_log holds the stored log-scales; rotation is the raw (not yet
    normalized) quaternion — use rotation_normalized for analysis. The
    quaternion must be non-zero.
    """

    position: np.ndarray       # (3,) float32
    scale_log: np.ndarray      # (3,) float32
    rotation: np.ndarray       # (4,) float32 raw quaternion
    opacity_logit: np.float32
    dc_color: np.ndarray       # (3,) float32

    @property
    def rotation_normalized(self) -> np.ndarray:
        n = float(np.linalg.norm(self.rotation.astype(np.float64)))
        return (self.rotation.astype(np.float64) / n).astype(np.float32)


def _parse_header(data: bytes):
    end = data.find(b"end_header\n")
    if end < 0:
        raise PlyParseError("no end_header line found")
    header = data[:end].decode("ascii", errors="replace").splitlines()
    body_off = end + len(b"end_header\n")
    if not header or header[0].strip() != "ply":
        raise PlyParseError("missing 'ply' magic line")
    fmt = None
    elements = []  # (name, count, [(prop_name, dtype_char)])
    for line in header[1:]:
        parts = line.strip().split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            if len(parts) != 3:
                raise PlyParseError(f"malformed element line: {line!r}")
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise PlyParseError("property line before any element")
            if parts[1] == "list":
                raise PlyParseError(
                    f"list property {parts[-1]!r} is not supported for splat clouds")
            if parts[1] not in _PLY_TYPES:
                raise PlyParseError(f"unknown property type {parts[1]!r}")
            elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
    if fmt is None:
        raise PlyParseError("missing format line")
    if fmt == "ascii":
        raise PlyParseError("ASCII PLY is not supported; export binary_little_endian")
    if fmt != "binary_little_endian":
        raise PlyParseError(f"unsupported PLY format {fmt!r}")
    return elements, body_off


def parse_ply(data: bytes) -> list[SplatRecord3D]:
    """Parse a binary-little-endian splat PLY into records, in file order."""
    elements, off = _parse_header(data)
    records: list[SplatRecord3D] | None = None
    for name, count, props in elements:
        dtype = np.dtype([(p, "<" + t) for p, t in props])
        nbytes = dtype.itemsize * count
        if off + nbytes > len(data):
            raise PlyParseError(
                f"truncated payload: element {name!r} needs {nbytes} bytes, "
                f"{len(data) - off} remain")
        if name == "vertex":
            have = {p for p, _ in props}
            missing = [p for p in REQUIRED if p not in have]
            if missing:
                raise PlyParseError(f"vertex element is missing required properties: {missing}")
            arr = np.frombuffer(data, dtype=dtype, count=count, offset=off)
            records = []
            for row in arr:
                rot = np.array([row["rot_0"], row["rot_1"], row["rot_2"], row["rot_3"]],
                               dtype=np.float32)
                if not np.any(rot != 0):
                    raise PlyParseError("zero quaternion in vertex record")
                records.append(SplatRecord3D(
                    position=np.array([row["x"], row["y"], row["z"]], dtype=np.float32),
                    scale_log=np.array([row["scale_0"], row["scale_1"], row["scale_2"]],
                                       dtype=np.float32),
                    rotation=rot,
                    opacity_logit=np.float32(row["opacity"]),
                    dc_color=np.array([row["f_dc_0"], row["f_dc_1"], row["f_dc_2"]],
                                      dtype=np.float32),
                ))
        off += nbytes
    if records is None:
        raise PlyParseError("no vertex element in file")
    return records


def serialize_ply(records: list[SplatRecord3D]) -> bytes:
    """Write records as binary-little-endian PLY with the standard layout."""
    props = ["x", "y", "z", "opacity",
             "scale_0", "scale_1", "scale_2",
             "rot_0", "rot_1", "rot_2", "rot_3",
             "f_dc_0", "f_dc_1", "f_dc_2"]
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {len(records)}"]
    header += [f"property float {p}" for p in props]
    header += ["end_header"]
    dtype = np.dtype([(p, "<f4") for p in props])
    arr = np.empty(len(records), dtype=dtype)
    for i, r in enumerate(records):
        arr[i] = (r.position[0], r.position[1], r.position[2], r.opacity_logit,
                  r.scale_log[0], r.scale_log[1], r.scale_log[2],
                  r.rotation[0], r.rotation[1], r.rotation[2], r.rotation[3],
                  r.dc_color[0], r.dc_color[1], r.dc_color[2])
    return ("\n".join(header) + "\n").encode("ascii") + arr.tobytes()


def volume_of(record: SplatRecord3D) -> float:
    """Ellipsoid volume (4/3) pi * prod(exp(scale_log)) of one record."""
    s = np.exp(record.scale_log.astype(np.float64))
    return float((4.0 / 3.0) * np.pi * s[0] * s[1] * s[2])


def positions_of(records: list[SplatRecord3D]) -> np.ndarray:
    return np.array([r.position for r in records], dtype=np.float64).reshape(-1, 3)


def volumes_of(records: list[SplatRecord3D]) -> np.ndarray:
    return np.array([volume_of(r) for r in records], dtype=np.float64)
