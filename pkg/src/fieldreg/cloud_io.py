"""Point-cloud file I/O and the geotag-based initial alignment.

Clouds live on disk as a PLY geometry file (binary little-endian or
ASCII; float x/y/z plus uchar red/green/blue per vertex) with a plain
text sidecar carrying the geotag:

    lat=47.0
    lon=8.0
    alt=400.0
    heading_rad=0.0

Unknown sidecar keys are kept but ignored, so a capture rig may note
e.g. an a-priori scale hint without breaking parsing.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    EmptyCloudError,
    GeotagMismatchError,
    PlyParseError,
    PlySchemaError,
    SidecarError,
)
from .geometry import AnisoAffine, ColoredGeoCloud

log = logging.getLogger(__name__)

# WGS84 equatorial radius; adequate for the sub-kilometer offsets between
# geotags of the same field. Offsets are converted with an equirectangular
# local-tangent-plane model, longitude corrected by cos(latitude).
_EARTH_RADIUS_M = 6378137.0

_PLY_SCALAR_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}

_REQUIRED_COORDS = ("x", "y", "z")
_REQUIRED_COLORS = ("red", "green", "blue")


@dataclass(frozen=True)
class CloudFileBundle:
    """Paths of the two files that make up one stored cloud."""

    geometry_path: Path
    meta_path: Path

    @staticmethod
    def from_ply(path) -> "CloudFileBundle":
        p = Path(path)
        return CloudFileBundle(p, p.with_suffix(".meta"))


def _parse_ply_header(raw: bytes, path) -> tuple[str, list, int, int]:
    """Return (format, vertex properties, vertex count, payload offset)."""
    end_marker = b"end_header\n"
    idx = raw.find(end_marker)
    if not raw.startswith(b"ply") or idx < 0:
        raise PlyParseError(f"{path}: not a PLY file (missing 'ply'/'end_header')")
    header = raw[:idx].decode("ascii", errors="replace").splitlines()
    payload_start = idx + len(end_marker)

    fmt = None
    elements: list[tuple[str, int, list]] = []  # (name, count, [(prop, type)])
    for lineno, line in enumerate(header[1:], start=2):
        tokens = line.split()
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            if len(tokens) != 3:
                raise PlyParseError(f"{path}:{lineno}: malformed format line {line!r}")
            fmt = tokens[1]
            if fmt not in ("ascii", "binary_little_endian"):
                raise PlyParseError(f"{path}:{lineno}: unsupported format {fmt!r}")
        elif tokens[0] == "element":
            if len(tokens) != 3 or not tokens[2].isdigit():
                raise PlyParseError(f"{path}:{lineno}: malformed element line {line!r}")
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if not elements:
                raise PlyParseError(f"{path}:{lineno}: property before any element")
            if tokens[1] == "list":
                if elements[-1][0] == "vertex":
                    raise PlyParseError(
                        f"{path}:{lineno}: list property in vertex element is unsupported"
                    )
                elements[-1][2].append((tokens[-1], "list"))
                continue
            if len(tokens) != 3 or tokens[1] not in _PLY_SCALAR_TYPES:
                raise PlyParseError(f"{path}:{lineno}: malformed property line {line!r}")
            elements[-1][2].append((tokens[2], _PLY_SCALAR_TYPES[tokens[1]]))
        elif tokens[0] in ("ply", "end_header"):
            continue
        else:
            raise PlyParseError(f"{path}:{lineno}: unrecognized header keyword {tokens[0]!r}")
    if fmt is None:
        raise PlyParseError(f"{path}: header has no format line")

    if not elements or elements[0][0] != "vertex":
        # tolerate vertex as any element, but it must come first so the
        # payload offset of the fixed-size records is known
        names = [e[0] for e in elements]
        if "vertex" in names and names.index("vertex") != 0:
            raise PlyParseError(f"{path}: vertex element must be the first element")
        raise PlySchemaError(f"{path}: no vertex element in header")
    name, count, props = elements[0]
    if count == 0:
        raise EmptyCloudError(f"{path}: vertex element declares zero vertices")
    return fmt, props, count, payload_start


def _check_schema(props, path):
    names = [p[0] for p in props]
    for c in _REQUIRED_COORDS:
        if c not in names:
            raise PlySchemaError(f"{path}: missing vertex property {c!r}")
        t = dict(props)[c]
        if t not in ("f4", "f8"):
            raise PlySchemaError(f"{path}: vertex property {c!r} must be float, is {t!r}")
    for c in _REQUIRED_COLORS:
        if c not in names:
            raise PlySchemaError(f"{path}: missing color property {c!r}")
        if dict(props)[c] != "u1":
            raise PlySchemaError(f"{path}: color property {c!r} must be uchar")


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    """Read vertices; returns (xyz float64 (N,3), rgb float64 (N,3) in [0,1])."""
    path = Path(path)
    raw = path.read_bytes()
    fmt, props, count, offset = _parse_ply_header(raw, path)
    _check_schema(props, path)

    if fmt == "binary_little_endian":
        dtype = np.dtype([(n, "<" + t) for n, t in props])
        need = count * dtype.itemsize
        payload = raw[offset : offset + need]
        if len(payload) < need:
            raise PlyParseError(
                f"{path}: payload truncated ({len(payload)} bytes, need {need})"
            )
        rec = np.frombuffer(payload, dtype=dtype, count=count)
    else:
        text = raw[offset:].decode("ascii", errors="replace")
        rows = []
        nprops = len(props)
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            tok = line.split()
            if len(tok) != nprops:
                raise PlyParseError(
                    f"{path}: data line {lineno} has {len(tok)} values, expected {nprops}"
                )
            rows.append(tok)
            if len(rows) == count:
                break
        if len(rows) < count:
            raise PlyParseError(f"{path}: only {len(rows)} of {count} vertex rows present")
        arr = np.array(rows, dtype=np.float64)
        rec = {n: arr[:, i] for i, (n, _) in enumerate(props)}

    xyz = np.stack([np.asarray(rec[c], dtype=np.float64) for c in _REQUIRED_COORDS], axis=1)
    rgb = np.stack([np.asarray(rec[c], dtype=np.float64) for c in _REQUIRED_COLORS], axis=1)
    rgb /= 255.0
    return xyz, rgb


def write_ply(path, xyz: np.ndarray, rgb: np.ndarray) -> None:
    """Write a binary little-endian PLY (float32 coords, uchar colors)."""
    path = Path(path)
    xyz = np.asarray(xyz, dtype=np.float64)
    n = xyz.shape[0]
    colors = np.clip(np.rint(np.asarray(rgb, dtype=np.float64) * 255.0), 0, 255)
    dtype = np.dtype(
        [("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1"), ("green", "u1"), ("blue", "u1")]
    )
    rec = np.empty(n, dtype=dtype)
    rec["x"], rec["y"], rec["z"] = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    rec["red"], rec["green"], rec["blue"] = colors[:, 0], colors[:, 1], colors[:, 2]
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "property uchar red\n"
        "property uchar green\n"
        "property uchar blue\n"
        "end_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(rec.tobytes())


def read_sidecar(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise SidecarError(f"sidecar file not found: {path}")
    values: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise SidecarError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = stripped.partition("=")
        values[key.strip()] = value.strip()
    out = {}
    for key in ("lat", "lon", "alt", "heading_rad"):
        if key not in values:
            raise SidecarError(f"{path}: missing required key {key!r}")
        try:
            out[key] = float(values[key])
        except ValueError:
            raise SidecarError(f"{path}: key {key!r} has non-numeric value {values[key]!r}")
    out["extra"] = {k: v for k, v in values.items() if k not in out}
    return out


def write_sidecar(path, geo_origin, heading: float, extra: dict | None = None) -> None:
    lat, lon, alt = geo_origin
    lines = [f"lat={lat!r}", f"lon={lon!r}", f"alt={alt!r}", f"heading_rad={heading!r}"]
    for k, v in (extra or {}).items():
        lines.append(f"{k}={v}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_cloud(bundle: CloudFileBundle | str | Path) -> ColoredGeoCloud:
    """Load geometry and geotag into a cloud; point order is preserved."""
    if not isinstance(bundle, CloudFileBundle):
        bundle = CloudFileBundle.from_ply(bundle)
    xyz, rgb = read_ply(bundle.geometry_path)
    meta = read_sidecar(bundle.meta_path)
    return ColoredGeoCloud(
        xyz, rgb, (meta["lat"], meta["lon"], meta["alt"]), meta["heading_rad"]
    )


def save_cloud(cloud: ColoredGeoCloud, path) -> CloudFileBundle:
    """Write geometry plus sidecar next to it; returns the bundle written."""
    bundle = CloudFileBundle.from_ply(path)
    write_ply(bundle.geometry_path, cloud.xyz, cloud.rgb)
    write_sidecar(bundle.meta_path, cloud.geo_origin, cloud.heading)
    return bundle


def geodetic_offset_enu(origin_from, origin_to) -> np.ndarray:
    """ENU meters of ``origin_to`` relative to ``origin_from``.

    Small-offset equirectangular conversion; the longitude scale uses the
    reference (from) latitude.
    """
    lat0, lon0, alt0 = origin_from
    lat1, lon1, alt1 = origin_to
    rad = math.pi / 180.0
    east = (lon1 - lon0) * rad * _EARTH_RADIUS_M * math.cos(lat0 * rad)
    north = (lat1 - lat0) * rad * _EARTH_RADIUS_M
    up = alt1 - alt0
    return np.array([east, north, up])


def initial_alignment(
    aerial: ColoredGeoCloud,
    ground: ColoredGeoCloud,
    max_origin_distance: float = 1000.0,
) -> AnisoAffine:
    """Rigid ground-to-aerial guess from the geotags alone.

    Composes the heading difference (a yaw about +z) with the ENU offset
    between the two geotagged origins, expressed in the aerial frame.
    Scale is left at one: consumer-grade geotags say nothing about it.

    Raises :class:`GeotagMismatchError` when the origins are farther
    apart than ``max_origin_distance`` meters, which almost always means
    the two files describe different sites.
    """
    offset = geodetic_offset_enu(aerial.geo_origin, ground.geo_origin)
    planar = float(np.hypot(offset[0], offset[1]))
    if planar > max_origin_distance:
        raise GeotagMismatchError(
            f"geotagged origins are {planar:.1f} m apart "
            f"(sanity limit {max_origin_distance:.1f} m)"
        )
    dpsi = ground.heading - aerial.heading
    # aerial-frame coordinates of a ground-frame point p:
    #   Rz(-heading_a) @ (Rz(heading_g) @ p + offset_enu)
    rot = AnisoAffine.rigid_z(dpsi).rotation
    ca, sa = math.cos(-aerial.heading), math.sin(-aerial.heading)
    rz_a = np.array([[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]])
    t = rz_a @ offset
    log.info(
        "initial alignment: offset_enu=(%.2f, %.2f, %.2f) m, dpsi=%.4f rad",
        offset[0], offset[1], offset[2], dpsi,
    )
    return AnisoAffine(np.ones(3), rot, t)
