"""Spherical geometry: lat/lon coordinates, great-circle distance, cube-face projection.

All angles are degrees externally, radians internally. The sphere is a unit
sphere scaled by EARTH_RADIUS_KM only when distances are reported.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EARTH_RADIUS_KM = 6371.0

# Cube faces: (axis, tangent_u, tangent_v) as unit 3-vectors. Face 0 is
# centered on (lat 0, lon 0); faces 4/5 are the poles. Chosen so that
# project -> invert round-trips; the exact orientation is otherwise arbitrary.
_FACE_AXES = np.array(
    [
        [[1, 0, 0], [0, 1, 0], [0, 0, 1]],
        [[0, 1, 0], [-1, 0, 0], [0, 0, 1]],
        [[-1, 0, 0], [0, -1, 0], [0, 0, 1]],
        [[0, -1, 0], [1, 0, 0], [0, 0, 1]],
        [[0, 0, 1], [0, 1, 0], [-1, 0, 0]],
        [[0, 0, -1], [0, 1, 0], [1, 0, 0]],
    ],
    dtype=np.float64,
)

_U_BELOW_ONE = np.nextafter(1.0, 0.0)


class GeomError(ValueError):
    pass


def normalize_lon(lon: float) -> float:
    """Wrap a longitude into [-180, 180); +180 maps to -180."""
    lon = math.fmod(lon + 180.0, 360.0)
    if lon < 0.0:
        lon += 360.0
    return lon - 180.0


@dataclass(frozen=True)
class GeoCoord:
    lat: float
    lon: float

    def __post_init__(self):
        if not (-90.0 <= self.lat <= 90.0):
            raise GeomError(f"latitude {self.lat} outside [-90, 90]")
        object.__setattr__(self, "lon", normalize_lon(self.lon))


@dataclass(frozen=True)
class FaceUV:
    face: int
    u: float
    v: float

    def __post_init__(self):
        if not 0 <= self.face <= 5:
            raise GeomError(f"face {self.face} outside 0..5")
        if not (0.0 <= self.u < 1.0 and 0.0 <= self.v < 1.0):
            raise GeomError(f"(u, v) = ({self.u}, {self.v}) outside [0, 1)")


def to_unit_vec(c: GeoCoord) -> np.ndarray:
    lat = math.radians(c.lat)
    lon = math.radians(c.lon)
    return np.array(
        [
            math.cos(lat) * math.cos(lon),
            math.cos(lat) * math.sin(lon),
            math.sin(lat),
        ]
    )


def from_unit_vec(v: np.ndarray) -> GeoCoord:
    n = float(np.linalg.norm(v))
    if n < 1e-12:
        raise GeomError("zero vector has no direction")
    x, y, z = (v / n).tolist()
    return GeoCoord(math.degrees(math.asin(min(1.0, max(-1.0, z)))), math.degrees(math.atan2(y, x)))


def gcd_km(a: GeoCoord, b: GeoCoord) -> float:
    """Great-circle distance via the haversine formula, mean earth radius."""
    la, lb = math.radians(a.lat), math.radians(b.lat)
    dlat = lb - la
    dlon = math.radians(b.lon) - math.radians(a.lon)
    h = math.sin(dlat / 2.0) ** 2 + math.cos(la) * math.cos(lb) * math.sin(dlon / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def gcd_km_arrays(lat1, lon1, lat2, lon2) -> np.ndarray:
    """Vectorized haversine over degree arrays."""
    la = np.radians(np.asarray(lat1, dtype=np.float64))
    lb = np.radians(np.asarray(lat2, dtype=np.float64))
    dlat = lb - la
    dlon = np.radians(np.asarray(lon2, dtype=np.float64)) - np.radians(np.asarray(lon1, dtype=np.float64))
    h = np.sin(dlat / 2.0) ** 2 + np.cos(la) * np.cos(lb) * np.sin(dlon / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.minimum(1.0, np.sqrt(h)))


class DegenerateMeanError(GeomError):
    """The unit-vector centroid is too close to the origin to define a direction."""


def chordal_mean(points: list[GeoCoord]) -> GeoCoord:
    """Normalized 3-D centroid of the points, mapped back to lat/lon.

    Raises DegenerateMeanError for near-antipodal sets; the caller falls back
    to the geometric center of the containing cell.
    """
    if not points:
        raise GeomError("empty point set")
    acc = np.zeros(3)
    for p in points:
        acc += to_unit_vec(p)
    acc /= len(points)
    if np.linalg.norm(acc) < 1e-9:
        raise DegenerateMeanError("mean vector norm below 1e-9")
    return from_unit_vec(acc)


def _face_of(vec: np.ndarray) -> int:
    # argmax of dot(vec, face_axis); ties resolve to the lower face id.
    dots = _FACE_AXES[:, 0, :] @ vec
    return int(np.argmax(dots))


def project_to_face(c: GeoCoord) -> FaceUV:
    """Gnomonic projection onto the inscribed cube; exactly one face per point."""
    vec = to_unit_vec(c)
    f = _face_of(vec)
    axis, tu, tv = _FACE_AXES[f]
    d = float(axis @ vec)
    u = (float(tu @ vec) / d + 1.0) / 2.0
    v = (float(tv @ vec) / d + 1.0) / 2.0
    return FaceUV(f, min(max(u, 0.0), _U_BELOW_ONE), min(max(v, 0.0), _U_BELOW_ONE))


def project_points(lats: np.ndarray, lons: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized project_to_face: returns (face, u, v) arrays."""
    lat = np.radians(np.asarray(lats, dtype=np.float64))
    lon = np.radians(np.asarray(lons, dtype=np.float64))
    vec = np.stack(
        [np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)], axis=-1
    )
    dots = vec @ _FACE_AXES[:, 0, :].T  # [n, 6]
    face = np.argmax(dots, axis=-1)
    axes = _FACE_AXES[face]  # [n, 3, 3]
    d = np.einsum("ni,ni->n", axes[:, 0], vec)
    u = (np.einsum("ni,ni->n", axes[:, 1], vec) / d + 1.0) / 2.0
    v = (np.einsum("ni,ni->n", axes[:, 2], vec) / d + 1.0) / 2.0
    u = np.clip(u, 0.0, _U_BELOW_ONE)
    v = np.clip(v, 0.0, _U_BELOW_ONE)
    return face, u, v


def face_uv_to_coord(face: int, u: float, v: float) -> GeoCoord:
    """Inverse gnomonic projection of a point on a cube face."""
    axis, tu, tv = _FACE_AXES[face]
    vec = axis + (2.0 * u - 1.0) * tu + (2.0 * v - 1.0) * tv
    return from_unit_vec(vec)
