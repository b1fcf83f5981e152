"""Deterministic synthetic world: clustered locations on the sphere, each with
a fixed block-mosaic segmentation layout and a color palette. RGB renders are
jittered per sample; segmentation maps depend only on the location, so an
appearance shift never touches them.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from .geom import EARTH_RADIUS_KM, GeoCoord, from_unit_vec

DS_MAGIC = b"TLOCDS1\x00"

# fixed substream indices off the master seed
STREAM_WORLD = 0
STREAM_INIT = 1
STREAM_SHUFFLE = 2
STREAM_AUGMENT = 3


def substream(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(stream,)))


class WorldError(ValueError):
    pass


@dataclass
class WorldSpec:
    seed: int = 42
    n_locations: int = 16
    n_clusters: int = 4
    samples_per_location: int = 150
    image_size: int = 32
    n_seg_classes: int = 6
    n_scene_classes: int = 4
    layout_blocks: int = 4
    jitter: float = 0.15  # in-distribution brightness/contrast range
    shift_strength: float = 1.0  # out-of-range shift for the robustness split
    gps_noise_km: float = 0.05
    cluster_radius_km: float = 400.0
    min_cluster_sep_km: float = 4000.0
    min_location_sep_km: float = 120.0
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 200

    def __post_init__(self):
        if self.n_locations < 1:
            raise WorldError("n_locations must be >= 1")
        if self.n_locations % self.n_clusters:
            raise WorldError("n_locations must be a multiple of n_clusters")
        total = self.n_train + self.n_val + self.n_test
        if total != self.n_locations * self.samples_per_location:
            raise WorldError(
                f"splits sum to {total} but the world has "
                f"{self.n_locations * self.samples_per_location} samples"
            )


@dataclass
class Dataset:
    rgb: np.ndarray  # [n, 3, H, W] float32 in [0, 1]
    seg: np.ndarray  # [n, H, W] uint8
    lat: np.ndarray  # [n] float64
    lon: np.ndarray  # [n] float64
    scene: np.ndarray  # [n] uint16
    n_seg_classes: int
    n_scene_classes: int

    def __len__(self) -> int:
        return len(self.lat)

    def coords(self) -> list[GeoCoord]:
        return [GeoCoord(float(a), float(b)) for a, b in zip(self.lat, self.lon)]

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(
            self.rgb[idx], self.seg[idx], self.lat[idx], self.lon[idx],
            self.scene[idx], self.n_seg_classes, self.n_scene_classes,
        )


def _random_unit_vec(rng: np.random.Generator) -> np.ndarray:
    while True:
        v = rng.normal(size=3)
        n = np.linalg.norm(v)
        if n > 1e-6:
            return v / n


def _offset_coord(rng: np.random.Generator, center: GeoCoord, radius_km: float) -> GeoCoord:
    # tangent-plane offset, fine at these radii
    dist = radius_km * np.sqrt(rng.uniform())
    theta = rng.uniform(0.0, 2.0 * np.pi)
    dlat = (dist / EARTH_RADIUS_KM) * np.cos(theta)
    coslat = max(0.05, np.cos(np.radians(center.lat)))
    dlon = (dist / (EARTH_RADIUS_KM * coslat)) * np.sin(theta)
    lat = float(np.clip(center.lat + np.degrees(dlat), -89.9, 89.9))
    return GeoCoord(lat, center.lon + float(np.degrees(dlon)))


@dataclass
class Location:
    coord: GeoCoord
    layout: np.ndarray  # [blocks, blocks] uint8 seg class ids
    palette: np.ndarray  # [n_seg_classes, 3] base colors
    scene: int


def _sample_locations(spec: WorldSpec, rng: np.random.Generator) -> list[Location]:
    from .geom import gcd_km

    centers: list[GeoCoord] = []
    while len(centers) < spec.n_clusters:
        c = from_unit_vec(_random_unit_vec(rng))
        if abs(c.lat) > 70.0:
            continue
        if all(gcd_km(c, o) >= spec.min_cluster_sep_km for o in centers):
            centers.append(c)

    per_cluster = spec.n_locations // spec.n_clusters
    coords: list[GeoCoord] = []
    for center in centers:
        placed: list[GeoCoord] = []
        while len(placed) < per_cluster:
            c = _offset_coord(rng, center, spec.cluster_radius_km)
            if all(gcd_km(c, o) >= spec.min_location_sep_km for o in placed):
                placed.append(c)
        coords.extend(placed)

    locations: list[Location] = []
    seen_layouts: set[bytes] = set()
    for coord in coords:
        while True:
            layout = rng.integers(
                0, spec.n_seg_classes, size=(spec.layout_blocks, spec.layout_blocks)
            ).astype(np.uint8)
            if layout.tobytes() not in seen_layouts:
                seen_layouts.add(layout.tobytes())
                break
        palette = rng.uniform(0.15, 0.85, size=(spec.n_seg_classes, 3))
        scene = int(rng.integers(0, spec.n_scene_classes))
        locations.append(Location(coord, layout, palette, scene))
    return locations


def _render(loc: Location, spec: WorldSpec, rng: np.random.Generator):
    h = spec.image_size
    rep = h // spec.layout_blocks
    seg = np.repeat(np.repeat(loc.layout, rep, axis=0), rep, axis=1)
    rgb = loc.palette[seg].transpose(2, 0, 1)  # [3, H, W]
    # per-sample appearance jitter (brightness + contrast + pixel noise)
    b = 1.0 + rng.uniform(-spec.jitter, spec.jitter)
    c = 1.0 + rng.uniform(-spec.jitter, spec.jitter)
    rgb = (rgb - 0.5) * c + 0.5
    rgb = rgb * b
    rgb = rgb + rng.normal(0.0, 0.01, size=rgb.shape)
    return np.clip(rgb, 0.0, 1.0).astype(np.float32), seg


def generate_world(spec: WorldSpec) -> dict[str, Dataset]:
    """Build train/val/test splits plus an appearance-shifted copy of test."""
    rng = substream(spec.seed, STREAM_WORLD)
    locations = _sample_locations(spec, rng)

    n = spec.n_locations * spec.samples_per_location
    h = spec.image_size
    rgb = np.empty((n, 3, h, h), dtype=np.float32)
    seg = np.empty((n, h, h), dtype=np.uint8)
    lat = np.empty(n)
    lon = np.empty(n)
    scene = np.empty(n, dtype=np.uint16)

    noise_deg = spec.gps_noise_km / EARTH_RADIUS_KM * 180.0 / np.pi
    i = 0
    for loc in locations:
        for _ in range(spec.samples_per_location):
            rgb[i], seg[i] = _render(loc, spec, rng)
            lat[i] = loc.coord.lat + rng.uniform(-noise_deg, noise_deg)
            lon[i] = loc.coord.lon + rng.uniform(-noise_deg, noise_deg)
            scene[i] = loc.scene
            i += 1

    perm = rng.permutation(n)
    ds = Dataset(rgb, seg, lat, lon, scene, spec.n_seg_classes, spec.n_scene_classes)
    train = ds.subset(perm[: spec.n_train])
    val = ds.subset(perm[spec.n_train: spec.n_train + spec.n_val])
    test = ds.subset(perm[spec.n_train + spec.n_val:])
    return {
        "train": train,
        "val": val,
        "test": test,
        "shifted_test": shift_appearance(test, spec.shift_strength),
    }


def shift_appearance(ds: Dataset, strength: float) -> Dataset:
    """Global out-of-range brightness/contrast shift on RGB only."""
    contrast = 1.0 - 0.7 * strength
    delta = 0.35 * strength
    rgb = np.clip((ds.rgb - 0.5) * contrast + 0.5 + delta, 0.0, 1.0).astype(np.float32)
    return Dataset(rgb, ds.seg.copy(), ds.lat.copy(), ds.lon.copy(), ds.scene.copy(),
                   ds.n_seg_classes, ds.n_scene_classes)


# binary dataset io ---------------------------------------------------------


def save_dataset(ds: Dataset, path: str) -> None:
    n = len(ds)
    h, w = ds.seg.shape[1:]
    buf = io.BytesIO()
    buf.write(DS_MAGIC)
    buf.write(struct.pack("<5I", n, h, w, ds.n_seg_classes, ds.n_scene_classes))
    for i in range(n):
        buf.write(ds.rgb[i].astype("<f4").tobytes())
        buf.write(ds.seg[i].astype(np.uint8).tobytes())
        buf.write(struct.pack("<2d", ds.lat[i], ds.lon[i]))
        buf.write(struct.pack("<H", int(ds.scene[i])))
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_dataset(path: str) -> Dataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != DS_MAGIC:
        raise WorldError(f"{path}: bad dataset magic")
    n, h, w, n_seg, n_scene = struct.unpack_from("<5I", raw, 8)
    off = 8 + 20
    rgb = np.empty((n, 3, h, w), dtype=np.float32)
    seg = np.empty((n, h, w), dtype=np.uint8)
    lat = np.empty(n)
    lon = np.empty(n)
    scene = np.empty(n, dtype=np.uint16)
    rgb_bytes = 3 * h * w * 4
    seg_bytes = h * w
    for i in range(n):
        rgb[i] = np.frombuffer(raw, "<f4", 3 * h * w, off).reshape(3, h, w)
        off += rgb_bytes
        seg[i] = np.frombuffer(raw, np.uint8, h * w, off).reshape(h, w)
        off += seg_bytes
        lat[i], lon[i] = struct.unpack_from("<2d", raw, off)
        off += 16
        (scene[i],) = struct.unpack_from("<H", raw, off)
        off += 2
    return Dataset(rgb, seg, lat, lon, scene, n_seg, n_scene)
