"""Adaptive geo-cell partitioning of the sphere at three resolutions.

Cells are nodes of a quadtree over the six cube faces. A cell splits while it
holds more training points than max_images; leaves with fewer than min_images
points are dropped. Class ids follow lexicographic (face, path) order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import (
    DegenerateMeanError,
    GeoCoord,
    chordal_mean,
    face_uv_to_coord,
    project_points,
)

UNASSIGNED = -1

LEVELS = ("coarse", "middle", "fine")


class PartitionError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class CellToken:
    face: int
    path: str  # base-4 digits, one per quadtree level

    def __str__(self) -> str:
        return f"{self.face}/{self.path}"

    @staticmethod
    def parse(s: str) -> "CellToken":
        face, _, path = s.partition("/")
        return CellToken(int(face), path)

    def is_ancestor_of(self, other: "CellToken") -> bool:
        return (
            self.face == other.face
            and len(self.path) < len(other.path)
            and other.path.startswith(self.path)
        )


@dataclass(frozen=True)
class Cell:
    token: CellToken
    count: int
    mean_gps: GeoCoord


@dataclass
class Partition:
    level: str
    min_images: int
    max_images: int
    max_depth: int
    cells: list[Cell]
    dropped: int = 0
    oversize_tokens: list[CellToken] = field(default_factory=list)

    def __post_init__(self):
        self._by_token = {c.token: i for i, c in enumerate(self.cells)}

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    def class_of_token(self, token: CellToken) -> int:
        return self._by_token.get(token, UNASSIGNED)


def quantize(lats: np.ndarray, lons: np.ndarray, max_depth: int):
    """Map points to (face, qu, qv) integer cells at the deepest resolution.

    qu/qv hold the binary subdivision digits of u/v; bit k (from the top)
    is the u/v half chosen at depth k. Exact because all split midpoints
    are dyadic and u * 2**d is an exact float scaling.
    """
    face, u, v = project_points(lats, lons)
    scale = float(1 << max_depth)
    qu = np.minimum((u * scale).astype(np.int64), (1 << max_depth) - 1)
    qv = np.minimum((v * scale).astype(np.int64), (1 << max_depth) - 1)
    return face, qu, qv


def _digits(qu: int, qv: int, max_depth: int) -> str:
    out = []
    for k in range(max_depth):
        shift = max_depth - 1 - k
        out.append(str(((qu >> shift) & 1) + 2 * ((qv >> shift) & 1)))
    return "".join(out)


def token_rect(token: CellToken) -> tuple[float, float, float, float]:
    """(u0, v0, size, size) of the cell's rectangle on its face."""
    u0 = v0 = 0.0
    size = 1.0
    for ch in token.path:
        d = int(ch)
        size /= 2.0
        if d & 1:
            u0 += size
        if d & 2:
            v0 += size
    return u0, v0, size, size


def cell_center(token: CellToken) -> GeoCoord:
    u0, v0, w, h = token_rect(token)
    return face_uv_to_coord(token.face, u0 + w / 2.0, v0 + h / 2.0)


def build_partition(
    points: list[GeoCoord],
    min_images: int,
    max_images: int,
    max_depth: int = 20,
    level: str = "fine",
) -> Partition:
    """Split the six root face cells until every leaf holds <= max_images
    points (or max_depth is reached), then drop leaves below min_images."""
    if min_images < 1:
        raise PartitionError("min_images must be >= 1")
    if max_images < min_images:
        raise PartitionError("max_images must be >= min_images")
    if max_depth < 1:
        raise PartitionError("max_depth must be >= 1")
    if not points:
        raise PartitionError("empty point list")

    lats = np.array([p.lat for p in points])
    lons = np.array([p.lon for p in points])
    face, qu, qv = quantize(lats, lons, max_depth)

    leaves: list[tuple[CellToken, np.ndarray]] = []
    oversize: list[CellToken] = []

    def split(token: CellToken, idx: np.ndarray):
        depth = len(token.path)
        if idx.size > max_images and depth < max_depth:
            shift = max_depth - 1 - depth
            digit = ((qu[idx] >> shift) & 1) + 2 * ((qv[idx] >> shift) & 1)
            for d in range(4):
                child_idx = idx[digit == d]
                if child_idx.size:
                    split(CellToken(token.face, token.path + str(d)), child_idx)
        else:
            if idx.size > max_images:
                oversize.append(token)
            leaves.append((token, idx))

    for f in range(6):
        idx = np.nonzero(face == f)[0]
        if idx.size:
            split(CellToken(f, ""), idx)

    retained = sorted(
        ((t, idx) for t, idx in leaves if idx.size >= min_images),
        key=lambda pair: (pair[0].face, pair[0].path),
    )
    dropped = len(points) - sum(idx.size for _, idx in retained)

    cells = []
    for token, idx in retained:
        members = [points[i] for i in idx]
        try:
            mean = chordal_mean(members)
        except DegenerateMeanError:
            mean = cell_center(token)
        cells.append(Cell(token, int(idx.size), mean))

    return Partition(level, min_images, max_images, max_depth, cells, dropped, oversize)


@dataclass
class CellIndex:
    coarse: Partition
    middle: Partition
    fine: Partition

    def partition(self, level: str) -> Partition:
        if level not in LEVELS:
            raise PartitionError(f"unknown level {level!r}")
        return getattr(self, level)

    def class_counts(self) -> dict[str, int]:
        return {lv: self.partition(lv).n_cells for lv in LEVELS}


def build_index(
    points: list[GeoCoord],
    min_images: int,
    max_images: tuple[int, int, int],
    max_depth: int = 20,
) -> CellIndex:
    """Build coarse/middle/fine partitions with one min and decreasing maxes."""
    mc, mm, mf = max_images
    if not (mc >= mm >= mf):
        raise PartitionError("max_images must be nonincreasing coarse -> fine")
    return CellIndex(
        coarse=build_partition(points, min_images, mc, max_depth, "coarse"),
        middle=build_partition(points, min_images, mm, max_depth, "middle"),
        fine=build_partition(points, min_images, mf, max_depth, "fine"),
    )


def locate(index: CellIndex, c: GeoCoord, level: str) -> int:
    """Class id of the retained cell containing c, or UNASSIGNED."""
    part = index.partition(level)
    face, qu, qv = quantize(np.array([c.lat]), np.array([c.lon]), part.max_depth)
    digits = _digits(int(qu[0]), int(qv[0]), part.max_depth)
    f = int(face[0])
    for d in range(part.max_depth + 1):
        cid = part.class_of_token(CellToken(f, digits[:d]))
        if cid != UNASSIGNED:
            return cid
    return UNASSIGNED


def locate_many(index: CellIndex, lats: np.ndarray, lons: np.ndarray, level: str) -> np.ndarray:
    part = index.partition(level)
    face, qu, qv = quantize(lats, lons, part.max_depth)
    out = np.full(len(lats), UNASSIGNED, dtype=np.int64)
    for i in range(len(lats)):
        digits = _digits(int(qu[i]), int(qv[i]), part.max_depth)
        for d in range(part.max_depth + 1):
            cid = part.class_of_token(CellToken(int(face[i]), digits[:d]))
            if cid != UNASSIGNED:
                out[i] = cid
                break
    return out


def class_to_gps(index: CellIndex, level: str, class_id: int) -> GeoCoord:
    part = index.partition(level)
    if not 0 <= class_id < part.n_cells:
        raise PartitionError(
            f"class id {class_id} out of range for {level} ({part.n_cells} cells)"
        )
    return part.cells[class_id].mean_gps


CELLS_MAGIC = "TLOC-CELLS v1"


def save_index(index: CellIndex, path: str) -> None:
    lines = [CELLS_MAGIC]
    for level in LEVELS:
        for cell in index.partition(level).cells:
            lines.append(
                f"{level}\t{cell.token}\t{cell.count}"
                f"\t{cell.mean_gps.lat:.9f}\t{cell.mean_gps.lon:.9f}"
            )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_index(path: str, min_images: int = 1, max_depth: int = 20) -> CellIndex:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CELLS_MAGIC:
        raise PartitionError(f"{path}: not a {CELLS_MAGIC} file")
    cells: dict[str, list[Cell]] = {lv: [] for lv in LEVELS}
    for ln in lines[1:]:
        if not ln:
            continue
        level, token, count, lat, lon = ln.split("\t")
        cells[level].append(
            Cell(CellToken.parse(token), int(count), GeoCoord(float(lat), float(lon)))
        )
    parts = {
        lv: Partition(lv, min_images, max(1, min_images), max_depth, cells[lv])
        for lv in LEVELS
    }
    return CellIndex(coarse=parts["coarse"], middle=parts["middle"], fine=parts["fine"])
