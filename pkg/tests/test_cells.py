import numpy as np
import pytest

from tloc.cells import (
    UNASSIGNED,
    CellToken,
    PartitionError,
    build_index,
    build_partition,
    class_to_gps,
    load_index,
    locate,
    locate_many,
    quantize,
    save_index,
    token_rect,
)
from tloc.geom import GeoCoord, face_uv_to_coord, gcd_km

from test_geom import random_coords


def quadrant_points(face, n_per_quadrant):
    """n points at each of the four quadrant centers of one cube face."""
    pts = []
    for u, v in ((0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)):
        pts += [face_uv_to_coord(face, u, v)] * n_per_quadrant
    return pts


class TestCellToken:
    def test_parse_round_trip(self):
        t = CellToken(3, "0123")
        assert CellToken.parse(str(t)) == t

    def test_ancestry(self):
        assert CellToken(1, "02").is_ancestor_of(CellToken(1, "021"))
        assert not CellToken(1, "02").is_ancestor_of(CellToken(1, "02"))
        assert not CellToken(1, "02").is_ancestor_of(CellToken(2, "021"))
        assert not CellToken(1, "02").is_ancestor_of(CellToken(1, "031"))

    def test_rect(self):
        assert token_rect(CellToken(0, "")) == (0.0, 0.0, 1.0, 1.0)
        assert token_rect(CellToken(0, "3")) == (0.5, 0.5, 0.5, 0.5)
        assert token_rect(CellToken(0, "12")) == (0.5, 0.25, 0.25, 0.25)


class TestBuildPartition:
    def test_hand_traced_quadrants(self):
        # 32 points on one face: the root splits once, each quadrant holds 8
        part = build_partition(quadrant_points(2, 8), min_images=5, max_images=10)
        assert part.n_cells == 4
        assert part.dropped == 0
        assert [c.count for c in part.cells] == [8, 8, 8, 8]
        assert [c.token.path for c in part.cells] == ["0", "1", "2", "3"]
        assert all(c.token.face == 2 for c in part.cells)

    def test_all_dropped(self):
        part = build_partition([GeoCoord(10, 10)] * 3, min_images=5, max_images=10)
        assert part.n_cells == 0
        assert part.dropped == 3

    def test_counts_conserved_and_bounded(self):
        rng = np.random.default_rng(11)
        lats, lons = random_coords(rng, 10_000)
        points = [GeoCoord(a, b) for a, b in zip(lats, lons)]
        part = build_partition(points, min_images=50, max_images=500)
        retained = sum(c.count for c in part.cells)
        assert retained + part.dropped == 10_000
        for c in part.cells:
            assert 50 <= c.count <= 500
        assert not part.oversize_tokens

    def test_counts_match_brute_force_recount(self):
        # independent oracle: recount membership per cell from raw u/v floats
        rng = np.random.default_rng(12)
        lats, lons = random_coords(rng, 3000)
        points = [GeoCoord(a, b) for a, b in zip(lats, lons)]
        part = build_partition(points, min_images=20, max_images=200)
        from tloc.geom import project_points

        face, u, v = project_points(lats, lons)
        for cell in part.cells:
            u0, v0, w, h = token_rect(cell.token)
            inside = (
                (face == cell.token.face)
                & (u >= u0) & (u < u0 + w)
                & (v >= v0) & (v < v0 + h)
            )
            assert int(inside.sum()) == cell.count

    def test_lexicographic_class_ids(self):
        rng = np.random.default_rng(13)
        lats, lons = random_coords(rng, 5000)
        part = build_partition(
            [GeoCoord(a, b) for a, b in zip(lats, lons)], min_images=30, max_images=300
        )
        keys = [(c.token.face, c.token.path) for c in part.cells]
        assert keys == sorted(keys)

    def test_identical_points_stop_at_max_depth(self):
        part = build_partition([GeoCoord(5, 5)] * 100, min_images=10, max_images=20,
                               max_depth=6)
        assert part.n_cells == 1
        assert part.cells[0].count == 100
        assert len(part.cells[0].token.path) == 6
        assert part.oversize_tokens == [part.cells[0].token]

    def test_validation(self):
        p = [GeoCoord(0, 0)] * 10
        with pytest.raises(PartitionError):
            build_partition(p, min_images=0, max_images=10)
        with pytest.raises(PartitionError):
            build_partition(p, min_images=10, max_images=5)
        with pytest.raises(PartitionError):
            build_partition([], min_images=1, max_images=5)

    def test_mean_gps_is_member_mean(self):
        pts = [GeoCoord(10, 20), GeoCoord(10.2, 20.2), GeoCoord(9.8, 19.8)]
        part = build_partition(pts * 2, min_images=2, max_images=10)
        assert part.n_cells == 1
        from tloc.geom import chordal_mean

        expect = chordal_mean(pts * 2)
        assert part.cells[0].mean_gps.lat == pytest.approx(expect.lat, abs=1e-12)
        assert part.cells[0].mean_gps.lon == pytest.approx(expect.lon, abs=1e-12)


@pytest.fixture(scope="module")
def world():
    rng = np.random.default_rng(14)
    lats, lons = random_coords(rng, 8000)
    return [GeoCoord(a, b) for a, b in zip(lats, lons)], lats, lons


@pytest.fixture(scope="module")
def index(world):
    points, _, _ = world
    return build_index(points, min_images=30, max_images=(800, 300, 100))


class TestIndex:
    def test_monotonic_cell_counts(self, index):
        counts = index.class_counts()
        assert counts["coarse"] <= counts["middle"] <= counts["fine"]

    def test_max_images_must_be_nonincreasing(self, world):
        points, _, _ = world
        with pytest.raises(PartitionError):
            build_index(points, min_images=30, max_images=(100, 300, 800))

    def test_nesting(self, index):
        # a coarse cell is never a strict descendant of a fine cell, and a
        # fine region that survives at the coarse level has an ancestor there
        fine_tokens = [c.token for c in index.fine.cells]
        coarse_tokens = [c.token for c in index.coarse.cells]
        for ft in fine_tokens:
            for ct in coarse_tokens:
                assert not ft.is_ancestor_of(ct)
        with_ancestor = sum(
            any(ct == ft or ct.is_ancestor_of(ft) for ct in coarse_tokens)
            for ft in fine_tokens
        )
        assert with_ancestor >= len(fine_tokens) // 2

    def test_locate_members(self, world, index):
        points, lats, lons = world
        labels = locate_many(index, lats, lons, "fine")
        # every retained cell's members locate back to its class id
        from tloc.geom import project_points

        face, u, v = project_points(lats, lons)
        for cid, cell in enumerate(index.fine.cells):
            u0, v0, w, h = token_rect(cell.token)
            inside = (
                (face == cell.token.face)
                & (u >= u0) & (u < u0 + w)
                & (v >= v0) & (v < v0 + h)
            )
            assert (labels[inside] == cid).all()
        assert int((labels == UNASSIGNED).sum()) == index.fine.dropped

    def test_locate_scalar_matches_vector(self, world, index):
        points, lats, lons = world
        vec = locate_many(index, lats[:50], lons[:50], "middle")
        for i in range(50):
            assert locate(index, points[i], "middle") == vec[i]

    def test_class_to_gps_round_trip(self, index):
        for cid in range(index.fine.n_cells):
            g = class_to_gps(index, "fine", cid)
            assert g == index.fine.cells[cid].mean_gps
        with pytest.raises(PartitionError):
            class_to_gps(index, "fine", index.fine.n_cells)
        with pytest.raises(PartitionError):
            class_to_gps(index, "fine", -1)

    def test_predicted_cell_mean_is_nearby(self, index, world):
        # cell means stay inside a plausible radius of their members
        points, lats, lons = world
        labels = locate_many(index, lats, lons, "fine")
        for cid, cell in enumerate(index.fine.cells):
            members = [p for p, l in zip(points, labels) if l == cid]
            dmax = max(gcd_km(cell.mean_gps, m) for m in members)
            # half circumference is the worst case; a leaf spans far less
            assert dmax < 10_000

    def test_save_load_round_trip(self, index, tmp_path):
        path = tmp_path / "cells.txt"
        save_index(index, str(path))
        loaded = load_index(str(path))
        assert loaded.class_counts() == index.class_counts()
        for lv in ("coarse", "middle", "fine"):
            for a, b in zip(index.partition(lv).cells, loaded.partition(lv).cells):
                assert a.token == b.token
                assert a.count == b.count
                assert a.mean_gps.lat == pytest.approx(b.mean_gps.lat, abs=1e-8)

    def test_serialization_deterministic(self, world, tmp_path):
        points, _, _ = world
        p1, p2 = tmp_path / "a.txt", tmp_path / "b.txt"
        save_index(build_index(points, 30, (800, 300, 100)), str(p1))
        save_index(build_index(points, 30, (800, 300, 100)), str(p2))
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.txt"
        path.write_text("not a cell file\n")
        with pytest.raises(PartitionError, match="not a"):
            load_index(str(path))


class TestQuantize:
    def test_matches_float_subdivision(self):
        rng = np.random.default_rng(15)
        lats, lons = random_coords(rng, 500)
        from tloc.geom import project_points

        face, u, v = project_points(lats, lons)
        qface, qu, qv = quantize(lats, lons, 10)
        np.testing.assert_array_equal(face, qface)
        np.testing.assert_array_equal(qu, np.floor(u * 1024).astype(np.int64))
        np.testing.assert_array_equal(qv, np.floor(v * 1024).astype(np.int64))
