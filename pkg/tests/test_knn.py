"""Neighbor index against a brute-force oracle."""

import numpy as np

from surfsplat.knn import NeighborIndex
from surfsplat.surfels import SurfelCloud


def make_cloud(n, seed, normals=None):
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-1, 1, (n, 3))
    if normals is None:
        normals = rng.normal(size=(n, 3))
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return SurfelCloud.from_oriented_points(centers, normals, 0.05,
                                            dtype=np.float64)


def brute_neighbors(cloud, k):
    """All-pairs distances, same-orientation filter, k nearest per row."""
    centers = cloud.centers
    normals = cloud.normals
    n = len(cloud)
    d2 = np.sum((centers[:, None] - centers[None]) ** 2, axis=2)
    out = np.full((n, k), -1, dtype=np.int64)
    for i in range(n):
        order = np.argsort(d2[i], kind="stable")
        picked = [j for j in order
                  if j != i and normals[i] @ normals[j] > 0.0][:k]
        out[i, :len(picked)] = picked
    return out


class TestNeighborIndex:
    def test_matches_brute_force(self):
        for seed in (1, 2, 3):
            cloud = make_cloud(60, seed)
            index = NeighborIndex(cloud, k=5)
            expect = brute_neighbors(cloud, 5)
            np.testing.assert_array_equal(index.neighbors, expect)

    def test_matches_brute_force_larger(self):
        cloud = make_cloud(400, 9)
        index = NeighborIndex(cloud, k=8)
        np.testing.assert_array_equal(index.neighbors, brute_neighbors(cloud, 8))

    def test_orientation_filter_blocks_opposed_sheets(self):
        """Two parallel sheets facing away from each other: neighbors never
        cross between sheets however close they sit."""
        rng = np.random.default_rng(4)
        top = rng.uniform(-1, 1, (30, 3)) * [1, 1, 0] + [0, 0, 0.05]
        bot = rng.uniform(-1, 1, (30, 3)) * [1, 1, 0] - [0, 0, 0.05]
        centers = np.vstack([top, bot])
        normals = np.vstack([np.tile([0, 0, 1.0], (30, 1)),
                             np.tile([0, 0, -1.0], (30, 1))])
        cloud = SurfelCloud.from_oriented_points(centers, normals, 0.05,
                                                 dtype=np.float64)
        index = NeighborIndex(cloud, k=4)
        nb = index.neighbors
        assert (nb[:30] < 30).all()
        valid_bot = nb[30:][nb[30:] >= 0]
        assert (valid_bot >= 30).all()

    def test_padding_when_not_enough_compatible(self):
        # 3 aligned + 1 flipped: the flipped one has no compatible neighbor
        centers = np.array([[0, 0, 0], [0.1, 0, 0], [0.2, 0, 0], [0.3, 0, 0.0]])
        normals = np.array([[0, 0, 1], [0, 0, 1], [0, 0, 1], [0, 0, -1.0]])
        cloud = SurfelCloud.from_oriented_points(centers, normals, 0.05,
                                                 dtype=np.float64)
        index = NeighborIndex(cloud, k=3)
        assert (index.neighbors[3] == -1).all()
        assert (index.neighbors[0] >= 0).sum() == 2  # only 2 compatible exist

    def test_mean_dist_of_compatible_neighbors(self):
        centers = np.array([[0, 0, 0], [1.0, 0, 0], [0, 2.0, 0]])
        normals = np.tile([0, 0, 1.0], (3, 1))
        cloud = SurfelCloud.from_oriented_points(centers, normals, 0.05,
                                                 dtype=np.float64)
        index = NeighborIndex(cloud, k=2)
        np.testing.assert_allclose(index.mean_dist[0], (1.0 + 2.0) / 2)
        np.testing.assert_allclose(index.mean_dist[1],
                                   (1.0 + np.sqrt(5.0)) / 2)

    def test_mean_dist_fallback_without_compatible(self):
        """An isolated orientation still gets a usable scale: the distance to
        its nearest point regardless of facing."""
        centers = np.array([[0, 0, 0], [0.7, 0, 0], [1.4, 0, 0.0]])
        normals = np.array([[0, 0, 1], [0, 0, -1.0], [0, 0, 1]])
        cloud = SurfelCloud.from_oriented_points(centers, normals, 0.05,
                                                 dtype=np.float64)
        index = NeighborIndex(cloud, k=2)
        np.testing.assert_allclose(index.mean_dist[1], 0.7)

    def test_rebuild_tracks_new_cloud(self):
        cloud = make_cloud(40, 5)
        index = NeighborIndex(cloud, k=4)
        bigger = make_cloud(70, 6)
        index.rebuild(bigger)
        assert index.size == 70
        assert index.neighbors.shape == (70, 4)
        np.testing.assert_array_equal(index.neighbors, brute_neighbors(bigger, 4))

    def test_single_point(self):
        cloud = make_cloud(1, 7)
        index = NeighborIndex(cloud, k=3)
        assert (index.neighbors == -1).all()
        assert np.isfinite(index.mean_dist).all()
