"""Nearest-neighbor index over surfel centers.

Neighbors must face the same way (positive normal dot product) so the
consistency penalty never couples the two sides of a thin shell. Rows with
fewer matches than requested are padded with -1.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .surfels import SurfelCloud, quat_to_frame

DEFAULT_NEIGHBORS = 8


class NeighborIndex:
    """Oriented K-nearest-neighbor table with frozen mean distances.

    neighbors: (N, K) int64, -1 padded. mean_dist: (N,) float64, the mean
    distance to the accepted neighbors; surfels with no compatible neighbor
    fall back to the distance of the nearest point so the scale stays
    positive.
    """

    def __init__(self, cloud: SurfelCloud, k: int = DEFAULT_NEIGHBORS):
        self.k = int(k)
        self.rebuild(cloud)

    def rebuild(self, cloud: SurfelCloud) -> None:
        centers = cloud.centers.astype(np.float64)
        _, _, normals = quat_to_frame(cloud.quats.astype(np.float64))
        n = len(cloud)
        k = self.k
        neighbors = np.full((n, k), -1, dtype=np.int64)
        mean_dist = np.zeros(n, dtype=np.float64)
        if n <= 1:
            mean_dist[:] = 1.0
            self.neighbors = neighbors
            self.mean_dist = mean_dist
            self.size = n
            return

        tree = cKDTree(centers)
        # query enough candidates that the orientation filter can reject some;
        # expand per-point only when a row still comes up short
        query = min(n, k + 1 + k)
        dists, idx = tree.query(centers, k=query)
        for i in range(n):
            cand_d, cand_i = dists[i], idx[i]
            accepted = self._filter(i, cand_i, cand_d, normals, k)
            while len(accepted) < k and len(cand_i) < n:
                grow = min(n, len(cand_i) * 2)
                cand_d, cand_i = tree.query(centers[i], k=grow)
                accepted = self._filter(i, cand_i, cand_d, normals, k)
            m = len(accepted)
            if m:
                rows = np.fromiter((a[0] for a in accepted), dtype=np.int64, count=m)
                dvec = np.fromiter((a[1] for a in accepted), dtype=np.float64, count=m)
                neighbors[i, :m] = rows
                mean_dist[i] = dvec.mean()
            else:
                # nearest point regardless of orientation keeps the scale sane
                mean_dist[i] = dists[i][1] if query > 1 else 1.0
        self.neighbors = neighbors
        self.mean_dist = mean_dist
        self.size = n

    @staticmethod
    def _filter(i, cand_i, cand_d, normals, k):
        accepted = []
        for j, d in zip(np.atleast_1d(cand_i), np.atleast_1d(cand_d)):
            j = int(j)
            if j == i:
                continue
            if float(normals[i] @ normals[j]) > 0.0:
                accepted.append((j, float(d)))
                if len(accepted) == k:
                    break
        return accepted
