"""Bounding-volume hierarchy over a triangle soup.

The tree is immutable once built and can be shared between threads; the
query kernels release the GIL.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ValidationError


@dataclass
class RayHits:
    t: np.ndarray
    face: np.ndarray
    bary: np.ndarray  # (N, 3) weights of the face's three vertices

    @property
    def hit(self):
        return self.face >= 0


@dataclass
class ClosestPoints:
    distance: np.ndarray
    face: np.ndarray
    bary: np.ndarray
    point: np.ndarray


class BVH:
    """Median-split BVH supporting ray and closest-point queries."""

    def __init__(self, vertices, faces, leaf_size=_kernels.LEAF_SIZE):
        v = np.ascontiguousarray(vertices, dtype=np.float64)
        f = np.ascontiguousarray(faces, dtype=np.int64).reshape(-1, 3)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValidationError("BVH needs (N, 3) vertices")
        self.vertices = v
        self.faces = f
        self._a = np.ascontiguousarray(v[f[:, 0]])
        self._b = np.ascontiguousarray(v[f[:, 1]])
        self._c = np.ascontiguousarray(v[f[:, 2]])
        lo = np.minimum(np.minimum(self._a, self._b), self._c)
        hi = np.maximum(np.maximum(self._a, self._b), self._c)
        centroid = (self._a + self._b + self._c) / 3.0
        if len(f):
            self._tree = _kernels.build_bvh(lo, hi, centroid, leaf_size)
        else:
            empty = np.zeros((0, 3))
            none = np.zeros(0, np.int64)
            self._tree = (empty, empty, none, none, none, none, none)

    @classmethod
    def from_mesh(cls, mesh):
        return cls(mesh.vertices, mesh.faces)

    def intersect(self, origins, directions, tmin=0.0, tmax=np.inf, nearest_abs=False,
                  eps=1e-9) -> RayHits:
        """Nearest hit along each ray within ``[tmin, tmax]``.

        ``nearest_abs=True`` treats each ray as a line and keeps the hit with
        the smallest ``|t|`` (use a negative ``tmin`` to search backwards).
        """
        o = np.ascontiguousarray(np.atleast_2d(origins), dtype=np.float64)
        d = np.ascontiguousarray(np.atleast_2d(directions), dtype=np.float64)
        if d.shape[0] == 1 and o.shape[0] > 1:
            d = np.ascontiguousarray(np.broadcast_to(d, o.shape))
        t, face, u, v = _kernels.intersect_rays(
            o, d, float(tmin), float(tmax), bool(nearest_abs), float(eps),
            self._a, self._b, self._c, *self._tree)
        bary = np.stack([1.0 - u - v, u, v], axis=1)
        bary[face < 0] = 0.0
        return RayHits(t=t, face=face, bary=bary)

    def closest(self, points) -> ClosestPoints:
        p = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
        d, face, bary, point = _kernels.closest_points(p, self._a, self._b, self._c, *self._tree)
        return ClosestPoints(distance=d, face=face, bary=bary, point=point)

    def interpolate(self, values, face, bary):
        """Barycentric interpolation of per-vertex ``values`` at hit locations."""
        values = np.asarray(values, dtype=np.float64)
        f = self.faces[np.maximum(face, 0)]
        out = (bary[:, 0, None] * values[f[:, 0]] + bary[:, 1, None] * values[f[:, 1]]
               + bary[:, 2, None] * values[f[:, 2]])
        out[face < 0] = np.nan
        return out


def point_to_mesh_distance(points, mesh_or_bvh):
    bvh = mesh_or_bvh if isinstance(mesh_or_bvh, BVH) else BVH.from_mesh(mesh_or_bvh)
    return bvh.closest(points).distance
