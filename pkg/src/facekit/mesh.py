"""Core geometry carriers: triangle meshes and UV-space raster maps.

Units are millimetres for positions. UV coordinates live in [0, 1]^2 and map
to raster pixels with row index following ``v`` (no vertical flip): the
centre of pixel ``(row, col)`` sits at ``uv = ((col + 0.5) / W, (row + 0.5) / H)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ValidationError


def _frozen(arr):
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Mesh:
    """Indexed triangle mesh.

    Arrays are stored read-only; build a new mesh (see :meth:`replace`) to
    change geometry.
    """

    vertices: np.ndarray
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), np.int64))
    uv: Optional[np.ndarray] = None
    landmark_indices: Optional[np.ndarray] = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValidationError(f"vertices must be (N, 3), got {v.shape}")
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        n = len(v)
        if f.size:
            if f.min() < 0 or f.max() >= n:
                bad = int(np.argmax((f < 0).any(1) | (f >= n).any(1)))
                raise ValidationError(
                    f"face {bad} references vertex {f[bad].tolist()} but mesh has {n} vertices")
            degenerate = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
            if degenerate.any():
                bad = int(np.argmax(degenerate))
                raise ValidationError(f"face {bad} is degenerate: {f[bad].tolist()}")
        uv = self.uv
        if uv is not None:
            uv = np.asarray(uv, dtype=np.float64)
            if uv.shape != (n, 2):
                raise ValidationError(f"uv must be ({n}, 2), got {uv.shape}")
        lm = self.landmark_indices
        if lm is not None:
            lm = np.asarray(lm, dtype=np.int64).ravel()
            if lm.size and (lm.min() < 0 or lm.max() >= n):
                raise ValidationError("landmark index out of range")
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "faces", _frozen(f))
        object.__setattr__(self, "uv", None if uv is None else _frozen(uv))
        object.__setattr__(self, "landmark_indices", None if lm is None else _frozen(lm))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def replace(self, **changes) -> "Mesh":
        fields = dict(vertices=self.vertices, faces=self.faces, uv=self.uv,
                      landmark_indices=self.landmark_indices)
        fields.update(changes)
        return Mesh(**fields)

    def same_topology(self, other: "Mesh") -> bool:
        return (self.n_vertices == other.n_vertices
                and np.array_equal(self.faces, other.faces))

    def __eq__(self, other):
        if not isinstance(other, Mesh):
            return NotImplemented
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and np.array_equal(a, b)
        return (same(self.vertices, other.vertices) and same(self.faces, other.faces)
                and same(self.uv, other.uv)
                and same(self.landmark_indices, other.landmark_indices))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class RasterMap:
    """Row-major float raster of shape ``(height, width, channels)``.

    Invalid pixels hold NaN in every channel; :attr:`valid_mask` is derived
    from that sentinel, so the two can never disagree.
    """

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim == 2:
            d = d[:, :, None]
        if d.ndim != 3 or d.shape[2] < 1:
            raise ValidationError(f"raster data must be (H, W, C), got {d.shape}")
        if not np.issubdtype(d.dtype, np.floating):
            d = d.astype(np.float64)
        d = d.copy()
        bad = ~np.isfinite(d).all(axis=2)
        d[bad] = np.nan
        object.__setattr__(self, "data", _frozen(d))

    @classmethod
    def empty(cls, width, height, channels=1, dtype=np.float64):
        return cls(np.full((height, width, channels), np.nan, dtype=dtype))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def valid_mask(self) -> np.ndarray:
        return np.isfinite(self.data).all(axis=2)

    def __eq__(self, other):
        if not isinstance(other, RasterMap):
            return NotImplemented
        return (self.data.shape == other.data.shape
                and np.array_equal(self.data, other.data, equal_nan=True))

    __hash__ = None


# ---------------------------------------------------------------------------
# geometry helpers

def face_normals(vertices, faces, normalize=True):
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces)
    n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    if normalize:
        length = np.linalg.norm(n, axis=1, keepdims=True)
        n = n / np.where(length > 0, length, 1.0)
    return n


def vertex_normals(vertices, faces):
    """Area-weighted unit vertex normals; isolated vertices get a zero normal."""
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces)
    fn = face_normals(v, f, normalize=False)
    acc = np.zeros_like(v)
    for k in range(3):
        np.add.at(acc, f[:, k], fn)
    length = np.linalg.norm(acc, axis=1, keepdims=True)
    return acc / np.where(length > 0, length, 1.0)


def unique_edges(faces):
    """Sorted ``(E, 2)`` array of undirected edges."""
    f = np.asarray(faces, dtype=np.int64)
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


def boundary_vertices(faces, n_vertices):
    f = np.asarray(faces, dtype=np.int64)
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e.sort(axis=1)
    edges, counts = np.unique(e, axis=0, return_counts=True)
    mask = np.zeros(n_vertices, bool)
    mask[edges[counts == 1].ravel()] = True
    return mask


def subdivide(vertices, faces, attributes=(), levels=1):
    """Midpoint (1-to-4) subdivision.

    Every entry of ``attributes`` is a per-vertex array interpolated linearly
    onto the new edge midpoints. Returns ``(vertices, faces, attributes)``.
    """
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64)
    attrs = [np.asarray(a, dtype=np.float64) for a in attributes]
    for _ in range(levels):
        n = len(v)
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        edges, inverse = np.unique(e, axis=0, return_inverse=True)
        inverse = inverse.reshape(3, -1).T + n  # midpoint ids for (01, 12, 20)
        v = np.concatenate([v, 0.5 * (v[edges[:, 0]] + v[edges[:, 1]])])
        attrs = [np.concatenate([a, 0.5 * (a[edges[:, 0]] + a[edges[:, 1]])]) for a in attrs]
        a, b, c = f[:, 0], f[:, 1], f[:, 2]
        ab, bc, ca = inverse[:, 0], inverse[:, 1], inverse[:, 2]
        f = np.concatenate([
            np.stack([a, ab, ca], 1),
            np.stack([ab, b, bc], 1),
            np.stack([ca, bc, c], 1),
            np.stack([ab, bc, ca], 1),
        ])
    return v, f, attrs


def uv_to_pixel(uv, width, height):
    """Continuous pixel coordinates ``(x, y)`` with pixel centres at integers."""
    uv = np.asarray(uv, dtype=np.float64)
    return uv[..., 0] * width - 0.5, uv[..., 1] * height - 0.5


def pixel_to_uv(x, y, width, height):
    return np.stack([(np.asarray(x) + 0.5) / width, (np.asarray(y) + 0.5) / height], -1)


def bilinear_sample(data, x, y):
    """Sample an ``(H, W, C)`` array at continuous pixel coordinates.

    NaN neighbours are dropped and the remaining weights renormalised; a
    sample with no finite neighbour returns NaN. Coordinates outside the
    raster are clamped to the border.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 2:
        data = data[:, :, None]
    h, w, _ = data.shape
    x = np.clip(np.asarray(x, dtype=np.float64), 0, w - 1)
    y = np.clip(np.asarray(y, dtype=np.float64), 0, h - 1)
    x0 = np.minimum(np.floor(x).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.int64), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    acc = 0.0
    wsum = 0.0
    for yy, xx, wt in ((y0, x0, (1 - fx) * (1 - fy)), (y0, x1, fx * (1 - fy)),
                       (y1, x0, (1 - fx) * fy), (y1, x1, fx * fy)):
        s = data[yy, xx]
        ok = np.isfinite(s).all(axis=-1, keepdims=True)
        wt = np.where(ok, wt, 0.0)
        acc = acc + wt * np.where(ok, s, 0.0)
        wsum = wsum + wt
    with np.errstate(invalid="ignore", divide="ignore"):
        out = acc / wsum
    return np.where(wsum > 0, out, np.nan)
