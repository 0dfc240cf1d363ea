"""UV-space rasterisation with barycentric interpolation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ValidationError
from .mesh import Mesh, RasterMap


@dataclass
class UVRaster:
    """Which face covers each pixel centre, and where inside it."""

    face_id: np.ndarray   # (H, W), -1 outside the chart
    bary: np.ndarray      # (H, W, 3)
    faces: np.ndarray

    @property
    def covered(self):
        return self.face_id >= 0

    @property
    def shape(self):
        return self.face_id.shape

    def interpolate(self, values) -> np.ndarray:
        """Per-vertex ``values`` (V, C) -> (H, W, C), NaN outside the chart."""
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        h, w = self.face_id.shape
        out = np.full((h, w, values.shape[1]), np.nan)
        cov = self.covered
        f = self.faces[self.face_id[cov]]
        b = self.bary[cov]
        out[cov] = (b[:, 0, None] * values[f[:, 0]] + b[:, 1, None] * values[f[:, 1]]
                    + b[:, 2, None] * values[f[:, 2]])
        return out


def rasterize_uv(mesh: Mesh, resolution, eps=1e-9) -> UVRaster:
    if mesh.uv is None:
        raise ValidationError("mesh has no UV coordinates")
    w, h = _resolution(resolution)
    face_id, bary = _kernels.rasterize_uv(np.ascontiguousarray(mesh.uv),
                                          np.ascontiguousarray(mesh.faces), w, h, eps)
    return UVRaster(face_id, bary, mesh.faces)


def _resolution(resolution):
    if np.isscalar(resolution):
        w = h = int(resolution)
    else:
        w, h = (int(r) for r in resolution)
    if w <= 0 or h <= 0:
        raise ValidationError("raster resolution must be positive")
    return w, h


def vertex_attribute_map(mesh: Mesh, values, resolution) -> RasterMap:
    return RasterMap(rasterize_uv(mesh, resolution).interpolate(values))
