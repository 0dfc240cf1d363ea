"""Second-order spherical-harmonic Lambertian shading and a linear albedo model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

N_SH = 9

_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = 1.0925484305920792
_C3 = 0.31539156525252005
_C4 = 0.5462742152960396


def sh_basis(normals):
    """Real SH basis (bands 0-2) at unit normals: (N, 9)."""
    n = np.asarray(normals, dtype=np.float64)
    x, y, z = n[:, 0], n[:, 1], n[:, 2]
    return np.stack([
        np.full_like(x, _C0),
        _C1 * y, _C1 * z, _C1 * x,
        _C2 * x * y, _C2 * y * z, _C3 * (3 * z * z - 1), _C2 * x * z, _C4 * (x * x - y * y),
    ], axis=1)


def sh_basis_gradient(normals):
    """d basis / d normal: (N, 9, 3)."""
    n = np.asarray(normals, dtype=np.float64)
    x, y, z = n[:, 0], n[:, 1], n[:, 2]
    g = np.zeros((len(n), 9, 3))
    g[:, 1, 1] = _C1
    g[:, 2, 2] = _C1
    g[:, 3, 0] = _C1
    g[:, 4, 0] = _C2 * y
    g[:, 4, 1] = _C2 * x
    g[:, 5, 1] = _C2 * z
    g[:, 5, 2] = _C2 * y
    g[:, 6, 2] = 6 * _C3 * z
    g[:, 7, 0] = _C2 * z
    g[:, 7, 2] = _C2 * x
    g[:, 8, 0] = 2 * _C4 * x
    g[:, 8, 1] = -2 * _C4 * y
    return g


def ambient_sh(level=1.0):
    """(9, 3) coefficients giving uniform shading ``level`` in every channel."""
    sh = np.zeros((N_SH, 3))
    sh[0] = level / _C0
    return sh


@dataclass
class AlbedoBasis:
    """Per-vertex RGB albedo ``mean + basis @ w`` with ``basis`` of shape (3N, K)."""

    mean: np.ndarray
    basis: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1, 3)
        self.basis = np.asarray(self.basis, dtype=np.float64)
        if self.basis.ndim != 2 or self.basis.shape[0] != self.mean.size:
            raise ValidationError("albedo basis must be (3N, K) matching the mean")

    @property
    def rank(self):
        return self.basis.shape[1]

    def colors(self, w):
        return self.mean + (self.basis @ np.asarray(w, dtype=np.float64)).reshape(-1, 3)
