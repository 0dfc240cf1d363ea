"""Expression-dependent detail: blend key-expression displacement maps with UV-space masks.

For rig weights ``alpha`` (one per non-neutral blendshape), activation masks
``A_j = |e_j - e_0|`` (max-normalised) and fixed key-expression weights
``alpha_hat_i``:

    M_i = sum_j alpha_j * alpha_hat_i[j] * A_j,     M_0 = max(0, 1 - sum_i M_i)
    F   = M_0 * F_0 + sum_i M_i * F_i
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .errors import ValidationError
from .mesh import Mesh, RasterMap
from .morphable import BlendshapeSet
from .raster import rasterize_uv
from .registration import apply_displacement


def load_key_expressions():
    """Bundled key-expression weights: ``(names, blendshape_names, weights (19, 51))``."""
    text = resources.files("facekit").joinpath("data/key_expressions.json").read_text()
    doc = json.loads(text)
    names = [row["name"] for row in doc["key_expressions"]]
    weights = np.array([row["weights"] for row in doc["key_expressions"]], dtype=np.float64)
    return names, list(doc["blendshapes"]), weights


@dataclass
class KeyExpressionDetails:
    """Displacement maps of the key expressions (index 0 neutral) and their blendshape weights."""

    maps: list
    key_weights: np.ndarray = None

    def __post_init__(self):
        if len(self.maps) < 1:
            raise ValidationError("need at least the neutral displacement map")
        shape = (self.maps[0].height, self.maps[0].width)
        for i, m in enumerate(self.maps):
            if (m.height, m.width) != shape or m.channels != 1:
                raise ValidationError(f"displacement map {i} must be single-channel {shape}")
        if self.key_weights is None:
            self.key_weights = load_key_expressions()[2]
        self.key_weights = np.asarray(self.key_weights, dtype=np.float64)
        if self.key_weights.ndim != 2 or len(self.key_weights) != len(self.maps) - 1:
            raise ValidationError(f"need {len(self.maps) - 1} key weight vectors, got "
                                  f"{self.key_weights.shape}")
        if (self.key_weights < 0).any() or (self.key_weights > 1).any():
            raise ValidationError("key expression weights must lie in [0, 1]")

    @property
    def resolution(self):
        return self.maps[0].width, self.maps[0].height


def _check_alpha(alpha, n):
    a = np.asarray(alpha, dtype=np.float64).ravel()
    if a.size != n:
        raise ValidationError(f"expected {n} rig weights, got {a.size}")
    if (a < 0).any() or (a > 1).any():
        raise ValidationError("rig weights must lie in [0, 1]")
    return a


def activation_masks(blendshapes: BlendshapeSet, resolution):
    """One mask per non-neutral blendshape: per-pixel motion magnitude, max-normalised.

    Pixels outside the UV chart are 0; a blendshape identical to the neutral
    gives an all-zero mask.
    """
    neutral = blendshapes.neutral
    if neutral.uv is None:
        raise ValidationError("blendshapes have no UV coordinates")
    raster = rasterize_uv(neutral, resolution)
    out = []
    for shape in blendshapes.shapes[1:]:
        d = raster.interpolate(shape.vertices - neutral.vertices)
        a = np.nan_to_num(np.linalg.norm(d, axis=2), nan=0.0)
        peak = a.max()
        out.append(RasterMap(a / peak if peak > 0 else a))
    return out


def _stack(maps):
    return np.stack([m.data[:, :, 0] if isinstance(m, RasterMap) else np.asarray(m) for m in maps])


def weight_masks(activations, key_weights, alpha):
    """``[M_0, M_1, ...]`` as RasterMaps; ``M_i`` are not capped, only ``M_0`` is clamped."""
    A = _stack(activations)
    K = np.asarray(key_weights, dtype=np.float64)
    if K.ndim != 2 or K.shape[1] != len(A):
        raise ValidationError(f"key weights must be (n_keys, {len(A)}), got {K.shape}")
    a = _check_alpha(alpha, len(A))
    M = np.tensordot(K * a, A, axes=([1], [0]))       # (n_keys, H, W)
    M0 = np.maximum(0.0, 1.0 - M.sum(0))
    return [RasterMap(M0)] + [RasterMap(m) for m in M]


def blend_displacements(details: KeyExpressionDetails, masks) -> RasterMap:
    """Mask-weighted sum of the key-expression maps.

    A map only contributes where its mask is non-zero, so invalid pixels
    propagate exactly when they carry weight, and a unit neutral mask
    returns the neutral map bit for bit.
    """
    if len(masks) != len(details.maps):
        raise ValidationError(f"{len(masks)} masks for {len(details.maps)} maps")
    shape = (details.maps[0].height, details.maps[0].width)
    M = _stack(masks)
    if M.shape[1:] != shape:
        raise ValidationError(f"mask size {M.shape[1:]} differs from map size {shape}")
    F = np.where(M[0] != 0, M[0] * details.maps[0].data[:, :, 0], 0.0)
    for m, fmap in zip(M[1:], details.maps[1:]):
        F = np.where(m != 0, F + m * fmap.data[:, :, 0], F)
    return RasterMap(F)


def rig_base(blendshapes: BlendshapeSet, alpha) -> Mesh:
    """Linear blendshape rig ``e_0 + sum_j alpha_j (e_j - e_0)``."""
    a = _check_alpha(alpha, len(blendshapes) - 1)
    neutral = blendshapes.neutral
    v = neutral.vertices + np.tensordot(a, blendshapes.deltas(), axes=1) if len(a) else neutral.vertices
    return neutral.replace(vertices=v)


def rig_detailed(blendshapes: BlendshapeSet, details: KeyExpressionDetails, alpha,
                 subdivision_level=0, activations=None) -> Mesh:
    """Detailed mesh for rig weights ``alpha``: blended base plus synthesised displacement.

    ``activations`` may be precomputed with :func:`activation_masks` at the
    detail maps' resolution.
    """
    if activations is None:
        activations = activation_masks(blendshapes, details.resolution)
    base = rig_base(blendshapes, alpha)
    masks = weight_masks(activations, details.key_weights, alpha)
    return apply_displacement(base, blend_displacements(details, masks), subdivision_level)
