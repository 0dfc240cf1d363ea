"""Procedural face-like fixtures: shapes, expressions, fine detail, flows and benchmark data.

Faces are an ellipsoidal patch over a regular UV grid with Gaussian
features (nose, eye sockets, chin, ...). Identities perturb radii and
feature strengths; expressions are localized smooth 3D deformations.
Everything is a pure function of the seed.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import CameraParams
from .mesh import Mesh, RasterMap, bilinear_sample, uv_to_pixel
from .morphable import MeshTensor, tucker_decompose

log = logging.getLogger(__name__)

N_ID_PARAMS = 10
THETA_RANGE = 1.2     # half-width of the patch in longitude (rad)
PHI_RANGE = 0.9       # half-height in latitude (rad)

# (centre uv, sigma, preferred motion direction)
_REGIONS = [
    ((0.50, 0.88), 0.12, (0.0, -1.0, 0.2)),
    ((0.40, 0.74), 0.06, (-0.6, 0.5, 0.3)),
    ((0.60, 0.74), 0.06, (0.6, 0.5, 0.3)),
    ((0.50, 0.70), 0.05, (0.0, 0.3, 0.8)),
    ((0.50, 0.79), 0.05, (0.0, -0.3, 0.8)),
    ((0.34, 0.30), 0.07, (0.0, 1.0, 0.1)),
    ((0.66, 0.30), 0.07, (0.0, 1.0, 0.1)),
    ((0.50, 0.28), 0.06, (0.0, 1.0, 0.0)),
    ((0.34, 0.40), 0.04, (0.0, -1.0, -0.3)),
    ((0.66, 0.40), 0.04, (0.0, -1.0, -0.3)),
    ((0.30, 0.60), 0.09, (-0.2, 0.3, 0.9)),
    ((0.70, 0.60), 0.09, (0.2, 0.3, 0.9)),
    ((0.50, 0.52), 0.05, (0.0, 0.5, 0.5)),
]


def grid_topology(n_u, n_v=None):
    """Faces and UV of an ``n_v`` x ``n_u`` vertex grid covering [0, 1]^2.

    Vertex ``(r, c)`` has index ``r * n_u + c`` and uv ``(c / (n_u-1), r / (n_v-1))``.
    Triangles are wound so the generated faces point toward +z.
    """
    n_v = n_v or n_u
    c, r = np.meshgrid(np.arange(n_u), np.arange(n_v))
    uv = np.c_[c.ravel() / (n_u - 1), r.ravel() / (n_v - 1)]
    idx = np.arange(n_u * n_v).reshape(n_v, n_u)
    a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    d, e = idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
    faces = np.concatenate([np.c_[a, d, b], np.c_[b, d, e]])
    return faces, uv


def landmark_uv():
    """68 landmark locations in UV: jaw, brows, nose, eyes, mouth."""
    t = np.linspace(0, 1, 17)
    jaw = np.c_[0.15 + 0.7 * t, 0.55 + 0.35 * np.sin(np.pi * t)]
    s = np.linspace(0, 1, 5)
    brow_l = np.c_[0.25 + 0.18 * s, 0.30 - 0.03 * np.sin(np.pi * s)]
    brow_r = np.c_[1.0 - brow_l[::-1, 0], brow_l[::-1, 1]]
    bridge = np.c_[np.full(4, 0.5), np.linspace(0.38, 0.52, 4)]
    nose_base = np.c_[np.linspace(0.44, 0.56, 5), np.full(5, 0.58)]
    a6 = np.linspace(0, 2 * np.pi, 6, endpoint=False)
    eye = np.c_[0.05 * np.cos(a6), 0.02 * np.sin(a6)]
    a12 = np.linspace(0, 2 * np.pi, 12, endpoint=False)
    a8 = np.linspace(0, 2 * np.pi, 8, endpoint=False)
    mouth_out = np.c_[0.5 + 0.1 * np.cos(a12), 0.75 + 0.04 * np.sin(a12)]
    mouth_in = np.c_[0.5 + 0.06 * np.cos(a8), 0.75 + 0.015 * np.sin(a8)]
    return np.vstack([jaw, brow_l, brow_r, bridge, nose_base, eye + (0.35, 0.4), eye + (0.65, 0.4),
                      mouth_out, mouth_in])


def nearest_vertices(uv_grid, uv_points):
    d = ((uv_points[:, None, :] - uv_grid[None]) ** 2).sum(-1)
    return np.argmin(d, axis=1)


def _gauss(uv, centre, sigma):
    d2 = ((uv - np.asarray(centre)) ** 2).sum(1)
    return np.exp(-d2 / (2 * sigma ** 2))


class FaceGenerator:
    """Deterministic procedural faces indexed by identity and expression."""

    def __init__(self, seed=0, n_expressions=20):
        self.seed = int(seed)
        self.n_expressions = int(n_expressions)

    # -- identity -------------------------------------------------------
    def identity_params(self, identity):
        rng = np.random.default_rng([self.seed, 1, int(identity)])
        return np.clip(rng.standard_normal(N_ID_PARAMS), -2.5, 2.5)

    def _base_surface(self, uv, p):
        u, v = uv[:, 0], uv[:, 1]
        rx, ry, rz = 72 * (1 + 0.05 * p[0]), 95 * (1 + 0.05 * p[1]), 85 * (1 + 0.05 * p[2])
        th = (u - 0.5) * 2 * THETA_RANGE
        ph = (0.5 - v) * 2 * PHI_RANGE
        e = np.c_[rx * np.sin(th) * np.cos(ph), ry * np.sin(ph), rz * np.cos(th) * np.cos(ph)]
        n = e / np.array([rx, ry, rz]) ** 2
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        h = (18 * (1 + 0.15 * p[3]) * _gauss(uv, (0.5, 0.53), 0.06 * (1 + 0.1 * p[4]))
             - 6 * (1 + 0.2 * p[5]) * (_gauss(uv, (0.35, 0.4), 0.05) + _gauss(uv, (0.65, 0.4), 0.05))
             + 5 * (1 + 0.2 * p[6]) * _gauss(uv, (0.5, 0.92), 0.07)
             + 4 * (1 + 0.2 * p[7]) * (_gauss(uv, (0.3, 0.6), 0.08) + _gauss(uv, (0.7, 0.6), 0.08))
             + 3 * (1 + 0.2 * p[8]) * (_gauss(uv, (0.35, 0.31), 0.05) + _gauss(uv, (0.65, 0.31), 0.05))
             + 2 * (1 + 0.2 * p[9]) * _gauss(uv, (0.5, 0.75), 0.04))
        return e + h[:, None] * n

    # -- expression -----------------------------------------------------
    def _expression_terms(self, k):
        rng = np.random.default_rng([self.seed, 7, int(k)])
        n_regions = int(rng.integers(1, 4))
        picks = rng.choice(len(_REGIONS), size=n_regions, replace=False)
        terms = []
        for j in picks:
            centre, sigma, direction = _REGIONS[j]
            d = np.asarray(direction) + 0.3 * rng.standard_normal(3)
            d *= rng.uniform(3.0, 9.0) / np.linalg.norm(d)
            if rng.random() < 0.3:
                d = -d
            terms.append((centre, sigma * rng.uniform(0.8, 1.3), d))
        return terms

    def expression_offset(self, uv, expression, identity_params=None):
        """3D offset field of ``expression`` (zero for expression 0)."""
        out = np.zeros((len(uv), 3))
        if expression == 0:
            return out
        gain = 1.0 if identity_params is None else 1 + 0.1 * np.tanh(identity_params[0] + identity_params[3])
        for centre, sigma, d in self._expression_terms(expression):
            out += _gauss(uv, centre, sigma)[:, None] * d
        return gain * out

    def surface(self, uv, identity, expression=0):
        p = self.identity_params(identity)
        return self._base_surface(uv, p) + self.expression_offset(uv, expression, p)

    def surface_normals(self, uv, identity, expression=0, h=1e-5):
        du = np.array([h, 0.0])
        dv = np.array([0.0, h])
        pu = self.surface(uv + du, identity, expression) - self.surface(uv - du, identity, expression)
        pv = self.surface(uv + dv, identity, expression) - self.surface(uv - dv, identity, expression)
        n = np.cross(pv, pu)
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def mesh(self, identity, expression=0, resolution=41) -> Mesh:
        faces, uv = grid_topology(resolution)
        lm = nearest_vertices(uv, landmark_uv())
        return Mesh(self.surface(uv, identity, expression), faces, uv, lm)

    # -- fine detail ----------------------------------------------------
    def neutral_detail(self, uv):
        return 0.08 * np.sin(2 * np.pi * 40 * uv[:, 0]) * np.sin(2 * np.pi * 40 * uv[:, 1])

    def wrinkle_pattern(self, uv, expression):
        """Fully expressed wrinkles of ``expression``: oriented sinusoid under its motion gate."""
        if expression == 0:
            return self.neutral_detail(uv)
        rng = np.random.default_rng([self.seed, 11, int(expression)])
        ang = rng.uniform(0, np.pi)
        freq = rng.uniform(12, 18)
        amp = rng.uniform(0.3, 0.5)
        gate = np.linalg.norm(self.expression_offset(uv, expression), axis=1)
        ref = np.linalg.norm(self.expression_offset(_reference_uv(), expression), axis=1).max()
        gate = gate / ref if ref > 0 else gate
        phase = uv[:, 0] * np.cos(ang) + uv[:, 1] * np.sin(ang)
        return amp * gate * np.sin(2 * np.pi * freq * phase)

    def detail_height(self, uv, expression):
        """Displacement (mm) present on the detailed scan of ``expression``."""
        if expression == 0:
            return self.neutral_detail(uv)
        gate = np.linalg.norm(self.expression_offset(uv, expression), axis=1)
        ref = np.linalg.norm(self.expression_offset(_reference_uv(), expression), axis=1).max()
        a = np.clip(gate / ref, 0, 1) if ref > 0 else gate
        return (1 - a) * self.neutral_detail(uv) + a * self.wrinkle_pattern(uv, expression)

    def detailed_mesh(self, identity, expression=0, resolution=161) -> Mesh:
        faces, uv = grid_topology(resolution)
        pos = self.surface(uv, identity, expression)
        nrm = self.surface_normals(uv, identity, expression)
        return Mesh(pos + self.detail_height(uv, expression)[:, None] * nrm, faces, uv)

    def detail_map(self, expression, resolution=256, wrinkles_only=False) -> RasterMap:
        """Procedural displacement map sampled at pixel centres."""
        w = h = int(resolution)
        c, r = np.meshgrid(np.arange(w), np.arange(h))
        uv = np.c_[(c.ravel() + 0.5) / w, (r.ravel() + 0.5) / h]
        f = self.wrinkle_pattern(uv, expression) if wrinkles_only else self.detail_height(uv, expression)
        return RasterMap(f.reshape(h, w))


_REF_UV = None


def _reference_uv():
    global _REF_UV
    if _REF_UV is None:
        _REF_UV = grid_topology(81)[1]
    return _REF_UV


# ---------------------------------------------------------------------------
# model fixtures


def synthetic_tensor(n_identities, n_expressions, resolution=(15, 20), seed=0) -> MeshTensor:
    """Mesh tensor over a ``resolution`` grid; 300 vertices by default."""
    gen = FaceGenerator(seed, n_expressions)
    n_u, n_v = (resolution, resolution) if np.isscalar(resolution) else resolution
    faces, uv = grid_topology(n_u, n_v)
    data = np.empty((3 * len(uv), n_expressions, n_identities))
    for i in range(n_identities):
        p = gen.identity_params(i)
        base = gen._base_surface(uv, p)
        for e in range(n_expressions):
            data[:, e, i] = (base + gen.expression_offset(uv, e, p)).ravel()
    return MeshTensor(data, faces, uv)


def toy_model(n_identities=50, n_expressions=52, resolution=30, seed=0):
    """Full-rank bilinear model plus the template's 68 landmark vertex indices."""
    tensor = synthetic_tensor(n_identities, n_expressions, (resolution, resolution), seed)
    model = tucker_decompose(tensor, n_expressions, n_identities)
    lm = nearest_vertices(tensor.uv, landmark_uv())
    return model, lm


def synthetic_blendshapes(identity=0, n_shapes=52, resolution=41, seed=0):
    from .morphable import BlendshapeSet

    gen = FaceGenerator(seed, n_shapes)
    return BlendshapeSet([gen.mesh(identity, k, resolution) for k in range(n_shapes)])


# ---------------------------------------------------------------------------
# flow refinement fixture


@dataclass
class FlowCase:
    mesh_e: Mesh          # expression mesh whose vertices slid along the surface
    mesh_n: Mesh
    flow: RasterMap
    true_vertices: np.ndarray


def uv_warp(uv, amplitude=0.012, seed=0):
    """Smooth UV displacement vanishing on the chart border."""
    rng = np.random.default_rng([seed, 21])
    a, b = rng.uniform(0, 2 * np.pi, 2)
    env = np.sin(np.pi * uv[:, 0]) * np.sin(np.pi * uv[:, 1])
    return amplitude * env[:, None] * np.c_[np.cos(a + 2 * uv[:, 1]), np.sin(b + 2 * uv[:, 0])]


def flow_case(seed=0, resolution=41, flow_resolution=256, amplitude=0.012, expression=1) -> FlowCase:
    gen = FaceGenerator(seed)
    faces, uv = grid_topology(resolution)
    true = gen.surface(uv, 0, expression)
    slid = gen.surface(np.clip(uv + uv_warp(uv, amplitude, seed), 0, 1), 0, expression)
    mesh_e = Mesh(slid, faces, uv)
    mesh_n = Mesh(gen.surface(uv, 0, 0), faces, uv)
    w = h = int(flow_resolution)
    c, r = np.meshgrid(np.arange(w), np.arange(h))
    up = np.c_[(c.ravel() + 0.5) / w, (r.ravel() + 0.5) / h]
    q = up.copy()
    for _ in range(30):
        q = up - uv_warp(q, amplitude, seed)
    flow = ((up - q) * (w, h)).reshape(h, w, 2)
    return FlowCase(mesh_e, mesh_n, RasterMap(flow), true)


# ---------------------------------------------------------------------------
# benchmark fixture


def cylinder_mesh(radius=80.0, half_height=100.0, segments=64, rings=21, outward=True) -> Mesh:
    """Open prismatic cylinder around +Y; ring ``k`` at ``y = -h + 2h k / (rings-1)``.

    Each quad is split into four triangles around its centre, so every vertex
    sees the same triangle area on its left and right; vertex normals are
    then exactly horizontal bisectors, also on the rim and on any cut ring.
    """
    ang = 2 * np.pi * np.arange(segments) / segments
    ys = np.linspace(-half_height, half_height, rings)
    ring = np.c_[radius * np.sin(ang), np.zeros(segments), radius * np.cos(ang)]
    corners = np.concatenate([ring + [0.0, y, 0.0] for y in ys])
    nxt = np.roll(np.arange(segments), -1)
    mid = 0.5 * (ring + ring[nxt])
    centres = np.concatenate([mid + [0.0, 0.5 * (ys[k] + ys[k + 1]), 0.0] for k in range(rings - 1)])
    verts = np.concatenate([corners, centres])
    n_c = len(corners)
    faces = []
    for k in range(rings - 1):
        for s in range(segments):
            a, b = k * segments + s, k * segments + nxt[s]
            c, d = a + segments, b + segments
            m = n_c + k * segments + s
            faces += [[a, b, m], [b, d, m], [d, c, m], [c, a, m]]
    faces = np.array(faces)
    if not outward:
        faces = faces[:, ::-1]
    return Mesh(verts, faces)


def _fixture_camera():
    return CameraParams(mode="weak_perspective", rotation=[0.0, 1.0, 0.0, 0.0], scale=2.0,
                        translation=[128.0, 128.0])


def benchmark_fixture(out_dir, with_missing=False):
    """Five GT/prediction pairs with hand-derivable scores; returns the manifest path.

    Samples: ``copy`` (exact copy), ``depth`` (+30 mm along the camera depth
    axis), ``flipped`` (reversed winding), ``cut`` (upper half removed) and
    ``shifted`` (moved up by two cylindrical rows, 0.8203125 mm at default
    settings). With ``with_missing`` the ``shifted`` prediction is not written.
    """
    from .io import save_manifest, save_mesh, BenchmarkManifest, ManifestEntry

    out = Path(out_dir)
    (out / "gt").mkdir(parents=True, exist_ok=True)
    (out / "pred").mkdir(parents=True, exist_ok=True)
    gt = cylinder_mesh()
    cam = _fixture_camera()
    depth_dir = cam.R.T @ np.array([0.0, 0.0, 1.0])
    keep = ~(gt.vertices[gt.faces][:, :, 1] > 0).any(1)
    preds = {
        "copy": gt,
        "depth": gt.replace(vertices=gt.vertices + 30.0 * depth_dir),
        "flipped": gt.replace(faces=gt.faces[:, ::-1].copy()),
        "cut": _compact(gt.vertices, gt.faces[keep]),
        "shifted": gt.replace(vertices=gt.vertices + [0.0, 2 * 210.0 / 512, 0.0]),
    }
    buckets = {"copy": ("0-5", "long"), "depth": ("0-5", "mid"), "flipped": ("5-30", "mid"),
               "cut": ("5-30", "short"), "shifted": ("30-60", "long")}
    entries = []
    for sid, pred in preds.items():
        save_mesh(gt, out / "gt" / f"{sid}.ply")
        if not (with_missing and sid == "shifted"):
            save_mesh(pred, out / "pred" / f"{sid}.ply")
        entries.append(ManifestEntry(sid, out / "gt" / f"{sid}.ply", out / "pred" / f"{sid}.ply",
                                     buckets[sid][0],
                                     cam, buckets[sid][1]))
    path = out / "manifest.json"
    save_manifest(BenchmarkManifest(entries, out), path)
    return path


def _compact(vertices, faces):
    used = np.unique(faces)
    remap = np.full(len(vertices), -1)
    remap[used] = np.arange(len(used))
    return Mesh(vertices[used], remap[faces])


# ---------------------------------------------------------------------------
# fixture tree


def synth_fixtures(seed, out_dir, n_identities=3, n_expressions=20, resolution=41,
                   detail_resolution=161, map_resolution=256, n_detailed=2):
    """Write the full fixture tree under ``out_dir`` and return its path.

    Layout::

        meshes/<identity>/<expression>.ply   base meshes (+ landmark side-cars)
        detailed/<identity>_<expression>.ply dense scans with procedural wrinkles
        disp/<identity>_<expression>.fmap    their baked displacement maps
        rig/blendshapes/<k>.ply              52 blendshapes of identity 0
        rig/details/<i>.fmap                 20 key-expression displacement maps
        flow/{mesh_e,mesh_n}.ply, flow.fmap  flow refinement case
        benchmark/manifest.json              5-sample evaluation fixture
    """
    from .io import save_float_map, save_mesh
    from .registration import bake_displacement

    out = Path(out_dir)
    gen = FaceGenerator(seed, n_expressions)
    for i in range(n_identities):
        d = out / "meshes" / f"{i:03d}"
        d.mkdir(parents=True, exist_ok=True)
        for e in range(n_expressions):
            save_mesh(gen.mesh(i, e, resolution), d / f"{e:02d}.ply")
    (out / "detailed").mkdir(parents=True, exist_ok=True)
    (out / "disp").mkdir(parents=True, exist_ok=True)
    for i in range(n_identities):
        for e in range(min(n_detailed, n_expressions)):
            base = gen.mesh(i, e, resolution)
            dense = gen.detailed_mesh(i, e, detail_resolution)
            save_mesh(dense, out / "detailed" / f"{i:03d}_{e:02d}.ply")
            save_float_map(bake_displacement(base, dense, map_resolution),
                           out / "disp" / f"{i:03d}_{e:02d}.fmap")
    rig = out / "rig"
    (rig / "blendshapes").mkdir(parents=True, exist_ok=True)
    (rig / "details").mkdir(parents=True, exist_ok=True)
    shapes = synthetic_blendshapes(0, 52, resolution, seed)
    for k, s in enumerate(shapes):
        save_mesh(s, rig / "blendshapes" / f"{k:02d}.ply")
    key_gen = FaceGenerator(seed, 52)
    for k in range(20):
        save_float_map(key_gen.detail_map(k, map_resolution, wrinkles_only=k > 0),
                       rig / "details" / f"{k:02d}.fmap")
    (rig / "alpha.json").write_text(json.dumps([0.0] * 51))
    case = flow_case(seed, resolution)
    (out / "flow").mkdir(parents=True, exist_ok=True)
    save_mesh(case.mesh_e, out / "flow" / "mesh_e.ply")
    save_mesh(case.mesh_n, out / "flow" / "mesh_n.ply")
    save_float_map(case.flow, out / "flow" / "flow.fmap")
    benchmark_fixture(out / "benchmark")
    log.info("wrote fixtures to %s", out)
    return out
