"""Template registration and the two-layer (base mesh + displacement map) representation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import NumericalError, ValidationError
from .mesh import (Mesh, RasterMap, bilinear_sample, boundary_vertices, subdivide,
                   unique_edges, uv_to_pixel, vertex_normals)
from .raster import rasterize_uv
from .raycast import BVH

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# rigid / similarity alignment


def similarity_transform(src, dst):
    """Least-squares ``s, R, t`` with ``dst ~ s * R @ src + t`` (Umeyama)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s, mu_d = src.mean(0), dst.mean(0)
    a, b = src - mu_s, dst - mu_d
    cov = b.T @ a / len(src)
    u, sig, vt = np.linalg.svd(cov)
    d = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        d[2] = -1
    R = u @ np.diag(d) @ vt
    var = (a ** 2).sum() / len(src)
    s = float((sig * d).sum() / var)
    t = mu_d - s * R @ mu_s
    return s, R, t


# ---------------------------------------------------------------------------
# non-rigid ICP


@dataclass
class NicpConfig:
    stiffness_schedule: tuple = tuple(np.geomspace(100.0, 1.0, 8))
    landmark_weight: float = 10.0
    max_inner_iterations: int = 10
    convergence_tol: float = 1e-3
    gamma: float = 1.0
    max_distance: float = np.inf
    max_normal_angle: float = 60.0
    reject_boundary: bool = True

    def __post_init__(self):
        s = np.asarray(self.stiffness_schedule, dtype=np.float64)
        if s.size == 0 or (s <= 0).any() or (np.diff(s) >= 0).any():
            raise ValidationError("stiffness schedule must be strictly decreasing and positive")
        if self.landmark_weight < 0 or self.max_inner_iterations < 1 or self.convergence_tol <= 0:
            raise ValidationError("invalid NICP configuration")
        self.stiffness_schedule = tuple(float(x) for x in s)


def _landmark_arrays(landmark_pairs):
    idx, pts = landmark_pairs
    idx = np.asarray(idx, dtype=np.int64).ravel()
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    if len(idx) != len(pts):
        raise ValidationError("landmark index and point counts differ")
    return idx, pts


def nicp_register(template: Mesh, scan: Mesh, landmark_pairs, config: NicpConfig = None,
                  return_history=False):
    """Deform ``template`` onto ``scan`` with optimal-step non-rigid ICP.

    ``landmark_pairs`` is ``(template_vertex_indices, scan_points)``. The
    template is first moved by the similarity transform that best aligns the
    landmarks, then every vertex gets its own affine transform, regularised
    by a stiffness term that is relaxed along ``config.stiffness_schedule``
    while the landmark weight decays linearly to zero.

    With ``return_history`` the mean squared nearest-point distance after
    each stiffness step is returned alongside the mesh.
    """
    config = config or NicpConfig()
    if scan.n_vertices == 0 or scan.n_faces == 0:
        raise ValidationError("scan is empty")
    lm_idx, lm_pts = _landmark_arrays(landmark_pairs)
    if len(lm_idx) < 4:
        raise ValidationError(f"need at least 4 landmark pairs, got {len(lm_idx)}")
    if lm_idx.min() < 0 or lm_idx.max() >= template.n_vertices:
        raise ValidationError("landmark index out of range")
    src = template.vertices[lm_idx]
    sv = np.linalg.svd(src - src.mean(0), compute_uv=False)
    if sv[2] <= 1e-9 * max(sv[0], 1e-300):
        raise ValidationError("landmarks are coplanar; need 4 non-coplanar pairs")

    s, R, t = similarity_transform(src, lm_pts)
    aligned = s * template.vertices @ R.T + t

    # work in normalised coordinates so stiffness values do not depend on units
    center = aligned.mean(0)
    scale = float(np.sqrt(((aligned - center) ** 2).sum(1).mean())) or 1.0
    v0 = (aligned - center) / scale
    lm_target = (lm_pts - center) / scale

    scan_v = (scan.vertices - center) / scale
    bvh = BVH(scan_v, scan.faces)
    scan_normals = vertex_normals(scan_v, scan.faces)
    scan_boundary = boundary_vertices(scan.faces, scan.n_vertices)

    n = template.n_vertices
    edges = unique_edges(template.faces)
    m = len(edges)
    rows = np.repeat(np.arange(m), 2)
    cols = edges.ravel()
    vals = np.tile([-1.0, 1.0], m)
    M = sp.csr_matrix((vals, (rows, cols)), shape=(m, n))
    G = sp.diags([1.0, 1.0, 1.0, config.gamma])
    MG = sp.kron(M, G).tocsr()

    D = sp.csr_matrix((np.c_[v0, np.ones(n)].ravel(),
                       (np.repeat(np.arange(n), 4), np.arange(4 * n))), shape=(n, 4 * n))
    DL = D[lm_idx]

    X = np.tile(np.vstack([np.eye(3), np.zeros((1, 3))]), (n, 1))
    cos_limit = np.cos(np.deg2rad(config.max_normal_angle))
    schedule = config.stiffness_schedule
    history = []
    n_steps = len(schedule)

    def correspondences(cur):
        cp = bvh.closest(cur)
        w = np.isfinite(cp.distance) & (cp.distance * scale <= config.max_distance)
        tmpl_n = vertex_normals(cur, template.faces)
        f = scan.faces[np.maximum(cp.face, 0)]
        nrm = (cp.bary[:, 0, None] * scan_normals[f[:, 0]] + cp.bary[:, 1, None]
               * scan_normals[f[:, 1]] + cp.bary[:, 2, None] * scan_normals[f[:, 2]])
        nrm /= np.maximum(np.linalg.norm(nrm, axis=1, keepdims=True), 1e-300)
        w &= (tmpl_n * nrm).sum(1) >= cos_limit
        if config.reject_boundary:
            on_edge = (cp.bary <= 1e-12).any(1)
            touching = np.where(cp.bary > 1e-12, scan_boundary[f], True).all(1)
            w &= ~(on_edge & touching)
        return cp.point, w.astype(np.float64), cp.distance

    for step, alpha in enumerate(schedule):
        beta = config.landmark_weight * (1.0 - step / (n_steps - 1)) if n_steps > 1 else 0.0
        for _ in range(config.max_inner_iterations):
            cur = D @ X
            target, w, _ = correspondences(cur)
            W = sp.diags(w)
            A = sp.vstack([alpha * MG, W @ D, beta * DL]).tocsc()
            B = np.vstack([np.zeros((4 * m, 3)), w[:, None] * target, beta * lm_target])
            AtA = (A.T @ A).tocsc()
            try:
                lu = spla.splu(AtA)
                X_new = lu.solve(np.asarray(A.T @ B))
            except RuntimeError as exc:
                raise NumericalError(
                    f"NICP normal equations are singular at stiffness {alpha:g} ({exc}); "
                    "increase the final stiffness or add landmarks") from None
            if not np.isfinite(X_new).all():
                raise NumericalError(f"NICP produced non-finite values at stiffness {alpha:g}; "
                                     "increase the final stiffness")
            moved = np.abs(D @ X_new - cur).max() * scale
            X = X_new
            if moved < config.convergence_tol:
                break
        cur = D @ X
        history.append(float(np.mean((bvh.closest(cur).distance * scale) ** 2)))

    out = template.replace(vertices=(D @ X) * scale + center)
    return (out, history) if return_history else out


# ---------------------------------------------------------------------------
# flow-based refinement


@dataclass
class FlowRefineReport:
    covered: np.ndarray          # per-vertex bool, target came from the flow
    residual: float              # relative residual of the linear solve
    objective_initial: float     # objective at the input vertices
    objective_targets: float     # objective at the raw flow targets
    objective_final: float
    targets: np.ndarray = field(repr=False, default=None)

    @property
    def coverage(self):
        return float(self.covered.mean()) if self.covered.size else 1.0


def flow_targets(mesh_e: Mesh, flow: RasterMap):
    """Flow-derived target positions for every vertex of ``mesh_e``.

    A vertex with texture pixel ``(x, y)`` should sit where ``mesh_e`` has
    texture pixel ``(x - F(x, y, 0), y - F(x, y, 1))``; that position is the
    barycentric interpolation of the triangle containing it. Vertices whose
    flow sample is invalid or whose target falls outside the UV chart keep
    their current position and are reported as uncovered.
    """
    if mesh_e.uv is None:
        raise ValidationError("mesh has no UV coordinates")
    if flow.channels < 2:
        raise ValidationError("flow field needs two channels")
    w, h = flow.width, flow.height
    x, y = uv_to_pixel(mesh_e.uv, w, h)
    f = bilinear_sample(flow.data[:, :, :2], x, y)
    ok = np.isfinite(f).all(1)
    targets = mesh_e.vertices.copy()
    zero = ok & (f == 0).all(1)
    moving = ok & ~zero
    covered = zero.copy()
    if moving.any():
        tu = (x[moving] - f[moving, 0] + 0.5) / w
        tv = (y[moving] - f[moving, 1] + 0.5) / h
        uv3 = np.c_[mesh_e.uv, np.zeros(mesh_e.n_vertices)]
        bvh = BVH(uv3, mesh_e.faces)
        origins = np.c_[tu, tv, np.ones_like(tu)]
        hits = bvh.intersect(origins, [[0.0, 0.0, -1.0]], tmin=0.0, tmax=2.0)
        pos = BVH.interpolate(bvh, mesh_e.vertices, hits.face, hits.bary)
        idx = np.flatnonzero(moving)
        good = hits.hit
        targets[idx[good]] = pos[good]
        covered[idx[good]] = True
    return targets, covered


def refine_objective(current, targets, weights, edges, candidate, smoothness=1.0):
    """Data term on ``candidate - targets`` plus edge smoothness of the displacement."""
    d = candidate - current
    dt = candidate - targets
    data = float((weights[:, None] * dt ** 2).sum())
    diff = d[edges[:, 0]] - d[edges[:, 1]]
    return data + smoothness * float((diff ** 2).sum())


def refine_system(n, edges, weights, smoothness=1.0):
    """Sparse SPD matrix ``diag(w) + smoothness * L`` of the refinement problem."""
    m = len(edges)
    inc = sp.csr_matrix((np.tile([1.0, -1.0], m), (np.repeat(np.arange(m), 2), edges.ravel())),
                        shape=(m, n))
    return (sp.diags(weights) + smoothness * (inc.T @ inc)).tocsc()


def refine_with_flow(mesh_e: Mesh, mesh_n: Mesh, flow: RasterMap, smoothness=1.0,
                     fallback_weight=1e-6, return_report=False):
    """Move ``mesh_e`` vertices toward flow-derived targets under a smoothness prior.

    Minimises ``sum_i w_i |V_i - T_i|^2 + smoothness * sum_(i,j) |d_i - d_j|^2``
    over edges, with ``d = V - V_input`` and ``T`` from :func:`flow_targets`.
    Covered vertices have ``w = 1``; uncovered ones keep their own position
    as target with ``w = fallback_weight`` so they follow their neighbours.
    """
    if not mesh_e.same_topology(mesh_n):
        raise ValidationError("expression and neutral meshes must share topology")
    if mesh_n.uv is None or mesh_e.uv is None or not np.array_equal(mesh_e.uv, mesh_n.uv):
        raise ValidationError("expression and neutral meshes must share UV coordinates")
    targets, covered = flow_targets(mesh_e, flow)
    cur = mesh_e.vertices
    n = mesh_e.n_vertices
    edges = unique_edges(mesh_e.faces)
    weights = np.where(covered, 1.0, fallback_weight)
    A = refine_system(n, edges, weights, smoothness)
    rhs = weights[:, None] * (targets - cur)
    try:
        d = spla.splu(A).solve(rhs)
    except RuntimeError as exc:
        raise NumericalError(f"refinement system is singular: {exc}") from None
    res = float(np.linalg.norm(A @ d - rhs) / max(np.linalg.norm(rhs), 1e-300))
    new = cur + d
    if not covered.all():
        log.info("flow refinement: %d of %d vertices uncovered", int((~covered).sum()), n)
    out = mesh_e.replace(vertices=new)
    if not return_report:
        return out
    report = FlowRefineReport(
        covered=covered, residual=res,
        objective_initial=refine_objective(cur, targets, weights, edges, cur, smoothness),
        objective_targets=refine_objective(cur, targets, weights, edges, targets, smoothness),
        objective_final=refine_objective(cur, targets, weights, edges, new, smoothness),
        targets=targets)
    return out, report


# ---------------------------------------------------------------------------
# UV-space maps


def compute_deforming_map(base_src: Mesh, base_tgt: Mesh, resolution) -> RasterMap:
    """Per-pixel 3D offset (mm) from ``base_src`` to ``base_tgt``."""
    if base_src.uv is None:
        raise ValidationError("source mesh has no UV coordinates")
    if not base_src.same_topology(base_tgt):
        raise ValidationError("source and target must share topology")
    raster = rasterize_uv(base_src, resolution)
    return RasterMap(raster.interpolate(base_tgt.vertices - base_src.vertices))


@dataclass
class BakeReport:
    chart_pixels: int
    valid_pixels: int

    @property
    def coverage(self):
        return self.valid_pixels / self.chart_pixels if self.chart_pixels else 0.0


def bake_displacement(base: Mesh, raw_scan: Mesh, resolution, max_offset=10.0,
                      return_report=False, bvh: BVH = None):
    """Signed distance (mm) along the base normal to ``raw_scan`` for every UV pixel.

    Each pixel's base surface point casts a line along the interpolated vertex
    normal; the intersection with the smallest ``|t|`` inside
    ``[-max_offset, max_offset]`` wins. Pixels without an intersection, or
    outside the UV chart, are NaN.
    """
    if base.uv is None:
        raise ValidationError("base mesh has no UV coordinates")
    if not max_offset > 0:
        raise ValidationError("max_offset must be positive")
    if raw_scan.n_vertices == 0 or raw_scan.n_faces == 0:
        raise ValidationError("raw scan is empty")
    raster = rasterize_uv(base, resolution)
    cov = raster.covered
    normals = vertex_normals(base.vertices, base.faces)
    pos = raster.interpolate(base.vertices)[cov]
    nrm = raster.interpolate(normals)[cov]
    nrm /= np.maximum(np.linalg.norm(nrm, axis=1, keepdims=True), 1e-300)
    bvh = bvh or BVH.from_mesh(raw_scan)
    hits = bvh.intersect(pos, nrm, tmin=-max_offset, tmax=max_offset, nearest_abs=True)
    out = np.full(raster.shape + (1,), np.nan)
    out[cov, 0] = np.where(hits.hit, hits.t, np.nan)
    disp = RasterMap(out)
    if return_report:
        return disp, BakeReport(int(cov.sum()), int(hits.hit.sum()))
    return disp


def apply_displacement(base: Mesh, disp: RasterMap, subdivision_level=0) -> Mesh:
    """Subdivide ``base`` and push every vertex along its normal by the sampled offset.

    Normals are the base vertex normals carried through subdivision by linear
    interpolation and renormalised, matching the normals used when baking.
    Offsets come from bilinear sampling; invalid samples give zero offset.
    """
    if base.uv is None:
        raise ValidationError("base mesh has no UV coordinates")
    if subdivision_level < 0:
        raise ValidationError("subdivision level must be non-negative")
    normals = vertex_normals(base.vertices, base.faces)
    v, f, (uv, nrm) = subdivide(base.vertices, base.faces, [base.uv, normals],
                                levels=int(subdivision_level))
    nrm /= np.maximum(np.linalg.norm(nrm, axis=1, keepdims=True), 1e-300)
    x, y = uv_to_pixel(uv, disp.width, disp.height)
    d = bilinear_sample(disp.data[:, :, :1], x, y)[:, 0]
    d = np.where(np.isfinite(d), d, 0.0)
    return Mesh(v + d[:, None] * nrm, f, uv)


def subdivided_base(base: Mesh, subdivision_level=0) -> Mesh:
    v, f, (uv,) = subdivide(base.vertices, base.faces, [base.uv], levels=subdivision_level)
    return Mesh(v, f, uv)


def two_layer_size(base: Mesh, disp: RasterMap) -> int:
    """Bytes needed for the base as binary PLY plus the float map."""
    from .io import write_float_map, write_mesh

    return len(write_mesh(base, "ply")) + len(write_float_map(disp))
