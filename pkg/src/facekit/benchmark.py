"""Single-view reconstruction benchmark: depth-only alignment, cylindrical resampling, metrics.

Per sample the prediction is moved along the camera depth axis only (no ICP),
both meshes are resampled over a cylinder around the ground-truth head axis,
and three scores are computed from the resulting position/normal maps:

* CD  -- chamfer distance, ``mean_p min_g |p-g| + mean_g min_p |g-p|`` (mm)
* MNE -- mean normal error, ``mean(1 - cos)`` over jointly valid pixels
* CR  -- complete rate, jointly valid pixels / ground-truth valid pixels
"""

from __future__ import annotations

import csv
import io as _io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .camera import WEAK, CameraParams
from .errors import AlignmentError, FacekitError, ValidationError
from .io import FOCAL_BUCKETS, POSE_BUCKETS, BenchmarkManifest, load_mesh
from .mesh import Mesh, RasterMap, vertex_normals
from .raycast import BVH

log = logging.getLogger(__name__)


@dataclass
class CylindricalConfig:
    theta_resolution: int = 512
    height_resolution: int = 512
    max_edge_mm: float = 15.0
    padding: float = 0.05        # fraction of the GT height extent added to the range
    up: Optional[tuple] = None   # overhead direction; +Y when None

    def __post_init__(self):
        if self.theta_resolution <= 0 or self.height_resolution <= 0:
            raise ValidationError("cylindrical resolutions must be positive")
        if not self.max_edge_mm > 0:
            raise ValidationError("max_edge_mm must be positive")
        if self.padding < 0:
            raise ValidationError("padding must be non-negative")


@dataclass
class CylinderAxis:
    origin: np.ndarray     # a point on the axis (GT vertex barycentre)
    up: np.ndarray
    ref: np.ndarray        # direction of theta = 0, orthogonal to up
    h_min: float
    h_max: float

    @property
    def side(self):
        return np.cross(self.up, self.ref)


def cylinder_axis(mesh: Mesh, config: CylindricalConfig = None, up=None) -> CylinderAxis:
    """Axis through the vertex barycentre along ``up`` with the padded height range."""
    config = config or CylindricalConfig()
    if mesh.n_vertices == 0:
        raise ValidationError("mesh is empty")
    up = np.asarray(up if up is not None else (config.up or (0.0, 1.0, 0.0)), dtype=np.float64)
    if not np.linalg.norm(up) > 0:
        raise ValidationError("up direction is zero")
    up = up / np.linalg.norm(up)
    origin = mesh.vertices.mean(0)
    h = (mesh.vertices - origin) @ up
    lo, hi = float(h.min()), float(h.max())
    extent = hi - lo
    if not extent > 0:
        raise ValidationError("mesh has zero extent along the cylinder axis")
    pad = 0.5 * config.padding * extent
    ref = np.array([0.0, 0.0, 1.0]) - up[2] * up
    if np.linalg.norm(ref) < 1e-6:
        ref = np.array([1.0, 0.0, 0.0]) - up[0] * up
    ref /= np.linalg.norm(ref)
    return CylinderAxis(origin, up, ref, lo - pad, hi + pad)


def _long_edge_faces(vertices, faces, max_edge):
    v = vertices[faces]
    e = np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 1], v[:, 0] - v[:, 2]], 1)
    return (np.linalg.norm(e, axis=2) > max_edge).any(1)


def cylindrical_rays(axis: CylinderAxis, config: CylindricalConfig):
    """Origins and directions for every (row, column); row 0 is the top."""
    w, hres = config.theta_resolution, config.height_resolution
    theta = 2 * np.pi * (np.arange(w) + 0.5) / w
    step = (axis.h_max - axis.h_min) / hres
    heights = axis.h_max - (np.arange(hres) + 0.5) * step
    dirs = np.cos(theta)[:, None] * axis.ref + np.sin(theta)[:, None] * axis.side   # (W, 3)
    origins = axis.origin + heights[:, None] * axis.up                             # (H, 3)
    o = np.repeat(origins, w, axis=0)
    d = np.tile(dirs, (hres, 1))
    return o, d, heights


def cylindrical_resample(mesh: Mesh, config: CylindricalConfig = None, axis: CylinderAxis = None):
    """Position and unit-normal maps ``(H, W, 3)`` over the cylinder; misses are NaN.

    Faces with an edge longer than ``config.max_edge_mm`` are dropped before
    casting. ``axis`` defaults to the mesh's own axis; pass the ground
    truth's axis when resampling a prediction.
    """
    config = config or CylindricalConfig()
    if mesh.n_vertices == 0 or mesh.n_faces == 0:
        raise ValidationError("cannot resample an empty mesh")
    axis = axis or cylinder_axis(mesh, config)
    faces = mesh.faces[~_long_edge_faces(mesh.vertices, mesh.faces, config.max_edge_mm)]
    shape = (config.height_resolution, config.theta_resolution, 3)
    if len(faces) == 0:
        nan = np.full(shape, np.nan)
        return RasterMap(nan), RasterMap(nan.copy())
    bvh = BVH(mesh.vertices, faces)
    o, d, _ = cylindrical_rays(axis, config)
    hits = bvh.intersect(o, d, tmin=0.0)
    pos = np.where(hits.hit[:, None], o + hits.t[:, None] * d, np.nan)
    normals = vertex_normals(mesh.vertices, faces)
    n = bvh.interpolate(normals, hits.face, hits.bary)
    with np.errstate(invalid="ignore"):
        n /= np.linalg.norm(n, axis=1, keepdims=True)
    return RasterMap(pos.reshape(shape)), RasterMap(n.reshape(shape))


# ---------------------------------------------------------------------------
# metrics


def _points(x):
    if isinstance(x, Mesh):
        return x.vertices
    if isinstance(x, RasterMap):
        return x.data[x.valid_mask]
    return np.asarray(x, dtype=np.float64).reshape(-1, 3)


def chamfer_distance(pred, gt, halve=False) -> float:
    """Sum of the two mean nearest-neighbour distances (mm).

    Accepts meshes (their vertices), position maps (their valid pixels) or
    point arrays. ``halve`` divides by two for benchmarks that use the
    averaged convention.
    """
    p, g = _points(pred), _points(gt)
    if len(p) == 0 or len(g) == 0:
        raise ValidationError("chamfer distance needs two non-empty point sets")
    d_pg, _ = cKDTree(g).query(p)
    d_gp, _ = cKDTree(p).query(g)
    cd = math.fsum(d_pg) / len(p) + math.fsum(d_gp) / len(g)
    return 0.5 * cd if halve else cd


def chamfer_distance_bruteforce(pred, gt) -> float:
    p, g = _points(pred), _points(gt)
    d = np.sqrt(((p[:, None, :] - g[None, :, :]) ** 2).sum(-1))
    return math.fsum(d.min(1)) / len(p) + math.fsum(d.min(0)) / len(g)


def _joint(a: RasterMap, b: RasterMap):
    if a.data.shape != b.data.shape:
        raise ValidationError(f"map shapes differ: {a.data.shape} vs {b.data.shape}")
    return a.valid_mask & b.valid_mask


def mean_normal_error(n_pred: RasterMap, n_gt: RasterMap) -> float:
    """Mean of ``1 - cos`` between normals over jointly valid pixels; in [0, 2]."""
    joint = _joint(n_pred, n_gt)
    if not joint.any():
        raise ValidationError("normal maps have no jointly valid pixel")
    x, y = n_pred.data[joint], n_gt.data[joint]
    cos = (x * y).sum(1) / (np.linalg.norm(x, axis=1) * np.linalg.norm(y, axis=1))
    return math.fsum(1.0 - np.clip(cos, -1.0, 1.0)) / len(cos)


def complete_rate(p_pred: RasterMap, p_gt: RasterMap) -> float:
    joint = _joint(p_pred, p_gt)
    n_gt = int(p_gt.valid_mask.sum())
    if n_gt == 0:
        raise ValidationError("ground-truth map has no valid pixel")
    return int(joint.sum()) / n_gt


# ---------------------------------------------------------------------------
# depth alignment


def _depth_rays(camera: CameraParams, gt_cam, resolution):
    if camera.mode == WEAK:
        lo, hi = gt_cam[:, :2].min(0), gt_cam[:, :2].max(0)
        xs = np.linspace(lo[0], hi[0], resolution)
        ys = np.linspace(lo[1], hi[1], resolution)
        gx, gy = np.meshgrid(xs, ys)
        z0 = gt_cam[:, 2].min() - 1.0
        o = np.c_[gx.ravel(), gy.ravel(), np.full(gx.size, z0)]
        d = np.array([[0.0, 0.0, 1.0]])
        return o, d, z0
    front = gt_cam[:, 2] > 0
    if not front.any():
        raise AlignmentError("ground truth lies behind the camera")
    uv = gt_cam[front, :2] / gt_cam[front, 2:3]          # normalised image coordinates
    lo, hi = uv.min(0), uv.max(0)
    xs = np.linspace(lo[0], hi[0], resolution)
    ys = np.linspace(lo[1], hi[1], resolution)
    gx, gy = np.meshgrid(xs, ys)
    d = np.c_[gx.ravel(), gy.ravel(), np.ones(gx.size)]
    return np.zeros_like(d), d, 0.0


def depth_render(mesh_cam: Mesh, origins, dirs, z0):
    hits = BVH.from_mesh(mesh_cam).intersect(origins, dirs, tmin=0.0)
    depth = z0 + hits.t if dirs.shape[0] == 1 else hits.t   # dirs have unit z component
    return np.where(hits.hit, depth, np.nan)


def depth_offset(pred_cam: Mesh, gt_cam: Mesh, camera: CameraParams, resolution=512,
                 max_iter=20, tol=1e-6) -> float:
    """Camera-z offset that moves ``pred_cam`` onto ``gt_cam``.

    Each step takes the median of per-pixel ``depth_gt - depth_pred`` over the
    GT image-space bbox. Orthographic rays make one step exact; under
    perspective the rays diverge, so the step is repeated on the shifted
    prediction until it falls below ``tol``.
    """
    if pred_cam.n_faces == 0 or gt_cam.n_faces == 0:
        raise AlignmentError("cannot render an empty mesh")
    o, d, z0 = _depth_rays(camera, gt_cam.vertices, resolution)
    dg = depth_render(gt_cam, o, d, z0)
    total = 0.0
    for _ in range(1 if camera.mode == WEAK else max_iter):
        moved = pred_cam.replace(vertices=pred_cam.vertices + np.array([0.0, 0.0, total]))
        dp = depth_render(moved, o, d, z0)
        joint = np.isfinite(dg) & np.isfinite(dp)
        if not joint.any():
            raise AlignmentError("prediction and ground truth do not overlap in the depth renderings")
        step = float(np.median(dg[joint] - dp[joint]))
        total += step
        if abs(step) < tol:
            break
    return total


def align_depth(pred: Mesh, gt: Mesh, camera: CameraParams, resolution=512,
                return_offset=False):
    """Translate camera-frame ``pred`` along the camera z axis onto camera-frame ``gt``."""
    off = depth_offset(pred, gt, camera, resolution)
    out = pred.replace(vertices=pred.vertices + np.array([0.0, 0.0, off]))
    return (out, off) if return_offset else out


# ---------------------------------------------------------------------------
# benchmark driver


@dataclass
class BenchmarkConfig:
    cylindrical: CylindricalConfig = field(default_factory=CylindricalConfig)
    depth_resolution: int = 512
    halve_chamfer: bool = False
    threads: int = 1

    def __post_init__(self):
        if isinstance(self.cylindrical, dict):
            self.cylindrical = CylindricalConfig(**self.cylindrical)
        if self.depth_resolution <= 0 or self.threads < 1:
            raise ValidationError("depth_resolution and threads must be positive")


@dataclass
class SampleScore:
    sample_id: str
    pose_bucket: str
    focal_bucket: Optional[str]
    success: bool
    cd: Optional[float] = None
    mne: Optional[float] = None
    cr: Optional[float] = None
    depth_offset: Optional[float] = None
    error: Optional[str] = None


@dataclass
class BucketStats:
    n_samples: int
    n_success: int
    cd: Optional[float]
    mne: Optional[float]
    cr: Optional[float]

    @property
    def success_rate(self):
        return 100.0 * self.n_success / self.n_samples if self.n_samples else 0.0


def _bucket(scores):
    ok = [s for s in scores if s.success]
    if not ok:
        return BucketStats(len(scores), 0, None, None, None)
    mean = lambda xs: math.fsum(xs) / len(xs)  # noqa: E731
    return BucketStats(len(scores), len(ok), mean([s.cd for s in ok]), mean([s.mne for s in ok]),
                       mean([s.cr for s in ok]))


@dataclass
class BenchmarkReport:
    samples: list
    pose_buckets: dict
    focal_buckets: dict
    overall: BucketStats
    config: dict = field(default_factory=dict)

    @property
    def success_rate(self):
        return self.overall.success_rate

    @classmethod
    def from_scores(cls, scores, config=None):
        pose = {b: _bucket([s for s in scores if s.pose_bucket == b])
                for b in POSE_BUCKETS if any(s.pose_bucket == b for s in scores)}
        focal = {b: _bucket([s for s in scores if s.focal_bucket == b])
                 for b in FOCAL_BUCKETS if any(s.focal_bucket == b for s in scores)}
        return cls(list(scores), pose, focal, _bucket(scores), config or {})

    def to_dict(self):
        def stats(b):
            d = asdict(b)
            d["success_rate"] = b.success_rate
            return d
        return {"samples": [asdict(s) for s in self.samples],
                "pose_buckets": {k: stats(v) for k, v in self.pose_buckets.items()},
                "focal_buckets": {k: stats(v) for k, v in self.focal_buckets.items()},
                "overall": stats(self.overall), "success_rate": self.success_rate,
                "config": self.config}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d):
        def stats(x):
            return BucketStats(x["n_samples"], x["n_success"], x["cd"], x["mne"], x["cr"])
        return cls([SampleScore(**s) for s in d["samples"]],
                   {k: stats(v) for k, v in d["pose_buckets"].items()},
                   {k: stats(v) for k, v in d["focal_buckets"].items()},
                   stats(d["overall"]), d.get("config", {}))


def evaluate_sample(entry, config: BenchmarkConfig) -> SampleScore:
    """Score one manifest entry; prediction problems become a failed score."""
    gt = load_mesh(entry.gt_mesh_path)           # GT failures are hard errors
    score = SampleScore(entry.sample_id, entry.pose_bucket, entry.focal_bucket, False)
    try:
        pred = load_mesh(entry.prediction_path)
    except (OSError, FacekitError) as exc:
        score.error = f"prediction unavailable: {exc}"
        return score
    cam = entry.camera
    try:
        gt_c = gt.replace(vertices=cam.to_camera_frame(gt.vertices))
        pred_c = pred.replace(vertices=cam.to_camera_frame(pred.vertices))
        aligned, off = align_depth(pred_c, gt_c, cam, config.depth_resolution, return_offset=True)
        pred_m = pred.replace(vertices=cam.from_camera_frame(aligned.vertices))
        axis = cylinder_axis(gt, config.cylindrical, entry.up)
        p_g, n_g = cylindrical_resample(gt, config.cylindrical, axis)
        p_p, n_p = cylindrical_resample(pred_m, config.cylindrical, axis)
        score.cd = chamfer_distance(p_p, p_g, config.halve_chamfer)
        score.mne = mean_normal_error(n_p, n_g)
        score.cr = complete_rate(p_p, p_g)
        score.depth_offset = off
        score.success = True
    except (AlignmentError, ValidationError) as exc:
        score.cd = score.mne = score.cr = None
        score.error = str(exc)
    return score


def run_benchmark(manifest: BenchmarkManifest, config: BenchmarkConfig = None) -> BenchmarkReport:
    """Evaluate every entry (in parallel when ``config.threads > 1``) and aggregate."""
    config = config or BenchmarkConfig()
    if config.threads > 1:
        with ThreadPoolExecutor(config.threads) as pool:
            scores = list(pool.map(lambda e: evaluate_sample(e, config), manifest.entries))
    else:
        scores = [evaluate_sample(e, config) for e in manifest.entries]
    for s in scores:
        if not s.success:
            log.warning("sample %s failed: %s", s.sample_id, s.error)
    cfg = asdict(config)
    cfg.pop("threads")
    return BenchmarkReport.from_scores(scores, cfg)


# ---------------------------------------------------------------------------
# tables

_COLUMNS = ("bucket", "n", "CD", "MNE", "CR", "success_rate")


def _rows(report: BenchmarkReport):
    rows = []
    for group, buckets in (("pose", report.pose_buckets), ("focal", report.focal_buckets)):
        for name, b in buckets.items():
            rows.append((f"{group}:{name}", b))
    rows.append(("overall", report.overall))
    return rows


def _fmt(x, digits):
    return "null" if x is None else f"{x:.{digits}f}"


def report_csv(report: BenchmarkReport) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_COLUMNS)
    for name, b in _rows(report):
        w.writerow([name, b.n_samples, _fmt(b.cd, 6), _fmt(b.mne, 6), _fmt(b.cr, 6),
                    f"{b.success_rate:.2f}"])
    return buf.getvalue()


def report_markdown(report: BenchmarkReport) -> str:
    lines = ["| " + " | ".join(_COLUMNS) + " |", "|" + "---|" * len(_COLUMNS)]
    for name, b in _rows(report):
        lines.append(f"| {name} | {b.n_samples} | {_fmt(b.cd, 3)} | {_fmt(b.mne, 3)} | "
                     f"{_fmt(b.cr, 3)} | {b.success_rate:.1f} |")
    return "\n".join(lines) + "\n"
