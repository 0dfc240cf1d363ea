"""Single-image fitting of the bilinear model: landmarks, optional photometric term, priors.

The total objective is

    E = E_lan + lambda_pixel * E_pixel + lambda_id * E_id + lambda_exp * E_exp
        + lambda_alb * E_alb

with ``E_lan`` the mean squared landmark distance (px^2), ``E_pixel`` the mean
squared colour difference over visible vertices, and Gaussian priors
``(w - mu)^T Sigma^-1 (w - mu)`` on each coefficient block.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from . import _kernels
from .camera import WEAK, CameraParams, project, projection_jacobians, quat_matrix_jacobian
from .errors import DegenerateLandmarksError, ValidationError
from .mesh import face_normals
from .morphable import BilinearModel, BlendshapeSet, generate_blendshapes
from .shading import N_SH, AlbedoBasis, ambient_sh, sh_basis, sh_basis_gradient

log = logging.getLogger(__name__)

CANONICAL_ROTATION = np.array([0.0, 1.0, 0.0, 0.0])  # 180 deg about x: model +z faces the camera


# ---------------------------------------------------------------------------
# energies


@dataclass
class EnergyGradient:
    w_id: np.ndarray
    w_exp: np.ndarray
    camera: np.ndarray
    w_alb: Optional[np.ndarray] = None
    sh: Optional[np.ndarray] = None


def e_regularizers(w, prior_mean, prior_inv_cov=None):
    """``(w - mu)^T Sigma^-1 (w - mu)`` and its gradient; identity ``Sigma`` if omitted."""
    w = np.asarray(w, dtype=np.float64).ravel()
    d = w - np.asarray(prior_mean, dtype=np.float64).ravel()
    if prior_inv_cov is None:
        return float(d @ d), 2 * d
    P = np.asarray(prior_inv_cov, dtype=np.float64)
    if P.shape != (d.size, d.size):
        raise ValidationError(f"inverse covariance must be {d.size}x{d.size}, got {P.shape}")
    Pd = P @ d
    return float(d @ Pd), 2 * Pd


def _landmark_rows(idx):
    return (3 * np.asarray(idx)[:, None] + np.arange(3)).ravel()


def landmark_residuals(model, w_id, w_exp, camera, landmarks2d, landmark_indices, jacobian=True):
    """Pixel residuals ``(L, 2)`` and the Jacobian blocks w.r.t. id, exp and camera."""
    idx = np.asarray(landmark_indices, dtype=np.int64)
    rows = _landmark_rows(idx)
    slab = model.identity_slice(w_id, rows)                 # (3L, re)
    pts = (slab @ w_exp).reshape(-1, 3)
    if not jacobian:
        return project(camera, pts) - landmarks2d, None
    uv, J_p, J_c = projection_jacobians(camera, pts)
    L = len(idx)
    J_exp = np.einsum("lij,ljk->lik", J_p, slab.reshape(L, 3, -1))
    J_id = np.einsum("lij,ljk->lik", J_p, model.expression_slice(w_exp, rows).reshape(L, 3, -1))
    return uv - landmarks2d, (J_id, J_exp, J_c)


def e_landmark(model: BilinearModel, w_id, w_exp, camera: CameraParams, landmarks2d,
               landmark_indices):
    """Mean squared landmark distance (px^2) and its analytic gradient."""
    lm = np.asarray(landmarks2d, dtype=np.float64).reshape(-1, 2)
    idx = np.asarray(landmark_indices, dtype=np.int64).ravel()
    if len(idx) == 0:
        raise ValidationError("landmark set is empty")
    if len(idx) != len(lm):
        raise ValidationError(f"{len(idx)} landmark indices but {len(lm)} 2D landmarks")
    w_id = np.asarray(w_id, dtype=np.float64)
    w_exp = np.asarray(w_exp, dtype=np.float64)
    r, (J_id, J_exp, J_c) = landmark_residuals(model, w_id, w_exp, camera, lm, idx)
    L = len(idx)
    scale = 2.0 / L
    grad = EnergyGradient(scale * np.einsum("li,lik->k", r, J_id),
                          scale * np.einsum("li,lik->k", r, J_exp),
                          scale * np.einsum("li,lik->k", r, J_c))
    return float((r ** 2).sum() / L), grad


# -- photometric term --------------------------------------------------------


_KEYS_A = -0.5


def _keys(s):
    s = np.abs(s)
    a = _KEYS_A
    return np.where(s <= 1, (a + 2) * s ** 3 - (a + 3) * s ** 2 + 1,
                    np.where(s < 2, a * s ** 3 - 5 * a * s ** 2 + 8 * a * s - 4 * a, 0.0))


def _keys_deriv(s):
    sg = np.sign(s)
    s = np.abs(s)
    a = _KEYS_A
    return sg * np.where(s <= 1, 3 * (a + 2) * s ** 2 - 2 * (a + 3) * s,
                         np.where(s < 2, 3 * a * s ** 2 - 10 * a * s + 8 * a, 0.0))


def sample_image(image, x, y, gradient=False):
    """Bicubic (Keys, a = -0.5) samples ``(N, C)`` at pixel coordinates, centres at integers.

    The interpolant is C1, so the photometric energy has continuous
    gradients. With ``gradient`` also returns ``d/dx`` and ``d/dy``.
    """
    h, w, _ = image.shape
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    tx, ty = x - x0, y - y0
    offs = np.arange(-1, 3)
    wx = _keys(tx[:, None] - offs)               # (N, 4)
    wy = _keys(ty[:, None] - offs)
    xi = np.clip(x0[:, None] + offs, 0, w - 1)
    yi = np.clip(y0[:, None] + offs, 0, h - 1)
    patch = image[yi[:, :, None], xi[:, None, :]]    # (N, 4, 4, C)
    val = np.einsum("ni,nj,nijc->nc", wy, wx, patch)
    if not gradient:
        return val
    dwx = _keys_deriv(tx[:, None] - offs)
    dwy = _keys_deriv(ty[:, None] - offs)
    gx = np.einsum("ni,nj,nijc->nc", wy, dwx, patch)
    gy = np.einsum("ni,nj,nijc->nc", dwy, wx, patch)
    return val, gx, gy


def _normals_raw(vertices, faces):
    fn = face_normals(vertices, faces, normalize=False)
    acc = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(acc, faces[:, k], fn)
    return acc, fn


def _camera_depth(camera, pts):
    c = camera.to_camera_frame(pts)
    return c[:, 2]


def compute_visibility(model, w_id, w_exp, camera, image_shape, depth_eps=1.0):
    """Vertices that face the camera, project inside the image and win the z-test.

    The z-buffer keeps the nearest depth per (rounded) pixel; a vertex is
    visible when its depth is within ``depth_eps`` mm of that minimum.
    """
    h, w = image_shape[:2]
    verts = model.vertices(w_id, w_exp).reshape(-1, 3)
    raw, _ = _normals_raw(verts, model.faces)
    n_cam = raw @ camera.R.T
    uv, ok = project(camera, verts, return_valid=True)
    with np.errstate(invalid="ignore"):
        inside = ok & (uv[:, 0] >= 0) & (uv[:, 0] <= w - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= h - 1)
    front = n_cam[:, 2] < 0
    cand = inside & front
    depth = _camera_depth(camera, verts)
    ix = np.where(cand, np.rint(np.nan_to_num(uv[:, 0])), -1).astype(np.int64)
    iy = np.where(cand, np.rint(np.nan_to_num(uv[:, 1])), -1).astype(np.int64)
    zbuf = _kernels.zbuffer_min(ix, iy, np.where(cand, depth, np.inf), w, h)
    vis = cand.copy()
    vis[cand] = depth[cand] <= zbuf[iy[cand], ix[cand]] + depth_eps
    return vis


def vertex_colors(model, w_id, w_exp, camera, albedo: AlbedoBasis, w_alb, sh):
    """Lambertian SH-shaded per-vertex colours ``(N, 3)`` and projections ``(N, 2)``."""
    verts = model.vertices(w_id, w_exp).reshape(-1, 3)
    raw, _ = _normals_raw(verts, model.faces)
    length = np.linalg.norm(raw, axis=1, keepdims=True)
    n = raw / np.where(length > 0, length, 1.0)
    shade = sh_basis(n @ camera.R.T) @ sh
    return albedo.colors(w_alb) * shade, project(camera, verts)


def render_splat(model, w_id, w_exp, camera, albedo, w_alb, sh, image_shape, visibility=None,
                 background=0.0):
    """Vertex-splat rendering: each visible vertex paints the 4x4 pixel footprint read by
    :func:`sample_image` at its projection, far vertices first. Where footprints
    do not overlap, sampling the result reproduces the vertex colours exactly."""
    h, w = image_shape[:2]
    if visibility is None:
        visibility = compute_visibility(model, w_id, w_exp, camera, (h, w))
    colors, uv = vertex_colors(model, w_id, w_exp, camera, albedo, w_alb, sh)
    depth = _camera_depth(camera, model.vertices(w_id, w_exp).reshape(-1, 3))
    img = np.full((h, w, 3), float(background))
    idx = np.flatnonzero(visibility)
    idx = idx[np.argsort(-depth[idx], kind="stable")]
    x0 = np.floor(uv[idx, 0]).astype(np.int64)
    y0 = np.floor(uv[idx, 1]).astype(np.int64)
    for dy in range(-1, 3):
        for dx in range(-1, 3):
            img[np.clip(y0 + dy, 0, h - 1), np.clip(x0 + dx, 0, w - 1)] = colors[idx]
    return img


def e_pixel(model: BilinearModel, w_id, w_exp, camera: CameraParams, image, albedo: AlbedoBasis,
            w_alb, sh, visibility=None, depth_eps=1.0):
    """Mean squared colour difference over visible vertices and its gradient.

    ``visibility`` freezes the visible set (as used within one optimisation
    step); by default it is recomputed from the current state.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValidationError("image must be (H, W, 3)")
    w_id = np.asarray(w_id, dtype=np.float64)
    w_exp = np.asarray(w_exp, dtype=np.float64)
    w_alb = np.asarray(w_alb, dtype=np.float64)
    sh = np.asarray(sh, dtype=np.float64).reshape(N_SH, 3)
    if visibility is None:
        visibility = compute_visibility(model, w_id, w_exp, camera, image.shape, depth_eps)
    vis = np.asarray(visibility, bool)
    slab = model.identity_slice(w_id)
    verts = (slab @ w_exp).reshape(-1, 3)
    faces = model.faces
    R = camera.R
    raw, fn = _normals_raw(verts, faces)
    length = np.linalg.norm(raw, axis=1, keepdims=True)
    length = np.where(length > 0, length, 1.0)
    n = raw / length
    n_cam = n @ R.T
    Y = sh_basis(n_cam)
    shade = Y @ sh
    alb = albedo.colors(w_alb)
    color = alb * shade
    uv, J_p, J_c = projection_jacobians(camera, verts)
    m = int(vis.sum())
    zero = EnergyGradient(np.zeros_like(w_id), np.zeros_like(w_exp), np.zeros(camera.n_params),
                          np.zeros_like(w_alb), np.zeros_like(sh))
    if m == 0:
        return 0.0, zero
    sample, gx, gy = sample_image(image, uv[vis, 0], uv[vis, 1], gradient=True)
    r = color[vis] - sample
    value = float((r ** 2).sum() / (3 * m))
    g_col = np.zeros_like(color)
    g_col[vis] = 2 * r / (3 * m)

    g_alb = np.einsum("nc,nck->k", g_col * shade, albedo.basis.reshape(-1, 3, albedo.rank))
    g_sh = np.einsum("nc,nk->kc", g_col * alb, Y)
    # shading -> camera-frame normals -> rotation and unit normals
    dY = sh_basis_gradient(n_cam)                               # (N, 9, 3)
    g_ncam = np.einsum("nc,kc,nkj->nj", g_col * alb, sh, dY)
    g_R = g_ncam.T @ n                                         # d/dR of n_cam = R n
    g_n = g_ncam @ R
    g_raw = (g_n - n * (n * g_n).sum(1, keepdims=True)) / length
    # raw vertex normal = sum of incident face cross products
    g_face = g_raw[faces[:, 0]] + g_raw[faces[:, 1]] + g_raw[faces[:, 2]]
    v0, v1, v2 = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    e1, e2 = v1 - v0, v2 - v0
    g_e1 = np.cross(e2, g_face)
    g_e2 = np.cross(g_face, e1)
    g_v = np.zeros_like(verts)
    np.add.at(g_v, faces[:, 1], g_e1)
    np.add.at(g_v, faces[:, 2], g_e2)
    np.add.at(g_v, faces[:, 0], -(g_e1 + g_e2))
    # image sampling -> projections
    g_uv = np.zeros((len(verts), 2))
    g_uv[vis, 0] = -(g_col[vis] * gx).sum(1)
    g_uv[vis, 1] = -(g_col[vis] * gy).sum(1)
    g_v += np.einsum("ni,nij->nj", g_uv, J_p)
    g_cam = np.einsum("ni,nik->k", g_uv, J_c)
    g_cam[:4] += np.einsum("kij,ij->k", quat_matrix_jacobian(camera.rotation), g_R)
    gv = g_v.ravel()
    grad = EnergyGradient(model.expression_slice(w_exp).T @ gv, slab.T @ gv, g_cam, g_alb, g_sh)
    return value, grad


# ---------------------------------------------------------------------------
# configuration and result


@dataclass
class FitConfig:
    """Objective weights, priors and optimiser limits.

    Prior means default to the mean training identity and the neutral
    expression row; ``None`` inverse covariances mean identity.
    """

    lambda_pixel: float = 0.0
    lambda_id: float = 1e-3
    lambda_exp: float = 1e-3
    lambda_alb: float = 1e-3
    id_mean: Optional[np.ndarray] = None
    id_inv_cov: Optional[np.ndarray] = None
    exp_mean: Optional[np.ndarray] = None
    exp_inv_cov: Optional[np.ndarray] = None
    alb_mean: Optional[np.ndarray] = None
    alb_inv_cov: Optional[np.ndarray] = None
    max_iterations: int = 100
    alternations: int = 5
    landmark_only: bool = False
    sh_coefficients: Optional[np.ndarray] = None
    camera_mode: str = WEAK
    focal_length: Optional[float] = None
    principal_point: tuple = (0.0, 0.0)
    tol: float = 1e-12
    pixel_rounds: int = 3
    depth_eps: float = 1.0

    def __post_init__(self):
        for name in ("lambda_pixel", "lambda_id", "lambda_exp", "lambda_alb"):
            if not getattr(self, name) >= 0:
                raise ValidationError(f"{name} must be non-negative")
        for name in ("id_inv_cov", "exp_inv_cov", "alb_inv_cov"):
            P = getattr(self, name)
            if P is None:
                continue
            P = np.asarray(P, dtype=np.float64)
            if P.ndim != 2 or P.shape[0] != P.shape[1] or not np.allclose(P, P.T, atol=1e-10):
                raise ValidationError(f"{name} must be a symmetric square matrix")
            if np.linalg.eigvalsh(P).min() < -1e-10 * max(1.0, np.abs(P).max()):
                raise ValidationError(f"{name} must be positive semi-definite")
            setattr(self, name, P)
        if self.max_iterations < 1:
            raise ValidationError("max_iterations must be positive")
        if self.sh_coefficients is not None:
            self.sh_coefficients = np.asarray(self.sh_coefficients, dtype=np.float64).reshape(N_SH, 3)


@dataclass
class FittedFace:
    w_id: np.ndarray
    w_exp: np.ndarray
    camera: CameraParams
    w_alb: Optional[np.ndarray] = None
    sh: Optional[np.ndarray] = None
    residuals: dict = field(default_factory=dict)
    converged: bool = True
    iterations: int = 0
    objective_history: list = field(default_factory=list)

    def to_dict(self):
        d = {"w_id": self.w_id.tolist(), "w_exp": self.w_exp.tolist(),
             "camera": self.camera.to_dict(), "residuals": dict(self.residuals),
             "converged": bool(self.converged), "iterations": int(self.iterations),
             "objective_history": [float(x) for x in self.objective_history]}
        if self.w_alb is not None:
            d["w_alb"] = self.w_alb.tolist()
        if self.sh is not None:
            d["sh"] = self.sh.tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["w_id"], float), np.asarray(d["w_exp"], float),
                   CameraParams.from_dict(d["camera"]),
                   None if d.get("w_alb") is None else np.asarray(d["w_alb"], float),
                   None if d.get("sh") is None else np.asarray(d["sh"], float),
                   d.get("residuals", {}), d.get("converged", True), d.get("iterations", 0),
                   d.get("objective_history", []))

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# optimisation


def _sqrt_psd(P, n):
    if P is None:
        return np.eye(n)
    vals, vecs = np.linalg.eigh(P)
    return (vecs * np.sqrt(np.clip(vals, 0, None))).T


class _Problem:
    """Stacked residual vector for landmarks + priors over ``x = [w_id, w_exp, camera]``."""

    def __init__(self, model, lm, idx, config, template_camera):
        self.model = model
        self.lm = lm
        self.idx = idx
        self.cfg = config
        self.cam0 = template_camera
        self.ri, self.re = model.id_rank, model.exp_rank
        self.mu_id = (model.mean_identity() if config.id_mean is None
                      else np.asarray(config.id_mean, float))
        self.mu_exp = (model.neutral_expression() if config.exp_mean is None
                       else np.asarray(config.exp_mean, float))
        if self.mu_id.size != self.ri or self.mu_exp.size != self.re:
            raise ValidationError("prior mean length does not match the model ranks")
        self.C_id = _sqrt_psd(config.id_inv_cov, self.ri)
        self.C_exp = _sqrt_psd(config.exp_inv_cov, self.re)
        self.L = len(idx)

    def split(self, x):
        ri, re = self.ri, self.re
        return x[:ri], x[ri:ri + re], self.cam0.with_vector(x[ri + re:])

    def residuals(self, x, jacobian=True):
        w_id, w_exp, cam = self.split(x)
        r, J = landmark_residuals(self.model, w_id, w_exp, cam, self.lm, self.idx, jacobian)
        s = 1.0 / np.sqrt(self.L)
        a, b = np.sqrt(self.cfg.lambda_id), np.sqrt(self.cfg.lambda_exp)
        res = np.concatenate([s * r.ravel(), a * self.C_id @ (w_id - self.mu_id),
                              b * self.C_exp @ (w_exp - self.mu_exp)])
        if not jacobian:
            return res, None
        J_id, J_exp, J_c = J
        nc = J_c.shape[2]
        top = s * np.concatenate([J_id.reshape(2 * self.L, -1), J_exp.reshape(2 * self.L, -1),
                                  J_c.reshape(2 * self.L, nc)], axis=1)
        reg_id = np.zeros((self.ri, len(x)))
        reg_id[:, :self.ri] = a * self.C_id
        reg_exp = np.zeros((self.re, len(x)))
        reg_exp[:, self.ri:self.ri + self.re] = b * self.C_exp
        return res, np.vstack([top, reg_id, reg_exp])

    def energy(self, x):
        r, _ = self.residuals(x, jacobian=False)
        return float(r @ r)


def _lm(problem, x, free, max_iter, tol, history):
    """Levenberg-Marquardt on the ``free`` coordinates; only decreasing steps are accepted.

    Returns ``(x, converged, iterations)``.
    """
    r, J = problem.residuals(x)
    E = float(r @ r)
    mu = 1e-4
    for it in range(1, max_iter + 1):
        Jf = J[:, free]
        g = Jf.T @ r
        H = Jf.T @ Jf
        d = np.diag(H).copy()
        d = np.maximum(d, 1e-12 * max(d.max(), 1e-300))
        accepted = False
        for _ in range(30):
            try:
                step = np.linalg.solve(H + mu * np.diag(d), -g)
            except np.linalg.LinAlgError:
                mu *= 10
                continue
            x_new = x.copy()
            x_new[free] += step
            r_new, J_new = problem.residuals(x_new)
            E_new = float(r_new @ r_new)
            if np.isfinite(E_new) and E_new < E:
                accepted = True
                break
            mu *= 4
        if not accepted:
            return x, True, it
        decrease = E - E_new
        x, r, J, E = x_new, r_new, J_new, E_new
        history.append(E)
        mu = max(mu / 3, 1e-12)
        if (decrease <= tol * max(E + decrease, 1e-300) or E <= 1e-24
                or np.abs(step).max() <= 1e-14 * (np.abs(x[free]).max() + 1e-14)):
            return x, True, it
    return x, False, max_iter


def _initial_camera(model, lm, idx, config):
    """Closed-form affine camera from the mean face, projected onto a similarity."""
    pts = model.vertices(model.mean_identity(), model.neutral_expression(),
                         _landmark_rows(idx)).reshape(-1, 3)
    uniq = np.unique(idx)
    if len(uniq) < 4:
        raise DegenerateLandmarksError(f"only {len(uniq)} distinct landmark vertices; the camera "
                                       "needs 4 non-coplanar points")
    X = np.c_[pts, np.ones(len(pts))]
    sv = np.linalg.svd(pts - pts.mean(0), compute_uv=False)
    if sv[2] <= 1e-9 * sv[0]:
        raise DegenerateLandmarksError("model landmark points are coplanar: rotation out of their "
                                       "plane is unobservable (Jacobian rank deficient)")
    sv2 = np.linalg.svd(lm - lm.mean(0), compute_uv=False)
    if sv2[1] <= 1e-9 * max(sv2[0], 1e-300):
        raise DegenerateLandmarksError("2D landmarks are collinear: camera scale and rotation "
                                       "are unobservable (Jacobian rank deficient)")
    pp = np.asarray(config.principal_point, dtype=np.float64)
    sol = np.linalg.lstsq(X, lm - pp, rcond=None)[0]      # (4, 2)
    A, b = sol[:3].T, sol[3]
    u, s, vt = np.linalg.svd(A, full_matrices=False)
    R2 = u @ vt
    R = np.vstack([R2, np.cross(R2[0], R2[1])])
    scale = float(s.mean())
    from .camera import matrix_to_quat

    q = matrix_to_quat(R)
    if config.camera_mode == WEAK:
        return CameraParams(WEAK, q, scale=scale, translation=b, principal_point=pp)
    f = config.focal_length
    if f is None:
        raise ValidationError("perspective fitting needs config.focal_length")
    tz = f / scale
    c = pts @ R.T
    t = np.array([b[0] / scale, b[1] / scale, tz - c[:, 2].mean()])
    return CameraParams("perspective", q, focal_length=f, translation=t, principal_point=pp)


def fit_image(model: BilinearModel, landmarks2d, config: FitConfig = None, image=None,
              landmark_indices=None, albedo: AlbedoBasis = None) -> FittedFace:
    """Recover identity, expression and camera (and optionally albedo/lighting) from one image.

    Stages: (1) camera from the landmarks with the mean face, (2) alternating
    then joint Levenberg-Marquardt over id / exp / camera on landmarks plus
    priors, (3) if an image, an albedo basis and ``lambda_pixel > 0`` are
    given, L-BFGS on the full objective with visibility refreshed per round.
    """
    config = config or FitConfig()
    lm = np.asarray(landmarks2d, dtype=np.float64).reshape(-1, 2)
    if landmark_indices is None:
        raise ValidationError("landmark_indices are required")
    idx = np.asarray(landmark_indices, dtype=np.int64).ravel()
    if len(idx) != len(lm):
        raise ValidationError(f"{len(idx)} landmark indices but {len(lm)} 2D landmarks")
    if len(idx) < 6:
        raise ValidationError(f"need at least 6 landmarks, got {len(idx)}")
    if idx.min() < 0 or idx.max() >= model.vertex_count:
        raise ValidationError("landmark index out of range")
    if not np.isfinite(lm).all():
        raise ValidationError("2D landmarks must be finite")

    cam0 = _initial_camera(model, lm, idx, config)
    prob = _Problem(model, lm, idx, config, cam0)
    ri, re = prob.ri, prob.re
    x = np.concatenate([prob.mu_id, prob.mu_exp, cam0.to_vector()])
    n = len(x)
    history = [prob.energy(x)]
    cam_free = np.arange(ri + re, n)
    if config.camera_mode != WEAK:
        cam_free = cam_free[cam_free != ri + re + 4]   # focal length stays fixed
    id_free = np.arange(ri)
    exp_free = np.arange(ri, ri + re)
    all_free = np.concatenate([id_free, exp_free, cam_free])

    total_it = 0
    x, _, it = _lm(prob, x, cam_free, config.max_iterations, config.tol, history)
    total_it += it
    for _ in range(config.alternations):
        before = history[-1]
        for free in (id_free, exp_free, cam_free):
            x, _, it = _lm(prob, x, free, config.max_iterations, config.tol, history)
            total_it += it
        if before - history[-1] <= config.tol * max(before, 1e-300):
            break
    x, converged, it = _lm(prob, x, all_free, config.max_iterations, config.tol, history)
    total_it += it
    w_id, w_exp, cam = prob.split(x)

    fitted = FittedFace(w_id.copy(), w_exp.copy(), cam, converged=converged,
                        iterations=total_it, objective_history=history)
    use_pixel = image is not None and config.lambda_pixel > 0 and not config.landmark_only
    if image is not None and albedo is None and config.lambda_pixel > 0:
        log.warning("no albedo basis supplied; pixel term disabled")
        use_pixel = False
    if use_pixel:
        fitted = _pixel_refine(model, prob, fitted, np.asarray(image, float), albedo, config)
    r, _ = landmark_residuals(model, fitted.w_id, fitted.w_exp, fitted.camera, lm, idx, False)
    fitted.residuals["landmark_rmse_px"] = float(np.sqrt((r ** 2).sum(1).mean()))
    if not fitted.converged:
        log.warning("fit did not converge within %d iterations; returning best state",
                    config.max_iterations)
    return fitted


def total_energy(model, prob, x_full, image, albedo, config, visibility):
    """Full objective and gradient over ``[w_id, w_exp, camera, w_alb, sh]``."""
    ri, re = prob.ri, prob.re
    nc = prob.cam0.n_params
    k = albedo.rank
    w_id, w_exp = x_full[:ri], x_full[ri:ri + re]
    cam = prob.cam0.with_vector(x_full[ri + re:ri + re + nc])
    w_alb = x_full[ri + re + nc:ri + re + nc + k]
    sh = x_full[ri + re + nc + k:].reshape(N_SH, 3)
    E_l, g_l = e_landmark(model, w_id, w_exp, cam, prob.lm, prob.idx)
    E_p, g_p = e_pixel(model, w_id, w_exp, cam, image, albedo, w_alb, sh, visibility)
    E_i, g_i = e_regularizers(w_id, prob.mu_id, config.id_inv_cov)
    E_e, g_e = e_regularizers(w_exp, prob.mu_exp, config.exp_inv_cov)
    mu_alb = np.zeros(k) if config.alb_mean is None else np.asarray(config.alb_mean, float)
    E_a, g_a = e_regularizers(w_alb, mu_alb, config.alb_inv_cov)
    c = config
    E = E_l + c.lambda_pixel * E_p + c.lambda_id * E_i + c.lambda_exp * E_e + c.lambda_alb * E_a
    g = np.concatenate([
        g_l.w_id + c.lambda_pixel * g_p.w_id + c.lambda_id * g_i,
        g_l.w_exp + c.lambda_pixel * g_p.w_exp + c.lambda_exp * g_e,
        g_l.camera + c.lambda_pixel * g_p.camera,
        c.lambda_pixel * g_p.w_alb + c.lambda_alb * g_a,
        c.lambda_pixel * g_p.sh.ravel(),
    ])
    return E, g


def _pixel_refine(model, prob, fitted, image, albedo, config):
    k = albedo.rank
    sh0 = config.sh_coefficients if config.sh_coefficients is not None else ambient_sh(1.0)
    mu_alb = np.zeros(k) if config.alb_mean is None else np.asarray(config.alb_mean, float)
    x = np.concatenate([fitted.w_id, fitted.w_exp, fitted.camera.to_vector(), mu_alb, sh0.ravel()])
    history = list(fitted.objective_history)
    for _ in range(config.pixel_rounds):
        ri, re = prob.ri, prob.re
        cam = prob.cam0.with_vector(x[ri + re:ri + re + prob.cam0.n_params])
        vis = compute_visibility(model, x[:ri], x[ri:ri + re], cam, image.shape, config.depth_eps)
        f = lambda z: total_energy(model, prob, z, image, albedo, config, vis)  # noqa: E731
        E0 = f(x)[0]
        res = minimize(f, x, jac=True, method="L-BFGS-B",
                       options={"maxiter": config.max_iterations, "gtol": 1e-10})
        if res.fun < E0:
            x = res.x
            history.append(float(res.fun))
        else:
            break
    ri, re, nc = prob.ri, prob.re, prob.cam0.n_params
    cam = prob.cam0.with_vector(x[ri + re:ri + re + nc])
    w_alb = x[ri + re + nc:ri + re + nc + k]
    sh = x[ri + re + nc + k:].reshape(N_SH, 3)
    vis = compute_visibility(model, x[:ri], x[ri:ri + re], cam, image.shape, config.depth_eps)
    E_p, _ = e_pixel(model, x[:ri], x[ri:ri + re], cam, image, albedo, w_alb, sh, vis)
    out = FittedFace(x[:ri].copy(), x[ri:ri + re].copy(), cam, w_alb.copy(), sh.copy(),
                     dict(fitted.residuals), fitted.converged, fitted.iterations, history)
    out.residuals["pixel_rmse"] = float(np.sqrt(E_p))
    return out


def fitted_blendshapes(model: BilinearModel, fitted: FittedFace) -> BlendshapeSet:
    """Person-specific blendshapes for the fitted identity."""
    return generate_blendshapes(model, fitted.w_id)
