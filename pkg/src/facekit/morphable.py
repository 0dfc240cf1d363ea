"""Bilinear identity x expression face model.

A stack of topology-uniform meshes is arranged as a tensor of shape
``(3 * n_vertices, n_expressions, n_identities)`` (vertex coordinates
interleaved ``x0 y0 z0 x1 ...``) and factored with a Tucker decomposition
that truncates only the expression and identity modes. A face is the
two-mode contraction of the core with an expression and an identity vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ValidationError
from .mesh import Mesh


@dataclass
class MeshTensor:
    data: np.ndarray
    faces: np.ndarray
    uv: Optional[np.ndarray] = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[0] % 3:
            raise ValidationError(f"tensor must be (3V, E, I), got {self.data.shape}")

    @property
    def vertex_count(self):
        return self.data.shape[0] // 3

    @property
    def expression_count(self):
        return self.data.shape[1]

    @property
    def identity_count(self):
        return self.data.shape[2]

    @classmethod
    def from_meshes(cls, meshes: Sequence[Sequence[Mesh]]):
        """Build from ``meshes[identity][expression]``; all must share topology."""
        if not meshes or not meshes[0]:
            raise ValidationError("need at least one identity with one expression")
        template = meshes[0][0]
        n_exp = len(meshes[0])
        data = np.empty((3 * template.n_vertices, n_exp, len(meshes)))
        for i, row in enumerate(meshes):
            if len(row) != n_exp:
                raise ValidationError(f"identity {i} has {len(row)} expressions, expected {n_exp}")
            for e, m in enumerate(row):
                if not m.same_topology(template):
                    raise ValidationError(f"mesh (identity {i}, expression {e}) has a "
                                          "different topology from the template")
                data[:, e, i] = m.vertices.ravel()
        return cls(data, template.faces, template.uv)

    def mesh(self, expression, identity):
        return Mesh(self.data[:, expression, identity].reshape(-1, 3), self.faces, self.uv)


@dataclass
class BilinearModel:
    """Core tensor plus orthonormal expression/identity factors.

    ``canonical_exp_params[i]`` is the expression vector that reproduces
    training expression ``i``; with an untruncated expression mode these are
    just the rows of ``exp_basis``.
    """

    core: np.ndarray          # (3V, exp_rank, id_rank)
    exp_basis: np.ndarray     # (n_expressions, exp_rank)
    id_basis: np.ndarray      # (n_identities, id_rank)
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), np.int64))
    uv: Optional[np.ndarray] = None
    canonical_exp_params: Optional[np.ndarray] = None

    def __post_init__(self):
        self.core = np.asarray(self.core, dtype=np.float64)
        self.exp_basis = np.asarray(self.exp_basis, dtype=np.float64)
        self.id_basis = np.asarray(self.id_basis, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.core.ndim != 3 or self.core.shape[0] % 3 or min(self.core.shape) == 0:
            raise ValidationError(f"core must be a non-empty (3V, Re, Ri) tensor, "
                                  f"got {self.core.shape}")
        _, re, ri = self.core.shape
        if self.exp_basis.ndim != 2 or self.exp_basis.shape[1] != re:
            raise ValidationError("exp_basis columns must equal the expression rank")
        if self.id_basis.ndim != 2 or self.id_basis.shape[1] != ri:
            raise ValidationError("id_basis columns must equal the identity rank")
        if re > self.exp_basis.shape[0] or ri > self.id_basis.shape[0]:
            raise ValidationError("ranks cannot exceed the number of training samples")
        if self.uv is not None:
            self.uv = np.asarray(self.uv, dtype=np.float64)
        if self.canonical_exp_params is None:
            self.canonical_exp_params = self.exp_basis.copy()
        self.canonical_exp_params = np.asarray(self.canonical_exp_params,
                                               dtype=np.float64).reshape(-1, re)

    @property
    def vertex_count(self):
        return self.core.shape[0] // 3

    @property
    def exp_rank(self):
        return self.core.shape[1]

    @property
    def id_rank(self):
        return self.core.shape[2]

    @property
    def expression_count(self):
        return self.exp_basis.shape[0]

    @property
    def identity_count(self):
        return self.id_basis.shape[0]

    def mean_identity(self):
        return self.id_basis.mean(axis=0)

    def neutral_expression(self):
        return self.canonical_exp_params[0].copy()

    def truncated(self, exp_rank, id_rank):
        """Model restricted to the leading ``exp_rank`` / ``id_rank`` components."""
        _check_rank(exp_rank, self.exp_rank, "expression")
        _check_rank(id_rank, self.id_rank, "identity")
        return BilinearModel(self.core[:, :exp_rank, :id_rank], self.exp_basis[:, :exp_rank],
                             self.id_basis[:, :id_rank], self.faces, self.uv,
                             self.canonical_exp_params[:, :exp_rank])

    def reconstruct(self):
        """Full ``(3V, E, I)`` tensor implied by the factors."""
        t = np.tensordot(self.core, self.exp_basis, axes=([1], [1]))   # (3V, Ri, E)
        t = np.tensordot(t, self.id_basis, axes=([1], [1]))            # (3V, E, I)
        return t

    # contractions, shared by generation and fitting so they round identically
    def identity_slice(self, w_id, rows=None):
        """``core x_id w_id`` -> (3V, exp_rank), optionally restricted to coordinate rows."""
        core = self.core if rows is None else self.core[rows]
        return core @ w_id

    def expression_slice(self, w_exp, rows=None):
        """``core x_exp w_exp`` -> (3V, id_rank)."""
        core = self.core if rows is None else self.core[rows]
        return np.einsum("vab,a->vb", core, w_exp)

    def vertices(self, w_id, w_exp, rows=None):
        return self.identity_slice(w_id, rows) @ w_exp


def _check_rank(rank, limit, name):
    if not (isinstance(rank, (int, np.integer)) and 1 <= rank <= limit):
        raise ValidationError(f"{name} rank must be in [1, {limit}], got {rank}")


def _leading_left_singular_vectors(mat, rank):
    if mat.shape[1] > mat.shape[0]:
        # wide unfolding: mat = R^T Q^T, so mat and R^T share left singular vectors
        mat = np.linalg.qr(mat.T, mode="r").T
    u, _, _ = np.linalg.svd(mat, full_matrices=False)
    u = u[:, :rank]
    # fix the sign so the decomposition is deterministic across LAPACK builds
    pivot = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[pivot, np.arange(u.shape[1])])
    return u * np.where(signs == 0, 1.0, signs)


def _unfold(t, mode):
    return np.moveaxis(t, mode, 0).reshape(t.shape[mode], -1)


def tucker_decompose(tensor: MeshTensor, exp_rank, id_rank, hooi_iterations=0) -> BilinearModel:
    """Truncated HOSVD over the expression and identity modes.

    ``hooi_iterations > 0`` refines the factors with higher-order orthogonal
    iteration; the default of 0 gives plain HOSVD.
    """
    t = tensor.data
    _check_rank(exp_rank, t.shape[1], "expression")
    _check_rank(id_rank, t.shape[2], "identity")
    u_exp = _leading_left_singular_vectors(_unfold(t, 1), exp_rank)
    u_id = _leading_left_singular_vectors(_unfold(t, 2), id_rank)
    for _ in range(hooi_iterations):
        u_exp = _leading_left_singular_vectors(_unfold(np.tensordot(t, u_id, ([2], [0])), 1),
                                               exp_rank)
        u_id = _leading_left_singular_vectors(
            _unfold(np.tensordot(t, u_exp, ([1], [0])), 1), id_rank)
    core = np.einsum("vei,ea,ib->vab", t, u_exp, u_id, optimize=True)
    return BilinearModel(core, u_exp, u_id, tensor.faces, tensor.uv, u_exp.copy())


def relative_error(tensor: MeshTensor, model: BilinearModel):
    return float(np.linalg.norm(tensor.data - model.reconstruct()) / np.linalg.norm(tensor.data))


def _check_weights(model, w_id, w_exp):
    w_id = np.asarray(w_id, dtype=np.float64).ravel()
    w_exp = np.asarray(w_exp, dtype=np.float64).ravel()
    if w_id.size != model.id_rank:
        raise ValidationError(f"w_id has length {w_id.size}, model id rank is {model.id_rank}")
    if w_exp.size != model.exp_rank:
        raise ValidationError(f"w_exp has length {w_exp.size}, model exp rank is {model.exp_rank}")
    return w_id, w_exp


def generate_mesh(model: BilinearModel, w_id, w_exp) -> Mesh:
    w_id, w_exp = _check_weights(model, w_id, w_exp)
    return Mesh(model.vertices(w_id, w_exp).reshape(-1, 3), model.faces, model.uv)


@dataclass
class BlendshapeSet:
    shapes: list

    def __post_init__(self):
        if not self.shapes:
            raise ValidationError("blendshape set is empty")
        first = self.shapes[0]
        for i, s in enumerate(self.shapes):
            if not s.same_topology(first):
                raise ValidationError(f"blendshape {i} topology differs from the neutral")

    def __len__(self):
        return len(self.shapes)

    def __getitem__(self, i):
        return self.shapes[i]

    @property
    def neutral(self):
        return self.shapes[0]

    def deltas(self):
        """(n_shapes - 1, V, 3) offsets of every blendshape from the neutral."""
        base = self.shapes[0].vertices
        return np.stack([s.vertices - base for s in self.shapes[1:]])


def generate_blendshapes(model: BilinearModel, w_id) -> BlendshapeSet:
    """One mesh per canonical expression row; index 0 is the neutral."""
    if model.canonical_exp_params is None or len(model.canonical_exp_params) == 0:
        raise ValidationError("model carries no canonical expression parameters")
    w_id, _ = _check_weights(model, w_id, model.canonical_exp_params[0])
    slab = model.identity_slice(w_id)
    shapes = [Mesh((slab @ w).reshape(-1, 3), model.faces, model.uv)
              for w in model.canonical_exp_params]
    return BlendshapeSet(shapes)


@dataclass
class ScanFit:
    w_id: np.ndarray
    w_exp: np.ndarray
    rms_error: float
    objective_history: list
    iterations: int


def fit_to_scan(model: BilinearModel, scan: Mesh, exp_rank_used=None, id_rank_used=None,
                max_iterations=100, tol=1e-6) -> ScanFit:
    """Alternating least squares for ``w_id`` and ``w_exp`` against a registered scan.

    Starts from the neutral canonical expression and stops when the relative
    objective decrease drops below ``tol``. ``rms_error`` is the per-vertex
    RMS distance in mm.
    """
    if scan.n_vertices != model.vertex_count or (
            len(model.faces) and not np.array_equal(scan.faces, model.faces)):
        raise ValidationError("scan topology does not match the model template")
    m = model.truncated(exp_rank_used or model.exp_rank, id_rank_used or model.id_rank)
    target = scan.vertices.ravel()
    w_exp = m.neutral_expression()
    w_id = None
    history = []
    prev = np.inf
    it = 0
    for it in range(1, max_iterations + 1):
        a_id = m.expression_slice(w_exp)
        w_id = np.linalg.lstsq(a_id, target, rcond=None)[0]
        a_exp = m.identity_slice(w_id)
        w_exp = np.linalg.lstsq(a_exp, target, rcond=None)[0]
        obj = float(np.sum((a_exp @ w_exp - target) ** 2))
        history.append(obj)
        if prev < np.inf and prev - obj <= tol * max(prev, 1e-300):
            break
        prev = obj
    rms = float(np.sqrt(history[-1] / m.vertex_count))
    return ScanFit(w_id, w_exp, rms, history, it)
