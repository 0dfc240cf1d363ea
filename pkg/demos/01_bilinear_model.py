"""
A bilinear face model from a mesh tensor
========================================

Meshes of many identities in many expressions share one topology, so they
stack into a ``(3V, expressions, identities)`` tensor. Truncating its
identity and expression modes gives a compact bilinear model: geometry is
linear in the identity weights for a fixed expression and vice versa.
"""

import numpy as np

from facekit.morphable import generate_blendshapes, generate_mesh, relative_error, tucker_decompose
from facekit.synth import synthetic_tensor

# %%
# A procedural tensor: 300 vertices, 20 expressions, 30 identities.
tensor = synthetic_tensor(30, 20, seed=0)
print("tensor", tensor.data.shape)

# %%
# Keeping every mode reproduces the data; truncation trades size for error,
# and the error never grows when a rank is raised.
for re, ri in [(20, 30), (10, 15), (5, 8), (2, 2)]:
    model = tucker_decompose(tensor, re, ri)
    print(f"exp rank {re:2d}  id rank {ri:2d}  relative error {relative_error(tensor, model):.2e}")

# %%
# Geometry is bilinear in the two weight vectors.
model = tucker_decompose(tensor, 20, 30)
rng = np.random.default_rng(0)
w1, w2, e = rng.normal(size=30), rng.normal(size=30), model.canonical_exp_params[3]
lhs = generate_mesh(model, 0.3 * w1 + 0.7 * w2, e).vertices
rhs = 0.3 * generate_mesh(model, w1, e).vertices + 0.7 * generate_mesh(model, w2, e).vertices
print("bilinearity defect", np.abs(lhs - rhs).max())

# %%
# Fixing an identity and sweeping the canonical expression weights yields
# that person's blendshapes.
shapes = generate_blendshapes(model, model.id_basis[4])
motion = [np.linalg.norm(d, axis=1).max() for d in shapes.deltas()]
print(f"{len(shapes)} blendshapes; largest vertex motion per shape (mm):",
      np.round(motion[:8], 2), "...")
