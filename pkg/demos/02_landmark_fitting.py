"""
Fitting the model to 2D landmarks
=================================

Sixty-eight landmark vertices are projected with a known weak-perspective
camera; the fitter recovers camera, identity and expression from those 2D
points alone.
"""

import numpy as np

from facekit.camera import CameraParams, axis_angle_quat, matrix_to_quat, project, quat_to_matrix
from facekit.camera import rotation_angle_deg
from facekit.fitting import FitConfig, fit_image, fitted_blendshapes
from facekit.morphable import generate_mesh
from facekit.synth import toy_model

# %%
# A toy model (900 vertices, 52 expressions, 50 identities) and a ground-truth
# face looking roughly at the camera (+z towards the viewer, 180 degrees
# about x).
model, lm_idx = toy_model(50, 52, 30, seed=0)
w_id, w_exp = model.id_basis[7], model.canonical_exp_params[12]
tilt = quat_to_matrix(axis_angle_quat([0.3, 1.0, 0.0], 15.0))
q = matrix_to_quat(tilt @ quat_to_matrix([0.0, 1.0, 0.0, 0.0]))
camera = CameraParams(rotation=q, scale=2.5, translation=[300.0, 310.0])
truth = generate_mesh(model, w_id, w_exp).vertices
landmarks = project(camera, truth[lm_idx])

# %%
# The fit with priors centred on the truth; any prior works, the truth just
# makes the result easy to judge.
fit = fit_image(model, landmarks, FitConfig(id_mean=w_id, exp_mean=w_exp), landmark_indices=lm_idx)
v = generate_mesh(model, fit.w_id, fit.w_exp).vertices
print("landmark RMSE (px):", fit.residuals["landmark_rmse_px"])
print("vertex RMSE (mm):  ", np.sqrt(((v - truth) ** 2).sum(1).mean()))
print("rotation error (deg):", rotation_angle_deg(fit.camera.rotation, camera.rotation))

# %%
# The fitted identity drives a personalised blendshape set.
shapes = fitted_blendshapes(model, fit)
print(len(shapes), "blendshapes for the fitted identity")
