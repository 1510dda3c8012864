"""
Nonlinear mixing residuals and attention
========================================

Each nonlinear model is written as a residual on top of the linear mixture.
A softmax over feature-driven logits blends the three residuals per pixel.
"""

import numpy as np

from regimix import models

E = np.array([[0.10, 0.60], [0.40, 0.20], [0.70, 0.50]])
a = np.array([0.5, 0.5])
s_lin = models.lmm_reconstruct(a, E)
print("linear mixture:", s_lin)

# Bilinear scattering between the two endmembers.
print("GBM residual (gamma=1):", models.gbm_residual(a, E, [1.0]))

# Polynomial post-nonlinear distortion, with b fitted in closed form.
y = s_lin + 0.3 * s_lin ** 2
b = models.ppnm_fit_b(y, s_lin)
print("fitted PPNM b: %.6f" % b)

# Intimate mixing in single-scattering albedo space.
geometry = models.HapkeGeometry(mu0=1.0, mu=1.0)
w = models.refl_to_ssa(E, geometry)
print("albedos:\n", np.round(w, 4))
print("Hapke residual:", models.hapke_residual(a, E, geometry))

# Attention: logits (ln 2, 0, 0) give weights (0.5, 0.25, 0.25).
print("softmax:", models.softmax([np.log(2), 0, 0]))
print("entropy of uniform weights: %.6f" % models.attention_entropy(np.full(3, 1 / 3)))
deltas = np.stack([models.gbm_residual(a, E, [1.0]), models.ppnm_residual(s_lin, b),
                   models.hapke_residual(a, E, geometry)])
print("combined residual:", models.combined_residual([0.5, 0.25, 0.25], deltas))
