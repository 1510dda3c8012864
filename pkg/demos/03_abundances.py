"""
Fully constrained abundances
============================

Abundances are non-negative and sum to one. They are estimated once per
pixel and shared by every reconstruction method.
"""

import numpy as np

from regimix import synth
from regimix.abundance import fcls, unmix_scene

rng = np.random.default_rng(0)
E = rng.uniform(0.1, 0.9, size=(8, 3))

# A point inside the simplex is recovered exactly.
a_true = np.array([0.2, 0.5, 0.3])
print("recovered:", np.round(fcls(E @ a_true, E), 12))

# A spectrum outside the hull is projected onto the closest feasible mixture.
a, info = fcls(rng.uniform(0, 1, 8), E, full_output=True)
print("projection:", np.round(a, 4), "sum", a.sum(), "converged", info.converged)

# A whole noiseless linear scene.
scene = synth.generate_scene(synth.SynthSpec(rows=16, cols=16, bands=20, layout="all-linear",
                                             sigma=0.0, seed=4))
A = unmix_scene(scene.cube, scene.endmembers)
print("max abundance error on a noiseless scene: %.2e" % np.abs(A - scene.abundances).max())
