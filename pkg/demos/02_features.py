"""
Physical features and the prior map
===================================

Six per-pixel descriptors feed the regime gate: spectral curvature, NDVI,
its spatial gradient, two morphological profile summaries and a texture
code. Their min-max normalized mean is the prior the gate is pulled toward.
"""

import numpy as np

from regimix import features, synth

scene = synth.generate_scene(synth.SynthSpec(rows=24, cols=24, bands=30, seed=2))
cube = scene.cube

red, nir = features.resolve_ndvi_bands(cube)
print("NDVI bands: red %d (%.0f nm), nir %d (%.0f nm)"
      % (red, cube.wavelengths[red], nir, cube.wavelengths[nir]))

raw = features.compute_features(cube)
for name, plane in zip(features.FEATURE_NAMES, raw.planes):
    print("%-14s min %8.4f  max %8.4f" % (name, plane.min(), plane.max()))

# Standardized planes have zero mean and unit variance.
std = features.standardize(raw)
print("standardized means:", np.round(std.planes.reshape(6, -1).mean(axis=1), 12))

prior = features.compute_prior(raw)
print("prior range: %.3f-%.3f, mean %.3f" % (prior.min(), prior.max(), prior.mean()))

# The morphological profile of a single bright pixel shows how the opening
# removes it while the closing leaves it in place.
img = np.zeros((7, 7))
img[3, 3] = 1.0
print("EMP at the bright pixel:", features.emp_feature(img, (1,))[3, 3])
