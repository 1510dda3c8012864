"""
Training the regime gate
========================

The gate xi = sigmoid(w . F + b) decides per pixel how much of the blended
nonlinear residual to add. It is trained without labels by balancing the
reconstruction gain against the feature prior, a smoothness penalty, weight
decay and an attention entropy term.
"""

import numpy as np

from regimix import regime, synth
from regimix.features import FEATURE_NAMES
from regimix.models import MODEL_NAMES

scene = synth.generate_scene(synth.SynthSpec(rows=32, cols=32, bands=30, seed=5))
config = regime.TrainConfig(epochs=300)
state = regime.prepare_scene(scene.cube, scene.endmembers, config)

# At the start the gate sits at 0.5 and the attention is uniform.
params = regime.Params.initial(state.K, state.P)
loss, grad, terms = regime.loss_and_grad(state, params, 1.0, config)
print("initial loss %.4f" % loss, {k: round(v, 4) for k, v in terms.items()})

model = regime.train(scene.cube, scene.endmembers, config, state=state)
print("loss %.4f -> %.4f" % (model.loss_trace[0], model.loss_trace[-1]))
print("gate weights:", {n: round(float(v), 3) for n, v in zip(FEATURE_NAMES, model.regime.w)})
print("gamma per pair:", np.round(model.gbm.gamma, 3))

xi = model.xi
print("mean xi on linear pixels    %.3f" % xi[scene.labels == 0].mean())
print("mean xi on nonlinear pixels %.3f" % xi[scene.labels == 1].mean())
print("mean attention:", {n: round(float(v), 3) for n, v in zip(MODEL_NAMES, model.alpha.mean(axis=(1, 2)))})

res = regime.predict(scene.cube, scene.endmembers, model)
counts = np.bincount(res.dominant_feature.ravel(), minlength=len(FEATURE_NAMES))
print("dominant feature counts:", dict(zip(FEATURE_NAMES, counts.tolist())))
