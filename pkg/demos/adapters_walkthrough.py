"""Data and label adapters in isolation.

Adapters start as the identity (W = 0, b = 0, h = 1, z = 0), so a fresh
MetaIL model behaves exactly like the plain incremental learner.  Each
sample mixes ``n_proj`` affine maps with softmax weights from its cosine
similarity to learnable prototypes.  The label adapter maps labels into a
space the forecaster finds easier and its approximate inverse maps
forecasts back.
"""

import numpy as np

from driftmeta.adapters import adapt_data, adapt_labels, init_adapters, invert_labels, projection_weights

rng = np.random.default_rng(0)
X = rng.normal(size=(4, 3))
G = rng.normal(size=(4, 1))

ap = init_adapters(d=3, n_proj=2, omega=1.0, rng=rng)
print("identity adapters leave data unchanged:", np.allclose(adapt_data(X, ap).value, X))

beta = projection_weights(X, ap.proto_data, ap.omega).value
print("projection weights per sample (rows sum to 1):\n", np.round(beta, 3))

# give the label adapter some scale and offset
ap.h.value[:] = [[2.0, 0.5]]
ap.z.value[:] = [[0.1, -0.3]]
G_t = adapt_labels(G, X, ap).value
back = invert_labels(G_t, X, ap).value
print("\nlabels         ", np.round(G.ravel(), 3))
print("adapted labels ", np.round(G_t.ravel(), 3))
print("inverted back  ", np.round(back.ravel(), 3))
print("the inverse is exact only for a single projection; the mixture gives an approximation")
