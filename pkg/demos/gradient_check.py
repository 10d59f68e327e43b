"""Compare analytic gradients of a small three-head model against central differences."""

import numpy as np

from ordigrade import losses as L
from ordigrade import nn

rng = np.random.default_rng(0)
enc = [nn.conv3x3(3, 4, 2), nn.relu(), nn.global_avg_pool(), nn.dense(4, 6), nn.relu()]
model = nn.ThreeHeadModel((3, 8, 8), enc, [], seed=1)
x, grades = rng.normal(size=(4, 3, 8, 8)), np.array([0, 2, 3, 4])
smooth = L.SmoothingConfig(0.1, 0.1, 1 / 3)


def objective():
    out, _ = model.forward(x, mode="eval")
    return L.stage_loss(out, grades, L.MAIN_LOSSES, smooth, np.random.default_rng(3))[0]


out, cache = model.forward(x, mode="eval")
_, head_grads, _ = L.stage_loss(out, grades, L.MAIN_LOSSES, smooth, np.random.default_rng(3))
grads = model.backward(cache, head_grads)

h = 1e-6
for name, param in model.parameters().items():
    if name.startswith("fusion"):
        continue
    numeric = np.zeros_like(param)
    for i in np.ndindex(param.shape):
        keep = param[i]
        param[i] = keep + h
        up = objective()
        param[i] = keep - h
        down = objective()
        param[i] = keep
        numeric[i] = (up - down) / (2 * h)
    err = np.abs(grads[name] - numeric).max() / max(np.abs(numeric).max(), 1e-12)
    print(f"{name:<14} max relative error {err:.2e}")
