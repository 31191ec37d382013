"""
Gradients by hand and by machine
================================

Build a small GELU network on the reverse-mode engine, take the gradient
of a scalar loss, and compare it with central finite differences.
"""

import numpy as np

from vibeam import autodiff as ad
from vibeam.params import ParamStore, init_mlp, mlp, substream

rng = substream(0, "demo")
store = ParamStore()
# three linear layers: 4 -> 8 -> 8 -> 2
init_mlp(store, "net", [4, 8, 8, 2], rng)
x = rng.standard_normal((5, 4))

loss = ad.mean(ad.mul(mlp(store, "net", x, 3), mlp(store, "net", x, 3)))
ad.backward(loss)
print("loss", round(loss.item(), 6))
print("gradient of the first bias:", np.round(store["net.l0.b"].grad, 4))

# finite differences agree to many digits in float64
store.zero_grad()
res = ad.grad_check(lambda: ad.mean(ad.gelu(mlp(store, "net", x, 3))), store.tensors())
print("max relative discrepancy vs finite differences:", f"{res['max_rel_error']:.2e}")

# only scalars broadcast; anything else must be expanded explicitly
try:
    ad.add(np.ones((2, 3)), np.ones(3))
except ad.ShapeError as exc:
    print("shape error:", exc)
print("expanded:", ad.add(np.ones((2, 3)), ad.expand(np.arange(3.0), 0, 2)).data)
