"""Build a small loss with the tape autodiff and compare every gradient with central differences."""
import numpy as np

from dr2n import diffcore as dc
from dr2n.diffcore import ParamStore

store = ParamStore(seed=0)
w = store.get("w", (4, 3))
b = store.get("b", (3,), init="zeros")
x = np.random.default_rng(1).normal(size=(5, 4))
target = np.array([0, 2, 1, 1, 0])


def loss():
    logits = dc.add_bias(dc.tanh(dc.as_tensor(x) @ w), b)
    return dc.softmax_cross_entropy(logits, target, np.full(5, 0.2))


out = loss()
out.backward()
print(f"loss = {out.values:.6f}")
for name, p in store.items():
    analytic = p.grad.copy()
    numeric = np.zeros_like(p.values)
    for idx in np.ndindex(p.shape):
        old = p.values[idx]
        p.values[idx] = old + 1e-6
        up = loss().values
        p.values[idx] = old - 1e-6
        down = loss().values
        p.values[idx] = old
        numeric[idx] = (up - down) / 2e-6
    print(f"{name}: max |analytic - numeric| = {np.abs(analytic - numeric).max():.2e}")
