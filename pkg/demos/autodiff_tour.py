"""
A short tour of the tape
========================

Every model in tsvkit is built from a few dozen primitives that record
themselves on a ``Tape`` while it is active.  Here we differentiate a small
convolutional function and compare the result against central differences.
"""

# %%
import numpy as np

from tsvkit import autodiff as ad

rng = np.random.default_rng(0)
x = ad.Tensor(rng.standard_normal((2, 32)))
filters = ad.Tensor(rng.standard_normal((4, 2, 5)))

# %%
# Outside a tape nothing is recorded, so plain forward passes are cheap.
y = ad.conv1d(x, filters, stride=2)
print("forward only, output shape", y.shape)

# %%
# Inside a tape, ``backward`` fills ``.grad`` on every input that asks for one.
# A normalized map always has the same energy, so weight it by a fixed random
# pattern to get a loss that actually depends on the inputs.
weights = rng.standard_normal((4, 14))
x.requires_grad = filters.requires_grad = True
with ad.Tape() as tape:
    h = ad.relu(ad.conv1d(x, filters, stride=2))
    z = ad.global_layer_norm(h, ad.Tensor(np.ones(4)), ad.Tensor(np.zeros(4)))
    loss = ad.sum_(z * weights)
tape.backward(loss, [x, filters])
print("loss", round(float(loss.data), 4))
print("gradient norms", round(float(np.linalg.norm(x.grad)), 4), round(float(np.linalg.norm(filters.grad)), 4))

# %%
# ``grad_check`` perturbs each input coordinate by +-1e-6 and reports the
# largest relative disagreement with the tape.
err = ad.grad_check(lambda a, f: ad.sum_(ad.conv1d(a, f, 2) * ad.conv1d(a, f, 2)),
                    [ad.Tensor(x.data.copy()), ad.Tensor(filters.data.copy())])
print(f"max relative error {err:.2e}")
