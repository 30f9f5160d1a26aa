# # The differentiation core
#
# Everything in the model is built from a small reverse-mode engine over numpy
# arrays. Here we compose a few operations, backpropagate, and compare the
# result with finite differences.

# %%
import numpy as np

from stps import diffcore as dc

rng = np.random.default_rng(0)
x = dc.parameter(rng.normal(size=(4, 3)), name="x")
W = dc.parameter(rng.normal(size=(3, 2)), name="W")
b = dc.parameter(np.zeros(2), name="b")

y = dc.relu(dc.affine(x, W, b))
loss = dc.mean(dc.square(y))
dc.backward(loss)
print("loss", float(loss.value))
print("dL/dW\n", W.grad)

# %% [markdown]
# Central differences with step 1e-5 should agree to many digits.

# %%
for p in (x, W, b):
    p.grad = None
err = dc.grad_check(lambda: dc.mean(dc.square(dc.relu(dc.affine(x, W, b)))), [x, W, b])
print(f"max relative error {err:.2e}")

# %% [markdown]
# ## Residual blocks
# Two affine layers with relu and dropout between them, plus a skip path.
# With a zero second layer the block passes its input straight through.

# %%
z = np.zeros((3, 3))
block = dc.BlockParams(dc.parameter(rng.normal(size=(3, 3))), dc.parameter(np.zeros(3)),
                       dc.parameter(z), dc.parameter(np.zeros(3)))
out = dc.residual_block(x, block, rate=0.15, training=True, rng=rng)
print("identity when the second layer is zero:", np.array_equal(out.value, x.value))

# %% [markdown]
# ## AdamW
# Weight decay is applied to the weights directly, before the Adam step.

# %%
store = dc.ParameterStore()
theta = store.add("theta", np.array([1.0]))
theta.grad = np.array([0.5])
dc.adamw_step(store, lr=1e-3, weight_decay=1e-3)
print("after one step:", theta.value[0])   # (1 - 1e-6) - 1e-3 / (1 + 1e-8)
