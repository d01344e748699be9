# %% [markdown]
# # Pooling negatives across replicas
#
# With N replicas of K examples each, every replica encodes only its own slice.
# The embeddings are concatenated so the loss sees all N*K pairs, and each
# replica backpropagates only through the rows it owns. The summed parameter
# gradients should equal a single step on the whole batch.

# %%
import numpy as np

from dualenc import DualEncoder, EncoderConfig, PairBatch, compute_gradients, pooled_gradients

speech = EncoderConfig(kind="shallow-cnn", widths=[8, 8, 8], kernels=[3, 5, 7],
                       strides=[1, 1, 1], input_dim=4, embed_dim=16)
image = EncoderConfig(kind="projection-only", widths=[], kernels=[], strides=[],
                      input_dim=6, embed_dim=16)

rng = np.random.default_rng(1)
B = 16
batch = PairBatch(rng.normal(size=(B, 20, 4)), rng.integers(5, 21, size=B),
                  rng.normal(size=(B, 6)))

# %%
plain = DualEncoder(speech, image, seed=0, precision="float64")
loss_plain = compute_gradients(plain, batch)

for n in (1, 2, 4, 8):
    pooled = DualEncoder(speech, image, seed=0, precision="float64")
    loss_pooled = pooled_gradients(pooled, batch.split(n))
    gap = max(np.abs(pooled.grad_arrays()[k] - g).max() for k, g in plain.grad_arrays().items())
    print(f"N={n} K={B // n:2d}  loss {loss_pooled:.10f}  max grad gap {gap:.1e}")

print("global batch loss", f"{loss_plain:.10f}")
