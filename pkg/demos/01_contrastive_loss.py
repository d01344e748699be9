# %% [markdown]
# # The in-batch contrastive loss
#
# A batch of B aligned (speech, image) pairs gives a B x B score matrix S whose
# diagonal holds the true pairs. Each row is a speech query over all images and
# each column is an image query over all speech clips. The loss averages the
# cross entropy of both directions.

# %%
import numpy as np

from dualenc import bidirectional_softmax_loss, loss_gradient

S = np.eye(2)
print("2x2 identity loss:", bidirectional_softmax_loss(S))
print("closed form      :", np.log1p(np.exp(-1)))

# %% [markdown]
# Adding a constant to every score changes nothing, because both softmaxes
# normalize it away.

# %%
rng = np.random.default_rng(0)
S = rng.normal(size=(6, 6))
print(bidirectional_softmax_loss(S), bidirectional_softmax_loss(S + 40.0))

# %% [markdown]
# The gradient has a compact form: (row softmax + column softmax - 2I) / 2B.
# Its entries sum to zero, and a diagonal entry is never positive.

# %%
G = loss_gradient(S)
print("sum of gradient:", G.sum())
print("diagonal       :", np.round(np.diag(G), 4))

# %% [markdown]
# Pushing the diagonal up lowers the loss, which is what training does.

# %%
for boost in (0.0, 1.0, 3.0, 10.0):
    print(f"diag + {boost:4.1f}: loss {bidirectional_softmax_loss(S + boost * np.eye(6)):.4f}")
