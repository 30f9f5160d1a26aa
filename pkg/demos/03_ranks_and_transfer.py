# # Rank embeddings and the transfer matrix
#
# Locations are described partly by where they sit in the ordering of flows
# at each instant. Ranks ignore scale, so a sensor with a calibration offset
# still maps to the same embedding.

# %%
import numpy as np

from stps import diffcore as dc
from stps.embeddings import compute_ranks, init_banks, rank_node_embedding
from stps.transfer import adjacency_block, enhanced_transfer

x = np.array([[30.0, 35.0, 80.0],
              [55.0, 35.0, 10.0],
              [12.0, 60.0, 40.0]])
print(compute_ranks(x))
print("unchanged by a monotone map:", np.array_equal(compute_ranks(np.log1p(x) * 7), compute_ranks(x)))
print("ties go to the lower row:", compute_ranks(np.array([[4.0], [4.0], [1.0]])).ravel())

# %% [markdown]
# Each rank picks a row from a learned bank; a per-interval weighting then
# folds the `l` picks into one vector per location.

# %%
store = dc.ParameterStore()
banks = init_banks(store, n=3, d=4, lengths=(3,), rng=np.random.default_rng(0))
E_r = rank_node_embedding(compute_ranks(x), banks)
print(E_r.shape)

# %% [markdown]
# ## Moving information between location sets
# The transfer matrix starts from the road adjacency between source and
# destination locations and adds a learned low-rank correction built from the
# embeddings. With every embedding at zero it is the adjacency block itself.

# %%
A = np.array([[0, 1, 0, 1],
              [1, 0, 1, 0],
              [0, 1, 0, 1],
              [1, 0, 1, 0]], dtype=float)
src, dst = [0, 2, 3], [1]
block = adjacency_block(A, src, dst)
zero = lambda r: dc.parameter(np.zeros((r, 4)))
T = enhanced_transfer(block, zero(3), zero(3), zero(1))
print("zero embeddings:", T.enhanced.value.ravel(), "== adjacency", block.ravel())

g = np.random.default_rng(1)
T = enhanced_transfer(block, dc.parameter(g.normal(size=(3, 4))), dc.parameter(g.normal(size=(3, 4))),
                      dc.parameter(g.normal(size=(1, 4))))
print("learned correction:", np.round(T.enhanced.value.ravel() - block.ravel(), 3))
