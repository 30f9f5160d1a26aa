# # Variants, noise and where the gains come from
#
# The same data trained several ways. Budgets are small here, so the
# differences are only indicative; the acceptance suite runs the full
# comparison.

# %%
import numpy as np

from stps.dataio import chronological_split, generate_synthetic, select_locations
from stps.metrics import binned_improvement, build_report
from stps.pipeline import (ModelConfig, StpsModel, evaluate, fit, nearest_sensed_copy,
                           prepare_dataset)

table, graph = generate_synthetic(n=12, days=6, seed=0, closure_rate=0.05)
part = select_locations(chronological_split(table)[0], graph, 4, "weighted", seed=0)


def run(noise=0.0, **flags):
    ds = prepare_dataset(table, part, 12, 48, noise_variance=noise, noise_seed=0)
    cfg = ModelConfig(l=12, l_prime=48, d=16, epochs_per_stage=4, seed=0, **flags)
    model = StpsModel(cfg, graph.adjacency, part, ds.normalizer)
    fit(model, ds.train, ds.val)
    return evaluate(model, ds.test), ds


# %%
results = {}
for name, flags in [("full", {}), ("two-step", {"two_step": True}), ("one-step", {"one_step": True}),
                    ("no-rank", {"no_rank": True}), ("plain transfer", {"plain_transfer": True})]:
    results[name], ds = run(**flags)
    print(f"{name:15s} MAE {results[name].avg_mae:6.2f} RMSE {results[name].avg_rmse:6.2f}")

# %% [markdown]
# ## Training on noisy sensors
# Gaussian noise with variance 100 is added to the training split only.

# %%
for name, flags in [("full", {}), ("no-rank", {"no_rank": True})]:
    rep, _ = run(noise=100.0, **flags)
    print(f"noisy {name:8s} RMSE {rep.avg_rmse:6.2f}")

# %% [markdown]
# ## Which forecasts improve
# Sort the copy baseline's forecasts from worst to best, cut them into 20
# bins, and see how much the model gains in each.

# %%
copy = build_report(ds.test.x_Mp_Tp, nearest_sensed_copy(ds.test.x_M_T, graph.adjacency, part, 48))
bins = binned_improvement(copy, results["full"])
print(np.round(bins, 1))
