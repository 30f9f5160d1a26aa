# # Traffic tables, partitions and windows
#
# A traffic table holds one flow series per road location, sampled every
# five minutes. This walk-through builds a small synthetic road network,
# hides some of its sensors, and cuts the series into training windows.

# %%
import numpy as np

from stps.dataio import (chronological_split, fit_normalizer, generate_synthetic, inject_noise,
                         make_windows, select_locations, stack_windows)

table, graph = generate_synthetic(n=12, days=7, seed=0, closure_rate=0.05)
print(table.n_locations, "locations,", table.n_intervals, "intervals from", table.start_epoch)
print("edges:", int(graph.adjacency.sum() // 2))

# %% [markdown]
# Every location follows a daily hump whose height and start hour drift
# slowly around the ring, and weekends are quieter. Closures knock a few
# hours of one location down to almost nothing.

# %%
daily = table.values[:, :288]
print("peak flow per location:", np.round(daily.max(axis=1)).astype(int))
weekday, weekend = table.values[0, :288].mean(), table.values[0, 5 * 288:6 * 288].mean()
print(f"location 0 mean flow: weekday {weekday:.1f}, saturday {weekend:.1f}")

# %% [markdown]
# ## Chronological split
# 60% train, 20% validation, the rest test, in time order.

# %%
train, val, test = chronological_split(table)
print([p.n_intervals for p in (train, val, test)])
print("validation starts at", val.start_epoch)

# %% [markdown]
# ## Which sensors go dark
# Weighted selection keeps busy locations sensed more often. Scores come from
# the training split only.

# %%
for mode in ("random", "weighted"):
    part = select_locations(train, graph, m_prime=4, mode=mode, seed=3)
    print(f"{mode:9s} sensed={part.sensed} unsensed={part.unsensed}")

# %% [markdown]
# ## Windows
# Each window has an input span of `l` intervals and a forecast span of `l'`.
# The four blocks are past/future for sensed and unsensed rows.

# %%
part = select_locations(train, graph, 4, "weighted", seed=3)
windows = make_windows(train, part, l=12, l_prime=96)
w = windows[300]
print(len(windows), "windows; #300 starts at time-of-day", w.tod_index, "day-of-week", w.dow_index)
print({k: getattr(w, k).shape for k in ("x_M_T", "x_Mp_T", "x_M_Tp", "x_Mp_Tp")})
batch = stack_windows(windows)
print("stacked input:", batch.x_M_T.shape)

# %% [markdown]
# ## Normalisation and noise
# The z-score is fitted on training data. Noise, when requested, corrupts the
# training split only and never drives flows below zero.

# %%
norm = fit_normalizer(train.values)
print(f"mean {norm.mean:.2f} std {norm.std:.2f}")
noisy = inject_noise(train, variance=100.0, seed=1)
print("added noise std:", np.std(noisy.values - train.values).round(2), "min flow:", noisy.values.min())
