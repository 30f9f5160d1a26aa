# # The command line
#
# The same workflow from the `stps` command. Each call is made through
# `main()` so the demo runs in one process; in a shell drop the list syntax,
# e.g. `stps synth --synthetic n=10 days=4 --out run`.

# %%
import csv
import json
import tempfile
from pathlib import Path

from stps.cli import main

out = Path(tempfile.mkdtemp())
data = ["--data", str(out / "data.csv"), "--adjacency", str(out / "adjacency.csv")]

print(main(["synth", "--synthetic", "n=10", "days=4", "seed=2", "--out", str(out)]))
print(main(["select", *data, "--m-prime", "3", "--seed", "7", "--out", str(out / "sel")]))
print((out / "sel" / "partition.txt").read_text())

# %% [markdown]
# Train with a partition file and a few overrides. The resolved settings are
# echoed to `config.json`; passing that file back with `--config` repeats
# the run exactly.

# %%
code = main(["train", *data, "--partition", str(out / "sel" / "partition.txt"), "--l-prime", "24",
             "--d", "8", "--epochs", "3", "--out", str(out / "run")])
print("exit", code)
print(json.loads((out / "run" / "config.json").read_text())["l_prime"])

# %%
main(["evaluate", *data, "--checkpoint", str(out / "run" / "model.ckpt"), "--svg",
      "--out", str(out / "eval")])
print((out / "eval" / "slices.csv").read_text())
main(["forecast", *data, "--checkpoint", str(out / "run" / "model.ckpt"), "--out", str(out / "fc")])
rows = list(csv.reader((out / "fc" / "forecast.csv").open()))
print(len(rows) - 1, "rows x", len(rows[0]), "intervals")

# %% [markdown]
# Errors map to stable exit codes: 1 for usage, 2 for data, 3 for numerical
# failure.

# %%
print(main(["train", "--data", "missing.csv", "--adjacency", "missing.csv", "--m-prime", "2",
            "--out", str(out / "bad")]))
