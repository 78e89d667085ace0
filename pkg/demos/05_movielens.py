"""A desk-scale MovieLens-1M run, when the raw ratings file is available.

The dataset is not bundled.  Download ml-1m.zip from the GroupLens site,
unpack it, and either set $SFREC_ML1M to the ratings.dat path or place it at
$SFREC_DATA_DIR/ml-1m/ratings.dat.  Without it this script prints the split
it would have used and exits.

Run:  python3 demos/05_movielens.py   (a few minutes with the data present)
"""

import json
import os
import sys
from pathlib import Path

import numpy as np

from sfrec.config import ExperimentConfig
from sfrec.data import parse_ml1m, phase_split
from sfrec.harness import prepare_data, run_lifecycle


def find_ratings():
    direct = os.environ.get("SFREC_ML1M")
    if direct and Path(direct).exists():
        return Path(direct)
    root = os.environ.get("SFREC_DATA_DIR")
    if root:
        for sub in ("ml-1m/ratings.dat", "ratings.dat"):
            if (Path(root) / sub).exists():
                return Path(root) / sub
    return None


ratings = find_ratings()
if ratings is None:
    print("MovieLens-1M not found.")
    print("Fetch https://files.grouplens.org/datasets/movielens/ml-1m.zip, unzip, then either:")
    print("  export SFREC_ML1M=/path/to/ml-1m/ratings.dat")
    print("  export SFREC_DATA_DIR=/path/to/parent  (expects ml-1m/ratings.dat under it)")
    sys.exit(0)

print(f"parsing {ratings} ...")
interactions, user_map, item_map = parse_ml1m(ratings)
print(f"{len(user_map)} users, {len(item_map)} items, {len(interactions)} ratings-as-clicks")

split = phase_split(interactions, min_len=20)
lengths = [len(us.all_items()) for us in split.users.values()]
print(json.dumps({
    "retained_users": len(split.users),
    "dropped_users": split.dropped_users,
    "retained_items": len(split.retained_items),
    "median_sequence": int(np.median(lengths)),
}))

config = ExperimentConfig(
    dataset=str(ratings),
    data_format="ml1m",
    variant="s2f_full",
    dim=32,
    lr=5e-3,
    slow_epochs=3,
    fast_epochs=2,
    patience=1,
    seeds=1,
    max_users=200,
    max_positions_per_user=16,
    precision="float32",
).validate()
print(f"\nrunning one {config.variant} seed on {config.max_users} users ...")
outcome = run_lifecycle(config, prepare_data(config))
for r in sorted(outcome.records, key=lambda r: (r.component, r.metric, r.k)):
    label = f"{r.metric}@{r.k}" if r.k else r.metric
    print(f"  {r.component:5s} {label:8s} {r.value:.4f}")
counts = outcome.diagnostics[config.base_seed]
print(f"exchange traffic: {counts['uploads']} uploads, {counts['downloads']} downloads")
