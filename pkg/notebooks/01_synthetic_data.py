# %% [markdown]
# # Synthetic longitudinal nodules
#
# Every case is a pair of 16x64x64 crops, a baseline scan `t0` and a
# follow-up `t1`, plus a small clinical record. Malignant nodules grow and
# sprout spiculations between the scans; benign ones stay put.

# %%
import tempfile
from pathlib import Path

import numpy as np

from dgsan.data import load_case, nodule_volume, normalize_clinical, split_folds, synthesize_dataset

out = Path(tempfile.mkdtemp()) / "syn"
manifest = synthesize_dataset(40, seed=1, out_dir=out)
print(len(manifest.cases), "cases,", int(manifest.labels().sum()), "malignant")

# %% [markdown]
# Growth is the main imaging cue. Count voxels above half intensity at
# each time point.

# %%
for cid in manifest.ids()[:6]:
    case = load_case(manifest, cid)
    v0, v1 = nodule_volume(case.volumes.t0), nodule_volume(case.volumes.t1)
    print(f"{cid} label={case.label} voxels t0={v0:5d} t1={v1:5d} ratio={v1 / max(v0, 1):.2f}")

# %%
ratios = {0: [], 1: []}
for cid in manifest.ids():
    case = load_case(manifest, cid)
    ratios[case.label].append(nodule_volume(case.volumes.t1) / max(nodule_volume(case.volumes.t0), 1))
for label, r in ratios.items():
    print("malignant" if label else "benign   ", f"growth ratio {np.mean(r):.2f} +- {np.std(r):.2f}")

# %% [markdown]
# A central slice of one malignant case, as text.

# %%
cid = next(c for c in manifest.ids() if manifest.entry(c).label == 1)
case = load_case(manifest, cid)
for name, vol in (("t0", case.volumes.t0), ("t1", case.volumes.t1)):
    print(name)
    sl = vol[8, 16:48:2, 16:48:2]
    print("\n".join("".join("#" if v > 0.5 else "." for v in row) for row in sl))

# %% [markdown]
# Clinical fields are z-scored with training-set statistics; the screening
# outcome takes two indicator slots.

# %%
print(manifest.entry(cid).clinical)
print(np.round(normalize_clinical(manifest.entry(cid).clinical, manifest.normalization_stats), 3))

# %% [markdown]
# Stratified folds keep the class balance in every fold.

# %%
split = split_folds(manifest, k=5, seed=0)
for f in range(5):
    ids = split.fold_ids(f)
    print(f"fold {f}: {len(ids)} cases, {sum(manifest.entry(c).label for c in ids)} malignant")
