# %% [markdown]
# # The squares toy problem
#
# Every image is a bright square on a dark background, plus smooth noise.
# The regression target is the square's relative size, so the "right"
# explanation for changing the target from y to y' is a frame: the ring of
# pixels between the two squares.  This script builds a small dataset and
# looks at it.

# %%
import sys
from pathlib import Path

import numpy as np

from vrgan import storage
from vrgan.toydata import ToyConfig, analytic_moments, gen_toy_dataset, gt_effect_map

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/toy")
out.mkdir(parents=True, exist_ok=True)

cfg = ToyConfig(image_size=64, side_scale=56.0, noise_sigma_px=1.2, n_train=500, n_val_pairs=20, n_test_pairs=20)
ds = gen_toy_dataset(cfg)

# %% [markdown]
# Targets follow a Weibull law.  The empirical mean and std of the training
# targets should sit close to the analytic moments; these two numbers also
# normalise the generator's conditioning input.

# %%
images, y, _, _ = ds["train"].arrays()
mean, std = analytic_moments(cfg)
print(f"train targets: mean {y.mean():.4f} (analytic {mean:.4f}), std {y.std():.4f} (analytic {std:.4f})")
print(f"fraction below 0.7: {np.mean(y < 0.7):.3f}")

# %% [markdown]
# Paired splits carry a requested target y' and the exact effect map.
# Shrinking a square leaves a negative frame (-2 where +1 turns into -1).

# %%
pair = ds["val"][0]
gt = pair.gt_map
print(f"pair 0: y={pair.sample.y:.3f} y'={pair.y_prime:.3f}, map values {sorted(set(np.unique(gt)))}")
assert np.array_equal(gt, gt_effect_map(pair.sample.y, pair.y_prime, cfg))

# %%
row = [np.clip((p.sample.image + 2) / 4, 0, 1) for p in list(ds["val"])[:6]]
maps = [(p.gt_map + 2) / 4 for p in list(ds["val"])[:6]]
storage.write_png8(out / "pairs.png", np.vstack([np.hstack(row), np.hstack(maps)]))
storage.write_toy_dataset(out / "dataset", cfg, ds)
print(f"wrote {out / 'pairs.png'} and the dataset under {out / 'dataset'}")
