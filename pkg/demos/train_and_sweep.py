# %% [markdown]
# # Training VR-GAN at desk scale and sweeping the target
#
# Trains the generator/regressor pair on the `toy-desk` preset, scores the
# effect maps against the exact frames, then asks the trained generator for a
# whole range of target values on one image.  With the default 40 epochs this
# takes around 40 minutes on one CPU core; pass a smaller epoch count as the
# second argument for a quick look.

# %%
import dataclasses
import sys
from pathlib import Path

import numpy as np

from vrgan import storage
from vrgan.config import preset
from vrgan.evaluation import evaluate_pairs, foreground_area, sweep_panel, vrgan_effect_fn
from vrgan.toydata import gen_toy_dataset
from vrgan.training import TrainData, WeibullTargets, restore_best, train

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/desk")
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else None
out.mkdir(parents=True, exist_ok=True)

cfg = preset("toy-desk")
ds = gen_toy_dataset(cfg.toy)
images, y, _, _ = ds["train"].arrays()
data = TrainData(images, y, WeibullTargets(cfg.toy.weibull_shape, cfg.toy.weibull_scale), val=ds["val"].arrays())

# %% [markdown]
# Validation NCC oscillates from epoch to epoch (the two networks chase each
# other), so the run keeps the weights of the best validation epoch.

# %%
train_cfg = cfg.train if epochs is None else dataclasses.replace(cfg.train, max_epochs=epochs)
state, history = train(train_cfg, data, cfg.generator, cfg.regressor,
                       on_epoch=lambda s, row: print(f"epoch {row['epoch']:3d}  val NCC {row['val_ncc']:.3f}"))
restore_best(state)
state.generator.eval()

# %%
scores = evaluate_pairs(vrgan_effect_fn(state.generator, state.stats), ds["test"].arrays())
print(f"test NCC {scores.mean():.3f} +/- {scores.std():.3f} over {len(scores)} pairs")

# %% [markdown]
# A sweep over y' should grow the square monotonically: small targets carve
# a dark frame, large ones paint a bright one.

# %%
x = ds["test"][0].sample.image.astype(np.float32)
y0 = ds["test"][0].sample.y
targets = np.round(np.arange(0.3, 1.0001, 0.1), 1)
panel = sweep_panel(state.generator, x, y0, targets, state.stats)
print("foreground area per y':", [foreground_area(xp) for xp in panel.x_primes])
storage.write_png8(out / "sweep.png", panel.montage)
print(f"montage -> {out / 'sweep.png'}")
