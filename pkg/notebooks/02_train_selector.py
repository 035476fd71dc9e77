"""
Training a toy Sound Selector
=============================

Trains the reduced ``toy`` architecture on the scenes from
``01_synthesize_scenes.py``. About 3-4 minutes on one CPU core.
"""

import csv
import os
from pathlib import Path

from sound_selector.nets import SelectorConfig
from sound_selector.train import TrainConfig, fit

work = Path(os.environ.get("SOUND_SELECTOR_WORK", "work"))

# %%
# Configuration
# -------------
# Full-size defaults are far too slow on a CPU; the toy preset keeps the
# architecture (encoder, TCN repeats, class embedding after the first repeat)
# with fewer channels. Training runs on random 2 s crops.

model_config = SelectorConfig.toy(5)
train_config = TrainConfig(learning_rate=1e-3, batch_size=4, max_epochs=6, crop_s=2.0, seed=0)
print(model_config)
print(train_config)

# %%
# Fit, keeping the checkpoint with the best dev SDRi.

result = fit(work / "train", "selector", train_config, model_config, work / "selector", dev_manifest=work / "dev")
print("last checkpoint:", result.checkpoint)
print("best checkpoint:", result.best_checkpoint)

# %%
# The log has one row per step; dev SDRi is filled in at each epoch end.

with open(result.log_path) as f:
    for row in csv.DictReader(f):
        if row["dev_sdri_db"]:
            print(f"epoch {row['epoch']}: step {row['step']}, loss {float(row['loss_db']):7.2f} dB, "
                  f"dev SDRi {float(row['dev_sdri_db']):5.2f} dB")
