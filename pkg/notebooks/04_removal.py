"""
Sound removal
=============

Indirect removal subtracts the selector's estimate from the mixture, so
selection and removal outputs always add back up to the input. A directly
trained removal network is the alternative; training one takes as long as
script 02 (set ``TRAIN_DIRECT=1``).
"""

import os
from pathlib import Path

import numpy as np

from sound_selector.evaluate import eval_removal, format_table
from sound_selector.nets import SelectorConfig, forward, load_checkpoint
from sound_selector.removal import remove_indirect
from sound_selector.signal import class_vector
from sound_selector.synth import load_dataset
from sound_selector.train import TrainConfig, fit

work = Path(os.environ.get("SOUND_SELECTOR_WORK", "work"))
ckpt = work / "selector" / "best.npz"
selector = load_checkpoint(ckpt if ckpt.exists() else work / "selector" / "last.npz").model

# %%
# Conservation
# ------------

item = load_dataset(work / "test")[0]
o = class_vector(item.target_classes[:1], 5)
selected = forward(item.mixture, o, selector)
removed = remove_indirect(item.mixture, o, selector)
print("max |selected + removed - mixture| =", np.max(np.abs(selected + removed - item.mixture)))

# %%
# Removal SDRi against ``mixture - target stems``
# -----------------------------------------------

reports = [eval_removal(work / "test", selector, 1, "indirect")]

if os.environ.get("TRAIN_DIRECT"):
    config = TrainConfig(learning_rate=1e-3, batch_size=4, max_epochs=6, crop_s=2.0)
    direct = fit(work / "train", "removal-direct", config, SelectorConfig.toy(5), work / "removal",
                 dev_manifest=work / "dev").model
    reports.append(eval_removal(work / "test", direct, 1, "direct"))

print(format_table(reports))
