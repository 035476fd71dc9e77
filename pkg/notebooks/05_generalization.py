"""
Longer, denser scenes
=====================

The toy selector was trained on 6 s scenes with three classes. Here it runs
on 10 s scenes containing all five classes, selecting two and then four of
them, and dumps mixture/reference/estimate WAV triplets for inspection.
"""

import os
from pathlib import Path

import numpy as np

from sound_selector.audio import read_wav
from sound_selector.evaluate import eval_generalization, format_table
from sound_selector.nets import load_checkpoint

work = Path(os.environ.get("SOUND_SELECTOR_WORK", "work"))
ckpt = work / "selector" / "best.npz"
model = load_checkpoint(ckpt if ckpt.exists() else work / "selector" / "last.npz").model

# %%

two = eval_generalization(work / "long", model, [0, 1], dump_dir=work / "dumps_two")
four = eval_generalization(work / "long", model, [0, 1, 2, 3])
print(format_table([two, four]))

# %%
# Plot one triplet (needs matplotlib).

try:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
except ImportError:
    plt = None

if plt is not None:
    first = two.scores[0].id
    fig, axes = plt.subplots(3, 1, figsize=(8, 5), sharex=True, sharey=True)
    for ax, name in zip(axes, ("mixture", "ref", "est")):
        x, sr = read_wav(work / "dumps_two" / f"{first}.{name}.wav")
        ax.plot(np.arange(x.shape[0]) / sr, x, lw=0.5)
        ax.set_ylabel(name)
    axes[-1].set_xlabel("time [s]")
    fig.savefig(work / "generalization.png", dpi=100)
    print("wrote", work / "generalization.png")
