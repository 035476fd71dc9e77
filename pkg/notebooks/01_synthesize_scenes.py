"""
Synthesizing sound-event scenes
===============================

A walk through the scene generator: a bank of synthetic sound classes, a
background, and six events mixed at 15-25 dB over the background.
Run with ``python3 notebooks/01_synthesize_scenes.py``; figures land in
``work/`` (override with ``SOUND_SELECTOR_WORK``).
"""

import os
from pathlib import Path

import numpy as np

from sound_selector.synth import (
    CorpusIndex,
    SceneConfig,
    build_dataset,
    class_band,
    render_scene,
    sample_scene_spec,
    synth_class_clip,
)

work = Path(os.environ.get("SOUND_SELECTOR_WORK", "work"))
work.mkdir(exist_ok=True)

# %%
# The class bank
# --------------
# Each synthetic class owns a frequency band and an envelope family, so the
# classes are separable but not trivially so (events overlap in time).

for c in range(5):
    lo, hi = class_band(c, 5)
    clip = synth_class_clip(c, 2.0, rng_seed=0, bank_size=5)
    print(f"class {c}: band {lo:6.0f}-{hi:6.0f} Hz, peak {np.max(np.abs(clip)):.2f}")

# %%
# One scene
# ---------
# A scene spec is a plain record (JSON-serializable); rendering it is
# deterministic.

corpus = CorpusIndex.synthetic(5)
spec = sample_scene_spec(corpus.for_split("train"), SceneConfig(), rng_seed=7)
print(spec.to_json()[:400], "...")
scene = render_scene(spec)

print("active classes:", scene.spec.active_classes, " targets:", scene.spec.target_classes)
residual = scene.mixture.samples - scene.background.samples - scene.stems.stems.sum(0)
print("additivity residual:", np.max(np.abs(residual)))

# %%
# Per-event SNR over the background, measured on each event's support.

sr = spec.sample_rate
for ev, sig in zip(spec.events, scene.event_signals):
    onset = int(round(ev.onset_s * sr))
    bg = scene.background.samples[onset:onset + sig.shape[0]]
    measured = 10 * np.log10(np.mean(sig ** 2) / np.mean(bg ** 2))
    print(f"class {ev.class_index} at {ev.onset_s:4.2f}s: requested {ev.snr_db:5.2f} dB, measured {measured:5.2f} dB")

# %%
# Plot the stems (needs matplotlib).

try:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
except ImportError:
    plt = None

if plt is not None:
    t = np.arange(scene.mixture.samples.shape[0]) / sr
    fig, axes = plt.subplots(6, 1, figsize=(8, 8), sharex=True)
    axes[0].plot(t, scene.mixture.samples, lw=0.5)
    axes[0].set_ylabel("mix")
    for c in range(5):
        axes[c + 1].plot(t, scene.stems.stems[c], lw=0.5)
        axes[c + 1].set_ylabel(f"class {c}")
    axes[-1].set_xlabel("time [s]")
    fig.savefig(work / "scene.png", dpi=100)
    print("wrote", work / "scene.png")

# %%
# A dataset on disk
# -----------------
# ``build_dataset`` writes WAVs plus a JSONL manifest, and resumes if
# interrupted. These three sets are reused by the later scripts.

build_dataset(SceneConfig(), corpus, work / "train", 200, seed=1, split="train")
build_dataset(SceneConfig(), corpus, work / "dev", 20, seed=4, split="dev")
build_dataset(SceneConfig(), corpus, work / "test", 40, seed=2, split="test")
build_dataset(SceneConfig(duration_s=10.0, num_events=8, class_policy=(5,), num_targets=5), corpus,
              work / "long", 20, seed=3, split="test")
print("datasets in", work)
