"""Seeded synthesis of polyphonic sound-event scenes with per-class stems.

A scene is first *sampled* into a :class:`SceneSpec` (pure description, JSON
serializable) and then *rendered* into audio. Rendering is deterministic in
the scene record alone, so a dataset can be regenerated byte for byte.

Clip sources are plain strings:

``synth:<bank>:<class>:<seed>:<dur>``
    a clip from the built-in synthetic class bank (see :func:`synth_class_clip`)
``noise:<seed>:<dur>``
    stationary pink noise, used as background
``silence:<dur>``
    all-zero background
anything else
    a WAV path, resampled on load
"""

from __future__ import annotations

import functools
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .audio import load_clip, read_wav, write_wav
from .errors import ConfigurationError, InvalidArgumentError
from .signal import DEFAULT_SAMPLE_RATE, StemSet, Waveform

SCENE_SPEC_VERSION = 1
MAX_BANK_SIZE = 32
CLASS_POLICIES = {"mix3": (3,), "mix3-5": (3, 4, 5)}


# -- synthetic class bank ------------------------------------------------------

def class_band(class_index, bank_size):
    """Frequency band (Hz) reserved for one synthetic class.

    Bands are log-spaced over 150-3800 Hz with a guard gap between neighbours.
    """
    if not 0 < bank_size <= MAX_BANK_SIZE:
        raise InvalidArgumentError(f"bank_size must be in 1..{MAX_BANK_SIZE}, got {bank_size}")
    if not 0 <= class_index < bank_size:
        raise InvalidArgumentError(f"class {class_index} not in synthetic bank of size {bank_size}")
    edges = np.log(np.geomspace(150.0, 3800.0, bank_size + 1))
    lo, hi = edges[class_index], edges[class_index + 1]
    guard = 0.12 * (hi - lo)
    return float(np.exp(lo + guard)), float(np.exp(hi - guard))


def _band_limit(x, sample_rate, lo, hi):
    spec = np.fft.rfft(x)
    freqs = np.fft.rfftfreq(x.shape[0], 1.0 / sample_rate)
    spec[(freqs < lo) | (freqs > hi)] = 0.0
    return np.fft.irfft(spec, n=x.shape[0])


def _envelope(family, n, sample_rate, rng):
    t = np.arange(n) / sample_rate
    if family == 0:
        # knocks: exponentially decaying impulses at an irregular rate
        env = np.zeros(n)
        rate = rng.uniform(3.0, 8.0)
        decay = rng.uniform(0.02, 0.06)
        pos = rng.uniform(0.0, 0.1)
        while pos < t[-1]:
            i = int(pos * sample_rate)
            env[i:] += np.exp(-(t[i:] - t[i]) / decay)
            pos += rng.uniform(0.6, 1.4) / rate
        return env
    if family == 1:
        # ringing: smoothed on/off gate
        rate = rng.uniform(2.0, 4.0)
        gate = (np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)) > -0.2).astype(float)
        width = int(0.01 * sample_rate)
        return np.convolve(gate, np.hanning(2 * width + 1) / width, mode="same")
    if family == 2:
        # clicky bursts
        env = np.zeros(n)
        for _ in range(max(1, int(rng.uniform(8, 14) * t[-1]))):
            start = rng.integers(0, n)
            length = int(rng.uniform(0.03, 0.1) * sample_rate)
            env[start:start + length] += np.hanning(length)[: n - start]
        return env
    # slow swells
    swells = rng.integers(1, 3)
    env = np.zeros(n)
    for k in range(swells):
        centre = (k + rng.uniform(0.3, 0.7)) / swells * t[-1]
        width = rng.uniform(0.2, 0.4) * t[-1] / swells
        env += np.exp(-0.5 * ((t - centre) / width) ** 2)
    return env


def synth_class_clip(class_index, duration_s, rng_seed, sample_rate=DEFAULT_SAMPLE_RATE, bank_size=8):
    """Deterministic stand-in for a recorded event clip of one class.

    Each class owns a disjoint frequency band and one of four envelope
    families (impulsive, gated, bursty, swelling); the seed varies carrier
    frequencies and timing inside that signature. Peak level is 0.5.
    """
    n = int(round(duration_s * sample_rate))
    lo, hi = class_band(class_index, bank_size)
    rng = np.random.default_rng([0x5E1EC7, class_index, bank_size, int(rng_seed)])
    t = np.arange(n) / sample_rate
    family = class_index % 4
    if family == 2:
        carrier = rng.standard_normal(n)
    elif family == 3:
        f0, f1 = np.sort(rng.uniform(lo, hi, size=2))
        period = rng.uniform(0.3, 0.8)
        freq = f0 + (f1 - f0) * 0.5 * (1 - np.cos(2 * np.pi * t / period))
        carrier = np.sin(2 * np.pi * np.cumsum(freq) / sample_rate)
    else:
        carrier = np.zeros(n)
        for f in rng.uniform(lo, hi, size=3):
            carrier += np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    clip = _band_limit(carrier * _envelope(family, n, sample_rate, rng), sample_rate, lo, hi)
    peak = np.max(np.abs(clip))
    return Waveform(0.5 * clip / peak if peak > 0 else clip, sample_rate)


def synth_background(duration_s, rng_seed, sample_rate=DEFAULT_SAMPLE_RATE):
    """Stationary pink noise with unit RMS."""
    n = int(round(duration_s * sample_rate))
    rng = np.random.default_rng([0xBAC6, int(rng_seed)])
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    spec[1:] /= np.sqrt(freqs[1:])
    spec[0] = 0.0
    noise = np.fft.irfft(spec, n=n)
    return Waveform(noise / np.sqrt(np.mean(noise**2)), sample_rate)


@functools.lru_cache(maxsize=512)
def _load_source_cached(source, sample_rate):
    kind, _, rest = source.partition(":")
    if kind == "synth":
        bank, cls, seed, dur = rest.split(":")
        x = synth_class_clip(int(cls), float(dur), int(seed), sample_rate, int(bank)).samples
    elif kind == "noise":
        seed, dur = rest.split(":")
        x = synth_background(float(dur), int(seed), sample_rate).samples
    elif kind == "silence":
        x = np.zeros(int(round(float(rest) * sample_rate)))
    else:
        if not Path(source).is_file():
            raise FileNotFoundError(f"clip not found: {source}")
        x = load_clip(source, sample_rate).samples
    x = np.array(x, dtype=np.float64)
    x.setflags(write=False)
    return x


def load_source(source, sample_rate=DEFAULT_SAMPLE_RATE):
    """Samples for a clip-source string (read-only array, cached)."""
    return _load_source_cached(str(source), int(sample_rate))


# -- corpus --------------------------------------------------------------------

@dataclass(frozen=True)
class ClipInfo:
    source: str
    duration_s: float
    split: str = "train"


@dataclass
class CorpusIndex:
    """Available foreground clips per class (0-based) and background clips."""

    class_names: list
    clips: dict
    backgrounds: list

    @property
    def num_classes(self):
        return len(self.class_names)

    def for_split(self, split):
        return CorpusIndex(
            list(self.class_names),
            {c: [k for k in v if k.split == split] for c, v in self.clips.items()},
            [b for b in self.backgrounds if b.split == split],
        )

    def check_disjoint(self):
        """Raise if a clip file is listed under more than one split."""
        seen = {}
        for info in [k for v in self.clips.values() for k in v] + list(self.backgrounds):
            other = seen.setdefault(info.source, info.split)
            if other != info.split:
                raise ConfigurationError(f"{info.source} appears in splits {other!r} and {info.split!r}")

    @classmethod
    def synthetic(cls, num_classes, splits=("train", "dev", "test"), clips_per_class=16,
                  clip_duration_s=4.0, num_backgrounds=8, background_duration_s=30.0, seed=0):
        """Corpus drawn from the synthetic class bank; splits use disjoint clip seeds."""
        clips = {c: [] for c in range(num_classes)}
        backgrounds = []
        for s, split in enumerate(splits):
            for c in range(num_classes):
                for k in range(clips_per_class):
                    clip_seed = int(np.random.SeedSequence([seed, s, c, k]).generate_state(1)[0])
                    clips[c].append(ClipInfo(f"synth:{num_classes}:{c}:{clip_seed}:{clip_duration_s}",
                                             clip_duration_s, split))
            for k in range(num_backgrounds):
                bg_seed = int(np.random.SeedSequence([seed, s, 10_000 + k]).generate_state(1)[0])
                backgrounds.append(ClipInfo(f"noise:{bg_seed}:{background_duration_s}", background_duration_s, split))
        names = [f"synth{c:02d}" for c in range(num_classes)]
        return cls(names, clips, backgrounds)

    @classmethod
    def from_directory(cls, foreground_root, background_root):
        """Index ``<root>/<split>/<class name>/*.wav`` and ``<bg root>/<split>/*.wav``."""
        foreground_root, background_root = Path(foreground_root), Path(background_root)
        names = sorted({p.name for split in foreground_root.iterdir() if split.is_dir()
                        for p in split.iterdir() if p.is_dir()})
        clips = {c: [] for c in range(len(names))}
        for split in sorted(p for p in foreground_root.iterdir() if p.is_dir()):
            for c, name in enumerate(names):
                for wav in sorted((split / name).glob("*.wav")):
                    clips[c].append(ClipInfo(str(wav), _wav_duration(wav), split.name))
        backgrounds = [ClipInfo(str(wav), _wav_duration(wav), split.name)
                       for split in sorted(p for p in background_root.iterdir() if p.is_dir())
                       for wav in sorted(split.glob("*.wav"))]
        corpus = cls(names, clips, backgrounds)
        corpus.check_disjoint()
        return corpus


def _wav_duration(path):
    samples, rate = read_wav(path)
    return samples.shape[0] / rate


# -- scene description ---------------------------------------------------------

@dataclass(frozen=True)
class EventSpec:
    class_index: int
    clip_source: str
    clip_offset_s: float
    clip_duration_s: float
    onset_s: float
    snr_db: float


@dataclass(frozen=True)
class BackgroundSpec:
    source: str
    ref_db: float = -50.0
    offset_s: float = 0.0


@dataclass(frozen=True)
class SceneSpec:
    duration_s: float
    sample_rate: int
    num_classes: int
    background: BackgroundSpec
    events: tuple = ()
    seed: int = 0
    target_classes: tuple = ()

    @property
    def num_samples(self):
        return int(round(self.duration_s * self.sample_rate))

    @property
    def active_classes(self):
        return sorted({e.class_index for e in self.events})

    def to_dict(self):
        d = asdict(self)
        d["events"] = [asdict(e) for e in self.events]
        d["target_classes"] = list(self.target_classes)
        return {"scene_spec_version": SCENE_SPEC_VERSION, **d}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        version = d.pop("scene_spec_version", None)
        if version != SCENE_SPEC_VERSION:
            raise ConfigurationError(f"unsupported scene_spec_version {version!r}")
        return cls(
            duration_s=d["duration_s"],
            sample_rate=d["sample_rate"],
            num_classes=d["num_classes"],
            background=BackgroundSpec(**d["background"]),
            events=tuple(EventSpec(**e) for e in d["events"]),
            seed=d["seed"],
            target_classes=tuple(d["target_classes"]),
        )

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1)


@dataclass(frozen=True)
class SceneConfig:
    """Scene-generation parameters.

    ``class_policy`` is ``"mix3"``, ``"mix3-5"`` or an explicit tuple of
    allowed distinct-class counts (drawn uniformly).
    """

    duration_s: float = 6.0
    sample_rate: int = DEFAULT_SAMPLE_RATE
    num_events: int = 6
    class_policy: object = "mix3"
    min_clip_s: float = 1.5
    max_clip_s: float = 3.0
    snr_range_db: tuple = (15.0, 25.0)
    ref_db: float = -50.0
    max_events_per_class: int = 2
    num_targets: int = 3

    def class_counts(self):
        if isinstance(self.class_policy, str):
            try:
                return CLASS_POLICIES[self.class_policy]
            except KeyError:
                raise ConfigurationError(f"unknown class policy {self.class_policy!r}") from None
        counts = tuple(int(k) for k in self.class_policy)
        if not counts or min(counts) < 1:
            raise ConfigurationError(f"invalid class counts {counts}")
        return counts

    def to_dict(self):
        d = asdict(self)
        if not isinstance(self.class_policy, str):
            d["class_policy"] = list(self.class_policy)
        d["snr_range_db"] = list(self.snr_range_db)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "class_policy" in d and not isinstance(d["class_policy"], str):
            d["class_policy"] = tuple(d["class_policy"])
        if "snr_range_db" in d:
            d["snr_range_db"] = tuple(d["snr_range_db"])
        return cls(**d)


@dataclass
class RenderedScene:
    mixture: Waveform
    stems: StemSet
    background: Waveform
    spec: SceneSpec
    event_signals: list = field(default_factory=list)
    """Per-event scaled signals (same order as ``spec.events``), each over its own support."""


def sample_scene_spec(corpus, config, rng_seed):
    """Draw a random scene description from ``corpus``."""
    rng = np.random.default_rng(int(rng_seed))
    sr = config.sample_rate
    n_total = int(round(config.duration_s * sr))
    counts = config.class_counts()
    available = sorted(c for c, v in corpus.clips.items() if v)
    if len(available) < max(counts):
        raise ConfigurationError(f"corpus has {len(available)} usable classes, policy needs {max(counts)}")
    k = int(counts[rng.integers(len(counts))])
    if not k <= config.num_events <= k * config.max_events_per_class:
        raise ConfigurationError(
            f"{config.num_events} events cannot cover {k} classes with at most "
            f"{config.max_events_per_class} events per class")
    classes = [int(c) for c in rng.choice(available, size=k, replace=False)]

    per_class = np.ones(k, dtype=int)
    for _ in range(config.num_events - k):
        open_slots = np.flatnonzero(per_class < config.max_events_per_class)
        per_class[open_slots[rng.integers(len(open_slots))]] += 1

    min_n = int(round(config.min_clip_s * sr))
    max_n = int(round(config.max_clip_s * sr))
    if max_n > n_total:
        raise ConfigurationError("clip duration exceeds scene duration")
    events = []
    for cls, count in zip(classes, per_class):
        pool = corpus.clips[cls]
        picks = rng.choice(len(pool), size=count, replace=len(pool) < count)
        for p in picks:
            info = pool[int(p)]
            clip_len = int(math.floor(info.duration_s * sr))
            if clip_len < min_n:
                raise ConfigurationError(f"clip {info.source} shorter than {config.min_clip_s} s")
            dur = int(rng.integers(min_n, min(max_n, clip_len) + 1))
            offset = int(rng.integers(0, clip_len - dur + 1))
            onset = int(rng.integers(0, n_total - dur + 1))
            snr = float(rng.uniform(*config.snr_range_db))
            events.append(EventSpec(cls, info.source, offset / sr, dur / sr, onset / sr, snr))

    if corpus.backgrounds:
        bg = corpus.backgrounds[int(rng.integers(len(corpus.backgrounds)))]
        bg_len = int(math.floor(bg.duration_s * sr))
        if bg_len < n_total:
            raise ConfigurationError(f"background {bg.source} shorter than the scene")
        background = BackgroundSpec(bg.source, config.ref_db, int(rng.integers(0, bg_len - n_total + 1)) / sr)
    else:
        background = BackgroundSpec(f"silence:{config.duration_s}", config.ref_db, 0.0)

    targets = tuple(int(c) for c in rng.permutation(classes)[: config.num_targets])
    return SceneSpec(config.duration_s, sr, corpus.num_classes, background, tuple(events),
                     int(rng_seed), targets)


def _rms(x):
    return float(np.sqrt(np.mean(np.square(x))))


def render_scene(spec, corpus=None):
    """Render a :class:`SceneSpec` into mixture, per-class stems and background.

    The background is scaled to ``ref_db`` dBFS RMS; each event clip is
    normalized to unit RMS and then scaled so its RMS over its own support is
    ``snr_db`` above the background RMS over the same samples (or above the
    ``ref_db`` level if the background is silent). If the mixture peak exceeds
    1 every signal is scaled down by the same factor.
    """
    sr = spec.sample_rate
    n = spec.num_samples
    ref_level = 10.0 ** (spec.background.ref_db / 20.0)

    bg_src = load_source(spec.background.source, sr)
    start = int(round(spec.background.offset_s * sr))
    background = np.array(bg_src[start:start + n], dtype=np.float64)
    if background.shape[0] < n:
        raise ConfigurationError(f"background {spec.background.source} too short at offset {spec.background.offset_s}")
    bg_rms = _rms(background)
    if bg_rms > 0:
        background *= ref_level / bg_rms

    stems = np.zeros((spec.num_classes, n))
    event_signals = []
    for ev in spec.events:
        if not 0 <= ev.class_index < spec.num_classes:
            raise ConfigurationError(f"event class {ev.class_index} outside [0, {spec.num_classes})")
        src = load_source(ev.clip_source, sr)
        off = int(round(ev.clip_offset_s * sr))
        dur = int(round(ev.clip_duration_s * sr))
        onset = int(round(ev.onset_s * sr))
        if onset < 0 or onset + dur > n:
            raise ConfigurationError(f"event at {ev.onset_s} s does not fit in {spec.duration_s} s")
        clip = np.array(src[off:off + dur], dtype=np.float64)
        if clip.shape[0] < dur:
            raise ConfigurationError(
                f"clip {ev.clip_source} is shorter than offset+duration; re-sample the offset")
        clip_rms = _rms(clip)
        if clip_rms == 0:
            raise ConfigurationError(f"clip {ev.clip_source} is silent over the requested segment")
        local_bg = _rms(background[onset:onset + dur]) if bg_rms > 0 else ref_level
        signal = clip * (10.0 ** (ev.snr_db / 20.0) * local_bg / clip_rms)
        stems[ev.class_index, onset:onset + dur] += signal
        event_signals.append(signal)

    mixture = background + stems.sum(axis=0)
    peak = float(np.max(np.abs(mixture)))
    if peak > 1.0:
        scale = 1.0 / peak
        mixture, background, stems = mixture * scale, background * scale, stems * scale
        event_signals = [s * scale for s in event_signals]

    return RenderedScene(
        Waveform(mixture, sr),
        StemSet(stems, frozenset(spec.active_classes), sr),
        Waveform(background, sr),
        spec,
        event_signals,
    )


# -- datasets on disk ----------------------------------------------------------

def item_seed(seed, index):
    """Per-item seed; independent of worker layout."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1, np.uint64)[0] >> 1)


def build_dataset(config, corpus, out_dir, count, seed=0, split=None):
    """Render ``count`` scenes into ``out_dir`` and return the manifest records.

    Layout::

        out_dir/dataset.json          config echo
        out_dir/classes.txt           one class name per line (line i = class i)
        out_dir/manifest.jsonl        one record per item
        out_dir/specs/<id>.json
        out_dir/audio/<id>.{mix,bg,stemNN}.wav

    Items are appended to the manifest as they complete, so an interrupted
    build resumes where it stopped when called again with the same arguments.
    """
    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    (out_dir / "specs").mkdir(exist_ok=True)
    if split is not None:
        corpus = corpus.for_split(split)
    header = {"scene_config": config.to_dict(), "count": int(count), "seed": int(seed), "split": split,
              "num_classes": corpus.num_classes}
    header_path = out_dir / "dataset.json"
    if header_path.exists():
        if json.loads(header_path.read_text()) != header:
            raise ConfigurationError(f"{out_dir} holds a dataset built with different settings")
    else:
        header_path.write_text(json.dumps(header, indent=1))
    (out_dir / "classes.txt").write_text("".join(f"{name}\n" for name in corpus.class_names))

    manifest_path = out_dir / "manifest.jsonl"
    records = read_manifest(manifest_path, resolve=False) if manifest_path.exists() else []
    with open(manifest_path, "a") as manifest:
        for index in range(len(records), count):
            spec = sample_scene_spec(corpus, config, item_seed(seed, index))
            scene = render_scene(spec, corpus)
            record = _write_item(out_dir, f"{index:06d}", scene)
            manifest.write(json.dumps(record) + "\n")
            manifest.flush()
            records.append(record)
    return records


def _write_item(out_dir, item_id, scene):
    sr = scene.spec.sample_rate
    spec_path = f"specs/{item_id}.json"
    (out_dir / spec_path).write_text(scene.spec.to_json())
    mix_path = f"audio/{item_id}.mix.wav"
    bg_path = f"audio/{item_id}.bg.wav"
    write_wav(out_dir / mix_path, scene.mixture.samples, sr)
    write_wav(out_dir / bg_path, scene.background.samples, sr)
    stem_paths = []
    for c in range(scene.stems.num_classes):
        path = f"audio/{item_id}.stem{c:02d}.wav"
        write_wav(out_dir / path, scene.stems.stems[c], sr)
        stem_paths.append(path)
    return {
        "id": item_id,
        "mixture_path": mix_path,
        "background_path": bg_path,
        "stem_paths": stem_paths,
        "spec_path": spec_path,
        "active_classes": scene.spec.active_classes,
        "target_classes": list(scene.spec.target_classes),
        "sample_rate": sr,
    }


def read_manifest(path, resolve=True):
    """Manifest records; with ``resolve`` the paths become absolute."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    records = []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            if resolve:
                root = path.parent
                for key in ("mixture_path", "background_path", "spec_path"):
                    rec[key] = str(root / rec[key])
                rec["stem_paths"] = [str(root / p) for p in rec["stem_paths"]]
            records.append(rec)
    return records


def read_class_names(manifest_path):
    path = Path(manifest_path)
    root = path if path.is_dir() else path.parent
    names_file = root / "classes.txt"
    return names_file.read_text().splitlines() if names_file.exists() else None


@dataclass
class LoadedItem:
    id: str
    mixture: np.ndarray
    stems: np.ndarray
    background: np.ndarray
    active_classes: list
    target_classes: list
    sample_rate: int


def load_item(record):
    """Read the audio of one (resolved) manifest record as float64 arrays."""
    mixture, sr = read_wav(record["mixture_path"])
    background, _ = read_wav(record["background_path"])
    stems = np.stack([read_wav(p)[0] for p in record["stem_paths"]])
    return LoadedItem(record["id"], mixture, stems, background, list(record["active_classes"]),
                      list(record["target_classes"]), sr)


def load_dataset(manifest_path):
    return [load_item(r) for r in read_manifest(manifest_path)]


def dataset_exists(out_dir):
    return os.path.exists(Path(out_dir) / "manifest.jsonl")
