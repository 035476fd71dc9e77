import json
import math
from pathlib import Path

import numpy as np
import pytest
from scipy.io import wavfile
from scipy.stats import chisquare

from sound_selector.audio import load_clip, write_wav
from sound_selector.errors import ConfigurationError, InvalidArgumentError
from sound_selector.signal import si_sdr
from sound_selector.synth import (
    ClipInfo,
    CorpusIndex,
    EventSpec,
    SceneConfig,
    SceneSpec,
    build_dataset,
    class_band,
    load_item,
    read_class_names,
    read_manifest,
    render_scene,
    sample_scene_spec,
    synth_class_clip,
)


@pytest.fixture(scope="module")
def corpus():
    return CorpusIndex.synthetic(5).for_split("train")


def band_energy_profile(x, sample_rate=8000, bands=32):
    power = np.abs(np.fft.rfft(x)) ** 2
    freqs = np.fft.rfftfreq(x.shape[0], 1.0 / sample_rate)
    edges = np.linspace(0, sample_rate / 2, bands + 1)
    return np.array([power[(freqs >= lo) & (freqs < hi)].sum() for lo, hi in zip(edges[:-1], edges[1:])])


def rms_db(x):
    return 10 * np.log10(np.mean(np.square(x)))


class TestSyntheticBank:
    def test_deterministic(self):
        a = synth_class_clip(2, 2.0, 11).samples
        b = synth_class_clip(2, 2.0, 11).samples
        np.testing.assert_array_equal(a, b)

    def test_seed_changes_clip(self):
        assert not np.array_equal(synth_class_clip(2, 2.0, 11).samples, synth_class_clip(2, 2.0, 12).samples)

    def test_duration(self):
        assert len(synth_class_clip(0, 1.5, 0)) == 12000

    @pytest.mark.parametrize("bank_size", [3, 5, 8])
    def test_classes_spectrally_distinct(self, bank_size):
        profiles = [band_energy_profile(synth_class_clip(c, 3.0, 4, bank_size=bank_size).samples)
                    for c in range(bank_size)]
        for i in range(bank_size):
            for j in range(i + 1, bank_size):
                assert np.corrcoef(profiles[i], profiles[j])[0, 1] < 0.3

    def test_energy_inside_class_band(self):
        lo, hi = class_band(3, 8)
        x = synth_class_clip(3, 3.0, 1, bank_size=8).samples
        power = np.abs(np.fft.rfft(x)) ** 2
        freqs = np.fft.rfftfreq(x.shape[0], 1 / 8000)
        assert power[(freqs >= lo) & (freqs <= hi)].sum() / power.sum() > 0.999

    def test_class_outside_bank(self):
        with pytest.raises(InvalidArgumentError):
            synth_class_clip(8, 1.0, 0, bank_size=8)


class TestSampleSceneSpec:
    def test_mix3(self, corpus):
        spec = sample_scene_spec(corpus, SceneConfig(), 5)
        assert len(spec.events) == 6
        assert len(spec.active_classes) == 3
        counts = np.bincount([e.class_index for e in spec.events])
        assert counts.max() <= 2

    def test_deterministic(self, corpus):
        assert sample_scene_spec(corpus, SceneConfig(), 9) == sample_scene_spec(corpus, SceneConfig(), 9)

    def test_event_ranges(self, corpus):
        cfg = SceneConfig()
        for seed in range(50):
            spec = sample_scene_spec(corpus, cfg, seed)
            for ev in spec.events:
                assert 1.5 <= ev.clip_duration_s <= 3.0
                assert 15.0 <= ev.snr_db <= 25.0
                assert 0 <= ev.onset_s and ev.onset_s + ev.clip_duration_s <= spec.duration_s + 1e-12
            assert len(spec.target_classes) == 3
            assert set(spec.target_classes) == set(spec.active_classes)

    def test_mix3_5_uniform(self, corpus):
        cfg = SceneConfig(class_policy="mix3-5")
        n = 10_000
        counts = np.bincount([len(sample_scene_spec(corpus, cfg, s).active_classes) for s in range(n)],
                             minlength=6)[3:]
        sigma = math.sqrt(n * (1 / 3) * (2 / 3))
        assert np.all(np.abs(counts - n / 3) < 3 * sigma)
        assert chisquare(counts).pvalue > 1e-3

    def test_corpus_too_small(self):
        small = CorpusIndex.synthetic(3).for_split("train")
        with pytest.raises(ConfigurationError):
            sample_scene_spec(small, SceneConfig(class_policy="mix3-5"), 0)

    def test_too_few_events_for_classes(self, corpus):
        with pytest.raises(ConfigurationError):
            sample_scene_spec(corpus, SceneConfig(num_events=2), 0)

    def test_json_round_trip(self, corpus):
        spec = sample_scene_spec(corpus, SceneConfig(), 3)
        d = json.loads(spec.to_json())
        assert d["scene_spec_version"] == 1
        assert SceneSpec.from_dict(d) == spec

    def test_unknown_version(self, corpus):
        d = sample_scene_spec(corpus, SceneConfig(), 3).to_dict()
        d["scene_spec_version"] = 2
        with pytest.raises(ConfigurationError):
            SceneSpec.from_dict(d)


class TestRenderScene:
    def test_empty_foreground(self, corpus):
        spec = sample_scene_spec(corpus, SceneConfig(), 0)
        empty = SceneSpec(spec.duration_s, spec.sample_rate, spec.num_classes, spec.background)
        scene = render_scene(empty)
        np.testing.assert_array_equal(scene.mixture.samples, scene.background.samples)
        assert not scene.stems.stems.any()
        assert rms_db(scene.background.samples) == pytest.approx(-50.0, abs=1e-9)

    @pytest.mark.parametrize("seed", range(10))
    def test_additivity_and_stems(self, corpus, seed):
        scene = render_scene(sample_scene_spec(corpus, SceneConfig(class_policy="mix3-5"), seed))
        residual = scene.mixture.samples - scene.background.samples - scene.stems.stems.sum(axis=0)
        assert np.max(np.abs(residual)) < 1e-6
        assert scene.stems.active_classes == set(scene.spec.active_classes)
        for c in range(scene.stems.num_classes):
            if c not in scene.stems.active_classes:
                assert not scene.stems.stems[c].any()

    def test_event_snr_calibration(self, corpus):
        spec = sample_scene_spec(corpus, SceneConfig(), 4)
        events = tuple(EventSpec(**{**e.__dict__, "snr_db": 20.0}) for e in spec.events)
        scene = render_scene(SceneSpec(**{**spec.__dict__, "events": events}))
        sr = spec.sample_rate
        for ev, sig in zip(spec.events, scene.event_signals):
            onset = int(round(ev.onset_s * sr))
            bg = scene.background.samples[onset:onset + sig.shape[0]]
            assert rms_db(sig) - rms_db(bg) == pytest.approx(20.0, abs=0.1)

    def test_same_class_events_share_stem(self, corpus):
        spec = sample_scene_spec(corpus, SceneConfig(), 6)
        scene = render_scene(spec)
        sr = spec.sample_rate
        rebuilt = np.zeros_like(scene.stems.stems)
        for ev, sig in zip(spec.events, scene.event_signals):
            onset = int(round(ev.onset_s * sr))
            rebuilt[ev.class_index, onset:onset + sig.shape[0]] += sig
        np.testing.assert_allclose(rebuilt, scene.stems.stems, rtol=0, atol=1e-12)

    def test_bit_identical_rerender(self, corpus):
        spec = sample_scene_spec(corpus, SceneConfig(), 8)
        a, b = render_scene(spec), render_scene(SceneSpec.from_dict(json.loads(spec.to_json())))
        assert a.mixture.samples.tobytes() == b.mixture.samples.tobytes()
        assert a.stems.stems.tobytes() == b.stems.stems.tobytes()

    def test_peak_normalization_preserves_additivity(self, corpus):
        spec = sample_scene_spec(corpus, SceneConfig(ref_db=-5.0), 1)
        scene = render_scene(spec)
        assert np.max(np.abs(scene.mixture.samples)) <= 1.0 + 1e-12
        residual = scene.mixture.samples - scene.background.samples - scene.stems.stems.sum(axis=0)
        assert np.max(np.abs(residual)) < 1e-6
        for ev, sig in zip(spec.events, scene.event_signals):
            onset = int(round(ev.onset_s * spec.sample_rate))
            bg = scene.background.samples[onset:onset + sig.shape[0]]
            assert rms_db(sig) - rms_db(bg) == pytest.approx(ev.snr_db, abs=0.1)

    def test_missing_clip_named(self, corpus, tmp_path):
        spec = sample_scene_spec(corpus, SceneConfig(), 2)
        missing = str(tmp_path / "nope.wav")
        events = (EventSpec(0, missing, 0.0, 1.5, 0.0, 20.0),)
        with pytest.raises(FileNotFoundError, match="nope.wav"):
            render_scene(SceneSpec(**{**spec.__dict__, "events": events}))

    def test_clip_too_short(self, corpus):
        spec = sample_scene_spec(corpus, SceneConfig(), 2)
        src = corpus.clips[0][0].source  # 4 s clips
        events = (EventSpec(0, src, 3.0, 2.0, 0.0, 20.0),)
        with pytest.raises(ConfigurationError, match="re-sample"):
            render_scene(SceneSpec(**{**spec.__dict__, "events": events}))

    def test_mix3_single_class_baseline(self, corpus):
        vals = []
        for seed in range(1000):
            scene = render_scene(sample_scene_spec(corpus, SceneConfig(), seed))
            target = scene.spec.target_classes[0]
            vals.append(si_sdr(scene.stems.stems[target], scene.mixture.samples))
        assert -8.0 <= np.mean(vals) <= 0.0


class TestLoadClip:
    def test_downsample_length_and_peak(self, tmp_path):
        sr = 16000
        n = 16001
        tone = 0.5 * np.sin(2 * np.pi * 1000 * np.arange(n) / sr)
        wavfile.write(tmp_path / "tone.wav", sr, (tone * 32767).astype(np.int16))
        w = load_clip(tmp_path / "tone.wav", 8000)
        assert w.sample_rate == 8000
        assert abs(len(w) - math.ceil(n / 2)) <= 1
        spectrum = np.abs(np.fft.rfft(w.samples))
        freqs = np.fft.rfftfreq(len(w), 1 / 8000)
        assert abs(freqs[np.argmax(spectrum)] - 1000.0) <= 10.0

    def test_anti_aliasing(self, tmp_path):
        sr = 16000
        tone = 0.5 * np.sin(2 * np.pi * 6000 * np.arange(sr) / sr)  # above the 4 kHz Nyquist
        write_wav(tmp_path / "hi.wav", tone, sr)
        assert np.sqrt(np.mean(load_clip(tmp_path / "hi.wav", 8000).samples ** 2)) < 1e-2

    def test_passthrough(self, tmp_path):
        x = np.random.default_rng(0).uniform(-0.9, 0.9, 800).astype(np.float32)
        wavfile.write(tmp_path / "a.wav", 8000, x)
        np.testing.assert_array_equal(load_clip(tmp_path / "a.wav", 8000).samples, x.astype(np.float64))

    def test_stereo_downmix(self, tmp_path):
        x = np.random.default_rng(1).uniform(-0.5, 0.5, (400, 2)).astype(np.float32)
        wavfile.write(tmp_path / "s.wav", 8000, x)
        np.testing.assert_allclose(load_clip(tmp_path / "s.wav", 8000).samples, x.astype(np.float64).mean(axis=1))

    def test_int16_scaling(self, tmp_path):
        wavfile.write(tmp_path / "i.wav", 8000, np.array([0, 16384, -32768], dtype=np.int16))
        np.testing.assert_array_equal(load_clip(tmp_path / "i.wav", 8000).samples, [0.0, 0.5, -1.0])

    def test_unreadable(self, tmp_path):
        (tmp_path / "bad.wav").write_bytes(b"not a wav file at all")
        with pytest.raises(OSError, match="bad.wav"):
            load_clip(tmp_path / "bad.wav", 8000)


class TestCorpus:
    def test_synthetic_splits_disjoint(self):
        corpus = CorpusIndex.synthetic(4)
        corpus.check_disjoint()
        train = {k.source for v in corpus.for_split("train").clips.values() for k in v}
        test = {k.source for v in corpus.for_split("test").clips.values() for k in v}
        assert train and test and not train & test

    def test_overlap_detected(self):
        info = ClipInfo("a.wav", 2.0, "train")
        corpus = CorpusIndex(["x"], {0: [info, ClipInfo("a.wav", 2.0, "test")]}, [])
        with pytest.raises(ConfigurationError):
            corpus.check_disjoint()

    def test_from_directory(self, tmp_path):
        rng = np.random.default_rng(0)
        for split in ("train", "test"):
            for name in ("dog", "knock", "phone"):
                d = tmp_path / "fg" / split / name
                d.mkdir(parents=True)
                for k in range(2):
                    write_wav(d / f"{name}{k}.wav", 0.1 * rng.standard_normal(16000 * 4), 16000)
            (tmp_path / "bg" / split).mkdir(parents=True)
            write_wav(tmp_path / "bg" / split / "noise.wav", 0.01 * rng.standard_normal(8000 * 8), 8000)
        corpus = CorpusIndex.from_directory(tmp_path / "fg", tmp_path / "bg")
        assert corpus.class_names == ["dog", "knock", "phone"]
        train = corpus.for_split("train")
        spec = sample_scene_spec(train, SceneConfig(), 0)
        scene = render_scene(spec)
        residual = scene.mixture.samples - scene.background.samples - scene.stems.stems.sum(axis=0)
        assert np.max(np.abs(residual)) < 1e-6
        assert rms_db(scene.background.samples) == pytest.approx(-50.0, abs=1e-6)


class TestBuildDataset:
    def test_count_and_files(self, corpus, tmp_path):
        cfg = SceneConfig(duration_s=3.0, num_events=3, max_clip_s=2.0)
        records = build_dataset(cfg, corpus, tmp_path / "d", 100, seed=1)
        assert len(records) == 100
        assert len(read_manifest(tmp_path / "d")) == 100
        assert read_class_names(tmp_path / "d") == corpus.class_names
        for rec in read_manifest(tmp_path / "d"):
            assert Path(rec["mixture_path"]).is_file()
            assert len(rec["stem_paths"]) == corpus.num_classes
            assert all(Path(p).is_file() for p in rec["stem_paths"])
            assert len(rec["active_classes"]) == 3

    def test_files_are_float32_and_additive(self, corpus, tmp_path):
        build_dataset(SceneConfig(), corpus, tmp_path / "d", 3, seed=2)
        rec = read_manifest(tmp_path / "d")[0]
        rate, data = wavfile.read(rec["mixture_path"])
        assert rate == 8000 and data.dtype == np.float32 and data.ndim == 1
        item = load_item(rec)
        assert np.max(np.abs(item.mixture - item.background - item.stems.sum(axis=0))) < 1e-6
        spec = SceneSpec.from_dict(json.loads(Path(rec["spec_path"]).read_text()))
        assert spec.active_classes == rec["active_classes"]

    def test_rerun_bit_identical(self, corpus, tmp_path):
        cfg = SceneConfig(duration_s=3.0, num_events=3, max_clip_s=2.0)
        build_dataset(cfg, corpus, tmp_path / "a", 5, seed=3)
        build_dataset(cfg, corpus, tmp_path / "b", 5, seed=3)
        for p in sorted((tmp_path / "a").rglob("*")):
            if p.is_file():
                assert p.read_bytes() == (tmp_path / "b" / p.relative_to(tmp_path / "a")).read_bytes(), p

    def test_resume(self, corpus, tmp_path):
        cfg = SceneConfig(duration_s=3.0, num_events=3, max_clip_s=2.0)
        build_dataset(cfg, corpus, tmp_path / "full", 6, seed=4)
        build_dataset(cfg, corpus, tmp_path / "part", 6, seed=4)
        lines = (tmp_path / "part" / "manifest.jsonl").read_text().splitlines()
        (tmp_path / "part" / "manifest.jsonl").write_text("\n".join(lines[:2]) + "\n")  # interrupted run
        build_dataset(cfg, corpus, tmp_path / "part", 6, seed=4)
        assert (tmp_path / "part" / "manifest.jsonl").read_text() == (tmp_path / "full" / "manifest.jsonl").read_text()

    def test_settings_change_refused(self, corpus, tmp_path):
        cfg = SceneConfig(duration_s=3.0, num_events=3, max_clip_s=2.0)
        build_dataset(cfg, corpus, tmp_path / "d", 2, seed=4)
        with pytest.raises(ConfigurationError):
            build_dataset(cfg, corpus, tmp_path / "d", 2, seed=5)
