"""Corpus types, label files, synthetic corpus generation and splitting."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._rng import substream
from .features import (CANONICAL_SAMPLE_RATE, LogMel, MelConfig, StftConfig, WaveClip, logmel, read_lmel,
                       read_wav)

TUT2018_SCENES = ("airport", "bus", "metro", "metro_station", "park", "public_square", "shopping_mall",
                  "street_pedestrian", "street_traffic", "tram")
PSEUDO_LABEL_TOLERANCE = 1e-6
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class SceneVocabulary:
    names: tuple

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if len(self.names) < 2:
            raise ValueError("a scene vocabulary needs at least 2 scenes")
        if len(set(self.names)) != len(self.names):
            raise ValueError("scene names must be unique")

    def __len__(self):
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


@dataclass(frozen=True)
class EventVocabulary:
    names: tuple

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if len(self.names) < 1:
            raise ValueError("an event vocabulary needs at least 1 event")
        if len(set(self.names)) != len(self.names):
            raise ValueError("event names must be unique")

    def __len__(self):
        return len(self.names)


def default_scenes(k: int = 10) -> SceneVocabulary:
    if k <= len(TUT2018_SCENES):
        return SceneVocabulary(TUT2018_SCENES[:k])
    return SceneVocabulary([f"scene_{j:02d}" for j in range(k)])


def default_events(e: int = 527) -> EventVocabulary:
    return EventVocabulary([f"event_{n:03d}" for n in range(e)])


@dataclass
class LabeledExample:
    clip_id: str
    features: LogMel
    scene_index: int
    event_probs: np.ndarray

    def __post_init__(self):
        self.event_probs = np.asarray(self.event_probs, dtype=np.float64)
        if not np.all(np.isfinite(self.event_probs)) or self.event_probs.min(initial=0) < 0 \
                or self.event_probs.max(initial=0) > 1:
            raise ValueError(f"{self.clip_id}: event probabilities must be finite and within [0, 1]")

    def scene_onehot(self, k: int) -> np.ndarray:
        y = np.zeros(k)
        y[self.scene_index] = 1.0
        return y


@dataclass
class CorpusSplit:
    train: list
    test: list

    def validate(self, k: int | None = None, require_test: bool = True) -> None:
        if not self.train:
            raise ValueError("the train split is empty")
        if require_test and not self.test:
            raise ValueError("the test split is empty")
        overlap = {e.clip_id for e in self.train} & {e.clip_id for e in self.test}
        if overlap:
            raise ValueError(f"clips appear in both splits: {sorted(overlap)[:5]}")
        if k is not None:
            missing = set(range(k)) - {e.scene_index for e in self.train}
            if missing:
                raise ValueError(f"scenes {sorted(missing)} have no training clips")


# --- label files --------------------------------------------------------------

def load_scene_labels(path, scenes: SceneVocabulary) -> dict:
    labels = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["clip_id", "scene"]:
            raise ValueError(f"{path}: expected header 'clip_id,scene', found {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2 or not row[0]:
                raise ValueError(f"{path}:{lineno}: malformed row {row}")
            clip_id, scene = row[0].strip(), row[1].strip()
            if scene not in scenes.names:
                raise ValueError(f"{path}:{lineno}: unknown scene {scene!r} for clip {clip_id!r}")
            if clip_id in labels:
                raise ValueError(f"{path}:{lineno}: duplicate clip_id {clip_id!r}")
            labels[clip_id] = scenes.index(scene)
    return labels


def write_scene_labels(path, labels: dict, scenes: SceneVocabulary) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["clip_id", "scene"])
        for clip_id in sorted(labels):
            writer.writerow([clip_id, scenes.names[labels[clip_id]]])


def load_pseudo_labels(path, events: EventVocabulary) -> dict:
    expected = len(events)
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                clip_id, probs = record["clip_id"], record["probs"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed record ({exc})") from exc
            probs = np.asarray(probs, dtype=np.float64)
            if probs.shape != (expected,):
                raise ValueError(f"{path}:{lineno}: clip {clip_id!r} has {probs.size} probabilities, expected {expected}")
            if not np.all(np.isfinite(probs)):
                raise ValueError(f"{path}:{lineno}: clip {clip_id!r} has non-finite probabilities")
            if probs.min() < -PSEUDO_LABEL_TOLERANCE or probs.max() > 1 + PSEUDO_LABEL_TOLERANCE:
                raise ValueError(f"{path}:{lineno}: clip {clip_id!r} has probabilities outside [0, 1]")
            if clip_id in out:
                raise ValueError(f"{path}:{lineno}: duplicate clip_id {clip_id!r}")
            out[clip_id] = np.clip(probs, 0.0, 1.0)
    return out


def write_pseudo_labels(path, pseudo: dict) -> None:
    with open(path, "w") as fh:
        for clip_id in sorted(pseudo):
            fh.write(json.dumps({"clip_id": clip_id, "probs": [float(p) for p in pseudo[clip_id]]}) + "\n")


# --- synthetic corpus -----------------------------------------------------------

@dataclass
class SynthCorpus:
    clips: list
    scene_labels: dict
    pseudo_labels: dict
    profiles: np.ndarray  # scenes x events presence probabilities
    scenes: SceneVocabulary
    events: EventVocabulary
    params: dict = field(default_factory=dict)


def _event_profiles(rng, k, e, overlap, active_fraction):
    active = max(1, int(round(active_fraction * e)))
    n_shared = int(round(overlap * active))
    order = rng.permutation(e)
    shared, pool = order[:n_shared], order[n_shared:]
    n_own = active - n_shared
    profiles = rng.uniform(0.05, 0.15, size=(k, e))
    for j in range(k):
        if n_own * k <= len(pool):
            own = pool[j * n_own:(j + 1) * n_own]
        else:
            own = rng.choice(pool, size=min(n_own, len(pool)), replace=False)
        members = np.concatenate([shared, own]).astype(int)
        profiles[j, members] = rng.uniform(0.5, 0.95, size=members.size)
    return profiles


def _band_noise(rng, n, sr, lo, hi):
    spectrum = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    spectrum[(freqs < lo) | (freqs > hi)] = 0.0
    out = np.fft.irfft(spectrum, n)
    peak = np.max(np.abs(out))
    return out / peak if peak > 0 else out


def _render_clip(rng, present, signatures, n_samples, sr):
    audio = 0.005 * rng.standard_normal(n_samples)
    for n in present:
        freq, kind = signatures[n]
        for _ in range(1 + rng.integers(3)):
            length = min(n_samples, int(rng.uniform(0.1, 0.6) * sr))
            start = int(rng.integers(0, n_samples - length + 1))
            amp = rng.uniform(0.05, 0.2)
            if kind == 0:
                t = np.arange(length) / sr
                burst = np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
            else:
                burst = _band_noise(rng, length, sr, freq / 1.2, freq * 1.2)
            audio[start:start + length] += amp * np.hanning(length) * burst
    peak = np.max(np.abs(audio))
    if peak > 0.99:
        audio *= 0.99 / peak
    return audio


def synth_corpus(seed: int, scenes: SceneVocabulary, events: EventVocabulary, clips_per_scene: int,
                 clip_seconds: float, overlap: float = 0.5, active_fraction: float = 0.3,
                 label_noise: float = 0.1, tag_fidelity: float = 0.0,
                 sample_rate: int = CANONICAL_SAMPLE_RATE) -> SynthCorpus:
    """Deterministic stand-in for a real scene corpus plus tagger pseudo labels.

    Every scene owns an event profile (presence probability per event). A
    clip renders the events drawn Bernoulli from its scene's profile as tone
    or band-noise bursts; its pseudo label is the profile plus clipped
    Gaussian noise, so labels are imprecise by construction.

    ``tag_fidelity`` moves each label from the scene profile toward the
    events actually rendered in the clip, the way a real tagger responds to
    content. At 0 labels carry no per-clip information; at any value the
    expected per-scene mean stays the profile.
    """
    if clips_per_scene < 2:
        raise ValueError("clips_per_scene must be >= 2")
    if clip_seconds < 1:
        raise ValueError("clip_seconds must be >= 1")
    if not 0.0 <= overlap <= 1.0:
        raise ValueError("overlap must lie in [0, 1]")
    if not 0.0 <= tag_fidelity <= 1.0:
        raise ValueError("tag_fidelity must lie in [0, 1]")
    rng = substream(seed, "synth")
    k, e = len(scenes), len(events)
    profiles = _event_profiles(rng, k, e, overlap, active_fraction)
    freqs = np.geomspace(150.0, 6000.0, e)[rng.permutation(e)]
    signatures = [(float(freqs[n]), n % 2) for n in range(e)]
    n_samples = int(round(clip_seconds * sample_rate))

    clips, scene_labels, pseudo = [], {}, {}
    for j, scene in enumerate(scenes.names):
        for i in range(clips_per_scene):
            clip_id = f"{scene}_{i:04d}"
            present = np.flatnonzero(rng.random(e) < profiles[j])
            clips.append(WaveClip(clip_id, _render_clip(rng, present, signatures, n_samples, sample_rate),
                                  sample_rate))
            scene_labels[clip_id] = j
            target = profiles[j].copy()
            if tag_fidelity:
                hit = np.zeros(e)
                hit[present] = 1.0
                target += tag_fidelity * (hit - profiles[j])
            pseudo[clip_id] = np.clip(target + label_noise * rng.standard_normal(e), 0.0, 1.0)
    params = dict(seed=seed, clips_per_scene=clips_per_scene, clip_seconds=clip_seconds, overlap=overlap,
                  active_fraction=active_fraction, label_noise=label_noise, tag_fidelity=tag_fidelity,
                  sample_rate=sample_rate)
    return SynthCorpus(clips, scene_labels, pseudo, profiles, scenes, events, params)


def split_corpus(examples, ratio: float, seed: int) -> CorpusSplit:
    """Stratified per-scene split, deterministic in ``seed``."""
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie strictly between 0 and 1")
    rng = substream(seed, "split")
    by_scene = {}
    for ex in sorted(examples, key=lambda x: x.clip_id):
        by_scene.setdefault(ex.scene_index, []).append(ex)
    train, test = [], []
    for scene in sorted(by_scene):
        group = by_scene[scene]
        if len(group) < 2:
            raise ValueError(f"scene {scene} has {len(group)} example(s); at least 2 are needed to split")
        n_train = min(max(int(round(ratio * len(group))), 1), len(group) - 1)
        order = rng.permutation(len(group))
        train.extend(group[i] for i in sorted(order[:n_train]))
        test.extend(group[i] for i in sorted(order[n_train:]))
    return CorpusSplit(sorted(train, key=lambda x: x.clip_id), sorted(test, key=lambda x: x.clip_id))


def build_examples(features: dict, scene_labels: dict, pseudo_labels: dict) -> list:
    """Join per-clip features with both label sources; every clip needs all three."""
    missing = sorted(set(features) ^ set(scene_labels) | set(features) ^ set(pseudo_labels))
    if missing:
        raise ValueError(f"clips lack features or labels: {missing[:5]}")
    return [LabeledExample(cid, features[cid], scene_labels[cid], pseudo_labels[cid]) for cid in sorted(features)]


def stack_features(examples) -> np.ndarray:
    shapes = {ex.features.values.shape for ex in examples}
    if len(shapes) != 1:
        raise ValueError(f"examples have differing feature shapes {sorted(shapes)}")
    return np.stack([ex.features.values for ex in examples])


# --- on-disk corpus -------------------------------------------------------------

def write_manifest(path, *, seed, scenes, events, clips, extra=None) -> None:
    manifest = {"version": MANIFEST_VERSION, "seed": int(seed), "scenes": list(scenes.names),
                "events": list(events.names), "clips": clips}
    if extra:
        manifest.update(extra)
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


def read_manifest(path) -> dict:
    manifest = json.loads(Path(path).read_text())
    if manifest.get("version") != MANIFEST_VERSION:
        raise ValueError(f"{path}: unsupported manifest version {manifest.get('version')}")
    return manifest


@dataclass
class Corpus:
    scenes: SceneVocabulary
    events: EventVocabulary
    split: CorpusSplit
    manifest: dict


def _threads() -> int:
    import os
    try:
        return max(1, int(os.environ.get("RGASC_THREADS", "1")))
    except ValueError:
        return 1


def extract_features(paths: dict, stft_cfg=StftConfig(), mel_cfg=MelConfig()) -> dict:
    """Log-mel features for ``{clip_id: wav_path}``; order-independent."""
    def one(item):
        cid, p = item
        clip = read_wav(p)
        return cid, logmel(WaveClip(cid, clip.samples, clip.sample_rate), stft_cfg, mel_cfg)

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        return dict(pool.map(one, sorted(paths.items())))


def load_corpus(corpus_dir, stft_cfg=StftConfig(), mel_cfg=MelConfig(), features_dir=None) -> Corpus:
    """Load a corpus directory written by ``rgasc synth`` (or laid out the same way).

    Feature files found in ``features_dir`` are reused when their band count
    matches ``mel_cfg``; other clips are extracted from their WAVs.
    """
    corpus_dir = Path(corpus_dir)
    manifest = read_manifest(corpus_dir / "manifest.json")
    scenes, events = SceneVocabulary(manifest["scenes"]), EventVocabulary(manifest["events"])
    scene_labels = load_scene_labels(corpus_dir / "scenes.csv", scenes)
    pseudo = load_pseudo_labels(corpus_dir / "pseudo_labels.jsonl", events)
    feats, to_extract = {}, {}
    fdir = Path(features_dir) if features_dir else corpus_dir / "features"
    for clip in manifest["clips"]:
        lmel = fdir / f"{clip['clip_id']}.lmel"
        cached = read_lmel(lmel) if lmel.exists() else None
        if cached is not None and cached.values.shape[1] == mel_cfg.n_mels:
            feats[clip["clip_id"]] = cached
        else:  # missing, or written with another band count
            to_extract[clip["clip_id"]] = corpus_dir / clip["path"]
    feats.update(extract_features(to_extract, stft_cfg, mel_cfg))
    by_id = {ex.clip_id: ex for ex in build_examples(feats, scene_labels, pseudo)}
    split = CorpusSplit([by_id[c["clip_id"]] for c in manifest["clips"] if c["split"] == "train"],
                        [by_id[c["clip_id"]] for c in manifest["clips"] if c["split"] == "test"])
    split.validate(len(scenes))
    return Corpus(scenes, events, split, manifest)


def cosine_similarity(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(a @ b / (math.sqrt(a @ a) * math.sqrt(b @ b)))
