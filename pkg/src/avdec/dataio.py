"""Annotation loading, vocabulary, and the synthetic desk-scale dataset.

Annotations follow the dense-captioning JSON layout:
    {video-id: {"duration": sec, "timestamps": [[s, e], ...], "sentences": [...]}}
Segments are normalized to (center, length) in [0, 1] of the duration.

The synthetic generator builds videos from a fixed table of event templates.
Each template owns a pure tone (within the constant-Q range), a random but
fixed video feature motif, and a caption. Video features always carry four
clean temporal-position channels; whether they also carry the event motifs
is controlled per dataset, which is how audio-only-distinguishable data is
produced.
"""

from __future__ import annotations

import dataclasses
import json
import string
from pathlib import Path

import numpy as np

from avdec import audio, checkpoint

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")

CAPTION_TEMPLATES = (
    "a dog barks in the yard",
    "someone plays a piano melody",
    "the crowd cheers very loudly",
    "a phone rings on the desk",
    "water pours into a glass",
    "a guitar strums a chord",
    "the engine revs with force",
    "a whistle blows two times",
    "glass shatters on the floor",
    "a baby laughs with joy",
    "thunder rumbles in the distance",
    "a trumpet plays a note",
)


def template_tone_hz(k, n_templates=len(CAPTION_TEMPLATES)):
    """Geometrically spaced pure tones, 300 Hz to 1.8 kHz."""
    return 300.0 * (1800.0 / 300.0) ** (k / (n_templates - 1))


# -- annotations ------------------------------------------------------------------


@dataclasses.dataclass
class VideoEntry:
    duration: float
    timestamps: list
    sentences: list
    segments: list  # (center, length) normalized


@dataclasses.dataclass
class DatasetIndex:
    videos: dict
    split: str = "train"

    def ids(self):
        return list(self.videos)


def normalize_segment(start, end, duration):
    return ((start + end) / 2.0 / duration, (end - start) / duration)


def denormalize_segment(center, length, duration):
    return ((center - length / 2.0) * duration, (center + length / 2.0) * duration)


def load_annotations(path, split="train"):
    with open(path) as f:
        raw = json.load(f)
    videos = {}
    for vid, entry in raw.items():
        duration = float(entry["duration"])
        stamps = entry["timestamps"]
        sentences = entry["sentences"]
        if len(stamps) != len(sentences):
            raise ValueError(
                f"{vid}: {len(stamps)} timestamps vs {len(sentences)} sentences"
            )
        segments = []
        for s, e in stamps:
            if not 0.0 <= s < e <= duration + 1e-9:
                raise ValueError(f"{vid}: bad timestamp [{s}, {e}] for duration {duration}")
            segments.append(normalize_segment(s, e, duration))
        videos[vid] = VideoEntry(duration, [list(map(float, t)) for t in stamps],
                                 list(sentences), segments)
    return DatasetIndex(videos, split)


def save_annotations(index, path):
    payload = {
        vid: {"duration": v.duration, "timestamps": v.timestamps, "sentences": v.sentences}
        for vid, v in index.videos.items()
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)


# -- vocabulary --------------------------------------------------------------------

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def tokenize(sentence):
    return sentence.lower().translate(_PUNCT_TABLE).split()


class Vocabulary:
    """word -> id with specials pad=0, bos=1, eos=2, unk=3."""

    def __init__(self, words):
        self.id_to_word = list(SPECIALS) + list(words)
        self.word_to_id = {w: i for i, w in enumerate(self.id_to_word)}
        if len(self.word_to_id) != len(self.id_to_word):
            raise ValueError("duplicate words in vocabulary")

    def __len__(self):
        return len(self.id_to_word)

    def encode(self, sentence):
        ids = [self.word_to_id.get(w, UNK) for w in tokenize(sentence)]
        return [BOS] + ids + [EOS]

    def decode(self, ids):
        words = []
        for i in ids:
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            words.append(self.id_to_word[i])
        return " ".join(words)

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.id_to_word[len(SPECIALS):], f)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls(json.load(f))


def build_vocab(index, max_size=6000):
    counts = {}
    for entry in index.videos.values():
        for sentence in entry.sentences:
            for word in tokenize(sentence):
                counts[word] = counts.get(word, 0) + 1
    if not counts:
        raise ValueError("empty corpus")
    ranked = sorted(counts, key=lambda w: (-counts[w], w))
    return Vocabulary(ranked[: max_size - len(SPECIALS)])


# -- synthetic dataset ----------------------------------------------------------------


@dataclasses.dataclass
class SyntheticSpec:
    seed: int = 0
    n_videos: int = 20
    n_val_videos: int = 0
    frames_per_video: int = 64
    feature_dim: int = 500
    n_templates: int = len(CAPTION_TEMPLATES)
    min_events: int = 1
    max_events: int = 3
    min_length: float = 0.15
    max_length: float = 0.35
    duration: float = 3.2
    video_cues: bool = True
    tone_amp: float = 0.3
    chirp_amp: float = 0.05
    noise_sigma: float = 0.1


N_POSITION_CHANNELS = 4


def _position_channels(t_f):
    i = np.arange(t_f)
    ramp = i / (t_f - 1)
    return np.stack([ramp, 1.0 - ramp, np.sin(np.pi * ramp), 2.0 * ramp - 1.0], axis=1)


def _sample_events(rng, n_events, min_len, max_len, min_gap=0.03):
    for _ in range(200):
        lengths = rng.uniform(min_len, max_len, size=n_events)
        free = 1.0 - lengths.sum() - min_gap * (n_events + 1)
        if free <= 0:
            continue
        cuts = np.sort(rng.uniform(0.0, free, size=n_events))
        starts = []
        pos = min_gap
        prev_cut = 0.0
        for i in range(n_events):
            pos += cuts[i] - prev_cut
            prev_cut = cuts[i]
            starts.append(pos)
            pos += lengths[i] + min_gap
        return [(s + l / 2.0, l) for s, l in zip(starts, lengths)]
    raise ValueError(f"cannot pack {n_events} events of length <= {max_len}")


def _render_audio(rng, spec, events):
    n = int(round(spec.duration * audio.SAMPLE_RATE))
    t = np.arange(n) / audio.SAMPLE_RATE
    frac = t / spec.duration
    # background chirp, 80 -> 250 Hz over the clip: a temporal position cue
    phase = 2.0 * np.pi * (80.0 * t + 0.5 * (250.0 - 80.0) * t * t / spec.duration)
    wave_out = spec.chirp_amp * np.sin(phase)
    wave_out += 0.01 * rng.standard_normal(n)
    for template, (center, length) in events:
        mask = np.abs(frac - center) <= length / 2.0
        tone = spec.tone_amp * np.sin(2.0 * np.pi * template_tone_hz(template) * t)
        wave_out[mask] += tone[mask]
    return np.clip(wave_out, -1.0, 1.0)


def _render_video(rng, spec, events, motifs):
    t_f, d = spec.frames_per_video, spec.feature_dim
    feats = np.zeros((t_f, d), dtype=np.float32)
    feats[:, :N_POSITION_CHANNELS] = _position_channels(t_f)
    feats[:, N_POSITION_CHANNELS:] = spec.noise_sigma * rng.standard_normal(
        (t_f, d - N_POSITION_CHANNELS)
    )
    if spec.video_cues:
        centers = (np.arange(t_f) + 0.5) / t_f
        for template, (center, length) in events:
            mask = np.abs(centers - center) <= length / 2.0
            feats[mask, N_POSITION_CHANNELS:] += motifs[template]
    return feats


def generate_synthetic(spec, out_dir):
    """Write annotations, video features, and WAVs; return the two indexes.

    Outputs under out_dir:
        train.json, val.json    annotations (val.json only if n_val_videos > 0)
        features_video.dcav     records video/<id>, each T_f x D float32
        wav/<id>.wav            16 kHz mono audio
    """
    if spec.n_templates > len(CAPTION_TEMPLATES):
        raise ValueError(f"at most {len(CAPTION_TEMPLATES)} templates available")
    if spec.max_events < spec.min_events or spec.min_events < 1:
        raise ValueError("bad event count range")
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    motifs = rng.standard_normal(
        (spec.n_templates, spec.feature_dim - N_POSITION_CHANNELS)
    ).astype(np.float32)

    video_feats = {}
    indexes = {}
    counter = 0
    for split, count in (("train", spec.n_videos), ("val", spec.n_val_videos)):
        videos = {}
        for _ in range(count):
            vid = f"syn_{counter:04d}"
            counter += 1
            n_events = int(rng.integers(spec.min_events, spec.max_events + 1))
            segments = _sample_events(rng, n_events, spec.min_length, spec.max_length)
            templates = rng.choice(spec.n_templates, size=n_events, replace=False)
            events = list(zip(templates.tolist(), segments))
            events.sort(key=lambda e: e[1][0])
            wave_out = _render_audio(rng, spec, events)
            audio.write_wav(wav_dir / f"{vid}.wav", wave_out)
            video_feats[f"video/{vid}"] = _render_video(rng, spec, events, motifs)
            stamps, sentences = [], []
            for template, (center, length) in events:
                s, e = denormalize_segment(center, length, spec.duration)
                stamps.append([s, e])
                sentences.append(CAPTION_TEMPLATES[template])
            videos[vid] = VideoEntry(
                spec.duration, stamps, sentences,
                [normalize_segment(s, e, spec.duration) for s, e in stamps],
            )
        indexes[split] = DatasetIndex(videos, split)
        if count or split == "train":
            save_annotations(indexes[split], out_dir / f"{split}.json")
    checkpoint.save_tensors(out_dir / "features_video.dcav", video_feats)
    return indexes["train"], indexes["val"]


def extract_audio_features(wav_dir, ids, kind):
    """Compute per-video audio features from WAVs; returns {audio/<id>: T_a x F}."""
    out = {}
    for vid in ids:
        samples, rate = audio.read_wav(Path(wav_dir) / f"{vid}.wav")
        out[f"audio/{vid}"] = audio.extract(samples, rate, kind).astype(np.float32)
    return out


def load_features(path, prefix):
    """Read a feature container, stripping `prefix/` from record names."""
    raw = checkpoint.load_tensors(path)
    out = {}
    for name, arr in raw.items():
        head, _, vid = name.partition("/")
        if head == prefix and vid:
            out[vid] = arr
    if not out:
        raise ValueError(f"{path}: no records with prefix {prefix!r}")
    return out


# -- matched-filter ceiling -------------------------------------------------------


def audio_frame_positions(n_frames, duration):
    """Normalized clip position of each analysis frame's center."""
    centers = (np.arange(n_frames) * audio.HOP + audio.WINDOW / 2.0) / audio.SAMPLE_RATE
    return centers / duration


def _segment_iou(a, b):
    s1, e1 = a[0] - a[1] / 2.0, a[0] + a[1] / 2.0
    s2, e2 = b[0] - b[1] / 2.0, b[0] + b[1] / 2.0
    inter = max(0.0, min(e1, e2) - max(s1, s2))
    union = max(e1, e2) - min(s1, s2)
    return inter / union if union > 0 else 0.0


def matched_filter_miou(index, wav_dir, n_templates=len(CAPTION_TEMPLATES)):
    """Localization ceiling: recover each event from its tone-bin energy.

    Uses ground-truth template identity (from the caption), so this is a
    sanity bound on what the features support, not a fair baseline.
    """
    template_by_caption = {CAPTION_TEMPLATES[k]: k for k in range(n_templates)}
    freqs = audio.cqt_frequencies()
    ious = []
    for vid, entry in index.videos.items():
        samples, rate = audio.read_wav(Path(wav_dir) / f"{vid}.wav")
        spec_mag = audio.cqt(samples if rate == audio.SAMPLE_RATE
                             else audio.resample(samples, rate, audio.SAMPLE_RATE))
        pos = audio_frame_positions(spec_mag.shape[0], entry.duration)
        for sentence, gt in zip(entry.sentences, entry.segments):
            template = template_by_caption[sentence]
            bin_k = int(np.argmin(np.abs(freqs - template_tone_hz(template))))
            energy = spec_mag[:, bin_k]
            active = energy >= 0.5 * energy.max()
            runs = []
            start = None
            for i, flag in enumerate(list(active) + [False]):
                if flag and start is None:
                    start = i
                elif not flag and start is not None:
                    runs.append((start, i - 1))
                    start = None
            best = max(runs, key=lambda r: r[1] - r[0])
            s, e = pos[best[0]], pos[best[1]]
            pred = ((s + e) / 2.0, max(e - s, 1e-6))
            ious.append(_segment_iou(pred, gt))
    return float(np.mean(ious))
