import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avdec import audio, checkpoint, dataio


def write_annotations(tmp_path, payload, name="ann.json"):
    path = tmp_path / name
    with open(path, "w") as f:
        json.dump(payload, f)
    return path


# -- annotations -----------------------------------------------------------------

def test_load_normalizes_segments(tmp_path):
    path = write_annotations(tmp_path, {
        "v1": {"duration": 100.0, "timestamps": [[25.0, 75.0]], "sentences": ["hi there"]},
    })
    index = dataio.load_annotations(path)
    assert index.videos["v1"].segments[0] == pytest.approx((0.5, 0.5))


def test_full_span_is_fake_proposal_segment(tmp_path):
    path = write_annotations(tmp_path, {
        "v1": {"duration": 100.0, "timestamps": [[0.0, 100.0]], "sentences": ["x"]},
    })
    index = dataio.load_annotations(path)
    assert index.videos["v1"].segments[0] == pytest.approx((0.5, 1.0))


def test_mismatched_lengths_error(tmp_path):
    path = write_annotations(tmp_path, {
        "v1": {"duration": 10.0, "timestamps": [[0.0, 5.0]], "sentences": ["a", "b"]},
    })
    with pytest.raises(ValueError):
        dataio.load_annotations(path)


def test_reversed_timestamp_error(tmp_path):
    path = write_annotations(tmp_path, {
        "v1": {"duration": 10.0, "timestamps": [[5.0, 5.0]], "sentences": ["a"]},
    })
    with pytest.raises(ValueError):
        dataio.load_annotations(path)


def test_malformed_json_error(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(json.JSONDecodeError):
        dataio.load_annotations(path)


@settings(max_examples=50, deadline=None)
@given(st.floats(1.0, 1000.0), st.floats(0.0, 1.0), st.floats(1e-6, 1.0))
def test_segment_roundtrip(duration, a, b):
    start = a * duration * 0.999
    end = min(start + b * (duration - start), duration)
    if end <= start:
        return
    c, l = dataio.normalize_segment(start, end, duration)
    s2, e2 = dataio.denormalize_segment(c, l, duration)
    assert abs(s2 - start) < 1e-9 * max(1.0, duration)
    assert abs(e2 - end) < 1e-9 * max(1.0, duration)


# -- vocabulary -------------------------------------------------------------------

def corpus_index(sentences):
    videos = {
        f"v{i}": dataio.VideoEntry(10.0, [[0.0, 5.0]], [s], [(0.25, 0.5)])
        for i, s in enumerate(sentences)
    }
    return dataio.DatasetIndex(videos)


def test_vocab_frequency_then_lexicographic():
    vocab = dataio.build_vocab(corpus_index(["a a b"]), max_size=6)
    assert vocab.word_to_id["a"] == 4
    assert vocab.word_to_id["b"] == 5


def test_vocab_tie_broken_lexicographically():
    vocab = dataio.build_vocab(corpus_index(["zebra apple"]), max_size=6)
    assert vocab.word_to_id["apple"] == 4
    assert vocab.word_to_id["zebra"] == 5


def test_vocab_max_size_and_unk():
    vocab = dataio.build_vocab(corpus_index(["a a a b b c"]), max_size=6)
    assert len(vocab) == 6
    ids = vocab.encode("a c d")
    assert ids[0] == dataio.BOS and ids[-1] == dataio.EOS
    assert ids[2] == dataio.UNK and ids[3] == dataio.UNK


def test_vocab_empty_corpus_error():
    with pytest.raises(ValueError):
        dataio.build_vocab(dataio.DatasetIndex({}))


def test_vocab_tokenize_lowercase_punct():
    assert dataio.tokenize("The dog's Bark, loudly!") == ["the", "dogs", "bark", "loudly"]


def test_vocab_encode_decode_roundtrip():
    vocab = dataio.build_vocab(corpus_index(["the dog barks", "the cat sleeps"]))
    ids = vocab.encode("the cat barks")
    assert vocab.encode(vocab.decode(ids)) == ids


def test_vocab_deterministic_rebuild():
    idx = corpus_index(["b a c", "c b a", "a"])
    v1 = dataio.build_vocab(idx)
    v2 = dataio.build_vocab(idx)
    assert v1.id_to_word == v2.id_to_word


def test_vocab_save_load_roundtrip(tmp_path):
    vocab = dataio.build_vocab(corpus_index(["alpha beta gamma"]))
    vocab.save(tmp_path / "v.json")
    loaded = dataio.Vocabulary.load(tmp_path / "v.json")
    assert loaded.id_to_word == vocab.id_to_word


# -- synthetic dataset ----------------------------------------------------------------

def small_spec(**kw):
    defaults = dict(seed=0, n_videos=4, frames_per_video=64, duration=3.2)
    defaults.update(kw)
    return dataio.SyntheticSpec(**defaults)


def test_synthetic_deterministic_bytes(tmp_path):
    spec = small_spec()
    dataio.generate_synthetic(spec, tmp_path / "a")
    dataio.generate_synthetic(spec, tmp_path / "b")
    for name in ("train.json", "features_video.dcav"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    for wav in sorted((tmp_path / "a" / "wav").iterdir()):
        twin = tmp_path / "b" / "wav" / wav.name
        assert wav.read_bytes() == twin.read_bytes()


def test_synthetic_shapes_and_records(tmp_path):
    spec = small_spec(n_videos=20)
    train, _ = dataio.generate_synthetic(spec, tmp_path)
    feats = dataio.load_features(tmp_path / "features_video.dcav", "video")
    assert len(feats) == 20
    for vid in train.ids():
        assert feats[vid].shape == (64, 500)
        assert feats[vid].dtype == np.float32


def test_synthetic_event_tone_recoverable_by_cqt(tmp_path):
    spec = small_spec(n_videos=6, seed=3)
    train, _ = dataio.generate_synthetic(spec, tmp_path)
    freqs = audio.cqt_frequencies()
    caption_to_template = {c: k for k, c in enumerate(dataio.CAPTION_TEMPLATES)}
    checked = 0
    for vid, entry in train.videos.items():
        samples, rate = audio.read_wav(tmp_path / "wav" / f"{vid}.wav")
        mags = audio.cqt(samples)
        pos = dataio.audio_frame_positions(mags.shape[0], entry.duration)
        for sentence, (center, length) in zip(entry.sentences, entry.segments):
            template = caption_to_template[sentence]
            expected_bin = int(np.argmin(np.abs(freqs - dataio.template_tone_hz(template))))
            inside = np.abs(pos - center) <= length / 4.0
            if not inside.any():
                continue
            frame = mags[inside][inside.sum() // 2]
            assert int(np.argmax(frame)) == expected_bin
            checked += 1
    assert checked >= 6


def test_synthetic_events_non_overlapping(tmp_path):
    spec = small_spec(n_videos=12, seed=9, max_events=3)
    train, _ = dataio.generate_synthetic(spec, tmp_path)
    for entry in train.videos.values():
        spans = sorted((s, e) for s, e in entry.timestamps)
        for (s1, e1), (s2, e2) in zip(spans, spans[1:]):
            assert e1 <= s2 + 1e-9
        for s, e in spans:
            assert 0.0 <= s < e <= entry.duration + 1e-9


def test_synthetic_audio_frame_count(tmp_path):
    spec = small_spec(n_videos=1)
    dataio.generate_synthetic(spec, tmp_path)
    feats = dataio.extract_audio_features(tmp_path / "wav", ["syn_0000"], "mfcc")
    n = int(round(3.2 * audio.SAMPLE_RATE))
    expected = 1 + (n - audio.WINDOW) // audio.HOP
    assert feats["audio/syn_0000"].shape == (expected, 128)


def test_synthetic_val_split(tmp_path):
    spec = small_spec(n_videos=3, n_val_videos=2)
    train, val = dataio.generate_synthetic(spec, tmp_path)
    assert len(train.videos) == 3 and len(val.videos) == 2
    assert not set(train.ids()) & set(val.ids())
    reloaded = dataio.load_annotations(tmp_path / "val.json", split="val")
    assert set(reloaded.ids()) == set(val.ids())


def test_synthetic_packing_error():
    with pytest.raises(ValueError):
        dataio._sample_events(np.random.default_rng(0), 5, 0.3, 0.35)


def test_matched_filter_ceiling(tmp_path):
    spec = small_spec(n_videos=8, seed=1, video_cues=False)
    train, _ = dataio.generate_synthetic(spec, tmp_path)
    miou = dataio.matched_filter_miou(train, tmp_path / "wav")
    assert miou >= 0.7


def test_load_features_missing_prefix(tmp_path):
    checkpoint.save_tensors(tmp_path / "f.dcav", {"video/x": np.zeros((2, 2))})
    with pytest.raises(ValueError):
        dataio.load_features(tmp_path / "f.dcav", "audio")
