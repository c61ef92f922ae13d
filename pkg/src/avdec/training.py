"""Two-phase training without temporal supervision.

Phase 1 fits the caption generator alone, clipping every video at the
fixed full-span proposal (0.5, 1.0). Phase 2 trains localizer and
generator together with a cycle: the reference caption is localized to a
segment, the segment is captioned back, and the regenerated caption must
re-localize to the same place. Ground-truth timestamps never enter either
phase.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

from avdec import audio, autodiff as ad, dataio
from avdec.inference import tiou
from avdec.optim import sgd_momentum_step

# parameters frozen while the generator is pretrained
PRETRAIN_SKIP = ("loc/", "enc_caption/", "emb_caption/")

AUDIO_DIMS = {"mfcc": 128, "cqt": 60}


@dataclasses.dataclass
class TrainingConfig:
    lambda_s: float = 0.1
    lambda_r: float = 0.1
    momentum: float = 0.8
    lr_pretrain: float = 0.1
    lr_pretrained: float = 1e-4
    lr_new: float = 1e-2
    lr_audio_unimodal: float = 1e-4
    lr_video_unimodal: float = 1e-2
    pretrain_epochs: int = 80
    joint_epochs: int = 40
    batch_size: int = 8
    seed: int = 0
    target_accuracy: float | None = None

    def __post_init__(self):
        for name in ("lr_pretrain", "lr_pretrained", "lr_new",
                     "lr_audio_unimodal", "lr_video_unimodal"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        for name in ("lambda_s", "lambda_r", "momentum"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.pretrain_epochs < 0 or self.joint_epochs < 0:
            raise ValueError("epoch counts must be nonnegative")


@dataclasses.dataclass
class CycleStepTrace:
    caption: list
    segment_first: np.ndarray
    reconstructed: list
    segment_second: np.ndarray
    l_c: float
    l_s: float
    l_r: float


@dataclasses.dataclass
class DatasetBundle:
    index: dataio.DatasetIndex
    vocab: dataio.Vocabulary
    audio_features: dict
    video_features: dict
    captions: dict
    audio_dim: int

    def pairs(self):
        """All (video-id, encoded caption) pairs in index order."""
        return [(vid, ids) for vid in self.index.ids() for ids in self.captions[vid]]


def load_dataset(data_dir, audio_feature="mfcc", vocab=None, split="train"):
    """Read one split of a dataset directory into memory.

    Expects train.json / val.json, features_video.dcav, and wav/<id>.wav.
    split=None picks val when present, else train. Videos without a WAV
    get all-zero audio features of the natural frame count. The vocabulary
    is built from this split unless one is passed in.
    """
    data_dir = Path(data_dir)
    if split is None:
        split = "val" if (data_dir / "val.json").exists() else "train"
    ann_path = data_dir / f"{split}.json"
    if not ann_path.exists():
        raise FileNotFoundError(f"annotation file not found: {ann_path}")
    index = dataio.load_annotations(ann_path, split)
    if vocab is None:
        vocab = dataio.build_vocab(index)

    if audio_feature not in AUDIO_DIMS:
        raise ValueError(f"audio feature must be one of {sorted(AUDIO_DIMS)}, got {audio_feature!r}")
    audio_dim = AUDIO_DIMS[audio_feature]

    all_video = dataio.load_features(data_dir / "features_video.dcav", "video")
    video_features = {}
    for vid in index.ids():
        if vid not in all_video:
            raise KeyError(f"no video features for {vid!r} in {data_dir / 'features_video.dcav'}")
        video_features[vid] = all_video[vid]

    audio_features = {}
    for vid in index.ids():
        wav_path = data_dir / "wav" / f"{vid}.wav"
        if wav_path.exists():
            samples, rate = audio.read_wav(wav_path)
            feats = audio.extract(samples, rate, audio_feature).astype(np.float32)
        else:
            # soundless videos contribute zero audio features
            n_samples = int(round(index.videos[vid].duration * audio.SAMPLE_RATE))
            t_a = max(1, 1 + (n_samples - audio.WINDOW) // audio.HOP)
            feats = np.zeros((t_a, audio_dim), dtype=np.float32)
        audio_features[vid] = feats

    captions = {
        vid: [vocab.encode(s) for s in entry.sentences]
        for vid, entry in index.videos.items()
    }
    return DatasetBundle(index, vocab, audio_features, video_features, captions, audio_dim)


def _scalar(x, dtype=np.float32):
    return ad.Tensor(np.asarray(x, dtype=dtype))


def _contexts(model, data, vid):
    return model.encode_contexts(
        data.audio_features.get(vid) if model.uses_audio else None,
        data.video_features.get(vid) if model.uses_video else None,
    )


def _flat_lr(model, config):
    if model.modality == "audio":
        return config.lr_audio_unimodal
    if model.modality == "video":
        return config.lr_video_unimodal
    return config.lr_new


def pretrain(model, data, config, log_fn=None):
    """Fit the caption generator on the full-span proposal.

    Only generator-side parameters move; the localizer and the caption
    encoder stay frozen. Stops early once teacher-forced accuracy reaches
    config.target_accuracy, when set. Returns a copy of the generator-side
    parameters by name; the joint phase derives its low-rate set from
    these names.
    """
    model.set_normalization(
        [data.audio_features[v] for v in data.index.ids()] if model.uses_audio else [],
        [data.video_features[v] for v in data.index.ids()] if model.uses_video else [],
    )
    rng = np.random.default_rng(config.seed)
    pairs = data.pairs()
    if not pairs:
        raise ValueError("empty dataset")
    lr = config.lr_pretrain
    scale = _scalar(1.0 / config.batch_size)
    step = 0
    pending = 0
    for epoch in range(config.pretrain_epochs):
        for i in rng.permutation(len(pairs)):
            vid, ids = pairs[i]
            contexts = _contexts(model, data, vid)
            fused = model.segment_features(contexts, model.fake_proposal())
            logits = model.decode_teacher_forced(fused, ids)
            l_c = ad.cross_entropy_rows(logits, ids[1:])
            val = l_c.item()
            if not np.isfinite(val):
                raise RuntimeError(f"pretraining diverged at step {step}: loss={val!r}")
            ad.mul(l_c, scale).backward()
            step += 1
            pending += 1
            if log_fn is not None:
                log_fn({"step": step, "L_c": val, "L_s": 0.0, "L_r": 0.0, "total": val})
            if pending == config.batch_size:
                sgd_momentum_step(model.store, {}, lr, config.momentum, skip=PRETRAIN_SKIP)
                pending = 0
        if pending:
            sgd_momentum_step(model.store, {}, lr, config.momentum, skip=PRETRAIN_SKIP)
            pending = 0
        if (config.target_accuracy is not None
                and teacher_forced_accuracy(model, data) >= config.target_accuracy):
            break
    return {
        name: p.data.copy()
        for name, p in model.store.items()
        if not name.startswith(PRETRAIN_SKIP)
    }


def teacher_forced_accuracy(model, data):
    """Fraction of next-token argmaxes that match the reference captions,
    clipping at the full-span proposal."""
    correct = 0
    total = 0
    with ad.no_grad():
        for vid, ids in data.pairs():
            contexts = _contexts(model, data, vid)
            fused = model.segment_features(contexts, model.fake_proposal())
            logits = model.decode_teacher_forced(fused, ids)
            targets = np.asarray(ids[1:], dtype=np.int64)
            correct += int((logits.data.argmax(axis=1) == targets).sum())
            total += targets.size
    return correct / total


def cycle_step(model, contexts, caption_ids, config):
    """One cycle-consistency pass; returns (total loss tensor, trace).

    The reference caption is localized to S1; teacher-forced decoding on
    S1 gives the caption loss. The greedy caption from S1 is re-encoded
    and re-localized to S2 for the segment loss ||S1 - S2||^2 and for the
    anchor classification loss, whose target is the anchor closest to S1
    by tIoU. Token choices in the greedy decode carry no gradient; the
    localizer learns through all three terms.
    """
    cap_ctx = model.encode_caption(caption_ids)
    s1, _, _ = model.localize_caption(contexts, cap_ctx)

    fused1 = model.segment_features(contexts, s1)
    logits = model.decode_teacher_forced(fused1, caption_ids)
    l_c = ad.cross_entropy_rows(logits, caption_ids[1:])

    with ad.no_grad():
        recon_ids, _ = model.decode_greedy(fused1)
    recon_ctx = model.encode_caption(recon_ids)
    s2, logits2, _ = model.localize_caption(contexts, recon_ctx)

    l_s = ad.l2(s1, s2)
    anchor_target = int(np.argmax([tiou(a, s1.data[0]) for a in model.anchors]))
    l_r = ad.cross_entropy(logits2, anchor_target)

    total = ad.add(l_c, ad.add(ad.mul(l_s, _scalar(config.lambda_s)),
                               ad.mul(l_r, _scalar(config.lambda_r))))
    trace = CycleStepTrace(
        caption=list(caption_ids), segment_first=s1.data[0].copy(),
        reconstructed=list(recon_ids), segment_second=s2.data[0].copy(),
        l_c=l_c.item(), l_s=l_s.item(), l_r=l_r.item(),
    )
    return total, trace


def joint_train(model, data, config, pretrain_state, log_fn=None):
    """Train localizer and generator together with the cycle loss.

    Parameters named in the pretraining state keep the small rate; fresh
    parameters take the large one. Unimodal models use one flat modality
    rate. Each epoch visits every video once, cycling through its captions
    across epochs.
    """
    if model.modality == "both":
        lr_map = {name: config.lr_pretrained
                  for name in pretrain_state if name in model.store}
        default_lr = config.lr_new
    else:
        lr_map = {}
        default_lr = _flat_lr(model, config)
    # shuffle stream distinct from the pretraining one
    rng = np.random.default_rng(config.seed + 1)
    vids = data.index.ids()
    if not vids:
        raise ValueError("empty dataset")
    scale = _scalar(1.0 / config.batch_size)
    step = 0
    pending = 0
    for epoch in range(config.joint_epochs):
        examples = [(vid, data.captions[vid][epoch % len(data.captions[vid])])
                    for vid in vids]
        for i in rng.permutation(len(examples)):
            vid, cap = examples[i]
            contexts = _contexts(model, data, vid)
            total, trace = cycle_step(model, contexts, cap, config)
            val = total.item()
            if not np.isfinite(val):
                raise RuntimeError(f"joint training diverged at step {step}: loss={val!r}")
            ad.mul(total, scale).backward()
            step += 1
            pending += 1
            if log_fn is not None:
                log_fn({"step": step, "L_c": trace.l_c, "L_s": trace.l_s,
                        "L_r": trace.l_r, "total": val})
            if pending == config.batch_size:
                sgd_momentum_step(model.store, lr_map, default_lr, config.momentum)
                pending = 0
        if pending:
            sgd_momentum_step(model.store, lr_map, default_lr, config.momentum)
            pending = 0
