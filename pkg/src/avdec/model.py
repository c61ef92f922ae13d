"""Model assembly and the public estimator API.

ModelCore owns the parameter store and the forward pieces: feature
standardization and projection, the three GRU encoders, the caption
localizer, segment clipping plus modality fusion, and the decoder. The
sklearn-style wrappers at the bottom expose fit/predict/transform over it.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from avdec import audio as audio_mod
from avdec import autodiff as ad
from avdec import checkpoint, fusion, generator, localizer
from avdec.encoders import (
    HIDDEN,
    encode_sequence,
    init_embedding,
    init_gru_params,
    init_linear,
)
from avdec.optim import ParameterStore

MODALITIES = ("both", "audio", "video")
VIDEO_DIM = 500


class ModelCore:
    def __init__(self, vocab_size, audio_dim=128, video_dim=VIDEO_DIM, hidden=HIDDEN,
                 fusion_strategy="mutan", modality="both", audio_feature="mfcc",
                 mask_scale=generator.DEFAULT_MASK_SCALE, seed=0):
        if modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}, got {modality!r}")
        if fusion_strategy not in fusion.STRATEGIES:
            raise ValueError(f"fusion must be one of {fusion.STRATEGIES}, got {fusion_strategy!r}")
        self.vocab_size = vocab_size
        self.audio_dim = audio_dim
        self.video_dim = video_dim
        self.hidden = hidden
        self.fusion_strategy = fusion_strategy
        self.modality = modality
        self.audio_feature = audio_feature
        self.mask_scale = mask_scale
        self.seed = seed
        self.anchors = localizer.anchor_set()
        self.store = ParameterStore()
        self._init_params(np.random.default_rng(seed))
        self.norm = {
            "audio_mean": np.zeros((1, audio_dim), dtype=np.float32),
            "audio_std": np.ones((1, audio_dim), dtype=np.float32),
            "video_mean": np.zeros((1, video_dim), dtype=np.float32),
            "video_std": np.ones((1, video_dim), dtype=np.float32),
        }

    # -- construction -------------------------------------------------------
    @property
    def uses_audio(self):
        return self.modality in ("both", "audio")

    @property
    def uses_video(self):
        return self.modality in ("both", "video")

    def fused_dim(self):
        if self.modality != "both":
            return self.hidden
        return fusion.fused_dim(self.fusion_strategy, self.hidden)

    def _init_params(self, rng):
        store, k = self.store, self.hidden
        if self.uses_audio:
            init_linear(store, "audio_proj", self.audio_dim, k, rng)
            init_gru_params(store, "enc_audio", k, k, rng)
        if self.uses_video:
            init_gru_params(store, "enc_video", self.video_dim, k, rng)
        init_embedding(store, "emb_caption/table", self.vocab_size, k, rng)
        init_gru_params(store, "enc_caption", k, k, rng)
        bound = 1.0 / np.sqrt(k)
        store.add("loc/att_c", rng.uniform(-bound, bound, size=(k, k)))
        if self.uses_video:
            store.add("loc/att_v", rng.uniform(-bound, bound, size=(k, k)))
        if self.uses_audio:
            store.add("loc/att_a", rng.uniform(-bound, bound, size=(k, k)))
        n_att = 3 if self.modality == "both" else 2
        init_linear(store, "loc/fc", n_att * k, k, rng)
        init_linear(store, "loc/head", 3 * k, 3 * localizer.N_ANCHORS, rng)
        if self.modality == "both":
            if self.fusion_strategy == "context":
                init_linear(store, "fus/fc", 2 * k, k, rng)
            elif self.fusion_strategy == "mutan":
                d_t, d_o = fusion.MUTAN_DT, fusion.MUTAN_DO
                store.add("fus/Wv", rng.uniform(-bound, bound, size=(k, d_t)))
                store.add("fus/Wa", rng.uniform(-bound, bound, size=(k, d_t)))
                # 1/sqrt(d_t) per contracted mode; the bilinear form squares
                # sub-unit inputs, so a 1/d_t bound would start near-dead
                core_bound = 1.0 / np.sqrt(d_t)
                store.add("fus/core", rng.uniform(-core_bound, core_bound, size=(d_t, d_t, d_o)))
                store.add("fus/Wo", rng.uniform(-1.0 / np.sqrt(d_o), 1.0 / np.sqrt(d_o),
                                                size=(d_o, fusion.MUTAN_KOUT)))
        init_embedding(store, "emb_decoder/table", self.vocab_size, k, rng)
        init_linear(store, "dec/bridge", self.fused_dim(), k, rng)
        init_gru_params(store, "dec/gru", k, k, rng)
        init_linear(store, "dec/out", k, self.vocab_size, rng)

    # -- forward pieces --------------------------------------------------------
    def set_normalization(self, audio_feats, video_feats):
        """Per-dimension mean/std over all frames of the given train features."""
        def stats(mats):
            stacked = np.concatenate(list(mats), axis=0).astype(np.float64)
            mean = stacked.mean(axis=0, keepdims=True)
            std = np.maximum(stacked.std(axis=0, keepdims=True), 1e-6)
            return mean.astype(np.float32), std.astype(np.float32)

        if self.uses_audio and audio_feats:
            self.norm["audio_mean"], self.norm["audio_std"] = stats(audio_feats)
        if self.uses_video and video_feats:
            self.norm["video_mean"], self.norm["video_std"] = stats(video_feats)

    def encode_contexts(self, audio_feats, video_feats):
        """Encode per-video feature matrices into GRU contexts.

        audio_feats: (T_a, audio_dim) or None; video_feats: (T_f, video_dim)
        or None, per the model's modality.
        """
        contexts = {}
        if self.uses_audio:
            if audio_feats is None:
                raise ValueError("model uses audio but no audio features given")
            x = (audio_feats - self.norm["audio_mean"]) / self.norm["audio_std"]
            projected = audio_mod.project_features(
                ad.Tensor(x.astype(np.float32)),
                self.store["audio_proj/W"], self.store["audio_proj/b"],
            )
            contexts["audio"] = encode_sequence(self.store, "enc_audio", projected)
        if self.uses_video:
            if video_feats is None:
                raise ValueError("model uses video but no video features given")
            x = (video_feats - self.norm["video_mean"]) / self.norm["video_std"]
            contexts["video"] = encode_sequence(self.store, "enc_video", ad.Tensor(x.astype(np.float32)))
        return contexts

    def encode_caption(self, ids):
        emb = ad.embed(self.store["emb_caption/table"], np.asarray(ids, dtype=np.int64))
        return encode_sequence(self.store, "enc_caption", emb)

    def localize_caption(self, contexts, caption_ctx):
        """Crossing attention + fusion + anchor head -> (segment, logits, j).

        The caption attention is queried by the video final hidden state when
        video is present, otherwise by the audio one.
        """
        query = (contexts["video"] if "video" in contexts else contexts["audio"]).final
        atts = [localizer.caption_attention(query, caption_ctx.outputs, self.store["loc/att_c"])]
        if "video" in contexts:
            atts.append(localizer.context_attention(
                caption_ctx.final, contexts["video"].outputs, self.store["loc/att_v"]))
        if "audio" in contexts:
            atts.append(localizer.context_attention(
                caption_ctx.final, contexts["audio"].outputs, self.store["loc/att_a"]))
        fused_att = localizer.attention_feature_fusion(
            atts, self.store["loc/fc/W"], self.store["loc/fc/b"])
        return localizer.localize(self.store, fused_att, self.anchors)

    def segment_features(self, contexts, segment):
        """Soft-clip each context at the segment, then fuse into one row."""
        rows = {}
        for name, ctx in contexts.items():
            mask = generator.soft_mask(segment, ctx.outputs.shape[0], self.mask_scale)
            rows[name] = generator.clip_context(ctx.outputs, mask)
        if self.modality != "both":
            return rows["video" if self.modality == "video" else "audio"]
        v_row, a_row = rows["video"], rows["audio"]
        if self.fusion_strategy == "mixture":
            return fusion.multiplicative_mixture(v_row, a_row)
        if self.fusion_strategy == "context":
            return fusion.multimodal_context_fusion(
                v_row, a_row, self.store["fus/fc/W"], self.store["fus/fc/b"])
        return fusion.mutan_fusion(
            v_row, a_row, self.store["fus/Wv"], self.store["fus/Wa"],
            self.store["fus/core"], self.store["fus/Wo"])

    def fake_proposal(self):
        return ad.Tensor(np.array([[0.5, 1.0]], dtype=np.float32))

    def decode_teacher_forced(self, fused, target_ids):
        return generator.decode_teacher_forced(self.store, fused, target_ids)

    def decode_greedy(self, fused, max_len=generator.MAX_DECODE_LEN):
        return generator.decode_greedy(self.store, fused, max_len)

    # -- persistence -------------------------------------------------------------
    def meta(self):
        return {
            "vocab_size": self.vocab_size,
            "audio_dim": self.audio_dim,
            "video_dim": self.video_dim,
            "hidden": self.hidden,
            "fusion": self.fusion_strategy,
            "modality": self.modality,
            "audio_feature": self.audio_feature,
            "mask_scale": self.mask_scale,
            "seed": self.seed,
        }

    def save(self, ckpt_path, meta_path=None):
        tensors = self.store.state_dict()
        for name, arr in self.norm.items():
            tensors[f"norm/{name}"] = arr
        checkpoint.save_tensors(ckpt_path, tensors)
        if meta_path is not None:
            with open(meta_path, "w") as f:
                json.dump(self.meta(), f, indent=1, sort_keys=True)

    @classmethod
    def load(cls, ckpt_path, meta_path):
        with open(meta_path) as f:
            meta = json.load(f)
        model = cls(
            vocab_size=meta["vocab_size"], audio_dim=meta["audio_dim"],
            video_dim=meta["video_dim"], hidden=meta["hidden"],
            fusion_strategy=meta["fusion"], modality=meta["modality"],
            audio_feature=meta["audio_feature"], mask_scale=meta["mask_scale"],
            seed=meta["seed"],
        )
        tensors = checkpoint.load_tensors(ckpt_path)
        norm = {k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith("norm/")}
        model.norm.update(norm)
        model.store.load_state_dict(
            {k: v for k, v in tensors.items() if not k.startswith("norm/")})
        return model


# -- sklearn-style wrappers ----------------------------------------------------------


class MfccExtractor(BaseEstimator, TransformerMixin):
    """Waveform list -> list of (T_a, n_coeffs) MFCC matrices."""

    def __init__(self, sample_rate=audio_mod.SAMPLE_RATE, n_coeffs=128, n_mels=128):
        self.sample_rate = sample_rate
        self.n_coeffs = n_coeffs
        self.n_mels = n_mels

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return [
            audio_mod.mfcc(
                x if self.sample_rate == audio_mod.SAMPLE_RATE
                else audio_mod.resample(x, self.sample_rate, audio_mod.SAMPLE_RATE),
                n_coeffs=self.n_coeffs, n_mels=self.n_mels,
            )
            for x in X
        ]


class CqtExtractor(BaseEstimator, TransformerMixin):
    """Waveform list -> list of (T_a, n_bins) constant-Q magnitude matrices."""

    def __init__(self, sample_rate=audio_mod.SAMPLE_RATE, fmin=64.0, n_bins=60,
                 bins_per_octave=12):
        self.sample_rate = sample_rate
        self.fmin = fmin
        self.n_bins = n_bins
        self.bins_per_octave = bins_per_octave

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return [
            audio_mod.cqt(
                x if self.sample_rate == audio_mod.SAMPLE_RATE
                else audio_mod.resample(x, self.sample_rate, audio_mod.SAMPLE_RATE),
                fmin=self.fmin, n_bins=self.n_bins, bins_per_octave=self.bins_per_octave,
            )
            for x in X
        ]


class DenseEventCaptioner(BaseEstimator):
    """End-to-end dense event captioner over a dataset directory.

    fit(data_dir) expects the layout written by the synthetic generator:
    train.json, features_video.dcav, wav/<id>.wav. Captions are the only
    supervision used; ground-truth timestamps never enter training.
    predict(data_dir) captions the directory's val split (train when no
    val.json exists) and returns
    {video-id: [{"timestamp": [start_s, end_s], "sentence": ...}, ...]}.
    """

    def __init__(self, fusion="mutan", modality="both", audio_feature="mfcc",
                 hidden=HIDDEN, mask_scale=generator.DEFAULT_MASK_SCALE,
                 pretrain_epochs=80, joint_epochs=40, batch_size=8, seed=0,
                 n_proposals=15, iou_threshold=0.7, target_accuracy=None):
        self.fusion = fusion
        self.modality = modality
        self.audio_feature = audio_feature
        self.hidden = hidden
        self.mask_scale = mask_scale
        self.pretrain_epochs = pretrain_epochs
        self.joint_epochs = joint_epochs
        self.batch_size = batch_size
        self.seed = seed
        self.n_proposals = n_proposals
        self.iou_threshold = iou_threshold
        self.target_accuracy = target_accuracy

    def fit(self, X, y=None):
        from avdec import training

        data = training.load_dataset(Path(X), self.audio_feature)
        config = training.TrainingConfig(
            pretrain_epochs=self.pretrain_epochs, joint_epochs=self.joint_epochs,
            batch_size=self.batch_size, seed=self.seed,
            target_accuracy=self.target_accuracy,
        )
        video_dim = next(
            (int(f.shape[1]) for f in data.video_features.values()), 500)
        model = ModelCore(
            vocab_size=len(data.vocab), audio_dim=data.audio_dim,
            video_dim=video_dim, hidden=self.hidden,
            fusion_strategy=self.fusion, modality=self.modality,
            audio_feature=self.audio_feature, mask_scale=self.mask_scale,
            seed=self.seed,
        )
        pretrain_state = training.pretrain(model, data, config)
        training.joint_train(model, data, config, pretrain_state)
        self.model_ = model
        self.vocab_ = data.vocab
        return self

    def predict(self, X):
        from avdec import inference, training

        data = training.load_dataset(Path(X), self.audio_feature, vocab=self.vocab_,
                                     split=None)
        out = {}
        for vid in data.index.ids():
            out[vid] = inference.generate_dense_captions(
                self.model_, self.vocab_, data.audio_features.get(vid),
                data.video_features.get(vid), data.index.videos[vid].duration,
                seed=self.seed, n_proposals=self.n_proposals,
                iou_threshold=self.iou_threshold,
            )
        return out
