"""Dense captioning for unseen videos.

Random segment proposals are refined by one fixed-point round (caption the
segment, re-localize the caption, caption the refined segment), scored by
mean token log-probability, pruned by greedy IoU suppression, and emitted
as (timestamp, sentence) pairs in seconds.
"""

from __future__ import annotations

import json

import numpy as np

from avdec import autodiff as ad
from avdec.dataio import denormalize_segment

N_PROPOSALS = 15
IOU_THRESHOLD = 0.7
PROPOSAL_CENTER_RANGE = (0.05, 0.95)
PROPOSAL_LENGTH_RANGE = (0.1, 0.8)


def tiou(a, b):
    """Interval IoU of two (center, length) segments, in [0, 1]."""
    s1, e1 = a[0] - a[1] / 2.0, a[0] + a[1] / 2.0
    s2, e2 = b[0] - b[1] / 2.0, b[0] + b[1] / 2.0
    inter = max(0.0, min(e1, e2) - max(s1, s2))
    union = max(e1, e2) - min(s1, s2)
    if union <= 0.0:
        return 0.0
    return float(min(1.0, max(0.0, inter / union)))


def random_proposals(rng, n=N_PROPOSALS):
    """n segments with center ~ U[0.05, 0.95] and length ~ U[0.1, 0.8]."""
    centers = rng.uniform(*PROPOSAL_CENTER_RANGE, size=n)
    lengths = rng.uniform(*PROPOSAL_LENGTH_RANGE, size=n)
    return np.stack([centers, lengths], axis=1).astype(np.float32)


def caption_score(logits, ids):
    """Mean log-probability of the decoded tokens ids[1:] under their logits."""
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    picked = z[np.arange(z.shape[0]), np.asarray(ids[1:], dtype=np.int64)]
    return float((picked - lse).mean())


def fixed_point_round(model, contexts, proposals):
    """Refine each proposal once: caption it, re-localize, re-caption.

    Returns one (segment (2,), token ids, score) triple per input proposal.
    """
    refined = []
    for row in np.asarray(proposals, dtype=np.float32):
        seg0 = ad.Tensor(row.reshape(1, 2))
        ids0, _ = model.decode_greedy(model.segment_features(contexts, seg0))
        cap_ctx = model.encode_caption(ids0)
        seg1, _, _ = model.localize_caption(contexts, cap_ctx)
        ids1, logits1 = model.decode_greedy(model.segment_features(contexts, seg1))
        refined.append((seg1.data[0].copy(), ids1, caption_score(logits1, ids1)))
    return refined


def iou_filter(proposals, threshold=IOU_THRESHOLD):
    """Greedy suppression: keep by descending score unless tIoU with any
    kept segment reaches the threshold."""
    kept = []
    for seg, ids, score in sorted(proposals, key=lambda p: -p[2]):
        if all(tiou(seg, k[0]) < threshold for k in kept):
            kept.append((seg, ids, score))
    return kept


def generate_dense_captions(model, vocab, audio_feats, video_feats, duration,
                            seed=0, n_proposals=N_PROPOSALS,
                            iou_threshold=IOU_THRESHOLD):
    """Caption one video; returns [{"timestamp": [s, e], "sentence": ...}].

    Entries are ordered by descending proposal score; timestamps are in
    seconds, clipped to the video extent.
    """
    with ad.no_grad():
        contexts = model.encode_contexts(audio_feats, video_feats)
        rng = np.random.default_rng(seed)
        proposals = random_proposals(rng, n_proposals)
        refined = fixed_point_round(model, contexts, proposals)
        kept = iou_filter(refined, iou_threshold)
    out = []
    for seg, ids, _ in kept:
        s, e = denormalize_segment(float(seg[0]), float(seg[1]), duration)
        out.append({
            "timestamp": [max(0.0, s), min(duration, e)],
            "sentence": vocab.decode(ids),
        })
    return out


def save_predictions(predictions, path):
    """Write {video-id: [{"timestamp": [s, e], "sentence": ...}]} as JSON."""
    with open(path, "w") as f:
        json.dump(predictions, f, indent=1, sort_keys=True)
