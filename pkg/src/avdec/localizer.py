"""Sentence localizer: crossing attention, attention feature fusion, and the
anchor+offset segment head.

Attention follows the bilinear form softmax(h @ alpha @ O^T) @ O with h a
(1, k) row and O a (T, k) context. Anchors are a binary temporal pyramid of
15 segments; the head scores them and regresses per-anchor offsets, and the
returned segment is the argmax anchor plus its offset, clamped.
"""

from __future__ import annotations

import numpy as np

from avdec import autodiff as ad

N_ANCHORS = 15
L_MIN = 1.0 / 64.0


def anchor_set():
    """Binary pyramid: lengths 1, 1/2, 1/4, 1/8 tiling [0, 1]; 15 anchors.

    anchors[0] is the whole clip (0.5, 1.0).
    """
    anchors = []
    for level in range(4):
        n = 2**level
        length = 1.0 / n
        for i in range(n):
            anchors.append(((i + 0.5) * length, length))
    return np.array(anchors, dtype=np.float64)


def cross_attention(h_row, context, alpha):
    """softmax((h alpha) O^T) O -> (1, k) attended feature row."""
    if context.shape[0] < 1:
        raise ValueError("empty attention context")
    if h_row.shape != (1, alpha.shape[0]) or context.shape[1] != alpha.shape[1]:
        raise ValueError(
            f"attention dims: h {h_row.shape}, alpha {alpha.shape}, context {context.shape}"
        )
    scores = ad.matmul(ad.matmul(h_row, alpha), ad.transpose(context))
    return ad.matmul(ad.softmax(scores, axis=1), context)


def caption_attention(h_video, caption_ctx, alpha_c):
    """Attend over caption timesteps, queried by the video final hidden."""
    return cross_attention(h_video, caption_ctx, alpha_c)


def context_attention(h_caption, context, alpha_o):
    """Attend over context frames, queried by the caption final hidden."""
    return cross_attention(h_caption, context, alpha_o)


def attention_feature_fusion(att_list, fc_w, fc_b):
    """Att_sum || Att_dot || fc(Att_c || ... ), each block size k.

    Works for the three-way (caption, video, audio) and two-way (unimodal)
    variants: sums/products/concat run over whatever list is given.
    """
    k = att_list[0].shape[1]
    for att in att_list:
        if att.shape != (1, k):
            raise ValueError(f"fusion inputs must share shape (1, {k})")
    att_sum = att_list[0]
    att_dot = att_list[0]
    for att in att_list[1:]:
        att_sum = ad.add(att_sum, att)
        att_dot = ad.mul(att_dot, att)
    att_fc = ad.add(ad.matmul(ad.concat(att_list, axis=1), fc_w), fc_b)
    return ad.concat([att_sum, att_dot, att_fc], axis=1)


def localize(store, fused, anchors):
    """Score anchors, pick argmax (ties to lowest index), add its offset.

    Returns (segment tensor (1, 2) with grad to offsets, logits (1, 15),
    chosen index). Segment center clamps to [0, 1], length to [l_min, 1].
    """
    out = ad.add(ad.matmul(fused, store["loc/head/W"]), store["loc/head/b"])
    logits = ad.cols(out, 0, N_ANCHORS)
    offsets = ad.cols(out, N_ANCHORS, 3 * N_ANCHORS)
    j = int(np.argmax(logits.data[0]))
    anchor = ad.Tensor(np.asarray(anchors[j : j + 1], dtype=fused.dtype))
    offset = ad.cols(offsets, 2 * j, 2 * j + 2)
    raw = ad.add(anchor, offset)
    center = ad.clamp(ad.cols(raw, 0, 1), 0.0, 1.0)
    length = ad.clamp(ad.cols(raw, 1, 2), L_MIN, 1.0)
    return ad.concat([center, length], axis=1), logits, j
