"""Caption generation for a segment: soft mask clipping and GRU decoding.

The mask is a differentiable box over normalized time built from two
sigmoids; clipping a context is the mask-weighted, mask-normalized sum of
its rows, so caption losses can reach the segment parameters through the
mask. Decoding runs teacher-forced (for losses) or greedy (for generation).
"""

from __future__ import annotations

import numpy as np

from avdec import autodiff as ad
from avdec.dataio import BOS, EOS
from avdec.encoders import gru_step

DEFAULT_MASK_SCALE = 50.0
MAX_DECODE_LEN = 30


def soft_mask(segment, t_frames, scale=DEFAULT_MASK_SCALE):
    """Rising sigmoid at c - l/2 minus rising sigmoid at c + l/2.

    segment: (1, 2) tensor holding (center, length). Returns a (1, T) mask
    over grid positions t_i = (i + 0.5) / T, strictly inside (0, 1).
    """
    if t_frames < 1:
        raise ValueError("mask needs at least one frame")
    if scale <= 0:
        raise ValueError("mask scale must be positive")
    grid = ad.Tensor(
        ((np.arange(t_frames) + 0.5) / t_frames).reshape(1, -1).astype(segment.dtype)
    )
    center = ad.cols(segment, 0, 1)
    half = ad.mul(ad.cols(segment, 1, 2), ad.Tensor(np.asarray(0.5, dtype=segment.dtype)))
    d = ad.sub(grid, center)
    left = ad.sigmoid(ad.mul(ad.add(d, half), ad.Tensor(np.asarray(scale, dtype=segment.dtype))))
    right = ad.sigmoid(ad.mul(ad.sub(d, half), ad.Tensor(np.asarray(scale, dtype=segment.dtype))))
    return ad.sub(left, right)


def clip_context(outputs, mask):
    """(sum_i mask_i * O_i) / (sum_i mask_i) as a (1, k) row."""
    if mask.shape != (1, outputs.shape[0]):
        raise ValueError(f"mask {mask.shape} does not cover context {outputs.shape}")
    total = ad.sum_all(mask)
    if total.data == 0.0:
        raise ValueError("all-zero mask: segment length below grid resolution")
    weighted = ad.matmul(mask, outputs)
    return ad.mul(weighted, ad.reciprocal(total))


def bridge_init(store, fused):
    """Affine map from the fused context row to the decoder initial hidden."""
    return ad.add(ad.matmul(fused, store["dec/bridge/W"]), store["dec/bridge/b"])


def decode_teacher_forced(store, fused, target_ids):
    """Logits aligned to target_ids[1:]; len(target) - 1 rows.

    target_ids must be a bos...eos token sequence.
    """
    if len(target_ids) < 2:
        raise ValueError("teacher forcing needs bos + at least one target token")
    table = store["emb_decoder/table"]
    inputs = ad.embed(table, np.asarray(target_ids[:-1], dtype=np.int64))
    h0 = bridge_init(store, fused)
    from avdec.encoders import gru_gates

    hidden = ad.gru_scan(inputs, *gru_gates(store, "dec/gru"), h0=h0)
    return ad.add(ad.matmul(hidden, store["dec/out/W"]), store["dec/out/b"])


def decode_greedy(store, fused, max_len=MAX_DECODE_LEN):
    """Argmax decoding from bos; stops at eos or max_len.

    Returns (ids including bos and any eos, (steps, |V|) logits tensor).
    Gradients flow through hidden states and logits but not through the
    discrete token choices.
    """
    table = store["emb_decoder/table"]
    h = bridge_init(store, fused)
    ids = [BOS]
    step_logits = []
    for _ in range(max_len):
        x = ad.embed(table, np.asarray(ids[-1:], dtype=np.int64))
        h = gru_step(store, "dec/gru", x, h)
        logits = ad.add(ad.matmul(h, store["dec/out/W"]), store["dec/out/b"])
        step_logits.append(logits)
        ids.append(int(np.argmax(logits.data[0])))
        if ids[-1] == EOS:
            break
    return ids, ad.concat(step_logits, axis=0)
