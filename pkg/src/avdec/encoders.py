"""GRU encoders and the word embedding table.

Audio, video, and caption streams use structurally identical single-layer
unidirectional GRUs (hidden size 512) with separate parameters. Sequences
are time-major (T, d); hidden states are (1, k) rows.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from avdec import autodiff as ad

HIDDEN = 512
GATE_NAMES = ("Wz", "Wr", "Wh", "Uz", "Ur", "Uh", "bz", "br", "bh")


def init_gru_params(store, prefix, d_in, k, rng):
    """uniform(-1/sqrt(k), 1/sqrt(k)) weights, zero biases."""
    bound = 1.0 / np.sqrt(k)
    for name in ("Wz", "Wr", "Wh"):
        store.add(f"{prefix}/{name}", rng.uniform(-bound, bound, size=(d_in, k)))
    for name in ("Uz", "Ur", "Uh"):
        store.add(f"{prefix}/{name}", rng.uniform(-bound, bound, size=(k, k)))
    for name in ("bz", "br", "bh"):
        store.add(f"{prefix}/{name}", np.zeros((1, k)))


def init_linear(store, prefix, d_in, d_out, rng):
    bound = 1.0 / np.sqrt(d_in)
    store.add(f"{prefix}/W", rng.uniform(-bound, bound, size=(d_in, d_out)))
    store.add(f"{prefix}/b", np.zeros((1, d_out)))


def linear(store, prefix, x):
    return ad.add(ad.matmul(x, store[f"{prefix}/W"]), store[f"{prefix}/b"])


def gru_gates(store, prefix):
    return [store[f"{prefix}/{name}"] for name in GATE_NAMES]


def gru_step(store, prefix, x, h):
    """One GRU cell update, composed from tape primitives."""
    wz, wr, wh, uz, ur, uh, bz, br, bh = gru_gates(store, prefix)
    if x.shape[1] != wz.shape[0] or h.shape[1] != uz.shape[0]:
        raise ValueError(f"gru_step: x {x.shape}, h {h.shape} vs params "
                         f"{wz.shape[0]} -> {wz.shape[1]}")
    z = ad.sigmoid(ad.add(ad.add(ad.matmul(x, wz), ad.matmul(h, uz)), bz))
    r = ad.sigmoid(ad.add(ad.add(ad.matmul(x, wr), ad.matmul(h, ur)), br))
    hc = ad.tanh(ad.add(ad.add(ad.matmul(x, wh), ad.matmul(ad.mul(r, h), uh)), bh))
    one = ad.Tensor(np.ones((1, z.shape[1]), dtype=z.dtype))
    return ad.add(ad.mul(ad.sub(one, z), h), ad.mul(z, hc))


@dataclasses.dataclass
class EncodedContext:
    outputs: ad.Tensor  # (T, k)
    final: ad.Tensor  # (1, k), last row of outputs


def encode_sequence(store, prefix, x):
    """h0 = 0; iterate the cell over rows of x; fused scan on the tape."""
    if x.shape[0] < 1:
        raise ValueError("empty sequence")
    outputs = ad.gru_scan(x, *gru_gates(store, prefix))
    return EncodedContext(outputs, ad.rows(outputs, x.shape[0] - 1))


def init_embedding(store, name, vocab_size, dim, rng):
    bound = 1.0 / np.sqrt(dim)
    store.add(name, rng.uniform(-bound, bound, size=(vocab_size, dim)))


def embed_caption(table, ids):
    return ad.embed(table, ids)
