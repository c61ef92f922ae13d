"""Clipped-context fusion strategies: mixture, context fusion, and the
Tucker-style bilinear pooling.

All take the clipped video row V' and audio row A' (each (1, k)) and return
one row: 3k for the two concatenation strategies, k_out for the bilinear one.
"""

from __future__ import annotations

from avdec import autodiff as ad

MUTAN_DT = 160
MUTAN_DO = 160
MUTAN_KOUT = 512

STRATEGIES = ("mixture", "context", "mutan")


def multiplicative_mixture(v_row, a_row):
    """(V' + A') || V' || A'"""
    if v_row.shape != a_row.shape:
        raise ValueError(f"fusion dims differ: {v_row.shape} vs {a_row.shape}")
    return ad.concat([ad.add(v_row, a_row), v_row, a_row], axis=1)


def multimodal_context_fusion(v_row, a_row, fc_w, fc_b):
    """(V' + A') || (V' * A') || fc(V' || A')"""
    if v_row.shape != a_row.shape:
        raise ValueError(f"fusion dims differ: {v_row.shape} vs {a_row.shape}")
    fc = ad.add(ad.matmul(ad.concat([v_row, a_row], axis=1), fc_w), fc_b)
    return ad.concat([ad.add(v_row, a_row), ad.mul(v_row, a_row), fc], axis=1)


def mutan_fusion(v_row, a_row, w_v, w_a, core, w_o):
    """V''=tanh(V' W_v); A''=tanh(A' W_a); squeeze((core x1 V'') x2 A'') W_o.

    core is (d_t, d_t, d_o); the two mode products collapse the first two
    modes against the projected rows, leaving a (1, 1, d_o) tensor that is
    squeezed to a row and mapped to k_out.
    """
    v2 = ad.tanh(ad.matmul(v_row, w_v))
    a2 = ad.tanh(ad.matmul(a_row, w_a))
    mixed = ad.mode_product(ad.mode_product(core, v2, 1), a2, 2)
    return ad.matmul(ad.squeeze(mixed), w_o)


def fused_dim(strategy, k):
    if strategy in ("mixture", "context"):
        return 3 * k
    if strategy == "mutan":
        return MUTAN_KOUT
    raise ValueError(f"unknown fusion strategy {strategy!r}")
