"""Finite-difference verification of the reverse-mode gradients.

Everything runs in float64: the check compares the analytic gradient of a
scalar-valued function against central differences at sampled coordinates
and reports the worst relative error. Relative error uses
|a - n| / max(|a|, |n|, eps) so near-zero pairs do not blow up.
"""

from __future__ import annotations

import numpy as np

from avdec import autodiff as ad
from avdec import fusion, generator, localizer
from avdec.autodiff import Tensor


def gradcheck(fn, inputs, rng, h=1e-5, rel_tol=1e-4, max_coords=24):
    """Check d fn / d inputs at sampled coordinates.

    fn: callable taking Tensors and returning a scalar Tensor.
    inputs: list of float64 ndarrays (leaf values).
    Returns max relative error; raises AssertionError past rel_tol.
    """
    leaves = [Tensor(np.asarray(x, dtype=np.float64), requires_grad=True) for x in inputs]
    out = fn(*leaves)
    if out.data.size != 1:
        raise ValueError("gradcheck target must be scalar")
    out.backward()
    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        n = flat.size
        coords = range(n) if n <= max_coords else sorted(rng.choice(n, size=max_coords, replace=False))
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + h
            plus = float(fn(*leaves).data)
            flat[idx] = orig - h
            minus = float(fn(*leaves).data)
            flat[idx] = orig
            numeric = (plus - minus) / (2.0 * h)
            a = float(analytic.reshape(-1)[idx])
            denom = max(abs(a), abs(numeric), 1e-8)
            rel = abs(a - numeric) / denom
            if rel > worst:
                worst = rel
            if rel > rel_tol:
                raise AssertionError(
                    f"gradcheck failed at coord {idx}: analytic={a:.8g} numeric={numeric:.8g} rel={rel:.3g}"
                )
    return worst


def suite_checks(rng):
    """Yield (name, fn, inputs) checks covering every differentiable
    primitive and each composite block the model trains through.

    Outputs are reduced against a fixed random probe rather than a plain
    sum: a constant covector hides sign errors in ops whose Jacobian rows
    cancel under it (softmax being the classic case).
    """
    k = 4
    t_len = 5
    vocab = 7

    def n(*shape):
        return rng.standard_normal(shape)

    def probe(fn, out_shape):
        w = rng.standard_normal(out_shape)

        def wrapped(*tensors):
            return ad.sum_all(ad.mul(fn(*tensors), Tensor(w)))

        return wrapped

    yield "add", probe(ad.add, (3, k)), [n(3, k), n(3, k)]
    yield "sub", probe(ad.sub, (3, k)), [n(3, k), n(3, k)]
    yield "mul", probe(ad.mul, (3, k)), [n(3, k), n(3, k)]
    yield "mul-row-broadcast", probe(ad.mul, (3, k)), [n(3, k), n(1, k)]
    yield "matmul", probe(ad.matmul, (3, k)), [n(3, 5), n(5, k)]
    yield "transpose", probe(ad.transpose, (k, 3)), [n(3, k)]
    yield ("concat-axis1",
           probe(lambda a, b: ad.concat([a, b], axis=1), (3, 2 * k)),
           [n(3, k), n(3, k)])
    yield ("reshape-squeeze",
           probe(lambda a: ad.squeeze(ad.reshape(a, (1, 2, 6))), (1, 12)),
           [n(3, 4)])
    yield "rows", probe(lambda a: ad.rows(a, 1, 3), (2, k)), [n(5, k)]
    yield "cols", probe(lambda a: ad.cols(a, 1, 3), (3, 2)), [n(3, k)]
    yield "sigmoid", probe(ad.sigmoid, (3, k)), [n(3, k)]
    yield "tanh", probe(ad.tanh, (3, k)), [n(3, k)]
    yield "softmax-rows", probe(lambda a: ad.softmax(a, axis=1), (3, k)), [n(3, k)]
    # interior points only: clamp is not differentiable at its boundaries
    yield ("clamp-interior",
           probe(lambda a: ad.clamp(a, -5.0, 5.0), (3, k)),
           [n(3, k)])
    yield ("reciprocal",
           probe(ad.reciprocal, (3, k)),
           [rng.uniform(0.5, 2.0, (3, k))])
    yield "sum-all", lambda a: ad.sum_all(a), [n(3, k)]
    yield ("mode-product-1",
           probe(lambda c, v: ad.mode_product(c, v, 1), (1, 3, 6)),
           [n(2, 3, 6), n(1, 2)])
    yield ("mode-product-2",
           probe(lambda c, a: ad.mode_product(c, a, 2), (2, 1, 6)),
           [n(2, 3, 6), n(1, 3)])
    yield ("embed",
           probe(lambda tab: ad.embed(tab, np.array([1, 3, 1])), (3, k)),
           [n(vocab, k)])
    yield "cross-entropy", lambda lg: ad.cross_entropy(lg, 2), [n(1, vocab)]
    yield ("cross-entropy-rows",
           lambda lg: ad.cross_entropy_rows(lg, np.array([2, 0, 4])),
           [n(3, vocab)])
    yield "l2", lambda a, b: ad.l2(a, b), [n(3, k), n(3, k)]

    gru_shapes = [(t_len, 3)] + [(3, k)] * 3 + [(k, k)] * 3 + [(1, k)] * 3
    yield ("gru-step",
           probe(ad.gru_scan, (1, k)),
           [n(*s) for s in [(1, 3)] + gru_shapes[1:]])
    yield "gru-scan", probe(ad.gru_scan, (t_len, k)), [n(*s) for s in gru_shapes]
    yield ("crossing-attention",
           probe(localizer.cross_attention, (1, k)),
           [n(1, k), n(t_len, k), n(k, k)])
    yield ("attention-feature-fusion",
           probe(lambda a, b, c, w, bias: localizer.attention_feature_fusion(
               [a, b, c], w, bias), (1, 3 * k)),
           [n(1, k), n(1, k), n(1, k), n(3 * k, k), n(1, k)])
    # gradient through the segment is the path cycle training relies on
    yield ("soft-mask",
           probe(lambda s: generator.soft_mask(s, t_len, 12.0), (1, t_len)),
           [np.array([[0.45, 0.3]])])
    yield ("masked-mean-pool",
           probe(lambda s, h: generator.clip_context(
               h, generator.soft_mask(s, t_len, 12.0)), (1, k)),
           [np.array([[0.45, 0.3]]), n(t_len, k)])
    yield ("fusion-mixture",
           probe(fusion.multiplicative_mixture, (1, 3 * k)),
           [n(1, k), n(1, k)])
    yield ("fusion-context",
           probe(fusion.multimodal_context_fusion, (1, 3 * k)),
           [n(1, k), n(1, k), n(2 * k, k), n(1, k)])
    yield ("fusion-mutan",
           probe(fusion.mutan_fusion, (1, 6)),
           [n(1, k), n(1, k), n(k, 3), n(k, 3), n(3, 3, 5), n(5, 6)])

    def combined_loss(lg_rows, seg_a, seg_b, lg_anchor):
        l_c = ad.cross_entropy_rows(lg_rows, np.array([1, 4, 0]))
        l_s = ad.l2(seg_a, seg_b)
        l_r = ad.cross_entropy(lg_anchor, 3)
        lam = Tensor(np.asarray(0.1, dtype=np.float64))
        return ad.add(l_c, ad.add(ad.mul(l_s, lam), ad.mul(l_r, lam)))

    yield ("weighted-loss-sum",
           combined_loss,
           [n(3, vocab), n(1, 2), n(1, 2), n(1, 15)])


def run_suite(seed=0, rel_tol=1e-4, log_fn=None):
    """Finite-difference check every primitive and composite block.

    Returns a list of (name, worst_rel_err) in execution order. Raises
    AssertionError naming the first check whose analytic gradient differs
    from float64 central differences beyond rel_tol.
    """
    rng = np.random.default_rng(seed)
    results = []
    for name, fn, inputs in suite_checks(rng):
        try:
            worst = gradcheck(fn, inputs, rng, rel_tol=rel_tol)
        except AssertionError as exc:
            raise AssertionError(f"{name}: {exc}") from exc
        results.append((name, worst))
        if log_fn is not None:
            log_fn(f"gradcheck {name:<26s} worst rel err {worst:.3e}")
    return results
