"""Captioning and localization metrics.

Sentence scores: clipped n-gram BLEU with brevity penalty, LCS-based
ROUGE-L, and tf-idf CIDEr-D with a Gaussian length penalty. Dense
evaluation matches predictions to references at several tIoU thresholds,
averages sentence scores over predictions, and reports mIoU over the
ground-truth events. All functions take token lists; the dense evaluator
tokenizes sentences itself.
"""

from __future__ import annotations

import collections
import json
import math

import numpy as np

from avdec.dataio import tokenize

BLEU_EPS = 1e-9
ROUGE_BETA = 1.2
CIDER_N = 4
CIDER_SIGMA = 6.0
TIOU_THRESHOLDS = (0.3, 0.5, 0.7, 0.9)

METRIC_KEYS = ("bleu@1", "bleu@2", "bleu@3", "bleu@4", "rouge_l", "cider")


def _ngram_counts(tokens, n):
    return collections.Counter(
        tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)
    )


def bleu_n(candidate, references, n=4):
    """Geometric mean of clipped 1..n-gram precisions times brevity penalty.

    Zero clipped counts fall back to an epsilon numerator so one missing
    order does not zero the whole score. The brevity penalty uses the
    reference length closest to the candidate (ties favor the shorter).
    """
    if not candidate:
        raise ValueError("empty candidate")
    if not references or any(not r for r in references):
        raise ValueError("empty reference set")
    if not 1 <= n <= 4:
        raise ValueError(f"bleu order must be in 1..4, got {n}")
    log_sum = 0.0
    for order in range(1, n + 1):
        cand = _ngram_counts(candidate, order)
        total = max(0, len(candidate) - order + 1)
        clipped = 0
        for gram, count in cand.items():
            limit = max(_ngram_counts(r, order)[gram] for r in references)
            clipped += min(count, limit)
        if total == 0 or clipped == 0:
            log_sum += math.log(BLEU_EPS / max(1, total))
        else:
            log_sum += math.log(clipped / total)
    c = len(candidate)
    r = min((abs(len(ref) - c), len(ref)) for ref in references)[1]
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return bp * math.exp(log_sum / n)


def _lcs_length(a, b):
    table = np.zeros((len(a) + 1, len(b) + 1), dtype=np.int64)
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                table[i, j] = table[i - 1, j - 1] + 1
            else:
                table[i, j] = max(table[i - 1, j], table[i, j - 1])
    return int(table[len(a), len(b)])


def rouge_l(candidate, reference, beta=ROUGE_BETA):
    """LCS F-measure: P = LCS/|candidate|, R = LCS/|reference|."""
    if not candidate or not reference:
        raise ValueError("rouge_l needs non-empty token lists")
    lcs = _lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    return (1.0 + beta * beta) * p * r / (r + beta * beta * p)


def _cider_vector(counts, doc_freq, log_n):
    """tf-idf vectors per order, their norms, and the unigram length."""
    vecs = [collections.defaultdict(float) for _ in range(CIDER_N)]
    norms = [0.0] * CIDER_N
    length = 0
    for gram, freq in counts.items():
        idf = log_n - math.log(max(1.0, doc_freq[gram]))
        k = len(gram) - 1
        vecs[k][gram] = freq * idf
        norms[k] += vecs[k][gram] ** 2
        if k == 0:
            length += freq
    return vecs, [math.sqrt(x) for x in norms], length


def _all_counts(tokens):
    counts = collections.Counter()
    for order in range(1, CIDER_N + 1):
        counts.update(_ngram_counts(tokens, order))
    return counts


def cider(candidates, references, sigma=CIDER_SIGMA):
    """CIDEr-D over a corpus: {key: tokens} vs {key: [tokens, ...]}.

    idf comes from the reference sets (one count per key); the candidate
    tf is clipped by the reference tf inside the dot product; each order's
    cosine gets a Gaussian penalty on the length difference. Mean over
    orders and keys, scaled by 10.
    """
    if set(candidates) != set(references):
        raise ValueError("candidate and reference keys differ")
    if len(references) < 2:
        raise ValueError("cider needs a corpus of at least 2 keys for idf")
    if any(not refs for refs in references.values()):
        raise ValueError("empty reference set")
    doc_freq = collections.Counter()
    for refs in references.values():
        seen = set()
        for ref in refs:
            seen.update(_all_counts(ref))
        doc_freq.update(seen)
    log_n = math.log(len(references))

    scores = []
    for key in candidates:
        cand_vec, cand_norm, cand_len = _cider_vector(
            _all_counts(candidates[key]), doc_freq, log_n)
        per_ref = np.zeros(CIDER_N)
        for ref in references[key]:
            ref_vec, ref_norm, ref_len = _cider_vector(
                _all_counts(ref), doc_freq, log_n)
            penalty = math.exp(-((cand_len - ref_len) ** 2) / (2.0 * sigma * sigma))
            for k in range(CIDER_N):
                dot = sum(min(v, ref_vec[k][g]) * ref_vec[k][g]
                          for g, v in cand_vec[k].items())
                if cand_norm[k] > 0 and ref_norm[k] > 0:
                    per_ref[k] += penalty * dot / (cand_norm[k] * ref_norm[k])
        scores.append(10.0 * (per_ref / len(references[key])).mean())
    return float(np.mean(scores))


# -- dense evaluation --------------------------------------------------------------


def _interval_tiou(a, b):
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = max(a[1], b[1]) - min(a[0], b[0])
    if union <= 0.0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def load_reference_json(path):
    """Read references from either the prediction format
    {vid: [{"timestamp", "sentence"}]} or the annotation format
    {vid: {"duration", "timestamps", "sentences"}}."""
    with open(path) as f:
        raw = json.load(f)
    out = {}
    for vid, entry in raw.items():
        if isinstance(entry, dict):
            pairs = zip(entry["timestamps"], entry["sentences"])
        else:
            pairs = ((p["timestamp"], p["sentence"]) for p in entry)
        out[vid] = [((float(t[0]), float(t[1])), s) for t, s in pairs]
    return out


def load_prediction_json(path):
    with open(path) as f:
        raw = json.load(f)
    return {
        vid: [((float(p["timestamp"][0]), float(p["timestamp"][1])), p["sentence"])
              for p in entries]
        for vid, entries in raw.items()
    }


def evaluate_dense(predictions, references, thresholds=TIOU_THRESHOLDS):
    """Score dense captions against references.

    Both arguments map video-id -> [((start, end), sentence), ...]. At each
    threshold a prediction is scored against every reference of its video
    whose segment overlaps at >= threshold; predictions with no match score
    zero. Sentence scores are averaged over predictions, CIDEr is computed
    over the matched corpus, and the top-level numbers average the
    thresholds and are scaled by 100. mIoU is the mean over references of
    the best tIoU any prediction achieves. METEOR and SPICE are reported
    as null.
    """
    missing = set(predictions) - set(references)
    if missing:
        raise ValueError(f"predictions for unknown videos: {sorted(missing)}")
    n_preds = sum(len(v) for v in predictions.values())

    per_threshold = {}
    for threshold in thresholds:
        sums = dict.fromkeys(METRIC_KEYS, 0.0)
        matched_cands = {}
        matched_refs = {}
        for vid, preds in predictions.items():
            refs = references[vid]
            for i, (seg, sentence) in enumerate(preds):
                hit = [tokenize(s) for rseg, s in refs
                       if _interval_tiou(seg, rseg) >= threshold and tokenize(s)]
                cand = tokenize(sentence)
                if not hit or not cand:
                    continue
                key = f"{vid}#{i}"
                matched_cands[key] = cand
                matched_refs[key] = hit
                for n in range(1, 5):
                    sums[f"bleu@{n}"] += bleu_n(cand, hit, n)
                sums["rouge_l"] += max(rouge_l(cand, r) for r in hit)
        if n_preds > 0:
            for k in ("bleu@1", "bleu@2", "bleu@3", "bleu@4", "rouge_l"):
                sums[k] /= n_preds
            # unmatched predictions count as zero inside the mean
            if len(matched_cands) >= 2:
                sums["cider"] = (cider(matched_cands, matched_refs)
                                 * len(matched_cands) / n_preds)
        per_threshold[f"{threshold:g}"] = {k: 100.0 * sums[k] for k in METRIC_KEYS}

    best = []
    for vid, refs in references.items():
        preds = predictions.get(vid, [])
        for rseg, _ in refs:
            best.append(max((_interval_tiou(p[0], rseg) for p in preds), default=0.0))
    miou = 100.0 * float(np.mean(best)) if best else 0.0

    report = {
        k: float(np.mean([per_threshold[t][k] for t in per_threshold]))
        for k in METRIC_KEYS
    }
    report["meteor"] = None
    report["spice"] = None
    report["miou"] = miou
    report["thresholds"] = per_threshold
    return report


def save_report(report, path):
    with open(path, "w") as f:
        json.dump(report, f, indent=1, sort_keys=True)
