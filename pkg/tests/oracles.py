"""Brute-force metric re-implementations used only as test oracles.

Written independently of the library code, favoring obviousness over speed:
explicit loops, plain dicts, no shared helpers. If the library and these
disagree, trust neither and recount by hand.
"""

import math


def grams(tokens, n):
    out = []
    for i in range(len(tokens) - n + 1):
        out.append(tuple(tokens[i : i + n]))
    return out


def count(seq):
    table = {}
    for item in seq:
        table[item] = table.get(item, 0) + 1
    return table


def naive_bleu(items, n):
    """items: list of (candidate, [reference, ...]) token-list pairs."""
    cand_total_len = 0
    ref_total_len = 0
    for candidate, references in items:
        cand_total_len += len(candidate)
        best = None
        for ref in references:
            key = (abs(len(ref) - len(candidate)), len(ref))
            if best is None or key < best:
                best = key
        ref_total_len += best[1]
    if cand_total_len == 0:
        return 0.0
    precisions = []
    for k in range(1, n + 1):
        matched = 0
        total = 0
        for candidate, references in items:
            cand_counts = count(grams(candidate, k))
            for gram, c in cand_counts.items():
                best_ref = 0
                for ref in references:
                    ref_count = count(grams(ref, k)).get(gram, 0)
                    if ref_count > best_ref:
                        best_ref = ref_count
                matched += min(c, best_ref)
            total += len(grams(candidate, k))
        if matched == 0 or total == 0:
            return 0.0
        precisions.append(matched / total)
    geo = math.exp(sum(math.log(p) for p in precisions) / n)
    if cand_total_len >= ref_total_len:
        brevity = 1.0
    else:
        brevity = math.exp(1.0 - ref_total_len / cand_total_len)
    return brevity * geo


def naive_cider(items):
    """Plain consensus score: tf-idf cosine averaged over refs, n, images."""
    m_images = len(items)
    image_scores = []
    for candidate, references in items:
        n_scores = []
        for n in range(1, 5):
            cand_vec = {}
            for gram, c in count(grams(candidate, n)).items():
                cand_vec[gram] = c * _idf(gram, n, items, m_images)
            ref_sims = []
            for ref in references:
                ref_vec = {}
                for gram, c in count(grams(ref, n)).items():
                    ref_vec[gram] = c * _idf(gram, n, items, m_images)
                ref_sims.append(_cosine(cand_vec, ref_vec))
            n_scores.append(sum(ref_sims) / len(ref_sims))
        image_scores.append(sum(n_scores) / 4.0)
    return sum(image_scores) / m_images


def _idf(gram, n, items, m_images):
    appearances = 0
    for _, references in items:
        for ref in references:
            if gram in grams(ref, n):
                appearances += 1
                break
    return math.log(m_images / max(1, appearances))


def _cosine(u, v):
    nu = math.sqrt(sum(x * x for x in u.values()))
    nv = math.sqrt(sum(x * x for x in v.values()))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    dot = 0.0
    for gram, x in u.items():
        if gram in v:
            dot += x * v[gram]
    return dot / (nu * nv)


def random_corpus(rng, n_images=None, vocab=("the", "cat", "sat", "on", "mat", "dog", "ran")):
    """A random evaluation corpus as (candidate, references) pairs."""
    if n_images is None:
        n_images = int(rng.integers(1, 6))
    items = []
    for _ in range(n_images):
        cand_len = int(rng.integers(0, 8))
        candidate = [vocab[int(i)] for i in rng.integers(0, len(vocab), cand_len)]
        refs = []
        for _ in range(int(rng.integers(1, 4))):
            ref_len = int(rng.integers(1, 8))
            refs.append([vocab[int(i)] for i in rng.integers(0, len(vocab), ref_len)])
        items.append((candidate, refs))
    return items
