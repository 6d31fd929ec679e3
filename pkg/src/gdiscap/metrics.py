"""Caption accuracy and distinctiveness metrics.

``cider`` is CIDEr-D: clipped TF-IDF n-gram vectors (n = 1..4), cosine-style
similarity with a Gaussian length penalty (sigma 6), averaged over references
and orders, times 10.  Document frequencies come from :class:`NGramStats`,
where one document is the reference set of one image.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .corpus import DistinctiveWordSet, distinctive_words
from .grouping import target_group_index

MAX_N = 4
SIGMA = 6.0


def ngrams(tokens, n_max: int = MAX_N) -> Counter:
    tokens = tuple(tokens)
    return Counter(tokens[i : i + n] for n in range(1, n_max + 1) for i in range(len(tokens) - n + 1))


class NGramStats:
    """Document frequencies of 1..4-grams over a reference corpus."""

    def __init__(self, documents):
        self.df: Counter = Counter()
        self.n_docs = 0
        for refs in documents:
            self.n_docs += 1
            self.df.update({g for ref in refs for g in ngrams(ref)})
        if self.n_docs == 0:
            raise ValueError("NGramStats needs at least one document")
        self.log_n = math.log(float(self.n_docs))
        self._cache: dict = {}

    def vector(self, tokens):
        key = tuple(tokens)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        vec = [dict() for _ in range(MAX_N)]
        norm = [0.0] * MAX_N
        for g, tf in ngrams(key).items():
            w = tf * (self.log_n - math.log(max(1.0, self.df[g])))
            vec[len(g) - 1][g] = w
            norm[len(g) - 1] += w * w
        out = (vec, [math.sqrt(x) for x in norm], len(key))
        if len(self._cache) < 200_000:
            self._cache[key] = out
        return out


def _sim(hyp, ref) -> float:
    vh, nh, lh = hyp
    vr, nr, lr = ref
    penalty = math.exp(-((lh - lr) ** 2) / (2 * SIGMA**2))
    total = 0.0
    for n in range(MAX_N):
        val = 0.0
        for g, w in vh[n].items():
            r = vr[n].get(g)
            if r is not None:
                val += min(w, r) * r
        if nh[n] != 0 and nr[n] != 0:
            val /= nh[n] * nr[n]
        total += val * penalty
    return total / MAX_N


def cider(candidate, references, stats: NGramStats) -> float:
    if not candidate or not references:
        return 0.0
    hyp = stats.vector(candidate)
    return 10.0 * sum(_sim(hyp, stats.vector(r)) for r in references) / len(references)


@dataclass
class GroupScores:
    s: list
    rank: int


def cider_rank(candidate, group_captions, target_idx: int, stats: NGramStats) -> GroupScores:
    """CIDEr of the candidate against each member's captions; rank of the target.

    Ties with the target count in its favour.
    """
    s = [float(np.mean([cider(candidate, [c], stats) for c in caps])) for caps in group_captions]
    rank = 1 + sum(1 for k, v in enumerate(s) if k != target_idx and v > s[target_idx])
    return GroupScores(s, rank)


def cider_btw(candidate, group_captions, target_idx: int, stats: NGramStats) -> float:
    """Mean over the other members of the mean per-caption CIDEr (lower = more distinctive)."""
    others = [caps for k, caps in enumerate(group_captions) if k != target_idx]
    if not others:
        return 0.0
    return float(np.mean([np.mean([cider(candidate, [c], stats) for c in caps]) for caps in others]))


def dis_word_rate(candidate, target_caps, w_d) -> float | None:
    """Best fraction of a reference's distinctive words recovered by the candidate.

    Returns ``None`` when no reference contains a distinctive word (the image
    is then left out of corpus averages).
    """
    words = set(w_d.words if isinstance(w_d, DistinctiveWordSet) else w_d)
    cand = set(candidate)
    best, any_denominator = 0.0, False
    for ref in target_caps:
        denom = words & set(ref)
        if not denom:
            continue
        any_denominator = True
        best = max(best, len(denom & cand) / len(denom))
    return best if any_denominator else None


def corpus_dis_word_rate(values) -> tuple[float, int]:
    """Mean over included images and the number of excluded (``None``) ones."""
    kept = [v for v in values if v is not None]
    excluded = len(values) - len(kept)
    return (float(np.mean(kept)) if kept else 0.0), excluded


def bleu(candidates, references, n: int = 4) -> float:
    """Corpus BLEU-n with clipped counts and the closest-reference brevity penalty."""
    clipped = [0] * n
    totals = [0] * n
    cand_len = ref_len = 0
    for cand, refs in zip(candidates, references, strict=True):
        cand = tuple(cand)
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        max_ref = Counter()
        for r in refs:
            for g, c in ngrams(r, n).items():
                max_ref[g] = max(max_ref[g], c)
        for g, c in ngrams(cand, n).items():
            clipped[len(g) - 1] += min(c, max_ref[g])
        for k in range(1, n + 1):
            totals[k - 1] += max(len(cand) - k + 1, 0)
    if cand_len == 0 or any(c == 0 for c in clipped):
        return 0.0
    log_p = sum(math.log(c / t) for c, t in zip(clipped, totals)) / n
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_p)


def evaluate(captions: dict, records, groups) -> dict:
    """Score generated captions (``{image_id: tokens}``) on grouped references.

    CIDEr-family, BLEU and DisWordRate values are reported in percent;
    CIDErRank is the mean rank.  CIDErBtw averages per similar image first,
    then over the group.
    """
    by_id = {r.image_id: r for r in records}
    stats = NGramStats(r.captions for r in records)
    roles = target_group_index(groups)
    ids = [i for i in captions if i in roles]
    if not ids:
        raise ValueError("no captioned image appears in the groups")
    ciders, btws, ranks, dwr = [], [], [], []
    for iid in ids:
        cand = captions[iid]
        group, pos = roles[iid]
        caps = [by_id[m].captions for m in group.member_ids]
        ciders.append(cider(cand, caps[pos], stats))
        btws.append(cider_btw(cand, caps, pos, stats))
        ranks.append(cider_rank(cand, caps, pos, stats).rank)
        w_d = distinctive_words(caps[pos], [c for k, c in enumerate(caps) if k != pos])
        dwr.append(dis_word_rate(cand, caps[pos], w_d))
    rate, excluded = corpus_dis_word_rate(dwr)
    cands = [captions[i] for i in ids]
    refs = [by_id[i].captions for i in ids]
    return {
        "CIDEr": 100.0 * float(np.mean(ciders)),
        "BLEU3": 100.0 * bleu(cands, refs, 3),
        "BLEU4": 100.0 * bleu(cands, refs, 4),
        "CIDErBtw": 100.0 * float(np.mean(btws)),
        "CIDErRank": float(np.mean(ranks)),
        "DisWordRate": 100.0 * rate,
        "n_images": len(ids),
        "n_excluded_diswordrate": excluded,
    }


def format_report(report: dict) -> str:
    width = max(len(k) for k in report)
    lines = []
    for k, v in report.items():
        val = f"{v:10.3f}" if isinstance(v, float) else f"{v:10d}"
        lines.append(f"{k:<{width}}  {val}")
    return "\n".join(lines)
