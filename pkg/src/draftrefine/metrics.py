"""Single-reference text generation metrics on a 0-100 scale (CIDEr raw)."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

from nltk.stem.porter import PorterStemmer

from .corpus import SPECIAL_TOKENS

ROUGE_BETA = 1.2
METEOR_ALPHA_WEIGHT = 9.0  # F_mean = 10PR / (R + 9P)
METEOR_PENALTY_GAMMA = 0.5
METEOR_PENALTY_EXP = 3.0

METADATA = {
    "bleu": "corpus-level, cumulative uniform weights, brevity penalty; n>=2 precisions with zero matches "
    "are smoothed to (matches+1)/(total+1)",
    "rouge_l": f"LCS F-measure with beta={ROUGE_BETA}, mean over examples",
    "meteor": "meteor_lite: exact then Porter-stem alignment, no synonym stage, "
    "F_mean=10PR/(R+9P), penalty=0.5*(chunks/matches)^3",
    "cider": "plain CIDEr (no length penalty, not CIDEr-D), idf=ln(N/max(1,df)) over references, "
    "mean over n=1..4 of tf-idf cosine, orders absent from the reference skipped",
}

_DROP = frozenset(SPECIAL_TOKENS[:1] + SPECIAL_TOKENS[2:])  # PAD, BOS, EOS; UNK stays visible
_stemmer = PorterStemmer()


def surface(tokens: Sequence[str]) -> list[str]:
    return [t for t in tokens if t not in _DROP]


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _check_aligned(candidates, references) -> None:
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise ValueError("empty corpus")


def bleu(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[str]], n_max: int = 4) -> dict[str, float]:
    """Corpus BLEU-1..BLEU-n_max, each the cumulative geometric mean with BP."""
    _check_aligned(candidates, references)
    matched = [0] * (n_max + 1)
    total = [0] * (n_max + 1)
    cand_len = ref_len = 0
    for cand, ref in zip(candidates, references):
        cand, ref = surface(cand), surface(ref)
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, n_max + 1):
            c, r = ngrams(cand, n), ngrams(ref, n)
            matched[n] += sum(min(cnt, r[g]) for g, cnt in c.items())
            total[n] += sum(c.values())
    if cand_len == 0:
        return {f"bleu_{n}": 0.0 for n in range(1, n_max + 1)}
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    out = {}
    log_sum = 0.0
    for n in range(1, n_max + 1):
        if matched[n] > 0:
            p = matched[n] / total[n]
        elif n >= 2:
            p = (matched[n] + 1) / (total[n] + 1)
        else:
            p = 0.0
        if p == 0.0 or log_sum == -math.inf:
            log_sum = -math.inf
            out[f"bleu_{n}"] = 0.0
            continue
        log_sum += math.log(p)
        out[f"bleu_{n}"] = 100.0 * bp * math.exp(log_sum / n)
    return out


def sentence_bleu(candidate: Sequence[str], reference: Sequence[str], n: int = 1) -> float:
    return bleu([candidate], [reference], n_max=n)[f"bleu_{n}"]


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence[str], reference: Sequence[str], beta: float = ROUGE_BETA) -> float:
    candidate, reference = surface(candidate), surface(reference)
    if not reference:
        raise ValueError("rouge_l needs a nonempty reference")
    if not candidate:
        return 0.0
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(candidate), lcs / len(reference)
    return 100.0 * (1 + beta**2) * p * r / (r + beta**2 * p)


def _align(candidate: Sequence[str], reference: Sequence[str]) -> list[tuple[int, int]]:
    """Exact matches first, then Porter-stem matches on what is left."""
    used_c: set[int] = set()
    used_r: set[int] = set()
    pairs: list[tuple[int, int]] = []
    stages = (lambda t: t, _stemmer.stem)
    for key in stages:
        ref_keys = [key(t) for t in reference]
        last = -1
        for i, tok in enumerate(candidate):
            if i in used_c:
                continue
            k = key(tok)
            options = [j for j, rk in enumerate(ref_keys) if rk == k and j not in used_r]
            if not options:
                continue
            after = [j for j in options if j > last]
            j = after[0] if after else options[0]
            used_c.add(i)
            used_r.add(j)
            pairs.append((i, j))
            last = j
    return sorted(pairs)


def meteor_lite(candidate: Sequence[str], reference: Sequence[str]) -> float:
    candidate, reference = surface(candidate), surface(reference)
    if not reference:
        raise ValueError("meteor_lite needs a nonempty reference")
    if not candidate:
        return 0.0
    pairs = _align(candidate, reference)
    m = len(pairs)
    if m == 0:
        return 0.0
    chunks = 1
    for (ci, rj), (ci2, rj2) in zip(pairs, pairs[1:]):
        if ci2 != ci + 1 or rj2 != rj + 1:
            chunks += 1
    p, r = m / len(candidate), m / len(reference)
    f_mean = (1 + METEOR_ALPHA_WEIGHT) * p * r / (r + METEOR_ALPHA_WEIGHT * p)
    penalty = METEOR_PENALTY_GAMMA * (chunks / m) ** METEOR_PENALTY_EXP
    return 100.0 * f_mean * (1.0 - penalty)


def cider(
    candidates: Sequence[Sequence[str]], references: Sequence[Sequence[str]], n_max: int = 4
) -> tuple[float, list[float]]:
    """Corpus CIDEr and the per-example scores."""
    _check_aligned(candidates, references)
    if len(references) < 2:
        raise ValueError("cider needs at least two examples to estimate idf")
    cands = [surface(c) for c in candidates]
    refs = [surface(r) for r in references]
    n_docs = len(refs)
    df: list[Counter] = [Counter() for _ in range(n_max + 1)]
    for r in refs:
        for n in range(1, n_max + 1):
            df[n].update(ngrams(r, n).keys())

    def weights(tokens, n):
        return {g: tf * math.log(n_docs / max(1, df[n][g])) for g, tf in ngrams(tokens, n).items()}

    per_example = []
    for cand, ref in zip(cands, refs):
        sims = []
        for n in range(1, n_max + 1):
            wr = weights(ref, n)
            norm_r = math.sqrt(sum(v * v for v in wr.values()))
            if norm_r == 0.0:
                continue  # no informative reference n-grams of this order
            wc = weights(cand, n)
            norm_c = math.sqrt(sum(v * v for v in wc.values()))
            dot = sum(v * wr.get(g, 0.0) for g, v in wc.items())
            sims.append(dot / (norm_c * norm_r) if norm_c > 0 else 0.0)
        per_example.append(sum(sims) / len(sims) if sims else 0.0)
    return sum(per_example) / len(per_example), per_example


def _bucket_label(lo: float, hi: float | None) -> str:
    return f"[{lo:g},{hi:g})" if hi is not None else f"[{lo:g},inf)"


def bucket_means(values: Sequence[float], lengths: Sequence[int], edges: Sequence[float]) -> dict[str, dict]:
    """Mean of ``values`` per half-open length bucket; empty buckets omitted."""
    if len(values) != len(lengths):
        raise ValueError("values and lengths must be aligned")
    edges = sorted(edges)
    groups: dict[int, list[float]] = {}
    for v, n in zip(values, lengths):
        slot = None
        for i, lo in enumerate(edges):
            hi = edges[i + 1] if i + 1 < len(edges) else None
            if n >= lo and (hi is None or n < hi):
                slot = i
                break
        if slot is not None:
            groups.setdefault(slot, []).append(v)
    out = {}
    for i in sorted(groups):
        hi = edges[i + 1] if i + 1 < len(edges) else None
        vals = groups[i]
        out[_bucket_label(edges[i], hi)] = {"mean_bleu_1": sum(vals) / len(vals), "count": len(vals)}
    return out


def bucket_report(
    per_example_bleu1: Sequence[float],
    code_lengths: Sequence[int],
    comment_lengths: Sequence[int],
    code_edges: Sequence[float] = (0, 10, 20, 30, 40, 50, 100, 200),
    comment_edges: Sequence[float] = (0, 5, 10, 15, 20, 30),
) -> dict[str, dict]:
    return {
        "code": bucket_means(per_example_bleu1, code_lengths, code_edges),
        "comment": bucket_means(per_example_bleu1, comment_lengths, comment_edges),
    }


@dataclass
class MetricReport:
    bleu_1: float
    bleu_2: float
    bleu_3: float
    bleu_4: float
    rouge_l: float
    meteor: float
    cider: float | None  # None below two examples, where idf is undefined
    n_examples: int
    per_example: list[dict] | None = None
    buckets: dict | None = None
    metadata: dict = field(default_factory=lambda: dict(METADATA))

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_corpus(
    candidates: Sequence[Sequence[str]],
    references: Sequence[Sequence[str]],
    *,
    code_lengths: Sequence[int] | None = None,
    code_edges: Sequence[float] | None = None,
    comment_edges: Sequence[float] | None = None,
    per_example: bool = False,
) -> MetricReport:
    """All seven metrics, plus optional per-example rows and length buckets."""
    _check_aligned(candidates, references)
    b = bleu(candidates, references)
    rouge = [rouge_l(c, r) for c, r in zip(candidates, references)]
    met = [meteor_lite(c, r) for c, r in zip(candidates, references)]
    cid, cid_rows = cider(candidates, references) if len(candidates) >= 2 else (None, [None])
    b1 = [sentence_bleu(c, r) for c, r in zip(candidates, references)]
    rows = None
    if per_example:
        rows = [
            {"bleu_1": x, "rouge_l": y, "meteor": z, "cider": w} for x, y, z, w in zip(b1, rouge, met, cid_rows)
        ]
    buckets = None
    if code_lengths is not None or code_edges is not None or comment_edges is not None:
        comment_lengths = [len(surface(r)) for r in references]
        buckets = {}
        if code_lengths is not None:
            buckets["code"] = bucket_means(b1, code_lengths, code_edges or (0, 10, 20, 30, 40, 50, 100, 200))
        buckets["comment"] = bucket_means(b1, comment_lengths, comment_edges or (0, 5, 10, 15, 20, 30))
    return MetricReport(
        **b,
        rouge_l=sum(rouge) / len(rouge),
        meteor=sum(met) / len(met),
        cider=cid,
        n_examples=len(candidates),
        per_example=rows,
        buckets=buckets,
    )
