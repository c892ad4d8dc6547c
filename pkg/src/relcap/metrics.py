"""Caption quality metrics and paired significance testing.

Corpus BLEU aggregates clipped n-gram counts over all images before taking
ratios; a smoothed per-image variant exists so paired tests are defined for
short captions. ROUGE-L is the LCS F-measure (beta = 1.2), max over
references. CIDEr-D follows the tf-idf consensus recipe: clipped candidate
counts, cosine per reference with a Gaussian length penalty (sigma = 6),
averaged over references and n-gram orders, scaled by 10. Document
frequency counts images whose reference set contains the n-gram; n-grams
never seen in any reference get zero weight everywhere.

The synthetic-corpus spatial metrics score relation and count words in
generated captions directly against scene geometry, which stands in for
semantic-subcategory scoring that needs external resources.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .data import Scene, parse_count, parse_relation, relation_holds, tokenize
from .errors import DegenerateVarianceError, UsageError

ROUGE_BETA = 1.2
CIDER_SIGMA = 6.0


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------


def bleu(candidates: dict[str, str], references: dict[str, list[str]],
         n_max: int = 4) -> dict:
    """Corpus BLEU-1..n with clipping and brevity penalty.

    Counts are summed over the corpus before ratios are taken. Returns the
    cumulative scores, per-order precisions, and the brevity penalty.
    """
    for image_id, refs in references.items():
        if not refs:
            raise UsageError(f"image {image_id} has no references")
    clipped = np.zeros(n_max)
    totals = np.zeros(n_max)
    cand_len = 0
    ref_len = 0
    for image_id, caption in candidates.items():
        cand = tokenize(caption)
        refs = [tokenize(r) for r in references[image_id]]
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, n_max + 1):
            counts = _ngrams(cand, n)
            if not counts:
                continue
            max_ref = Counter()
            for ref in refs:
                for gram, c in _ngrams(ref, n).items():
                    max_ref[gram] = max(max_ref[gram], c)
            clipped[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            totals[n - 1] += sum(counts.values())
    if cand_len == 0:
        return {"bleu": [0.0] * n_max, "precisions": [0.0] * n_max,
                "brevity_penalty": 0.0,
                "diagnostic": "empty candidate corpus"}
    precisions = [clipped[i] / totals[i] if totals[i] else 0.0 for i in range(n_max)]
    bp = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len)
    scores = []
    for n in range(1, n_max + 1):
        if any(p == 0 for p in precisions[:n]):
            scores.append(0.0)
        else:
            scores.append(bp * math.exp(sum(math.log(p) for p in precisions[:n]) / n))
    return {"bleu": scores, "precisions": precisions, "brevity_penalty": bp}


def bleu_image(candidate: str, references: list[str], n_max: int = 4) -> float:
    """Per-image BLEU with +1 smoothing on orders above 1 (for paired tests)."""
    if not references:
        raise UsageError("per-image BLEU needs references")
    cand = tokenize(candidate)
    refs = [tokenize(r) for r in references]
    if not cand:
        return 0.0
    log_sum = 0.0
    for n in range(1, n_max + 1):
        counts = _ngrams(cand, n)
        max_ref = Counter()
        for ref in refs:
            for gram, c in _ngrams(ref, n).items():
                max_ref[gram] = max(max_ref[gram], c)
        clipped = sum(min(c, max_ref[g]) for g, c in counts.items())
        total = sum(counts.values())
        if n == 1:
            p = clipped / total if total else 0.0
        else:
            p = (clipped + 1.0) / (total + 1.0)
        if p == 0.0:
            return 0.0
        log_sum += math.log(p)
    ref_len = min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
    bp = 1.0 if len(cand) >= ref_len else math.exp(1.0 - ref_len / len(cand))
    return bp * math.exp(log_sum / n_max)


# ---------------------------------------------------------------------------
# ROUGE-L
# ---------------------------------------------------------------------------


def _lcs_length(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for tok in a:
        cur = [0] * (len(b) + 1)
        for j, other in enumerate(b, 1):
            cur[j] = prev[j - 1] + 1 if tok == other else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, references: list[str], beta: float = ROUGE_BETA) -> float:
    """LCS-based F-measure, max over references."""
    if not references:
        raise UsageError("rouge_l needs references")
    cand = tokenize(candidate)
    best = 0.0
    for reference in references:
        ref = tokenize(reference)
        lcs = _lcs_length(cand, ref)
        if lcs == 0:
            continue
        precision = lcs / len(cand)
        recall = lcs / len(ref)
        f = (1 + beta ** 2) * precision * recall / (recall + beta ** 2 * precision)
        best = max(best, f)
    return best


# ---------------------------------------------------------------------------
# CIDEr-D
# ---------------------------------------------------------------------------


def _tfidf_vector(tokens: list[str], n: int, weights: dict) -> tuple[dict, float]:
    vec = {}
    for gram, count in _ngrams(tokens, n).items():
        w = weights.get(gram, 0.0)
        if w > 0.0:
            vec[gram] = count * w
    norm = math.sqrt(sum(v * v for v in vec.values()))
    return vec, norm


def cider_d(candidates: dict[str, str], references: dict[str, list[str]],
            n_max: int = 4, sigma: float = CIDER_SIGMA) -> tuple[float, dict[str, float]]:
    """Corpus mean and per-image CIDEr-D scores.

    The idf corpus is the reference set of the images being scored; one
    image's reference list is one document.
    """
    image_ids = sorted(candidates)
    if len(references) < 2:
        raise UsageError("CIDEr-D idf needs at least 2 images of references")
    n_docs = len(references)
    weights: list[dict] = [{} for _ in range(n_max)]
    for n in range(1, n_max + 1):
        df = Counter()
        for refs in references.values():
            seen = set()
            for ref in refs:
                seen |= set(_ngrams(tokenize(ref), n))
            df.update(seen)
        weights[n - 1] = {g: math.log(n_docs / c) for g, c in df.items()}

    per_image: dict[str, float] = {}
    for image_id in image_ids:
        cand = tokenize(candidates[image_id])
        refs = [tokenize(r) for r in references[image_id]]
        acc = 0.0
        for n in range(1, n_max + 1):
            w = weights[n - 1]
            cand_vec, cand_norm = _tfidf_vector(cand, n, w)
            level = 0.0
            for ref in refs:
                ref_vec, ref_norm = _tfidf_vector(ref, n, w)
                if cand_norm == 0.0 or ref_norm == 0.0:
                    continue
                sim = sum(min(v, ref_vec[g]) * ref_vec[g]
                          for g, v in cand_vec.items() if g in ref_vec)
                penalty = math.exp(-((len(cand) - len(ref)) ** 2) / (2 * sigma ** 2))
                level += penalty * sim / (cand_norm * ref_norm)
            acc += level / len(refs)
        per_image[image_id] = 10.0 * acc / n_max
    corpus = float(np.mean([per_image[i] for i in image_ids])) if image_ids else 0.0
    return corpus, per_image


# ---------------------------------------------------------------------------
# Synthetic-corpus spatial metrics
# ---------------------------------------------------------------------------


def spatial_accuracy(candidates: dict[str, str], scenes: dict[str, Scene]) -> dict:
    """Score relation/count words in captions against scene geometry.

    Relation scenes are correct when the caption contains exactly one
    relation phrase that geometrically holds between the named categories;
    count scenes when the first number word matches the category's
    multiplicity. Unparseable captions count as incorrect.
    """
    per_image: dict[str, dict] = {}
    relation_flags: list[bool] = []
    count_flags: list[bool] = []
    for image_id, caption in candidates.items():
        scene = scenes[image_id]
        tokens = tokenize(caption)
        entry: dict = {"relation_ok": None, "count_ok": None}
        if scene.kind == "relation":
            parsed = parse_relation(tokens)
            ok = bool(parsed) and relation_holds(scene, *parsed)
            entry["relation_ok"] = ok
            relation_flags.append(ok)
        elif scene.kind == "count":
            parsed = parse_count(tokens)
            ok = bool(parsed) and scene.category_count(parsed[1]) == parsed[0]
            entry["count_ok"] = ok
            count_flags.append(ok)
        per_image[image_id] = entry
    return {
        "relation_acc": float(np.mean(relation_flags)) if relation_flags else None,
        "count_acc": float(np.mean(count_flags)) if count_flags else None,
        "n_relation": len(relation_flags),
        "n_count": len(count_flags),
        "per_image": per_image,
    }


# ---------------------------------------------------------------------------
# Paired t-test
# ---------------------------------------------------------------------------


@dataclass
class PairedScores:
    image_ids: list[str]
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if not (len(self.image_ids) == self.a.size == self.b.size):
            raise UsageError("paired scores must align one value per image id")
        if self.a.size < 2:
            raise UsageError("paired test needs at least 2 images")

    @classmethod
    def from_dicts(cls, a: dict[str, float], b: dict[str, float]) -> "PairedScores":
        ids = sorted(set(a) & set(b))
        return cls(ids, np.array([a[i] for i in ids]), np.array([b[i] for i in ids]))


def _ln_beta(a: float, b: float) -> float:
    return math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)


def _betacf(a: float, b: float, x: float) -> float:
    # Continued-fraction expansion of the incomplete beta integral.
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 200):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-12:
            break
    return h


def _betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = a * math.log(x) + b * math.log1p(-x) - _ln_beta(a, b)
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_tailed_p(t: float, dof: int) -> float:
    """P(|T| >= |t|) for Student's t with `dof` degrees of freedom."""
    if dof < 1:
        raise UsageError("dof must be >= 1")
    return _betainc_reg(dof / 2.0, 0.5, dof / (dof + t * t))


def paired_t_test(scores_a, scores_b) -> dict:
    """Two-tailed paired t-test over per-image scores.

    Accepts two aligned sequences or a PairedScores. Zero-variance
    differences raise DegenerateVarianceError rather than returning NaN.
    """
    if isinstance(scores_a, PairedScores):
        pair = scores_a
        a, b = pair.a, pair.b
    else:
        a = np.asarray(scores_a, dtype=np.float64)
        b = np.asarray(scores_b, dtype=np.float64)
        if a.shape != b.shape or a.ndim != 1:
            raise UsageError("paired t-test needs two aligned 1-D score arrays")
        if a.size < 2:
            raise UsageError("paired t-test needs n >= 2")
    d = a - b
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        raise DegenerateVarianceError("all paired differences are identical")
    n = d.size
    t = float(d.mean() / (sd / math.sqrt(n)))
    dof = n - 1
    return {"t": t, "dof": dof, "p": student_t_two_tailed_p(t, dof)}
