import math
from collections import Counter

import numpy as np
import numpy.testing as npt
import pytest

from relcap.data import Scene, SceneObject
from relcap.errors import DegenerateVarianceError, UsageError
from relcap.geometry import BoundingBox
from relcap.metrics import (
    PairedScores,
    bleu,
    bleu_image,
    cider_d,
    paired_t_test,
    rouge_l,
    spatial_accuracy,
    student_t_two_tailed_p,
)


class TestBleu:
    def test_exact_match_scores_one(self):
        out = bleu({"i": "a dog next to a cat"}, {"i": ["a dog next to a cat"]})
        npt.assert_allclose(out["bleu"][3], 1.0, rtol=1e-12)

    def test_clipping_hand_case(self):
        out = bleu({"i": "a a a"}, {"i": ["a b"]}, n_max=1)
        npt.assert_allclose(out["precisions"][0], 1 / 3, rtol=1e-12)

    def test_missing_reference_rejected(self):
        with pytest.raises(UsageError):
            bleu({"i": "a"}, {"i": []})

    def test_empty_candidate_corpus_diagnostic(self):
        out = bleu({"i": ""}, {"i": ["a dog"]})
        assert out["bleu"] == [0.0, 0.0, 0.0, 0.0]
        assert "diagnostic" in out

    def test_brevity_penalty_applied(self):
        # candidate shorter than reference: BP = exp(1 - r/c)
        out = bleu({"i": "a dog"}, {"i": ["a dog in a field"]})
        npt.assert_allclose(out["brevity_penalty"], math.exp(1 - 5 / 2), rtol=1e-12)

    def test_reference_order_invariance(self):
        refs = ["a dog above a cat", "two dogs", "a cat below a dog"]
        a = bleu({"i": "a dog above a cat"}, {"i": refs})
        b = bleu({"i": "a dog above a cat"}, {"i": refs[::-1]})
        assert a["bleu"] == b["bleu"]

    def test_image_order_invariance(self):
        cands = {"a": "two dogs", "b": "a cat above a cup"}
        refs = {"a": ["two dogs"], "b": ["a cat above a cup", "a cup below a cat"]}
        s1 = bleu(cands, refs)["bleu"]
        s2 = bleu(dict(reversed(list(cands.items()))), refs)["bleu"]
        assert s1 == s2

    def test_per_image_smoothed_matches_count_oracle(self):
        # direct count-based oracle for the smoothed per-image variant
        cases = [
            ("a dog next to a cat", ["a dog next to a cat"]),
            ("a dog", ["a dog next to a cat"]),
            ("a cat next to a dog", ["a dog next to a cat"]),
            ("two dogs", ["three dogs"]),
            ("a a a a", ["a b a c"]),
            ("there is a dog", ["there is a cup", "there is a dog"]),
            ("dog", ["dog"]),
            ("a photo of two cups", ["a photo of three cups"]),
            ("a bird above a lamp", ["a lamp below a bird"]),
            ("cup cup cup", ["cup"]),
        ]

        def oracle(cand, refs):
            c = cand.split()
            rs = [r.split() for r in refs]
            logs = []
            for n in range(1, 5):
                grams = Counter(tuple(c[i:i + n]) for i in range(len(c) - n + 1))
                best = Counter()
                for r in rs:
                    for g, k in Counter(tuple(r[i:i + n]) for i in range(len(r) - n + 1)).items():
                        best[g] = max(best[g], k)
                clip = sum(min(k, best[g]) for g, k in grams.items())
                tot = sum(grams.values())
                p = clip / tot if n == 1 and tot else (clip + 1) / (tot + 1) if n > 1 else 0.0
                if p == 0:
                    return 0.0
                logs.append(math.log(p))
            r_len = min((abs(len(r) - len(c)), len(r)) for r in rs)[1]
            bp = 1.0 if len(c) >= r_len else math.exp(1 - r_len / len(c))
            return bp * math.exp(sum(logs) / 4)

        for cand, refs in cases:
            npt.assert_allclose(bleu_image(cand, refs), oracle(cand, refs), rtol=1e-12)


class TestRougeL:
    def test_identical(self):
        assert rouge_l("a dog next to a cat", ["a dog next to a cat"]) == 1.0

    def test_hand_lcs_case(self):
        beta = 1.2
        p, r = 2 / 3, 1.0
        expected = (1 + beta ** 2) * p * r / (r + beta ** 2 * p)
        npt.assert_allclose(rouge_l("a b c", ["a c"]), expected, rtol=1e-12)

    def test_disjoint_vocab(self):
        assert rouge_l("a b c", ["x y z"]) == 0.0

    def test_max_over_references(self):
        refs = ["x y z", "a b c"]
        assert rouge_l("a b c", refs) == 1.0


class TestCiderD:
    def test_needs_two_images(self):
        with pytest.raises(UsageError):
            cider_d({"a": "x"}, {"a": ["x"]})

    def test_unseen_ngram_contributes_zero(self):
        refs = {"a": ["a dog"], "b": ["a cat"]}
        corpus_score, per_image = cider_d({"a": "zebra", "b": "a cat"}, refs)
        assert per_image["a"] == 0.0
        assert per_image["b"] > 0.0

    def test_matches_direct_vector_oracle(self):
        candidates = {"a": "a dog next to a cat", "b": "two cups"}
        references = {"a": ["a dog next to a cat", "a cat next to a dog"],
                      "b": ["two cups", "a photo of two cups"]}
        _, per_image = cider_d(candidates, references)

        # independent tf-idf/cosine evaluation
        def grams(tokens, n):
            return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))

        for image_id in candidates:
            cand = candidates[image_id].split()
            refs = [r.split() for r in references[image_id]]
            total = 0.0
            for n in range(1, 5):
                df = Counter()
                for other in references.values():
                    seen = set()
                    for ref in other:
                        seen |= set(grams(ref.split(), n))
                    df.update(seen)
                idf = {g: math.log(len(references) / c) for g, c in df.items()}
                cv = {g: k * idf.get(g, 0.0) for g, k in grams(cand, n).items()
                      if idf.get(g, 0.0) > 0}
                cn = math.sqrt(sum(v * v for v in cv.values()))
                level = 0.0
                for ref in refs:
                    rv = {g: k * idf[g] for g, k in grams(ref, n).items()}
                    rn = math.sqrt(sum(v * v for v in rv.values()))
                    if cn == 0 or rn == 0:
                        continue
                    num = sum(min(v, rv[g]) * rv[g] for g, v in cv.items() if g in rv)
                    pen = math.exp(-((len(cand) - len(ref)) ** 2) / (2 * 36.0))
                    level += pen * num / (cn * rn)
                total += level / len(refs)
            npt.assert_allclose(per_image[image_id], 10 * total / 4, rtol=1e-12)

    def test_self_evaluation_bounded(self):
        refs = {f"i{k}": [f"a dog number {k}", "a dog"] for k in range(4)}
        cands = {i: r[0] for i, r in refs.items()}
        corpus_score, per_image = cider_d(cands, refs)
        assert 0.0 < corpus_score <= 10.0
        assert all(0.0 <= v <= 10.0 for v in per_image.values())


def _relation_scene(image_id="r0"):
    return Scene(image_id, 256, 256, "relation", [
        SceneObject("dog", BoundingBox(50, 100, 20, 20)),
        SceneObject("cat", BoundingBox(170, 100, 20, 20)),
    ])


def _count_scene(image_id="c0", k=2):
    objs = [SceneObject("bird", BoundingBox(40 + 40 * i, 80, 20, 20)) for i in range(k)]
    objs += [SceneObject("cup", BoundingBox(40 + 40 * i, 160, 20, 20)) for i in range(k)]
    return Scene(image_id, 256, 256, "count", objs)


class TestSpatialAccuracy:
    def test_reference_caption_scores_correct(self):
        scenes = {"r0": _relation_scene(), "c0": _count_scene()}
        out = spatial_accuracy(
            {"r0": "a dog to the left of a cat", "c0": "two birds"}, scenes)
        assert out["relation_acc"] == 1.0 and out["count_acc"] == 1.0

    def test_wrong_direction_incorrect(self):
        out = spatial_accuracy({"r0": "a dog to the right of a cat"},
                               {"r0": _relation_scene()})
        assert out["relation_acc"] == 0.0

    def test_inverse_phrasing_accepted(self):
        out = spatial_accuracy({"r0": "a cat to the right of a dog"},
                               {"r0": _relation_scene()})
        assert out["relation_acc"] == 1.0

    def test_unparseable_counts_as_incorrect(self):
        out = spatial_accuracy({"r0": "blah blah", "c0": "many birds maybe"},
                               {"r0": _relation_scene(), "c0": _count_scene()})
        assert out["relation_acc"] == 0.0 and out["count_acc"] == 0.0

    def test_hand_tally_over_ten_captions(self):
        scenes = {}
        candidates = {}
        expected_rel = []
        for i in range(6):
            sid = f"r{i}"
            scenes[sid] = _relation_scene(sid)
            if i < 4:
                candidates[sid] = "a dog to the left of a cat"
                expected_rel.append(True)
            else:
                candidates[sid] = "a dog above a cat"
                expected_rel.append(False)
        expected_cnt = []
        for i in range(4):
            sid = f"c{i}"
            k = 2 if i % 2 == 0 else 3
            scenes[sid] = _count_scene(sid, k=k)
            candidates[sid] = "two birds"
            expected_cnt.append(k == 2)
        out = spatial_accuracy(candidates, scenes)
        npt.assert_allclose(out["relation_acc"], np.mean(expected_rel))
        npt.assert_allclose(out["count_acc"], np.mean(expected_cnt))
        assert out["n_relation"] == 6 and out["n_count"] == 4


class TestPairedTTest:
    def test_identical_scores_degenerate(self):
        with pytest.raises(DegenerateVarianceError):
            paired_t_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])

    def test_hand_example(self):
        a = np.array([2.0, 1.0, 3.0, 0.0, 4.0])
        b = a - np.array([1.0, -1.0, 1.0, -1.0, 1.0])
        out = paired_t_test(a, b)
        npt.assert_allclose(out["t"], 0.2 / (1.0954451150103321 / math.sqrt(5)), rtol=1e-9)
        npt.assert_allclose(out["t"], 0.4082, atol=1e-4)
        assert out["dof"] == 4

    def test_p_matches_quadrature_oracle(self):
        # numeric integration of the t density as an independent oracle
        def pdf(x, dof):
            c = math.gamma((dof + 1) / 2) / (math.sqrt(dof * math.pi) * math.gamma(dof / 2))
            return c * (1 + x * x / dof) ** (-(dof + 1) / 2)

        for t, dof in [(0.4082, 4), (1.5, 3), (2.2, 9), (0.05, 2), (3.7, 19)]:
            xs = np.linspace(0.0, t, 20001)
            integral = np.trapezoid([pdf(x, dof) for x in xs], xs)
            expected = 1.0 - 2.0 * integral
            npt.assert_allclose(student_t_two_tailed_p(t, dof), expected, atol=1e-6)

    def test_antisymmetry(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=20), rng.normal(size=20)
        ab = paired_t_test(a, b)
        ba = paired_t_test(b, a)
        npt.assert_allclose(ab["t"], -ba["t"], rtol=1e-12)
        npt.assert_allclose(ab["p"], ba["p"], rtol=1e-12)

    def test_significance_threshold_convention(self):
        rng = np.random.default_rng(1)
        base = rng.normal(size=60)
        clearly_better = base + 1.0 + rng.normal(scale=0.1, size=60)
        out = paired_t_test(clearly_better, base)
        assert out["p"] < 0.05

    def test_paired_scores_container(self):
        pair = PairedScores.from_dicts({"a": 1.0, "b": 2.0, "c": 5.0},
                                       {"a": 0.0, "b": 1.0, "c": 1.0})
        out = paired_t_test(pair, None)
        assert out["dof"] == 2
        with pytest.raises(UsageError):
            PairedScores(["a"], [1.0], [2.0])
