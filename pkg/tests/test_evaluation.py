import json
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from occtext.core import Rect
from occtext.evaluation import (
    Detection,
    DetectorClient,
    EvalRecord,
    MockDetector,
    MockRecognizer,
    SubprocessDetector,
    SubprocessRecognizer,
    aggregate,
    evaluate_sample,
    normalize_text,
    occlusion_alignment,
    text_similarity,
)

from conftest import levenshtein_oracle, make_scenario, raster_overlap_oracle

IMG = np.zeros((64, 64))


@pytest.mark.parametrize(
    "rec,target,expected",
    [("COFFEE", "COFFEE", 1.0), ("", "COFFEE", 0.0), ("C0FFEE", "COFFEE", 1 - 1 / 6), ("coffee", "COFFEE", 1.0)],
)
def test_text_similarity_examples(rec, target, expected):
    assert text_similarity(rec, target) == pytest.approx(expected, abs=1e-6)


def test_text_similarity_normalization():
    assert normalize_text(["  hello", "world  "]) == "HELLO WORLD"
    assert text_similarity(["JAZZ", "NIGHT"], "jazz  night") == 1.0
    with pytest.raises(ValueError, match="empty target"):
        text_similarity("X", "   ")


words = st.text(alphabet="abcdAB E", max_size=12)


@given(words, words.filter(lambda s: s.strip()))
def test_text_similarity_matches_dp(a, b):
    na, nb = normalize_text(a), normalize_text(b)
    expected = 1 - levenshtein_oracle(na, nb) / max(len(na), len(nb))
    assert text_similarity(a, b) == pytest.approx(expected, abs=1e-12)


@given(words.filter(lambda s: s.strip()), words.filter(lambda s: s.strip()))
def test_text_similarity_symmetric_and_identity(a, b):
    assert text_similarity(a, b) == text_similarity(b, a)
    assert (text_similarity(a, b) == 1.0) == (normalize_text(a) == normalize_text(b))


def test_occlusion_alignment_examples():
    r = Rect(0.1, 0.2, 0.6, 0.7)
    assert occlusion_alignment(r, r) == 1.0
    assert occlusion_alignment(Rect(0, 0, 0.2, 0.2), Rect(0.5, 0.5, 1, 1)) == 0.0
    assert occlusion_alignment(Rect(0, 0.25, 1, 0.75), Rect(0, 0, 1, 0.5)) == pytest.approx(0.5, abs=1e-12)
    assert occlusion_alignment(Rect(0, 0, 0.5, 0.5), Rect(0.5, 0, 1, 0.5)) == 0.0


def test_occlusion_alignment_matches_raster():
    a, b = Rect(0.125, 0.25, 0.75, 0.5), Rect(0.5, 0.0, 1.0, 0.375)
    assert occlusion_alignment(a, b) == pytest.approx(raster_overlap_oracle(a, b, 64), abs=1e-9)


def rects(lo=0.0, hi=0.5, size=0.5):
    return st.tuples(st.floats(lo, hi), st.floats(lo, hi), st.floats(0.01, size), st.floats(0.01, size)).map(
        lambda t: Rect(t[0], t[1], t[0] + t[2], t[1] + t[3])
    )


@given(rects(), rects())
def test_occlusion_alignment_symmetric(a, b):
    assert occlusion_alignment(a, b) == occlusion_alignment(b, a)
    assert 0.0 <= occlusion_alignment(a, b) <= 1.0


@given(rects(0.3, 0.4, 0.3), rects(0.3, 0.4, 0.3), st.floats(-0.3, 0.3), st.floats(-0.3, 0.3))
def test_occlusion_alignment_translation_invariant(a, b, dx, dy):
    def shift(r):
        return Rect(r.left + dx, r.top + dy, r.right + dx, r.bottom + dy)

    assert occlusion_alignment(shift(a), shift(b)) == pytest.approx(occlusion_alignment(a, b), abs=1e-12)


@given(st.floats(0.05, 0.4), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_occlusion_alignment_monotone_overlap(w, f1, f2):
    # slide an equal-size box toward a fixed one: larger intersection, same areas
    lo, hi = sorted((f1, f2))
    fixed = Rect(0.0, 0.0, w, 0.2)

    def at(frac):
        off = w * (1 - frac)
        return Rect(off, 0.0, off + w, 0.2)

    assert occlusion_alignment(fixed, at(hi)) >= occlusion_alignment(fixed, at(lo)) - 1e-12


def test_degenerate_rect_rejected():
    class Flat:
        area = 0.0

    with pytest.raises(ValueError):
        occlusion_alignment(Flat(), Rect(0, 0, 1, 1))


def test_evaluate_perfect_mocks():
    sc = make_scenario()
    rec = evaluate_sample(IMG, sc, MockRecognizer({}), MockDetector({}), seed=0)
    assert (rec.text_sim, rec.occ_align, rec.detected) == (1.0, 1.0, True)


def test_evaluate_no_detection():
    sc = make_scenario()
    rec = evaluate_sample(IMG, sc, MockRecognizer({}), MockDetector({"default": None}), seed=0)
    assert rec.occ_align == 0.0 and not rec.detected and rec.valid


def test_evaluate_one_substitution():
    sc = make_scenario()
    rec = evaluate_sample(IMG, sc, MockRecognizer({"default": "C0FFEE"}), MockDetector({}), seed=0)
    assert rec.text_sim == pytest.approx(0.833333, abs=1e-6)


def test_evaluate_threshold_and_best_box():
    sc = make_scenario()
    low = MockDetector({"default": {"box": "$text_rect", "confidence": 0.2}})
    assert not evaluate_sample(IMG, sc, MockRecognizer({}), low, seed=0).detected
    boxes = [{"box": [0, 0, 0.05, 0.05], "confidence": 0.5}, {"box": "$text_rect", "confidence": 0.9}]
    rec = evaluate_sample(IMG, sc, MockRecognizer({}), MockDetector({"default": boxes}), seed=0)
    assert rec.occ_align == 1.0


def test_evaluate_uses_eval_rect():
    sc = make_scenario(eval_rect=Rect(0.0, 0.0, 1.0, 0.5))
    det = MockDetector({"default": {"box": [0.0, 0.25, 1.0, 0.75], "confidence": 1}})
    assert evaluate_sample(IMG, sc, MockRecognizer({}), det, seed=0).occ_align == pytest.approx(0.5)


def test_client_failure_marks_invalid():
    sc = make_scenario()
    rec = evaluate_sample(IMG, sc, MockRecognizer({"runs": {"poster/2": {"error": "ocr down"}}}), MockDetector({}), seed=2)
    assert not rec.valid and "ocr down" in rec.error
    assert json.loads(rec.to_json())["valid"] is False

    class Broken(DetectorClient):
        def invoke(self, image, phrase, context):
            raise TimeoutError("slow")

    assert not evaluate_sample(IMG, sc, MockRecognizer({}), Broken(), seed=0).valid


def test_mock_per_run_entries():
    sc = make_scenario()
    det = MockDetector({"runs": {"poster/1": None}})
    assert evaluate_sample(IMG, sc, MockRecognizer({}), det, seed=0).detected
    assert not evaluate_sample(IMG, sc, MockRecognizer({}), det, seed=1).detected


def test_record_invariant():
    with pytest.raises(ValueError):
        EvalRecord("x", 0, 1.0, 0.3, False)


def test_aggregate_examples():
    assert aggregate([EvalRecord("a", 0, 1.0, 1.0, True)]).as_tuple() == (1.0, 1.0, 1.0)
    s = aggregate([EvalRecord("a", 0, 1.0, 0.5, True), EvalRecord("b", 0, 0.5, 0.0, False)])
    assert s.as_tuple() == (0.75, 0.25, 0.5)
    assert aggregate([EvalRecord(str(i), i, 0.9, 0.4, True) for i in range(64)]).detect_rate == 1.0
    with pytest.raises(ValueError, match="no records"):
        aggregate([])
    with pytest.raises(ValueError, match="invalid"):
        aggregate([EvalRecord.invalid("a", 0, "boom")])


def test_subprocess_clients(tmp_path):
    ocr = SubprocessRecognizer(f'{sys.executable} -c "print(\'COF\'); print(\'FEE\')" {{image}}')
    assert ocr.invoke(IMG, {}) == ["COF", "FEE"]
    script = tmp_path / "det.py"
    script.write_text(
        "import json, sys\n"
        "assert sys.argv[2] == 'vinyl record'\n"
        "print(json.dumps([{'box': [0, 0, 0.5, 0.5], 'confidence': 0.8}]))\n"
    )
    det = SubprocessDetector(f"{sys.executable} {script} {{image}} {{phrase}}")
    assert det.invoke(IMG, "vinyl record", {}) == [Detection(Rect(0, 0, 0.5, 0.5), 0.8)]
