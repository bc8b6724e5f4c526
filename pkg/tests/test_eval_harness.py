import math

import numpy as np
import pytest

from conftest import graph_from_words
from ebama.errors import ConfigurationError, InputError
from ebama.eval_harness import (
    BenchmarkPrompt,
    BenchmarkReport,
    FixtureCaptioner,
    HashingScorer,
    ane_prompts,
    cosine,
    decompose_subprompts,
    dvmp_prompts,
    full_similarity,
    load_prompts,
    min_similarity,
    resolve_dataset,
    run_benchmark,
    text_caption_similarity,
)
from ebama.prompt_graph import ObjectGraph, annotate, extract_object_graph

IMAGE = np.zeros((8, 8, 3), dtype=np.uint8)


def unit_at_angle(cos_value):
    return np.array([cos_value, math.sqrt(1 - cos_value**2)])


class TableScorer:
    """Image embeds to e1; each text maps to a vector at a chosen cosine with e1."""

    def __init__(self, scores):
        self.scores = scores

    def embed_image(self, image):
        return np.array([1.0, 0.0])

    def embed_text(self, text):
        return unit_at_angle(self.scores[text])


class ListCaptioner:
    def __init__(self, captions):
        self.captions = captions

    def caption(self, image, n=1):
        return self.captions[:n]


def test_full_similarity_identical_and_orthogonal():
    s = TableScorer({"same": 1.0, "ortho": 0.0})
    assert full_similarity(IMAGE, "same", s) == pytest.approx(1.0, abs=1e-15)
    assert full_similarity(IMAGE, "ortho", s) == pytest.approx(0.0, abs=1e-15)


def test_scorer_missing_is_configuration_error():
    with pytest.raises(ConfigurationError):
        full_similarity(IMAGE, "x", None)
    with pytest.raises(ConfigurationError):
        min_similarity(IMAGE, ["x"], None)
    with pytest.raises(ConfigurationError):
        text_caption_similarity(IMAGE, "x", None, TableScorer({}))


def test_min_similarity_is_minimum_of_subscores():
    s = TableScorer({"a cat": 0.3, "a frog": 0.25})
    assert min_similarity(IMAGE, ["a cat", "a frog"], s) == pytest.approx(0.25, abs=1e-12)
    assert min_similarity(IMAGE, ["a cat"], s) == full_similarity(IMAGE, "a cat", s)


def test_min_similarity_needs_subprompts():
    with pytest.raises(InputError):
        min_similarity(IMAGE, [], TableScorer({}))


def test_text_caption_similarity_examples():
    scorer = HashingScorer()
    p = "a purple crown and a blue suitcase"
    assert text_caption_similarity(IMAGE, p, ListCaptioner([p]), scorer) == pytest.approx(1.0)
    # prompt at e1, captions at cosines 0.8 and 0.6 from it
    s = TableScorer({"p": 1.0, "c1": 0.8, "c2": 0.6})
    tc = text_caption_similarity(IMAGE, "p", ListCaptioner(["c1", "c2"]), s, n_captions=2)
    assert tc == pytest.approx(0.7, abs=1e-12)
    single = text_caption_similarity(IMAGE, "p", ListCaptioner(["c1"]), s)
    assert single == cosine(s.embed_text("p"), s.embed_text("c1"))


def test_no_captions_is_input_error():
    with pytest.raises(InputError):
        text_caption_similarity(IMAGE, "p", ListCaptioner([]), HashingScorer())


@pytest.mark.parametrize(
    "prompt, expected",
    [
        ("a purple crown and a blue suitcase", ["a purple crown", "a blue suitcase"]),
        ("a cat and a frog", ["a cat", "a frog"]),
        ("a red metal crown", ["a red metal crown"]),
        ("an elephant and an orange bowl", ["an elephant", "an orange bowl"]),
    ],
)
def test_decompose_subprompts(fixtures, prompt, expected):
    from ebama.prompt_graph import ChainAnnotator, LexiconAnnotator

    tokens = annotate(prompt, ChainAnnotator(fixtures, LexiconAnnotator()))
    assert decompose_subprompts(prompt, extract_object_graph(tokens)) == expected


def test_decompose_rejects_empty_graph():
    g = ObjectGraph((), {}, 2, words=("very", "red"))
    assert g.degraded
    with pytest.raises(InputError):
        decompose_subprompts("very red", g)


def test_decompose_rejects_foreign_words():
    g = graph_from_words(["a", "cat"], [1], {})
    with pytest.raises(InputError):
        decompose_subprompts("a dog", g)


def test_hashing_scorer_is_deterministic_and_unit():
    a, b = HashingScorer(), HashingScorer()
    np.testing.assert_array_equal(a.embed_text("a red cat"), b.embed_text("a red cat"))
    assert np.linalg.norm(a.embed_image(IMAGE + 10)) == pytest.approx(1.0)
    assert cosine(a.embed_text("a red cat"), a.embed_text("red cat")) == pytest.approx(1.0)


def test_fixture_captioner_table_and_fallback():
    img = np.full((4, 4, 3), 9, dtype=np.uint8)
    cap = FixtureCaptioner({FixtureCaptioner.digest(img): ["a dog", "a cat"]})
    assert cap.caption(img, 1) == ["a dog"]
    other = np.zeros_like(img)
    assert cap.caption(other, 2) == cap.caption(other, 2)
    assert len(cap.caption(other, 3)) == 3


# -- datasets ---------------------------------------------------------------


def test_template_datasets():
    aa = ane_prompts("animal-animal")
    assert aa[0].text.startswith("a ") and " and a " in aa[0].text
    assert all(p.category == "animal-animal" for p in aa)
    assert ane_prompts("object-object", seed=1) == ane_prompts("object-object", seed=1)
    assert len(dvmp_prompts(5)) == 5
    with pytest.raises(InputError):
        ane_prompts("dvmp")


def test_dataset_files(tmp_path):
    f = tmp_path / "prompts.txt"
    f.write_text("a cat\n\n a frog \n", encoding="utf-8")
    assert load_prompts(f, "abc6k") == [BenchmarkPrompt("a cat", "abc6k"), BenchmarkPrompt("a frog", "abc6k")]
    assert resolve_dataset(f"object-object={f}")[0].category == "object-object"
    assert resolve_dataset(str(f))[1].text == "a frog"
    with pytest.raises(InputError):
        BenchmarkPrompt("x", "nonsense")


# -- runner and reports --------------------------------------------------------


def _fake_generate(calls):
    def gen(bp, seed):
        calls.append((bp.text, seed))
        rng = np.random.default_rng([seed, len(bp.text)])
        words = bp.text.split()
        g = graph_from_words(words, [len(words) - 1], {})
        return rng.integers(0, 256, (16, 16, 3), dtype=np.uint8), g, f"{seed}.png"

    return gen


DATA = [BenchmarkPrompt("a cat", "animal-animal"), BenchmarkPrompt("a red crown", "object-object"),
        BenchmarkPrompt("a dog", "animal-animal")]


def _run(images=3, **kw):
    calls = []
    rep = run_benchmark(DATA, _fake_generate(calls), HashingScorer(), FixtureCaptioner(),
                        seeds=[0, 1, 2, 3], images_per_prompt=images, **kw)
    return rep, calls


def test_zero_images_is_empty_and_generates_nothing():
    rep, calls = _run(0)
    assert rep.records == [] and calls == []
    assert rep.summary() == {}


def test_shared_seed_list_used_per_prompt():
    rep, calls = _run(3)
    assert calls == [(p.text, s) for p in DATA for s in (0, 1, 2)]
    assert rep.seeds == [0, 1, 2]


def test_short_seed_list_is_input_error():
    with pytest.raises(InputError):
        run_benchmark(DATA, _fake_generate([]), HashingScorer(), FixtureCaptioner(), [0], 2)
    with pytest.raises(InputError):
        run_benchmark(DATA, _fake_generate([]), HashingScorer(), FixtureCaptioner(), [0], -1)


def test_seed_parity_between_methods():
    rep, _ = _run(2)
    with pytest.raises(InputError):
        run_benchmark(DATA, _fake_generate([]), HashingScorer(), FixtureCaptioner(),
                      [5, 6], 2, method="other", report=rep)
    run_benchmark(DATA, _fake_generate([]), HashingScorer(), FixtureCaptioner(),
                  [0, 1, 9], 2, method="other", report=rep)
    assert list(rep.summary()) == ["ours", "other"]


def test_aggregation_equals_record_means():
    rep, _ = _run(3)
    summary = rep.summary()["ours"]
    for cat in ("animal-animal", "object-object"):
        recs = [r for r in rep.records if r.category == cat]
        prompts = sorted({r.prompt for r in recs})
        for m in ("full_sim", "min_sim", "tc_sim"):
            per_prompt = [np.mean([getattr(r, m) for r in recs if r.prompt == p]) for p in prompts]
            assert abs(summary[cat][m] - float(np.mean(per_prompt))) < 1e-9
            # equal images per prompt, so this is also the plain record mean
            assert abs(summary[cat][m] - float(np.mean([getattr(r, m) for r in recs]))) < 1e-9


def test_metric_bounds_and_min_le_full_for_single_object():
    rep, _ = _run(2)
    for r in rep.records:
        assert -1 <= r.min_sim <= 1 and -1 <= r.full_sim <= 1 and -1 <= r.tc_sim <= 1


def test_reports_are_byte_stable(tmp_path):
    a, _ = _run(3)
    b, _ = _run(3)
    a.write(tmp_path / "a")
    b.write(tmp_path / "b")
    for name in ("records.csv", "summary.csv", "summary.md", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_summary_schema():
    rep, _ = _run(1)
    header = rep.summary_table().splitlines()[0]
    assert header == ("method,animal-animal/full_sim,animal-animal/min_sim,animal-animal/tc_sim,"
                      "object-object/full_sim,object-object/min_sim,object-object/tc_sim")
    md = rep.summary_markdown().splitlines()
    assert md[0].startswith("| Method | animal-animal Full | animal-animal Min | animal-animal T-C")
    assert md[2].startswith("| ours | ")


def test_empty_report_tables():
    rep = BenchmarkReport()
    assert rep.summary_table() == "method\n"
