import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from expected_graphs import EXPECTED, as_words
from ebama.errors import ConfigurationError, InputError
from ebama.prompt_graph import (
    ChainAnnotator,
    FixtureAnnotator,
    LexiconAnnotator,
    ObjectGraph,
    TokenAnnotation,
    annotate,
    append_external_modifiers,
    extend_with_words,
    extract_object_graph,
    read_annotation_file,
    validate_annotations,
    write_annotation_file,
)


def test_annotate_a_cat_frozen(fixtures):
    assert annotate("a cat", fixtures) == [
        TokenAnnotation(0, "a", "DET", 1, "det"),
        TokenAnnotation(1, "cat", "NOUN", 1, "ROOT"),
    ]


def test_annotate_crown_suitcase_token_count(fixtures):
    tokens = annotate("a purple crown and a blue suitcase", fixtures)
    # word-level tokenisation has 7 tokens; see the decisions ledger
    assert len(tokens) == 7
    assert [t.pos_tag for t in tokens if t.text in {"crown", "suitcase"}] == ["NOUN", "NOUN"]


def test_annotate_is_case_and_space_insensitive(fixtures):
    assert annotate("  A  Cat ", fixtures) == annotate("a cat", fixtures)


@pytest.mark.parametrize("prompt", ["", "   "])
def test_empty_prompt_is_input_error(fixtures, prompt):
    with pytest.raises(InputError):
        annotate(prompt, fixtures)


def test_unknown_prompt_is_configuration_error(fixtures):
    with pytest.raises(ConfigurationError):
        annotate("a prompt nobody recorded", fixtures)


@pytest.mark.parametrize("prompt, expected", EXPECTED, ids=[p for p, _ in EXPECTED])
def test_fixture_graphs(fixtures, prompt, expected):
    graph = extract_object_graph(annotate(prompt, fixtures))
    assert as_words(graph) == expected


def test_every_fixture_has_an_expected_graph(fixtures):
    assert {p.lower() for p, _ in EXPECTED} == set(fixtures.prompts())


@pytest.mark.parametrize("prompt", [p for p, _ in EXPECTED])
def test_graph_invariants_on_fixtures(fixtures, prompt):
    tokens = annotate(prompt, fixtures)
    g = extract_object_graph(tokens)
    objs = set(g.objects)
    assert all(tokens[s].pos_tag in {"NOUN", "PROPN"} for s in objs)
    assert not objs & g.modifier_union()
    mods = [g.modifiers[s] for s in g.objects]
    assert sum(len(m) for m in mods) == len(g.modifier_union())  # pairwise disjoint
    assert all(i < g.token_count for i in objs | g.modifier_union())
    assert extract_object_graph(tokens) == g


def test_proper_noun_compound_is_a_modifier(fixtures):
    g = extract_object_graph(annotate("Tesla company", fixtures))
    assert g.objects == (1,)
    assert g.modifiers[1] == frozenset({0})


def test_degraded_graph_without_nouns():
    tokens = [TokenAnnotation(0, "very", "ADV", 1, "advmod"), TokenAnnotation(1, "red", "ADJ", 1, "ROOT")]
    g = extract_object_graph(tokens)
    assert g.degraded and g.objects == ()


def test_external_modifiers_single(fixtures):
    g = extract_object_graph(annotate("a cat and a frog", fixtures))
    ext = extend_with_words(g, ["red"])
    assert ext.externals == frozenset({5})
    assert ext.words[5] == "red"
    assert ext.objects == g.objects and dict(ext.modifiers) == dict(g.modifiers)
    assert ext.token_count == 6


def test_external_modifiers_three(fixtures):
    g = extract_object_graph(annotate("a cat and a frog", fixtures))
    ext = extend_with_words(g, ["red", "blue", "green"])
    assert len(ext.externals) == 3
    assert ext.token_count == g.token_count + 3
    assert not ext.externals & ext.modifier_union()


def test_external_modifiers_need_positive_count(fixtures):
    tokens = annotate("a cat and a frog", fixtures)
    g = extract_object_graph(tokens)
    with pytest.raises(InputError):
        append_external_modifiers(g, tokens, 0)
    with pytest.raises(InputError):
        append_external_modifiers(g, tokens, 2)  # length mismatch


def test_record_export_keeps_duplicate_words(fixtures):
    g = extract_object_graph(
        annotate("a brown bear with red hat and scarf and a small stuffed bear", fixtures)
    )
    rec = g.to_record()
    assert [o["text"] for o in rec["objects"]] == ["bear", "hat", "scarf", "bear"]
    assert [m["text"] for m in rec["objects"][3]["modifiers"]] == ["small", "stuffed"]


def test_describe_format(fixtures):
    g = extract_object_graph(annotate("a purple crown and a blue suitcase", fixtures))
    assert g.describe() == "S={crown,suitcase}; M(crown)={purple}, M(suitcase)={blue}"


def test_validate_rejects_bad_heads():
    with pytest.raises(InputError):
        validate_annotations([TokenAnnotation(0, "a", "DET", 5, "det")])
    with pytest.raises(InputError):
        validate_annotations([TokenAnnotation(1, "a", "DET", 1, "det")])
    with pytest.raises(InputError):
        validate_annotations([TokenAnnotation(0, "a", "DET", 0, "")])


def test_annotation_file_roundtrip(tmp_path, fixtures):
    tokens = annotate("a red metal crown", fixtures)
    path = tmp_path / "x.tsv"
    write_annotation_file(path, "a red metal crown", tokens)
    prompt, back = read_annotation_file(path)
    assert prompt == "a red metal crown" and back == tokens
    assert FixtureAnnotator(tmp_path)("A red metal crown") == tokens


@pytest.mark.parametrize("prompt, expected", EXPECTED, ids=[p for p, _ in EXPECTED])
def test_lexicon_fallback_agrees_with_fixtures(prompt, expected):
    graph = extract_object_graph(annotate(prompt, LexiconAnnotator()))
    lowered = [(o.lower(), [m.lower() for m in ms]) for o, ms in expected]
    assert [(o.lower(), [m.lower() for m in ms]) for o, ms in as_words(graph)] == lowered


def test_chain_falls_through_to_lexicon(fixtures):
    chain = ChainAnnotator(fixtures, LexiconAnnotator())
    g = extract_object_graph(chain("a velvet turtle and a brown clock"))
    assert as_words(g) == [("turtle", ["velvet"]), ("clock", ["brown"])]


# random dependency trees: the extracted graph must always satisfy the invariants
@st.composite
def annotations(draw):
    n = draw(st.integers(1, 10))
    tags = draw(st.lists(st.sampled_from(["NOUN", "PROPN", "ADJ", "DET", "ADP", "VERB"]),
                         min_size=n, max_size=n))
    root = draw(st.integers(0, n - 1))
    heads = [root if i == root else draw(st.integers(0, n - 1)) for i in range(n)]
    deps = [("ROOT" if i == root else
             draw(st.sampled_from(["amod", "compound", "nmod", "npadvmod", "conj", "det", "pobj"])))
            for i in range(n)]
    return [TokenAnnotation(i, f"w{i}", tags[i], heads[i], deps[i]) for i in range(n)]


@settings(max_examples=200, deadline=None)
@given(annotations())
def test_random_trees_respect_invariants(tokens):
    g = extract_object_graph(tokens)
    objs = set(g.objects)
    assert len(objs) == len(g.objects)
    assert all(tokens[s].pos_tag in {"NOUN", "PROPN"} for s in objs)
    assert not objs & g.modifier_union()
    assert sum(len(g.modifiers[s]) for s in g.objects) == len(g.modifier_union())
    assert isinstance(g, ObjectGraph) and g.token_count == len(tokens)
