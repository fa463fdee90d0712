import pytest
from hypothesis import given, strategies as st

from anyseg import prompt_format as pf

V = pf.DEFAULT_VOCAB
phrase = st.lists(st.sampled_from(pf.SHAPES + pf.COLORS), min_size=1, max_size=3).map(" ".join)


def _ids(text):
    return V.encode(text)


def test_special_ids_distinct_and_first():
    ids = V.special_ids()
    assert len(set(ids.values())) == len(pf.SPECIAL_TOKENS)
    base = {V.id(w) for w in pf.BASE_WORDS}
    assert not base & set(ids.values())
    assert max(ids.values()) < min(base)


def test_unknown_word_names_symbol():
    with pytest.raises(pf.VocabularyError, match="purple"):
        pf.build_text_query("referring", ["purple circle"])


def test_vocab_roundtrip(tmp_path):
    V.save(tmp_path / "v.txt")
    w = pf.Vocabulary.load(tmp_path / "v.txt")
    assert len(w) == len(V) and w.encode("red circle") == V.encode("red circle")


def test_referring_one_span_one_seg():
    seq = pf.build_text_query("referring", ["red circle"])
    assert len(pf.extract_phrase_spans(seq)) == 1
    assert seq.response.count(V.id(pf.SEG)) == 1
    assert seq.ids.count(V.id(pf.SEG)) == 1


def test_generic_requires_phrases():
    with pytest.raises(ValueError):
        pf.build_text_query("generic", [])


def test_generic_span_order():
    names = ["circle", "square", "triangle"]
    seq = pf.build_text_query("generic", names)
    spans = pf.extract_phrase_spans(seq)
    assert [V.decode(seq.ids[s.start:s.end]) for s in spans] == names
    assert len(pf.locate_seg_positions(seq)) == 3


@pytest.mark.parametrize("k", [1, 4])
def test_vision_query(k):
    seq = pf.build_vision_query("vgd", k)
    spans = pf.extract_phrase_spans(seq)
    assert len(spans) == k and all(s.contains_region for s in spans)
    assert all(a.end < b.start for a, b in zip(spans, spans[1:]))
    assert seq.ids.count(V.id(pf.REGION)) == k


def test_vision_query_needs_regions():
    with pytest.raises(ValueError):
        pf.build_vision_query("interactive", 0)


def test_extract_examples():
    assert pf.extract_phrase_spans(_ids("red circle")) == []
    spans = pf.extract_phrase_spans(_ids("<p> a </p> and <p> circle </p>"))
    assert [(s.start, s.end) for s in spans] == [(1, 2), (5, 6)]
    with pytest.raises(pf.SpanError) as e:
        pf.extract_phrase_spans(_ids("<p> <p> a </p>"))
    assert e.value.index == 1
    for bad, at in [("</p>", 0), ("<p> a", 0), ("<region>", 0), ("<p> </p>", 1)]:
        with pytest.raises(pf.SpanError) as e:
            pf.extract_phrase_spans(_ids(bad))
        assert e.value.index == at


def test_seg_positions():
    seq = pf.build_text_query("referring", ["red circle"])
    assert pf.locate_seg_positions(seq) == [i for i, t in enumerate(seq.ids) if t == V.id(pf.SEG)]
    gcg = pf.build_text_query("gcg", ["a red circle", "a blue square", "a green triangle"])
    pos = pf.locate_seg_positions(gcg)
    assert len(pos) == 3
    assert all(gcg.ids[p - 1] == V.id(pf.P_CLOSE) for p in pos)
    chat = pf.build_chat("conversation", "how many shapes are there ?", "there are two shapes .")
    assert pf.locate_seg_positions(chat) == []


def test_condition_spans_side():
    gcg = pf.build_text_query("gcg", ["a red circle", "a blue square"])
    assert all(s.in_response for s in pf.condition_spans(gcg))
    ref = pf.build_text_query("referring", ["red circle"])
    assert not any(s.in_response for s in pf.condition_spans(ref))


@given(st.sampled_from(pf.TEXT_TASKS), st.lists(phrase, min_size=1, max_size=6))
def test_text_parse_build_identity(task, phrases):
    seq = pf.build_text_query(task, phrases)
    assert len(pf.condition_spans(seq)) == len(phrases)
    assert len(pf.locate_seg_positions(seq)) == len(phrases)
    assert seq.roles.count("instruction") == seq.prompt_len
    assert len(seq.instruction) + len(seq.response) == len(seq)


@given(st.sampled_from(pf.VISION_TASKS), st.integers(1, 8))
def test_vision_parse_build_identity(task, k):
    seq = pf.build_vision_query(task, k)
    spans = pf.condition_spans(seq)
    assert len(spans) == k == len(pf.locate_seg_positions(seq))
    assert all(s.contains_region for s in spans)
