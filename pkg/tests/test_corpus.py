import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spantrace import corpus
from spantrace.corpus import CorpusRecord, SynthConfig
from spantrace.errors import ValidationError

SMALL = SynthConfig(per_class=50, seed=11)


@pytest.fixture(scope="module")
def generated():
    return corpus.generate(SynthConfig())


def test_save_load_round_trip(tmp_path):
    c = corpus.generate(SMALL)
    c.records[0].reasonings = {"toxic": "甲", "normal": "乙"}
    c.records[1].weak_spans = list(c.records[1].gold_spans)
    corpus.save(c.records, tmp_path / "c.jsonl")
    assert len(c.records) == 100
    assert corpus.load(tmp_path / "c.jsonl") == c.records


def test_offsets_count_code_points():
    rec = CorpusRecord("a", "河南人很多", 1, [(0, 3)])
    assert corpus.span_texts(rec) == ["河南人"]


def test_byte_offsets_are_rejected(tmp_path):
    text = "河南人很多"
    start = 0
    end = len("河南人".encode("utf-8"))
    path = tmp_path / "bytes.jsonl"
    path.write_text(json.dumps({"id": "b", "text": text, "label": 1, "gold_spans": [[start, end]]},
                               ensure_ascii=False) + "\n", encoding="utf-8")
    with pytest.raises(ValidationError):
        corpus.load(path)


def test_malformed_line_reports_line_number(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"id": "a", "text": "x", "label": 0}\n{oops\n', encoding="utf-8")
    with pytest.raises(ValidationError) as info:
        corpus.load(path)
    assert info.value.line == 2


@pytest.mark.parametrize("doc", [
    {"id": "a", "text": "abc", "label": 1, "gold_spans": [[0, 2], [1, 3]]},
    {"id": "a", "text": "abc", "label": 1, "gold_spans": [[2, 4]]},
    {"id": "a", "text": "abc", "label": 0, "gold_spans": [[0, 1]]},
    {"id": "a", "text": "abc", "label": 2},
    {"id": "a", "text": "abc"},
    {"id": "a", "text": "abc", "label": 0, "extra": 1},
    {"id": "a", "text": "abc", "label": 0, "reasonings": {"toxic": "x"}},
])
def test_invalid_records(doc):
    with pytest.raises(ValidationError):
        CorpusRecord.from_json(doc)


def test_generation_is_deterministic():
    a, b = corpus.generate(SMALL), corpus.generate(SMALL)
    assert a.records == b.records and a.lexicon == b.lexicon


def test_generator_invariants(generated):
    lex = set(generated.lexicon)
    assert len(lex) == 20 and all(2 <= len(p) <= 4 for p in lex)
    alphabet = set(generated.alphabet)
    toxic = [r for r in generated.records if r.label == 1]
    clean = [r for r in generated.records if r.label == 0]
    assert len(toxic) == len(clean) == 1000
    for r in toxic:
        assert 1 <= len(r.gold_spans) <= 2
        assert set(corpus.span_texts(r)) <= lex
        assert 8 <= len(r.text) <= 40
        assert set(r.text) <= alphabet
    for r in clean:
        assert not any(p in r.text for p in lex)
        assert not r.gold_spans


def test_phrase_placement_covers_all_positions(generated):
    initial = medial = final = 0
    for r in generated.records:
        for s, e in r.gold_spans:
            initial += s == 0
            final += e == len(r.text)
            medial += 0 < s and e < len(r.text)
    assert min(initial, medial, final) >= 20


def test_stratified_split_is_balanced_and_disjoint(generated):
    train, test = corpus.stratified_split(generated.records, 0.25, 7)
    assert len(test) == 500 and sum(r.label for r in test) == 250
    assert not {r.id for r in train} & {r.id for r in test}


def test_schema_file_is_published():
    schema = json.loads(corpus.schema_path().read_text(encoding="utf-8"))
    assert set(schema["required"]) == {"id", "text", "label"}
    assert set(schema["properties"]) == {"id", "text", "label", "gold_spans", "weak_spans", "reasonings"}


def test_fixtures_quote_planted_phrases(generated):
    ans = corpus.refiner_fixture(generated.records[:10])
    for r in generated.records[:10]:
        if r.label == 1:
            assert ans[r.id].split("、") == corpus.span_texts(r)
    fx = corpus.reasoning_fixture(generated, generated.records[:10])
    assert len(fx) == 20


@settings(max_examples=50, deadline=None)
@given(st.text(min_size=1, max_size=20), st.data())
def test_record_round_trip_property(text, data):
    s = data.draw(st.integers(0, len(text) - 1))
    e = data.draw(st.integers(s + 1, len(text)))
    rec = CorpusRecord("p", text, 1, [(s, e)])
    assert CorpusRecord.from_json(json.loads(corpus.dumps_record(rec))) == rec
