"""Ingestion tests: tokenization, vocab rules, alignment, corruption, JSONL."""

import json

import numpy as np
import pytest

from mwpgen.dataset import (
    BOS_ID,
    EOS_ID,
    MASK_ID,
    PAD_ID,
    RESERVED_TOKENS,
    UNK_ID,
    UNK_TOKEN,
    DataError,
    TrainingExample,
    Vocabulary,
    align_numbers,
    build_vocab,
    corrupt_problem,
    preprocess_dataset,
    read_jsonl,
    sample_edges_path,
    sample_problems,
    tokenize_problem,
    unk_rate,
    write_jsonl,
)
from mwpgen.equations import tokenize_equation_set


class TestTokenizeProblem:
    def test_lowercases_and_splits(self):
        assert tokenize_problem("Tom has 2 Apples.") == ["tom", "has", "2", "apples", "."]

    def test_decimals_stay_whole(self):
        assert tokenize_problem("pays 0.05 per nickel") == ["pays", "0.05", "per", "nickel"]

    def test_apostrophes(self):
        assert tokenize_problem("Sara's book isn't here") == \
            ["sara's", "book", "isn't", "here"]

    def test_punctuation_separate(self):
        assert tokenize_problem("how many, then?") == ["how", "many", ",", "then", "?"]


class TestVocabulary:
    def test_reserved_ids_fixed(self):
        v = build_vocab([["apple"], ["apple"]])
        assert [v.token(i) for i in range(5)] == list(RESERVED_TOKENS)
        assert (PAD_ID, UNK_ID, BOS_ID, EOS_ID, MASK_ID) == (0, 1, 2, 3, 4)

    def test_frequency_then_alphabetical_order(self):
        corpus = [["pie"] * 3 + ["cake"] * 2 + ["ant"] * 2]
        v = build_vocab(corpus, min_freq=2)
        assert v.itos[5:] == ["pie", "ant", "cake"]

    def test_min_freq_absorbs_rare(self):
        corpus = [["seen", "seen", "rare"]]
        v = build_vocab(corpus, min_freq=2)
        assert "seen" in v and "rare" not in v
        assert v.id("rare") == UNK_ID

    def test_rebuild_identical(self):
        corpus = [tokenize_problem("a pie and a cake and a pie")]
        assert build_vocab(corpus, 1).to_json() == build_vocab(corpus, 1).to_json()
        assert build_vocab(corpus, 1).sha256() == build_vocab(corpus, 1).sha256()

    def test_json_round_trip(self):
        v = build_vocab([["apple", "apple", "pear", "pear"]])
        w = Vocabulary.from_json(v.to_json())
        assert w.itos == v.itos

    def test_ids_and_token(self):
        v = build_vocab([["apple", "apple"]])
        assert v.ids(["apple", "zebra"]) == [v.id("apple"), UNK_ID]
        assert v.token(v.id("apple")) == "apple"

    def test_empty_corpus_rejected(self):
        with pytest.raises(DataError):
            build_vocab([])


class TestAlignNumbers:
    def test_first_equation_position_wins(self):
        seq = tokenize_equation_set(["4*(x-y)=800", "3*(x+y)=900"])
        problem = tokenize_problem("the plane went 800 miles in 4 hours , 900 with wind")
        align = align_numbers(seq, problem)
        # positions: "800"->eq idx 8, "4"->eq idx 0, "900"->eq idx 17
        surfaces = seq.surfaces()
        assert surfaces[8] == "800" and surfaces[0] == "4" and surfaces[17] == "900"
        assert align[3] == 8 and align[6] == 0 and align[9] == 17

    def test_value_equality_not_surface(self):
        seq = tokenize_equation_set(["0.5*x=10"])
        align = align_numbers(seq, ["mix", "0.50", "acid"])
        assert align == {1: 0}

    def test_unmatched_numbers_skipped(self):
        seq = tokenize_equation_set(["x+2=5"])
        align = align_numbers(seq, ["7", "things"])
        assert align == {}

    def test_duplicate_equation_number_takes_lowest(self):
        seq = tokenize_equation_set(["2*x+2=6"])
        align = align_numbers(seq, ["2", "pies"])
        assert align == {0: 0}


class TestCorruptProblem:
    def test_zero_rates_identity(self):
        rng = np.random.default_rng(0)
        toks = ["a", "b", "c"]
        assert corrupt_problem(toks, 0.0, 0.0, rng) == toks

    def test_deterministic_under_seed(self):
        toks = tokenize_problem("one two three four five six seven eight")
        a = corrupt_problem(toks, 0.3, 0.2, np.random.default_rng(42))
        b = corrupt_problem(toks, 0.3, 0.2, np.random.default_rng(42))
        assert a == b

    def test_mask_only_replaces_with_unk(self):
        toks = ["a", "b", "c", "d"]
        out = corrupt_problem(toks, 0.99, 0.0, np.random.default_rng(1))
        assert len(out) == 4
        assert set(out) <= {UNK_TOKEN}

    def test_at_least_one_survivor(self):
        toks = ["a", "b"]
        for seed in range(30):
            out = corrupt_problem(toks, 0.5, 0.99, np.random.default_rng(seed))
            assert len(out) >= 1

    def test_rate_bounds(self):
        with pytest.raises(ValueError):
            corrupt_problem(["a"], 1.0, 0.0, np.random.default_rng(0))
        with pytest.raises(ValueError):
            corrupt_problem(["a"], 0.0, -0.1, np.random.default_rng(0))

    def test_empty_input(self):
        assert corrupt_problem([], 0.5, 0.5, np.random.default_rng(0)) == []


class TestPreprocess:
    def make_record(self, n_tokens, ident="r1"):
        words = ["word"] * (n_tokens - 1) + ["7"]
        return {"id": ident, "equations": ["x+7=9"], "problem": " ".join(words)}

    def test_length_boundary(self):
        examples, report = preprocess_dataset(
            [self.make_record(45, "keep"), self.make_record(46, "drop")])
        assert [ex.id for ex in examples] == ["keep"]
        assert report.kept == 1 and report.dropped_long == 1 and report.total == 2

    def test_variables_normalized(self):
        examples, _ = preprocess_dataset(
            [{"id": "a", "equations": ["u+v+r=100", "u-r=10"], "problem": "sum is 100"}])
        assert examples[0].eq_texts == ["x+y+z=100", "x-z=10"]

    def test_alignment_populated(self):
        examples, _ = preprocess_dataset(
            [{"id": "a", "equations": ["x+2=5"], "problem": "had 2 then 5"}])
        assert examples[0].copy_alignment == {1: 2, 3: 4}

    def test_malformed_records_reported_not_fatal(self):
        records = [
            {"id": "ok", "equations": ["x=1"], "problem": "one 1"},
            {"id": "bad1", "equations": [], "problem": "no equations"},
            {"id": "bad2", "equations": ["x=1"]},
            {"id": "bad3", "equations": ["x+=??"], "problem": "bad syntax"},
            "not a dict",
        ]
        examples, report = preprocess_dataset(records)
        assert [ex.id for ex in examples] == ["ok"]
        assert report.kept == 1 and len(report.malformed) == 4
        assert [line for line, _ in report.malformed] == [2, 3, 4, 5]

    def test_report_text_shape(self):
        _, report = preprocess_dataset([self.make_record(46)])
        text = report.to_text()
        assert "records read:    1" in text
        assert "dropped (>45):   1" in text

    def test_record_round_trip(self):
        examples, _ = preprocess_dataset(
            [{"id": "a", "equations": ["x+2=5"], "problem": "had 2 then 5"}])
        ex = examples[0]
        ex.topic_id = 3
        back = TrainingExample.from_record(ex.to_record())
        assert back.id == ex.id
        assert back.problem == ex.problem
        assert back.topic_id == 3
        assert back.copy_alignment == ex.copy_alignment
        assert back.equations.surfaces() == ex.equations.surfaces()


class TestJsonl:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "d.jsonl"
        records = [{"id": "a", "n": 1}, {"id": "b", "n": 2}]
        write_jsonl(path, records)
        rows = read_jsonl(path)
        assert [(lineno, rec) for lineno, rec in rows] == [(1, records[0]), (2, records[1])]

    def test_keys_sorted_on_disk(self, tmp_path):
        path = tmp_path / "d.jsonl"
        write_jsonl(path, [{"zz": 1, "aa": 2}])
        line = path.read_text().strip()
        assert line.index('"aa"') < line.index('"zz"')

    def test_bad_lines_become_data_errors(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text('{"ok": 1}\nnot json\n{"ok": 2}\n')
        rows = read_jsonl(path)
        assert rows[0][1] == {"ok": 1}
        assert isinstance(rows[1][1], DataError)
        assert rows[2][1] == {"ok": 2}

    def test_preprocess_uses_file_line_numbers(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text('garbage\n{"id":"a","equations":["x=1"],"problem":"one 1"}\n')
        examples, report = preprocess_dataset(read_jsonl(path))
        assert report.malformed[0][0] == 1
        assert examples[0].id == "a"

    def test_missing_file_raises_data_error(self, tmp_path):
        with pytest.raises((DataError, OSError)):
            read_jsonl(tmp_path / "missing.jsonl")


def test_unk_rate():
    vocab = build_vocab([["seen", "seen"]])
    rate = unk_rate([["seen", "novel"], ["novel", "novel"]], vocab)
    assert rate == pytest.approx(0.75)


class TestPackagedData:
    def test_sample_problems_preprocess_clean(self):
        records = sample_problems()
        assert len(records) == 54
        assert len({r["id"] for r in records}) == 54
        examples, report = preprocess_dataset(records)
        assert report.kept == 54 and not report.malformed
        # enough distinct equations to exercise corpus-level properties
        assert sum(len(ex.eq_texts) for ex in examples) >= 100

    def test_sample_edges_path_exists(self):
        with open(sample_edges_path(), encoding="utf-8") as fh:
            first = fh.readline().split("\t")
        assert len(first) == 4
