"""Dataset parsing, CoNLL-U ingestion, and K-shot split tests."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptlab.corpus import (
    AnnotatedSentence,
    ConlluError,
    DatasetError,
    Example,
    LabelSet,
    TaskSchema,
    Token,
    parse_conllu,
    parse_dataset,
    sample_kshot,
    split_overlap,
    write_conllu,
    write_split_manifest,
)

SST2 = TaskSchema(name="sst2", labels=("negative", "positive"))
SNLI = TaskSchema(name="snli", labels=("entailment", "neutral", "contradiction"), pair=True)


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


class TestParseDataset:
    def test_single_sentence_row(self, tmp_path):
        path = write(tmp_path, "d.tsv", "a gorgeous film\tpositive\n")
        labels, examples = parse_dataset(path, SST2)
        assert labels.names == ("negative", "positive")
        assert examples == [Example(id="sst2-1", sent0="a gorgeous film", label=1)]

    def test_sentence_pair_row(self, tmp_path):
        path = write(tmp_path, "d.tsv", "A man is eating.\tA man eats.\tentailment\n")
        _, examples = parse_dataset(path, SNLI)
        assert examples[0].sent1 == "A man eats."
        assert examples[0].label == 0

    def test_row_count_matches_file(self, tmp_path):
        # SST-2's training set size; rows generated, count asserted
        rows = "\n".join(f"sentence number {i}\t{'positive' if i % 2 else 'negative'}" for i in range(6920))
        path = write(tmp_path, "sst2.tsv", rows + "\n")
        _, examples = parse_dataset(path, SST2)
        assert len(examples) == 6920

    def test_malformed_row_names_line(self, tmp_path):
        path = write(tmp_path, "d.tsv", "good\tpositive\nbad line without label\n")
        with pytest.raises(DatasetError, match=r":2"):
            parse_dataset(path, SST2)

    def test_unknown_label_named(self, tmp_path):
        path = write(tmp_path, "d.tsv", "good\tsomething\n")
        with pytest.raises(DatasetError, match="something"):
            parse_dataset(path, SST2)

    def test_label_order_is_schema_order(self, tmp_path):
        path = write(tmp_path, "d.tsv", "x\tpositive\ny\tnegative\n")
        labels, examples = parse_dataset(path, SST2)
        assert [e.label for e in examples] == [1, 0]


GOOD_MOVIE = "1\tgood\t_\tJJ\t_\t_\t2\tamod\t_\t_\n2\tmovie\t_\tNN\t_\t_\t0\tROOT\t_\t_\n"


class TestParseConllu:
    def test_minimal_block(self, tmp_path):
        path = write(tmp_path, "a.conllu", GOOD_MOVIE)
        sentences = parse_conllu(path)
        assert len(sentences) == 1
        assert [t.deprel for t in sentences[0].tokens] == ["amod", "ROOT"]
        assert [t.pos for t in sentences[0].tokens] == ["JJ", "NN"]
        assert [t.head for t in sentences[0].tokens] == [2, 0]

    def test_empty_file(self, tmp_path):
        assert parse_conllu(write(tmp_path, "e.conllu", "")) == []

    def test_non_integer_head_names_line(self, tmp_path):
        bad = GOOD_MOVIE.replace("2\tamod", "x\tamod")
        with pytest.raises(ConlluError, match=r":1"):
            parse_conllu(write(tmp_path, "a.conllu", bad))

    def test_missing_columns(self, tmp_path):
        with pytest.raises(ConlluError, match="columns"):
            parse_conllu(write(tmp_path, "a.conllu", "1\tgood\tJJ\n"))

    def test_comments_and_ranges_skipped(self, tmp_path):
        text = "# sent_id = 1\n1-2\tgoodmovie\t_\t_\t_\t_\t_\t_\t_\t_\n" + GOOD_MOVIE
        sentences = parse_conllu(write(tmp_path, "a.conllu", text))
        assert len(sentences) == 1
        assert len(sentences[0]) == 2

    def test_xpos_fallback(self, tmp_path):
        text = GOOD_MOVIE.replace("good\t_\tJJ\t_", "good\t_\t_\tJJ")
        sentences = parse_conllu(write(tmp_path, "a.conllu", text))
        assert sentences[0].tokens[0].pos == "JJ"

    def test_two_roots_rejected(self, tmp_path):
        bad = GOOD_MOVIE.replace("2\tamod", "0\tROOT")
        with pytest.raises(ConlluError, match="root"):
            parse_conllu(write(tmp_path, "a.conllu", bad))


_FORMS = st.text(alphabet="abcdefgh", min_size=1, max_size=6)


@st.composite
def annotated_sentences(draw):
    n = draw(st.integers(min_value=1, max_value=8))
    root = draw(st.integers(min_value=0, max_value=n - 1))
    tokens = []
    for i in range(n):
        head = 0 if i == root else draw(st.integers(min_value=1, max_value=n))
        # a non-root token must not claim head 0
        deprel = "ROOT" if i == root else draw(st.sampled_from(["amod", "obj", "nsubj"]))
        tokens.append(
            Token(form=draw(_FORMS), pos=draw(st.sampled_from(["NN", "JJ", "VB"])), head=head, deprel=deprel)
        )
    return AnnotatedSentence(tuple(tokens))


class TestConlluRoundTrip:
    @settings(max_examples=50, deadline=None)
    @given(st.lists(annotated_sentences(), min_size=1, max_size=4))
    def test_parse_serialize_identity(self, sentences):
        import tempfile
        from pathlib import Path

        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "rt.conllu"
            write_conllu(sentences, path)
            assert parse_conllu(path) == sentences


def make_examples(n_per_label, labels=(0, 1)):
    return [
        Example(id=f"e{t}-{i}", sent0=f"sentence {t} {i}", label=t)
        for t in labels
        for i in range(n_per_label)
    ]


class TestSampleKshot:
    LABELS = LabelSet(("negative", "positive"))

    def test_sizes_k16(self):
        split = sample_kshot(make_examples(64), self.LABELS, k=16, seed=1)
        assert len(split.train) == 32 and len(split.dev) == 32

    def test_balance_and_disjoint(self):
        split = sample_kshot(make_examples(64), self.LABELS, k=16, seed=3)
        for t in (0, 1):
            assert sum(e.label == t for e in split.train) == 16
            assert sum(e.label == t for e in split.dev) == 16
        assert not {e.id for e in split.train} & {e.id for e in split.dev}

    def test_deterministic(self):
        examples = make_examples(50)
        a = sample_kshot(examples, self.LABELS, k=8, seed=7)
        b = sample_kshot(examples, self.LABELS, k=8, seed=7)
        assert [e.id for e in a.train] == [e.id for e in b.train]
        assert [e.id for e in a.dev] == [e.id for e in b.dev]

    def test_forced_partition_k1(self):
        examples = make_examples(2)
        split = sample_kshot(examples, self.LABELS, k=1, seed=0)
        assert len(split.train) == 2 and len(split.dev) == 2
        assert {e.id for e in split.train} | {e.id for e in split.dev} == {e.id for e in examples}

    def test_five_seeds_differ(self):
        examples = make_examples(500)
        id_sets = [
            frozenset(e.id for e in sample_kshot(examples, self.LABELS, k=16, seed=s).train)
            for s in range(1, 6)
        ]
        assert len(set(id_sets)) == 5

    def test_insufficient_names_label_and_count(self):
        examples = make_examples(64) + [Example(id="only", sent0="x", label=1)]
        labels = LabelSet(("negative", "positive"))
        short = [e for e in examples if not (e.label == 1 and e.id != "only")]
        with pytest.raises(DatasetError, match=r"positive.*has 1"):
            sample_kshot(short, labels, k=16, seed=1)

    def test_overlap_recorded(self):
        examples = make_examples(20)
        a = sample_kshot(examples, self.LABELS, k=8, seed=1)
        b = sample_kshot(examples, self.LABELS, k=8, seed=2)
        assert 0 <= split_overlap(a, b) <= 16
        assert split_overlap(a, a) == 16

    def test_manifest(self, tmp_path):
        split = sample_kshot(make_examples(8), self.LABELS, k=2, seed=5)
        path = tmp_path / "split.json"
        write_split_manifest(split, path, task="toy")
        import json

        payload = json.loads(path.read_text())
        assert payload["seed"] == 5 and payload["k"] == 2
        assert payload["train_ids"] == [e.id for e in split.train]


class TestLabelSet:
    def test_needs_two_labels(self):
        with pytest.raises(DatasetError):
            LabelSet(("only",))

    def test_unique_names(self):
        with pytest.raises(DatasetError):
            LabelSet(("a", "a"))
