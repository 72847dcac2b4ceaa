import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from revise_lab.text import (
    BOS_ID,
    EOS_ID,
    PAD_ID,
    UNK_ID,
    build_vocab,
    detokenize,
    format_prompt,
    format_target,
    normalize,
    parse_output,
    tokenize,
)

WORDS = st.sampled_from("red green blue square circle the is left image".split())


@pytest.fixture
def vocab():
    return build_vocab(
        ["red because the square is red", "blue because shapes match", "yes no green yellow circle triangle"]
    )


class TestBuildVocab:
    def test_count_ordering(self):
        v = build_vocab(["a a b"])
        assert v.token_to_id["a"] < v.token_to_id["b"]

    def test_frequency_beats_alphabet(self):
        v = build_vocab(["a b", "b"])
        assert v.token_to_id["b"] < v.token_to_id["a"]

    def test_min_count_filters_to_reserved_only(self):
        v = build_vocab(["a b", "b"], min_count=3)
        assert len(v) == 4  # just the reserved ids

    def test_empty_corpus_raises(self):
        with pytest.raises(ValueError):
            build_vocab([])

    def test_reserved_ids(self, vocab):
        assert (PAD_ID, BOS_ID, EOS_ID, UNK_ID) == (0, 1, 2, 3)
        assert vocab.id_to_token[:4] == ("<pad>", "<bos>", "<eos>", "<unk>")
        assert vocab.because_id == vocab.token_to_id["because"]

    def test_save_load_roundtrip(self, vocab, tmp_path):
        path = tmp_path / "vocab.txt"
        vocab.save(path)
        loaded = type(vocab).load(path)
        assert loaded.id_to_token == vocab.id_to_token
        assert loaded.because_id == vocab.because_id


class TestTokenize:
    def test_lowercases(self, vocab):
        ids = tokenize("Red Square", vocab)
        assert ids == [vocab.token_to_id["red"], vocab.token_to_id["square"]]

    def test_roundtrip_in_vocab(self, vocab):
        s = "the square is red"
        assert detokenize(tokenize(s, vocab), vocab) == normalize(s)

    def test_oov_becomes_unk(self, vocab):
        assert tokenize("zebra", vocab) == [UNK_ID]

    @settings(max_examples=50, derandomize=True)
    @given(st.lists(WORDS, min_size=1, max_size=8))
    def test_roundtrip_property(self, words):
        v = build_vocab([" ".join(words)])
        s = " ".join(words)
        assert detokenize(tokenize(s, v), v) == normalize(s)


class TestFormatPrompt:
    def test_exact_template(self):
        out = format_prompt("what color is the square?")
        assert out == "answer the question by reasoning step by step. question: what color is the square? answer:"

    def test_single_substitution_ends_with_answer(self):
        out = format_prompt("is there a circle?")
        assert out.count("is there a circle?") == 1
        assert out.endswith("answer:")

    def test_empty_question_raises(self):
        with pytest.raises(ValueError):
            format_prompt("   ")


class TestFormatTarget:
    def test_basic(self):
        assert format_target("red", "the square is red") == "red because the square is red"

    def test_second(self):
        assert format_target("yes", "shapes match") == "yes because shapes match"

    def test_empty_answer_raises(self):
        with pytest.raises(ValueError):
            format_target("", "something")
        with pytest.raises(ValueError):
            format_target("red", " ")


class TestParseOutput:
    def ids(self, s, vocab):
        return tokenize(s, vocab)

    def test_standard_split(self, vocab):
        out = parse_output(self.ids("red because the square is red", vocab), vocab)
        assert detokenize(out.answer, vocab) == "red"
        assert detokenize(out.explanation, vocab) == "the square is red"
        assert not out.degenerate

    def test_no_separator(self, vocab):
        out = parse_output(self.ids("red", vocab), vocab)
        assert detokenize(out.answer, vocab) == "red"
        assert out.explanation == []

    def test_first_separator_wins(self):
        v = build_vocab(["a because b because c"])
        out = parse_output(tokenize("a because b because c", v), v)
        assert detokenize(out.answer, v) == "a"
        assert detokenize(out.explanation, v) == "b because c"
        # enumeration oracle: splitting at any later "because" would leave one in the answer
        toks = tokenize("a because b because c", v)
        seps = [i for i, t in enumerate(toks) if t == v.because_id]
        assert min(seps) == 1

    def test_leading_separator_degenerate(self, vocab):
        out = parse_output(self.ids("because the square is red", vocab), vocab)
        assert out.answer == []
        assert out.degenerate

    def test_strips_specials(self, vocab):
        raw = [BOS_ID] + self.ids("red because it is", vocab) + [EOS_ID, PAD_ID]
        out = parse_output(raw, vocab)
        assert detokenize(out.answer, vocab) == "red"

    @settings(max_examples=50, derandomize=True)
    @given(st.lists(WORDS, min_size=1, max_size=4), st.lists(WORDS, min_size=1, max_size=6))
    def test_format_parse_roundtrip(self, ans, expl):
        corpus = " ".join(ans + expl) + " because"
        v = build_vocab([corpus])
        target = format_target(" ".join(ans), " ".join(expl))
        out = parse_output(tokenize(target, v), v)
        assert detokenize(out.answer, v) == normalize(" ".join(ans))
        assert detokenize(out.explanation, v) == normalize(" ".join(expl))
