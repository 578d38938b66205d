import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from data import (BOS_ID, EOS_ID, PAD_ID, RESERVED_TOKENS, UNK_ID, BpeModel, MarkovChain, SyntheticCorpora,
                  SyntheticTask, SyntheticTaskSpec, Tokenizer, Vocabulary, apply_bpe, decode_bpe, encode_pairs,
                  generate_synthetic, learn_bpe, load_task_spec, make_batch, make_batches, read_corpus, reorder,
                  word_spelling, write_corpus)
from errors import ConfigError, EmptyCorpusError, SequenceError, SpecError, VocabularyError

words = st.text(alphabet="abcdefg", min_size=1, max_size=6)
sentences = st.lists(words, min_size=1, max_size=6).map(" ".join)


def test_reorder_reverses_blocks():
    assert reorder([1, 2, 3, 4, 5], 2) == [2, 1, 4, 3, 5]
    assert reorder([1, 2, 3], 1) == [1, 2, 3]
    assert reorder([1, 2, 3, 4], 3) == [3, 2, 1, 4]


def test_word_spellings_are_distinct():
    spellings = [word_spelling(i) for i in range(500)]
    assert len(set(spellings)) == 500
    assert word_spelling(0) == "ba"


def test_markov_chain_rows_are_distributions():
    chain = MarkovChain(vocab_size=8, order=1, transition_seed=7, concentration=0.3)
    matrix = chain.transition_matrix()
    np.testing.assert_allclose(matrix.sum(axis=1), 1.0)
    assert 0.0 < chain.entropy_rate() < np.log(8)
    np.testing.assert_array_equal(chain.distribution((3,)),
                                  MarkovChain(8, 1, 7, 0.3).distribution((3,)))


def test_task_spec_check_rejects_bad_values():
    with pytest.raises(SpecError):
        SyntheticTask(SyntheticTaskSpec(vocab_size=4))
    with pytest.raises(SpecError):
        SyntheticTask(SyntheticTaskSpec(min_len=5, max_len=3))
    with pytest.raises(SpecError):
        SyntheticTask(SyntheticTaskSpec(cipher="rot13"))


def test_generated_corpora_follow_the_oracle(tiny_spec):
    task = SyntheticTask(tiny_spec.model_copy(update={"cipher": "random"}))
    corpora = task.generate()
    assert len(corpora.train_src) == tiny_spec.n_parallel
    assert len(corpora.valid_src) == tiny_spec.n_valid
    assert len(corpora.mono_tgt) == tiny_spec.n_tgt_mono
    for src, tgt in zip(corpora.train_src + corpora.test_src, corpora.train_tgt + corpora.test_tgt):
        assert task.oracle(src) == tgt
    held_out = set(corpora.valid_src) | set(corpora.test_src)
    assert not held_out & set(corpora.train_src)
    with pytest.raises(VocabularyError):
        task.oracle("zzzz")


def test_generation_is_deterministic(tiny_spec):
    assert generate_synthetic(tiny_spec) == generate_synthetic(tiny_spec)


def test_corpora_write_and_read(tmp_path, tiny_corpora):
    written = tiny_corpora.write(tmp_path / "corpus")
    assert set(written) == {"train.src", "train.tgt", "valid.src", "valid.tgt", "test.src", "test.tgt",
                            "mono.src", "mono.tgt"}
    assert SyntheticCorpora.read(tmp_path / "corpus") == tiny_corpora


def test_read_corpus_normalises_whitespace(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("  a   b \n\n c\n", encoding="utf-8")
    assert read_corpus(path) == ["a b", "c"]
    write_corpus(path, ["x y"])
    assert read_corpus(path) == ["x y"]


def test_load_task_spec_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"vocab_size": 10, "unknown": 1}', encoding="utf-8")
    with pytest.raises(ConfigError):
        load_task_spec(bad)
    tiny = tmp_path / "tiny.json"
    tiny.write_text('{"vocab_size": 3}', encoding="utf-8")
    with pytest.raises(SpecError):
        load_task_spec(tiny)


def test_vocabulary_reserved_ids_and_ordering():
    vocab = Vocabulary.build(["b a", "a c", "a b"])
    assert vocab.to_list()[:5] == RESERVED_TOKENS
    assert vocab.to_list()[5:] == ["a", "b", "c"]
    assert vocab.encode(["a", "zzz", "<pad>"]) == [5, UNK_ID, UNK_ID]
    assert vocab.decode([BOS_ID, 5, 6, EOS_ID, PAD_ID]) == ["a", "b"]
    with pytest.raises(VocabularyError):
        vocab.decode([99])


def test_vocabulary_size_limit_and_errors(tmp_path):
    vocab = Vocabulary.build(["a a a b b c"], max_size=7)
    assert len(vocab) == 7 and "c" not in vocab
    with pytest.raises(VocabularyError):
        Vocabulary.build(["a"], max_size=5)
    with pytest.raises(EmptyCorpusError):
        Vocabulary.build([])
    with pytest.raises(VocabularyError):
        Vocabulary.from_list(["a", "b"])
    vocab.save(tmp_path / "vocab.txt")
    assert Vocabulary.load(tmp_path / "vocab.txt") == vocab


def test_learn_bpe_merges_most_frequent_pair():
    model = learn_bpe(["ab ab ab cd"], merge_count=2)
    assert model.merges[0] == ("a", "b</w>")
    assert apply_bpe(model, "ab") == ["ab</w>"]
    assert apply_bpe(model, "ba") == ["b", "a</w>"]


def test_learn_bpe_stops_when_nothing_left():
    model = learn_bpe(["a"], merge_count=10)
    assert model.merges == []
    with pytest.raises(EmptyCorpusError):
        learn_bpe([""], merge_count=1)


def test_bpe_model_save_load(tmp_path):
    model = learn_bpe(["abc abd abe"], merge_count=3)
    model.save(tmp_path / "merges.txt")
    assert BpeModel.load(tmp_path / "merges.txt").merges == model.merges


@settings(max_examples=60, deadline=None)
@given(st.lists(sentences, min_size=1, max_size=5), sentences, st.integers(min_value=0, max_value=15))
def test_bpe_decoding_restores_text(corpus, text, merges):
    model = learn_bpe(corpus, merges)
    assert decode_bpe(apply_bpe(model, text)) == text


def test_tokenizer_round_trip_with_bpe(tiny_corpora):
    tok = Tokenizer.fit(tiny_corpora.train_src, merge_count=5)
    for sentence in tiny_corpora.train_src[:10]:
        assert tok.decode(tok.encode(sentence)) == sentence


def test_make_batch_layout():
    batch = make_batch([([5, 6], [7]), ([5], [8, 9])], [0, 1])
    np.testing.assert_array_equal(batch.src, [[5, 6, EOS_ID], [5, EOS_ID, PAD_ID]])
    np.testing.assert_array_equal(batch.tgt_in, [[BOS_ID, 7, PAD_ID], [BOS_ID, 8, 9]])
    np.testing.assert_array_equal(batch.tgt_out, [[7, EOS_ID, PAD_ID], [8, 9, EOS_ID]])
    assert batch.n_target_tokens == 5
    assert batch.pad_fraction() == pytest.approx(2 / 12)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 9), st.integers(1, 9)), min_size=1, max_size=40),
       st.integers(min_value=1, max_value=7), st.integers(min_value=0, max_value=5))
def test_batches_partition_the_kept_examples(lengths, batch_size, seed):
    pairs = [([5] * s, [6] * t) for s, t in lengths]
    plan = make_batches(pairs, batch_size=batch_size, max_len=8, rng=np.random.default_rng(seed))
    seen = sorted(i for batch in plan for i in batch.indices)
    kept = [i for i, (s, t) in enumerate(lengths) if s < 8 and t < 8]
    assert seen == kept
    assert plan.filtered == len(lengths) - len(kept)
    assert all(1 <= batch.size <= batch_size for batch in plan)


def test_make_batches_rejects_bad_size():
    with pytest.raises(ValueError):
        make_batches([([5], [5])], batch_size=0, max_len=4)


def test_encode_pairs_requires_aligned_sides(tiny_data):
    with pytest.raises(SequenceError):
        encode_pairs(["ba"], [], tiny_data.src_tokenizer, tiny_data.tgt_tokenizer)
    pairs = encode_pairs(["ba be"], ["ba"], tiny_data.src_tokenizer, tiny_data.tgt_tokenizer)
    assert len(pairs) == 1 and len(pairs[0][0]) == 2
