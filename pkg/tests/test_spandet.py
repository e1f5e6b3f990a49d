import numpy as np
import pytest

from coreftype.corpus import Mention, Sentence, Story
from coreftype.encoder import Checkpoint, Encoder, EncoderConfig, build_vocab
from coreftype.spandet import (
    OUTSIDE, TaggerTrainConfig, decode, load_tagger_model, predict_spans,
    save_tagger_model, train_tagger, training_tokens,
)


# -- the training-token filter --

def test_filter_example_single_span():
    # 7 tokens, span [2,4): keep both span tokens plus the two adjacent
    # outside tokens; every other outside token is dropped
    got = training_tokens(7, [(2, 4, "PER")])
    assert got == [(1, OUTSIDE), (2, "PER"), (3, "PER"), (4, OUTSIDE)]


def test_filter_whole_sentence_span_has_no_outside():
    got = training_tokens(4, [(0, 4, "ORG")])
    assert got == [(0, "ORG"), (1, "ORG"), (2, "ORG"), (3, "ORG")]


def test_filter_empty_for_no_spans():
    assert training_tokens(6, []) == []


def test_filter_rejects_overlap():
    with pytest.raises(ValueError, match="overlap"):
        training_tokens(8, [(1, 4, "A"), (3, 6, "B")])


def test_filter_soundness_brute_force():
    # every emitted OUTSIDE token is at distance exactly 1 from a span
    # boundary; every in-span token is emitted with its type
    rng = np.random.default_rng(0)
    for _ in range(2000):
        n = int(rng.integers(1, 14))
        spans = random_spans(rng, n)
        got = dict(training_tokens(n, spans))
        for i in range(n):
            inside = next((t for s, e, t in spans if s <= i < e), None)
            adjacent = any(i == s - 1 or i == e for s, e, _ in spans)
            if inside is not None:
                assert got[i] == inside
            elif adjacent:
                assert got[i] == OUTSIDE
            else:
                assert i not in got
        # class balance: outside tokens never exceed 2 per span
        n_out = sum(1 for t in got.values() if t == OUTSIDE)
        assert n_out <= 2 * len(spans)


def random_spans(rng, n, types=("A", "B", "C")):
    spans = []
    i = 0
    while i < n:
        if rng.random() < 0.4:
            length = int(rng.integers(1, min(3, n - i) + 1))
            spans.append((i, i + length, types[int(rng.integers(len(types)))]))
            i += length + 1
        else:
            i += 1
    return spans


# -- decoding --

def test_decode_examples():
    assert decode([OUTSIDE, "PER", "PER", OUTSIDE]) == [(1, 3, "PER")]
    assert decode(["PER", "ORG"]) == [(0, 1, "PER"), (1, 2, "ORG")]
    assert decode([OUTSIDE, OUTSIDE]) == []
    assert decode([]) == []


def test_decode_gold_painting_round_trip():
    # painting gold tags over non-adjacent spans and decoding recovers
    # exactly the gold spans
    rng = np.random.default_rng(1)
    for _ in range(500):
        n = int(rng.integers(1, 15))
        spans = random_spans(rng, n)
        spans = drop_adjacent_same_type(spans)
        tags = [OUTSIDE] * n
        for s, e, t in spans:
            for i in range(s, e):
                tags[i] = t
        assert decode(tags) == sorted(spans)


def drop_adjacent_same_type(spans):
    spans = sorted(spans)
    kept = []
    for span in spans:
        if kept and span[0] == kept[-1][1] and span[2] == kept[-1][2]:
            continue
        kept.append(span)
    return kept


# -- the tagger --

def toy_corpus(base_index=0):
    """Type is determined by the context word before the span.

    Three-token sentences keep every token within the adjacency filter,
    so training covers all inference positions.
    """
    cues = {"red": "A", "blue": "B", "green": "C"}
    sentences = []
    spans = []
    names = ["rex", "tam", "kip", "sol"]
    i = base_index
    for cue, typ in cues.items():
        for name in names:
            sentences.append(Sentence("s", i, (cue, name, "ran")))
            spans.append([(1, 2, typ)])
            i += 1
    return list(zip(sentences, spans))


def toy_checkpoint(sentences):
    story = Story("s", tuple(s for s, _ in sentences))
    vocab = build_vocab([story], min_freq=1)
    cfg = EncoderConfig(dim=16, layers=1, heads=2, ff_dim=32, max_len=32,
                        vocab_size=len(vocab), seed=0)
    return Checkpoint(config=cfg, params=Encoder(cfg).params, vocab=vocab)


def test_toy_corpus_reaches_perfect_strict_f1():
    data = toy_corpus()
    ckpt = toy_checkpoint(data)
    cfg = TaggerTrainConfig(epochs=100, lr=0.05, encoder_lr=2e-3, seed=0)
    model, tuned = train_tagger(data, ckpt, frozen=False, config=cfg)
    # held-out copies: same surface sentences, fresh objects
    held_out = toy_corpus(base_index=100)
    predicted = predict_spans(model, tuned, [s for s, _ in held_out])
    assert predicted == [spans for _, spans in held_out]


def test_frozen_training_keeps_encoder(small_synth, tiny_checkpoint):
    data = spans_from_synth(small_synth, limit=30)
    before = {k: v.copy() for k, v in tiny_checkpoint.params.items()}
    model, returned = train_tagger(data, tiny_checkpoint, frozen=True,
                                   config=TaggerTrainConfig(epochs=3))
    for k in before:
        np.testing.assert_array_equal(returned.params[k], before[k])
    assert OUTSIDE in model.tags


def spans_from_synth(synth, limit):
    by_sent = {}
    for tm in synth.corpus.typed_mentions:
        m = tm.mention
        deepest = max(tm.labels, key=lambda lab: (lab.count("/"), lab))
        by_sent.setdefault((m.story_id, m.sent_index), []).append(
            (m.start, m.end, deepest))
    data = []
    for (sid, si), spans in sorted(by_sent.items())[:limit]:
        data.append((synth.corpus.story(sid).sentences[si], spans))
    return data


def test_zero_learning_rate_keeps_tagger(small_synth, tiny_checkpoint):
    data = spans_from_synth(small_synth, limit=20)
    cfg = TaggerTrainConfig(epochs=3, lr=0.0, seed=0)
    model, _ = train_tagger(data, tiny_checkpoint, frozen=True, config=cfg)
    from coreftype.util import rng_for
    fresh = rng_for(0, "spandet", "init").normal(
        0.0, 0.01, size=(len(model.tags), tiny_checkpoint.config.dim))
    np.testing.assert_array_equal(model.weights, fresh)
    assert np.all(model.bias == 0)


def test_empty_filtered_set_is_an_error(tiny_checkpoint):
    sent = Sentence("s", 0, ("just", "plain", "words"))
    with pytest.raises(ValueError, match="no training tokens"):
        train_tagger([(sent, [])], tiny_checkpoint,
                     config=TaggerTrainConfig(epochs=1))


def test_tagger_model_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    model_in = load_roundtrip = None
    from coreftype.spandet import TaggerModel
    model_in = TaggerModel(tags=[OUTSIDE, "A", "B"],
                           weights=rng.normal(size=(3, 8)),
                           bias=rng.normal(size=3), frozen=True)
    path = tmp_path / "tagger.bin"
    save_tagger_model(model_in, path)
    loaded = load_tagger_model(path)
    assert loaded.tags == model_in.tags
    np.testing.assert_array_equal(loaded.weights, model_in.weights)
    np.testing.assert_array_equal(loaded.bias, model_in.bias)
