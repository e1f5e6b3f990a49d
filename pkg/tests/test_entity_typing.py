import numpy as np
import pytest

from coreftype.corpus import Mention, Sentence, TypedMention
from coreftype.encoder import BOS, EOS, MASK, MEND, MSTART, Checkpoint, Encoder
from coreftype.entity_typing import (
    SPAN_STRATEGIES, TypingModel, TypingTrainConfig, bce_loss, fit_head,
    load_typing_model, mention_embedding, mention_token_ids, save_typing_model,
    train,
)


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


# -- the linear head (the per-type probability of Eq-style sigmoid) --

def test_zero_model_gives_half_probability_and_empty_assignment():
    model = TypingModel(labels=["/a", "/b"], weights=np.zeros((2, 4)),
                        bias=np.zeros(2))
    probs, assigned = model.predict(np.ones(4))
    assert probs == {"/a": 0.5, "/b": 0.5}
    assert assigned == set()  # strictly above threshold only


def test_large_bias_saturates():
    model = TypingModel(labels=["/a"], weights=np.zeros((1, 4)),
                        bias=np.array([20.0]))
    probs, assigned = model.predict(np.zeros(4))
    assert probs["/a"] > 0.999
    assert assigned == {"/a"}


def test_basis_vector_probability():
    # a = e1, b = 0, x = (2, 0, ...): probability sigmoid(2)
    w = np.zeros((1, 5))
    w[0, 0] = 1.0
    model = TypingModel(labels=["/a"], weights=w, bias=np.zeros(1))
    x = np.zeros(5)
    x[0] = 2.0
    probs, _ = model.predict(x)
    assert abs(probs["/a"] - sigmoid(2.0)) < 1e-12


def test_probability_matches_direct_sigmoid_on_random_inputs():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(3, 8))
    b = rng.normal(size=3)
    model = TypingModel(labels=["/a", "/b", "/c"], weights=w, bias=b)
    for _ in range(2000):
        x = rng.normal(size=8)
        probs, assigned = model.predict(x)
        for j, lab in enumerate(model.labels):
            direct = 1.0 / (1.0 + np.exp(-(w[j] @ x + b[j])))
            assert abs(probs[lab] - direct) < 1e-12
            assert (lab in assigned) == (direct > 0.5)


def test_threshold_shrinks_assignment_monotonically():
    rng = np.random.default_rng(1)
    w = rng.normal(size=(4, 6))
    b = rng.normal(size=4)
    x = rng.normal(size=6)
    sizes = []
    for threshold in (0.1, 0.3, 0.5, 0.7, 0.9):
        model = TypingModel(labels=["/a", "/b", "/c", "/d"], weights=w, bias=b,
                            threshold=threshold)
        _, assigned = model.predict(x)
        sizes.append(len(assigned))
    assert sizes == sorted(sizes, reverse=True)


def test_bce_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    W = rng.normal(size=(3, 5))
    b = rng.normal(size=3)
    X = rng.normal(size=(7, 5))
    Y = (rng.random((7, 3)) < 0.4).astype(float)
    _, dW, db, dX = bce_loss(W, b, X, Y)
    h = 1e-5
    for arr, grad in ((W, dW), (b, db), (X, dX)):
        numeric = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            arr[idx] += h
            up, *_ = bce_loss(W, b, X, Y)
            arr[idx] -= 2 * h
            dn, *_ = bce_loss(W, b, X, Y)
            arr[idx] += h
            numeric[idx] = (up - dn) / (2 * h)
        denom = np.maximum(np.maximum(np.abs(grad), np.abs(numeric)), 1e-8)
        assert (np.abs(grad - numeric) / denom).max() < 1e-8


# -- span-encoding strategies --

def test_strategies_positional_bookkeeping(tiny_checkpoint):
    vocab = tiny_checkpoint.vocab
    sent = Sentence("s", 0, ("the", "mayor", "of", "the", "city", "spoke"))
    mention = Mention("s", 0, 0, 5, head=1)  # "the mayor of the city"
    enc = tiny_checkpoint.encoder()

    for strategy in SPAN_STRATEGIES:
        ids, pos = mention_token_ids(vocab, sent, mention, strategy)
        assert ids[0] == BOS and ids[-1] == EOS
        emb = mention_embedding(enc, vocab, sent, mention, strategy)
        assert emb.shape == (enc.config.dim,)
        assert np.isfinite(emb).all()
        # the read position is recomputed here independently
        if strategy == "head_word":
            expected = 1 + mention.head
        elif strategy == "special_tokens_head":
            assert ids[1 + mention.head] == MSTART
            expected = 1 + mention.head
        elif strategy == "special_tokens_full_span":
            assert ids[1 + mention.start] == MSTART
            assert ids[1 + mention.end + 1] == MEND
            expected = 1 + mention.start
        elif strategy == "mask_token":
            expected = ids.index(MASK)
        else:  # prompt / masked_triple read the appended [MASK]
            expected = len(ids) - 1 - ids[::-1].index(MASK)
        assert pos == expected

        # the embedding equals the forward output at that position
        import numpy as _np
        H, _ = enc.forward(_np.array([ids]))
        assert np.allclose(emb, H[0, pos], atol=0, rtol=0)


def test_single_token_mention_strategies(tiny_checkpoint):
    # head-word and head-marker strategies differ only by the inserted
    # markers; both read a finite vector
    vocab = tiny_checkpoint.vocab
    sent = Sentence("s", 0, ("alice", "waved"))
    mention = Mention("s", 0, 0, 1, head=0)
    enc = tiny_checkpoint.encoder()
    ids_plain, pos_plain = mention_token_ids(vocab, sent, mention, "head_word")
    ids_marked, pos_marked = mention_token_ids(vocab, sent, mention,
                                               "special_tokens_head")
    assert len(ids_marked) == len(ids_plain) + 2
    assert pos_plain == pos_marked == 1
    for strategy in ("head_word", "special_tokens_head"):
        emb = mention_embedding(enc, vocab, sent, mention, strategy)
        assert np.isfinite(emb).all()


def test_head_word_reads_head_position(tiny_checkpoint):
    # "the patient in front of her" with head "patient": the head-word
    # strategy reads exactly that token's contextual embedding
    vocab = tiny_checkpoint.vocab
    sent = Sentence("s", 0, ("alice", "was", "unsure", "about", "the", "patient",
                             "in", "front", "of", "her"))
    mention = Mention("s", 0, 4, 10, head=5)
    enc = tiny_checkpoint.encoder()
    emb = mention_embedding(enc, vocab, sent, mention, "head_word")
    ids, pos = mention_token_ids(vocab, sent, mention, "head_word")
    assert pos == 6  # [BOS] + 5
    H, _ = enc.forward(np.array([ids]))
    np.testing.assert_array_equal(emb, H[0, 6])


def test_mask_token_replaces_whole_span(tiny_checkpoint):
    vocab = tiny_checkpoint.vocab
    sent = Sentence("s", 0, ("a", "b", "c", "d", "e"))
    mention = Mention("s", 0, 1, 4, head=2)
    ids, pos = mention_token_ids(vocab, sent, mention, "mask_token")
    # span of 3 collapses to one [MASK]
    assert len(ids) == 2 + len(sent) - 3 + 1
    assert ids[pos] == MASK


def test_prompt_overflow_is_an_error(tiny_checkpoint):
    vocab = tiny_checkpoint.vocab
    long_tokens = tuple(f"t{i}" for i in range(60))
    sent = Sentence("s", 0, long_tokens)
    mention = Mention("s", 0, 0, 30, head=0)
    enc = tiny_checkpoint.encoder()
    with pytest.raises(ValueError, match="prompt"):
        mention_embedding(enc, vocab, sent, mention, "prompt")


def test_head_consumes_only_the_vector():
    # predictions depend on the embedding alone, not on the strategy
    # that produced it
    rng = np.random.default_rng(3)
    model = TypingModel(labels=["/a"], weights=rng.normal(size=(1, 6)),
                        bias=rng.normal(size=1), strategy="head_word")
    x = rng.normal(size=6)
    p1, _ = model.predict(x)
    model.strategy = "prompt"
    p2, _ = model.predict(x)
    assert p1 == p2


# -- training --

def test_separable_toy_embeddings_reach_perfect_f1():
    # two labels, 40 points, linearly separable; a perceptron oracle
    # verifies separability first
    rng = np.random.default_rng(4)
    X = rng.normal(size=(40, 2))
    y = (X[:, 0] + 0.5 * X[:, 1] > 0).astype(float)
    Y = np.stack([y, 1.0 - y], axis=1)

    # perceptron oracle: converges only if separable
    w = np.zeros(3)
    Xb = np.hstack([X, np.ones((40, 1))])
    sign = 2 * y - 1
    for _ in range(200):
        wrong = [i for i in range(40) if sign[i] * (Xb[i] @ w) <= 0]
        if not wrong:
            break
        w += sign[wrong[0]] * Xb[wrong[0]]
    assert not wrong, "toy data must be separable"

    cfg = TypingTrainConfig(epochs=200, lr=0.1, val_fraction=0.0, seed=0)
    W, b, log, _ = fit_head(X, Y, ["/pos", "/neg"], cfg)
    P = sigmoid(X @ W.T + b)
    pred = P > 0.5
    assert (pred == (Y > 0.5)).all()
    assert log[-1]["val_micro_f1"] <= 1.0


def make_typing_dataset(synth, limit=None):
    pairs = []
    for tm in synth.corpus.typed_mentions[:limit]:
        story = synth.corpus.story(tm.mention.story_id)
        pairs.append((story.sentences[tm.mention.sent_index], tm))
    return pairs


def test_frozen_training_leaves_encoder_untouched(small_synth, tiny_checkpoint):
    dataset = make_typing_dataset(small_synth, limit=60)
    before = {k: v.copy() for k, v in tiny_checkpoint.params.items()}
    cfg = TypingTrainConfig(epochs=5, seed=0)
    result = train(dataset, tiny_checkpoint, frozen=True, config=cfg)
    for k, v in tiny_checkpoint.params.items():
        np.testing.assert_array_equal(v, before[k])
    assert result.model.frozen


def test_finetuned_training_changes_encoder_and_improves(small_synth, tiny_checkpoint):
    dataset = make_typing_dataset(small_synth, limit=40)
    cfg = TypingTrainConfig(epochs=3, seed=0, batch_size=16)
    result = train(dataset, tiny_checkpoint, frozen=False, config=cfg)
    changed = any(
        not np.array_equal(result.checkpoint.params[k], tiny_checkpoint.params[k])
        for k in tiny_checkpoint.params
    )
    assert changed
    assert not result.model.frozen


def test_absent_label_is_never_predicted(small_synth, tiny_checkpoint):
    # a label in the inventory but absent from the data ends up with
    # P < 0.5 on every validation mention
    dataset = make_typing_dataset(small_synth, limit=80)
    inventory = sorted({lab for _, tm in dataset for lab in tm.labels}) + ["/never"]
    cfg = TypingTrainConfig(epochs=80, seed=0)
    result = train(dataset, tiny_checkpoint, frozen=True, config=cfg,
                   labels=inventory)
    from coreftype.entity_typing import embed_mentions
    X, _ = embed_mentions(tiny_checkpoint.encoder(), tiny_checkpoint.vocab,
                          [(s, tm.mention) for s, tm in dataset], cfg.strategy)
    j = result.model.labels.index("/never")
    probs = result.model.probabilities(X)
    assert (probs[:, j] < 0.5).all()


def test_label_outside_inventory_is_an_error(small_synth, tiny_checkpoint):
    dataset = make_typing_dataset(small_synth, limit=20)
    with pytest.raises(ValueError, match="outside inventory"):
        train(dataset, tiny_checkpoint, frozen=True,
              config=TypingTrainConfig(epochs=1), labels=["/person"])


def test_model_file_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    model = TypingModel(labels=["/a", "/b"], weights=rng.normal(size=(2, 8)),
                        bias=rng.normal(size=2), strategy="mask_token",
                        threshold=0.4, frozen=False)
    path = tmp_path / "typing.bin"
    save_typing_model(model, path)
    loaded = load_typing_model(path)
    assert loaded.labels == model.labels
    assert loaded.strategy == "mask_token"
    assert loaded.threshold == 0.4
    assert loaded.frozen is False
    np.testing.assert_array_equal(loaded.weights, model.weights)
    np.testing.assert_array_equal(loaded.bias, model.bias)
