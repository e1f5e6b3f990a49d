import collections

import numpy as np
import pytest

from coreftype.consensus import chains_to_links
from coreftype.synth import NoiseSpec, SynthConfig, generate


def chain_key_sets(ann, story_id):
    return {frozenset(m.key for m in c) for c in ann.story_chains(story_id)}


def test_zero_noise_reproduces_gold():
    spec = NoiseSpec(miss_rate=0.0, spurious_rate=0.0)
    cfg = SynthConfig(n_stories=6, seed=1,
                      coref_noise=(("sysA", spec), ("sysB", spec)))
    sc = generate(cfg)
    for story in sc.corpus.stories:
        gold = chain_key_sets(sc.gold_chains, story.story_id)
        for ann in sc.corpus.coref:
            assert chain_key_sets(ann, story.story_id) == gold


def test_determinism_byte_identical(tmp_path):
    cfg = SynthConfig(n_stories=5, seed=9)
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    generate(cfg).write_jsonl(p1)
    generate(cfg).write_jsonl(p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_full_miss_drops_every_chain():
    spec = NoiseSpec(miss_rate=1.0, spurious_rate=0.0)
    cfg = SynthConfig(n_stories=4, seed=2,
                      coref_noise=(("sysA", spec), ("sysB", spec)))
    sc = generate(cfg)
    for ann in sc.corpus.coref:
        assert ann.chains == {}


def test_spurious_needs_two_entities():
    with pytest.raises(ValueError, match="spurious"):
        SynthConfig(entities_per_story=1,
                    coref_noise=(("sysA", NoiseSpec(spurious_rate=0.5)),))


def test_link_level_invariants():
    cfg = SynthConfig(n_stories=10, seed=3)
    sc = generate(cfg)
    gold_links = {
        sid: {frozenset((a.key, b.key)) for a, b in ls.links}
        for sid, ls in chains_to_links(sc.gold_chains).items()
    }
    entity_of = {}
    for sid, chains in sc.gold_chains.chains.items():
        for ci, chain in enumerate(chains):
            for m in chain:
                entity_of[m.key] = (sid, ci)
    for system in ("sysA", "sysB"):
        for sid in gold_links:
            raw = {frozenset(k) for k in sc.sampled_links[system][sid]}
            spurious = {frozenset(k) for k in sc.sampled_spurious[system][sid]}
            # every sampled link is either gold or a declared spurious link
            assert raw - spurious <= gold_links[sid]
            # every spurious link connects mentions of different gold entities
            for pair in spurious:
                a, b = sorted(pair)
                assert entity_of[a] != entity_of[b]


def test_spurious_intersection_rate_is_squared():
    # Both systems flip independent coins on the same candidate set, so
    # candidates surviving a raw-link intersection are Binomial(n, rate^2).
    rate = 0.2
    spec = NoiseSpec(miss_rate=0.0, spurious_rate=rate)
    survived = 0
    total = 0
    for seed in range(40):
        cfg = SynthConfig(n_stories=12, seed=seed,
                          coref_noise=(("sysA", spec), ("sysB", spec)))
        sc = generate(cfg)
        for sid, cands in sc.candidates.items():
            both = (sc.sampled_spurious["sysA"][sid]
                    & sc.sampled_spurious["sysB"][sid])
            survived += len(both)
            total += len(cands)
    p = rate * rate
    # 99% binomial interval around the expected survival count
    sd = np.sqrt(total * p * (1 - p))
    low, high = total * p - 2.576 * sd, total * p + 2.576 * sd
    assert low <= survived <= high, (survived, (low, high), total)


def test_context_recovers_type_with_bag_of_words_oracle():
    # A naive multinomial classifier over the context tokens (mention
    # excluded) must recover the entity's type from the templates.
    alpha = 0.1  # smoothing
    sc = generate(SynthConfig(n_stories=250, seed=4))
    mentions = []
    for tm in sc.corpus.typed_mentions:
        m = tm.mention
        sent = sc.corpus.story(m.story_id).sentences[m.sent_index]
        context = sent.tokens[: m.start] + sent.tokens[m.end :]
        deepest = max(tm.labels, key=lambda lab: (lab.count("/"), lab))
        mentions.append((context, deepest))

    split = int(0.8 * len(mentions))
    train, test = mentions[:split], mentions[split:]
    counts = collections.defaultdict(collections.Counter)
    priors = collections.Counter()
    for context, label in train:
        counts[label].update(context)
        priors[label] += 1

    vocab = {t for context, _ in train for t in context}
    correct = 0
    for context, label in test:
        best, best_score = None, -np.inf
        for cand, cnt in counts.items():
            total = sum(cnt.values()) + alpha * len(vocab)
            score = np.log(priors[cand]) + sum(
                np.log((cnt.get(t, 0) + alpha) / total) for t in context
            )
            if score > best_score:
                best, best_score = cand, score
        correct += best == label
    assert correct / len(test) >= 0.95


def test_pronoun_fraction_and_first_mention_is_named():
    sc = generate(SynthConfig(n_stories=40, seed=5, pronoun_fraction=0.3))
    pronouns = {"he", "she", "they", "it"}
    n_pronoun = 0
    for sid, chains in sc.gold_chains.chains.items():
        story = sc.corpus.story(sid)
        for chain in chains:
            first = min(chain, key=lambda m: m.sent_index)
            sent = story.sentences[first.sent_index]
            assert sent.tokens[first.start] not in pronouns
            for m in chain:
                toks = story.sentences[m.sent_index].tokens[m.start : m.end]
                n_pronoun += toks[0] in pronouns
    total = len(sc.corpus.typed_mentions)
    # 0.3 of non-first mentions (3 of 4 per entity): expect ~0.225 overall
    assert 0.15 <= n_pronoun / total <= 0.3
