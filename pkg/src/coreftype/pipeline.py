"""End-to-end experiment plumbing: split, pre-train, probe, score.

One probe experiment = split stories into train/test, pre-train an
encoder on the train split's coreference chains (or skip pre-training,
or use the masked-token objective only), fit a frozen typing probe on
the train split's labeled mentions, and score it on the test split.
"""

from __future__ import annotations

from dataclasses import dataclass

from .consensus import consensus
from .corpus import CorefAnnotation, Corpus
from .encoder import Checkpoint, Encoder, EncoderConfig, build_vocab
from .entity_typing import TypingTrainConfig, embed_mentions, train as train_typing
from .metrics import EvalReport, typing_report
from .pretrain import PretrainConfig, pretrain
from .util import rng_for


def split_stories(corpus: Corpus, test_fraction: float, seed: int):
    """Deterministic train/test partition of story ids."""
    ids = [s.story_id for s in corpus.stories]
    rng_for(seed, "pipeline", "split").shuffle(ids)
    n_test = int(round(test_fraction * len(ids)))
    return sorted(ids[n_test:]), sorted(ids[:n_test])


def subcorpus(corpus: Corpus, story_ids) -> Corpus:
    keep = set(story_ids)
    return Corpus(
        stories=tuple(s for s in corpus.stories if s.story_id in keep),
        typed_mentions=tuple(
            tm for tm in corpus.typed_mentions if tm.mention.story_id in keep
        ),
        coref=tuple(
            CorefAnnotation(
                system_name=ann.system_name,
                chains={sid: ch for sid, ch in ann.chains.items() if sid in keep},
            )
            for ann in corpus.coref
        ),
    )


def resolve_chains(corpus: Corpus, source: str) -> CorefAnnotation:
    """A chain source: a named system, or the consensus of the first two."""
    names = [ann.system_name for ann in corpus.coref]
    if source == "consensus":
        for ann in corpus.coref:
            if ann.system_name.startswith("consensus("):
                return ann
        systems = [ann for ann in corpus.coref if ann.system_name != "gold"]
        if len(systems) < 2:
            raise ValueError(
                f"consensus needs two system annotations, corpus has {names}"
            )
        return consensus(systems[0], systems[1])
    for ann in corpus.coref:
        if ann.system_name == source:
            return ann
    raise ValueError(f"no coreference annotation {source!r}; corpus has {names}")


def typed_pairs(corpus: Corpus):
    """(sentence, TypedMention) pairs for every labeled mention."""
    out = []
    for tm in sorted(corpus.typed_mentions, key=lambda t: t.mention.key):
        story = corpus.story(tm.mention.story_id)
        out.append((story.sentences[tm.mention.sent_index], tm))
    return out


@dataclass
class ProbeResult:
    report: EvalReport
    checkpoint: Checkpoint
    pretrain_log: list
    variant: str

    @property
    def micro_f1(self):
        return self.report.micro_f1

    @property
    def macro_f1(self):
        return self.report.macro_f1


def run_probe(
    corpus: Corpus,
    seed: int,
    variant: str = "contrastive",
    coref_source: str = "consensus",
    pre_cfg: PretrainConfig = None,
    typ_cfg: TypingTrainConfig = None,
    enc_cfg: EncoderConfig = None,
    test_fraction: float = 0.2,
) -> ProbeResult:
    """Pre-train (per ``variant``), fit a frozen probe, score on held-out stories.

    Variants: ``contrastive`` (chain supervision plus masked-token
    loss), ``mlm_only`` (masked-token loss alone), ``base`` (no
    pre-training; randomly initialized encoder).
    """
    if variant not in ("contrastive", "mlm_only", "base"):
        raise ValueError(f"unknown variant {variant!r}")
    pre_cfg = pre_cfg if pre_cfg is not None else PretrainConfig(seed=seed)
    typ_cfg = typ_cfg if typ_cfg is not None else TypingTrainConfig(seed=seed)

    train_ids, test_ids = split_stories(corpus, test_fraction, seed)
    train_corpus = subcorpus(corpus, train_ids)
    test_corpus = subcorpus(corpus, test_ids)

    vocab = build_vocab(train_corpus.stories)
    if enc_cfg is None:
        enc_cfg = EncoderConfig(vocab_size=len(vocab), seed=seed)
    else:
        enc_cfg = EncoderConfig(**{**enc_cfg.to_dict(), "vocab_size": len(vocab)})

    pretrain_log = []
    if variant == "base":
        ckpt = Checkpoint(config=enc_cfg, params=Encoder(enc_cfg).params, vocab=vocab)
    else:
        annotation = resolve_chains(train_corpus, coref_source)
        cfg = pre_cfg
        if variant == "mlm_only":
            cfg = PretrainConfig(**{**pre_cfg.to_dict(),
                                    "objective": "mlm_only",
                                    "mask_policy": "none"})
        result = pretrain(train_corpus, annotation, cfg,
                          encoder_config=enc_cfg, vocab=vocab)
        ckpt = result.best
        pretrain_log = result.log

    fit = train_typing(typed_pairs(train_corpus), ckpt, frozen=True, config=typ_cfg)
    report = score_typing(fit.model, ckpt, test_corpus)
    return ProbeResult(report=report, checkpoint=ckpt,
                       pretrain_log=pretrain_log, variant=variant)


def score_typing(model, checkpoint: Checkpoint, corpus: Corpus) -> EvalReport:
    """Score a typing model against a corpus's labeled mentions."""
    pairs = typed_pairs(corpus)
    if not pairs:
        raise ValueError("no labeled mentions to score")
    encoder = checkpoint.encoder()
    X, _ = embed_mentions(encoder, checkpoint.vocab,
                          [(s, tm.mention) for s, tm in pairs], model.strategy)
    pred_sets = []
    gold_sets = []
    for i, (_, tm) in enumerate(pairs):
        _, assigned = model.predict(X[i])
        pred_sets.append(assigned)
        gold_sets.append(set(tm.labels))
    return typing_report(pred_sets, gold_sets)
