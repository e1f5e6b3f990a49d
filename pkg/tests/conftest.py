import pytest

from coreftype.encoder import Checkpoint, Encoder, EncoderConfig, Vocab, build_vocab
from coreftype.synth import SynthConfig, generate


@pytest.fixture(scope="session")
def small_synth():
    """16 stories with default noise; shared by read-only tests."""
    return generate(SynthConfig(n_stories=16, seed=11))


@pytest.fixture(scope="session")
def tiny_checkpoint(small_synth):
    """Randomly initialized small encoder over the synth vocabulary."""
    vocab = build_vocab(small_synth.corpus.stories)
    cfg = EncoderConfig(dim=16, layers=1, heads=2, ff_dim=32, max_len=64,
                        vocab_size=len(vocab), seed=3)
    return Checkpoint(config=cfg, params=Encoder(cfg).params, vocab=vocab)
