"""Span detection as per-token tagging over the encoder.

Each token gets one tag: an entity type or OUTSIDE.  Training data is
filtered to fight class imbalance: all in-span tokens are kept, but
OUTSIDE tokens are kept only when they sit immediately before or after
an entity span.  At inference every token is classified, and maximal
runs of an identical non-OUTSIDE tag decode to spans (adjacent
same-type gold spans therefore merge; no B-/I- scheme).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .encoder import Checkpoint, Encoder, PAD, read_container, write_container, zero_grads
from .optim import AdamW
from .util import rng_for

OUTSIDE = "O"


def training_tokens(sentence_len: int, gold_spans) -> list:
    """(token index, tag) pairs for one sentence.

    ``gold_spans`` holds (start, end, type) triples; spans must not
    overlap.  Every in-span token is tagged with its type; an OUTSIDE
    token is emitted only at distance exactly 1 from a span boundary.
    """
    spans = sorted(gold_spans)
    for (s1, e1, _), (s2, e2, _) in zip(spans, spans[1:]):
        if e1 > s2:
            raise ValueError(f"overlapping gold spans [{s1},{e1}) and [{s2},{e2})")
    tags = {}
    for start, end, typ in spans:
        if not (0 <= start < end <= sentence_len):
            raise ValueError(f"span [{start},{end}) outside sentence of {sentence_len}")
        for i in range(start, end):
            tags[i] = typ
    out = []
    adjacent = set()
    for start, end, _ in spans:
        if start - 1 >= 0:
            adjacent.add(start - 1)
        if end < sentence_len:
            adjacent.add(end)
    for i in sorted(set(tags) | adjacent):
        out.append((i, tags.get(i, OUTSIDE)))
    return out


def decode(tags) -> list:
    """Maximal runs of identical non-OUTSIDE tags become (start, end, type)."""
    spans = []
    start = None
    current = OUTSIDE
    for i, tag in enumerate(list(tags) + [OUTSIDE]):
        if tag != current:
            if current != OUTSIDE:
                spans.append((start, i, current))
            start = i
            current = tag
    return spans


@dataclass
class TaggerModel:
    tags: list                  # OUTSIDE first, then entity types, sorted
    weights: np.ndarray         # (n_tags, dim)
    bias: np.ndarray            # (n_tags,)
    frozen: bool = True

    def predict_tags(self, H_sentence: np.ndarray) -> list:
        """Tags for one sentence's token embeddings (without [BOS]/[EOS])."""
        logits = H_sentence @ self.weights.T + self.bias
        return [self.tags[j] for j in logits.argmax(axis=1)]


@dataclass(frozen=True)
class TaggerTrainConfig:
    epochs: int = 150
    lr: float = 0.05
    encoder_lr: float = 5e-4
    weight_decay: float = 0.0
    seed: int = 0

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, raw):
        return cls(**{k: raw[k] for k in raw if k in cls.__dataclass_fields__})


def softmax_ce(weights, bias, X, y_idx):
    """Mean cross-entropy of the linear tagger; exact gradients.

    Returns (loss, dW, db, dX).
    """
    Z = X @ weights.T + bias
    Z = Z - Z.max(axis=1, keepdims=True)
    ex = np.exp(Z)
    P = ex / ex.sum(axis=1, keepdims=True)
    n = len(y_idx)
    loss = -np.log(P[np.arange(n), y_idx] + 1e-300).mean()
    dZ = P.copy()
    dZ[np.arange(n), y_idx] -= 1.0
    dZ /= n
    dW = dZ.T @ X
    db = dZ.sum(axis=0)
    dX = dZ @ weights
    return float(loss), dW, db, dX


def train_tagger(sentences_with_spans, checkpoint: Checkpoint, frozen: bool = True,
                 config: TaggerTrainConfig = None):
    """Fit the tagger on filtered (token, tag) pairs.

    ``sentences_with_spans`` is a list of (Sentence, [(start, end, type)])
    pairs.  Returns (TaggerModel, Checkpoint): the checkpoint is the
    input one when frozen, else the fine-tuned encoder.
    """
    if config is None:
        config = TaggerTrainConfig()
    encoder = Encoder(checkpoint.config,
                      checkpoint.params if frozen else copy.deepcopy(checkpoint.params))
    vocab = checkpoint.vocab

    examples = []  # (sentence ordinal, token index, tag)
    for ordinal, (sentence, spans) in enumerate(sentences_with_spans):
        for tok_idx, tag in training_tokens(len(sentence), spans):
            examples.append((ordinal, tok_idx, tag))
    if not examples:
        raise ValueError("no training tokens after the adjacency filter")

    tags = [OUTSIDE] + sorted({t for _, _, t in examples if t != OUTSIDE})
    tag_index = {t: j for j, t in enumerate(tags)}

    ids, lengths = _encode_sentences(vocab, [s for s, _ in sentences_with_spans])

    def embed_all():
        H, caches = _forward_chunks(encoder, ids)
        X = np.stack([H[ordinal, tok_idx + 1] for ordinal, tok_idx, _ in examples])
        return X, H, caches

    y_idx = np.array([tag_index[t] for _, _, t in examples])
    rng = rng_for(config.seed, "spandet", "init")
    W = rng.normal(0.0, 0.01, size=(len(tags), encoder.config.dim))
    b = np.zeros(len(tags))
    opt_head = AdamW(lr=config.lr, weight_decay=config.weight_decay)
    opt_enc = AdamW(lr=config.encoder_lr, weight_decay=config.weight_decay)

    if frozen:
        X, _, _ = embed_all()
        for _ in range(config.epochs):
            _, dW, db, _ = softmax_ce(W, b, X, y_idx)
            opt_head.step({"w": W, "b": b}, {"w": dW, "b": db})
        model = TaggerModel(tags=tags, weights=W, bias=b, frozen=True)
        return model, checkpoint

    for _ in range(config.epochs):
        X, H, caches = embed_all()
        _, dW, db, dX = softmax_ce(W, b, X, y_idx)
        opt_head.step({"w": W, "b": b}, {"w": dW, "b": db})
        dH = np.zeros_like(H)
        for j, (ordinal, tok_idx, _) in enumerate(examples):
            dH[ordinal, tok_idx + 1] += dX[j]
        grads = zero_grads(encoder.params)
        for lo, hi, cache in caches:
            encoder.backward(dH[lo:hi, : cache["H"].shape[1]], cache, grads)
        opt_enc.step(encoder.params, grads)

    tuned = Checkpoint(config=checkpoint.config, params=encoder.params,
                       vocab=vocab, step=checkpoint.step,
                       rng_state=checkpoint.rng_state)
    model = TaggerModel(tags=tags, weights=W, bias=b, frozen=False)
    return model, tuned


def predict_spans(model: TaggerModel, checkpoint: Checkpoint, sentences) -> list:
    """Decode predicted (start, end, type) spans for each sentence."""
    encoder = checkpoint.encoder()
    ids, lengths = _encode_sentences(checkpoint.vocab, sentences)
    H, _ = _forward_chunks(encoder, ids)
    out = []
    for i, sentence in enumerate(sentences):
        n = lengths[i]
        tags = model.predict_tags(H[i, 1 : n + 1])
        out.append(decode(tags))
    return out


def _encode_sentences(vocab, sentences):
    seqs = [vocab.encode(s.tokens) for s in sentences]
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    return ids, [len(s.tokens) for s in sentences]


def _forward_chunks(encoder, ids, chunk: int = 256):
    H = None
    caches = []
    for lo in range(0, len(ids), chunk):
        hi = min(lo + chunk, len(ids))
        Hc, cache = encoder.forward(ids[lo:hi])
        if H is None:
            H = np.zeros((len(ids), ids.shape[1], Hc.shape[2]))
        H[lo:hi] = Hc
        caches.append((lo, hi, cache))
    return H, caches


# -- model file I/O --

def save_tagger_model(model: TaggerModel, path) -> None:
    header = {
        "kind": "tagger-model",
        "tags": model.tags,
        "dim": model.weights.shape[1],
        "frozen": model.frozen,
    }
    write_container(path, header, {"weights": model.weights, "bias": model.bias})


def load_tagger_model(path) -> TaggerModel:
    header, arrays = read_container(path)
    if header.get("kind") != "tagger-model":
        raise ValueError(f"{path}: not a tagger model")
    return TaggerModel(
        tags=list(header["tags"]),
        weights=arrays["weights"],
        bias=arrays["bias"],
        frozen=bool(header["frozen"]),
    )
