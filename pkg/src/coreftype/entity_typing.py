"""Multi-label entity typing over mention embeddings.

One sigmoid classifier per label: P(label) = sigmoid(a . x + b), where
x is the mention embedding produced by a configurable span-encoding
strategy.  Labels whose probability exceeds the threshold (strictly)
are assigned.  The encoder can stay frozen, or be fine-tuned jointly
with the classifiers under one optimizer.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .corpus import Mention, Sentence
from .encoder import (
    BOS, EOS, MASK, MEND, MSTART, PAD,
    Checkpoint, Encoder, Vocab,
    read_container, write_container, zero_grads,
)
from .metrics import macro_f1, micro_f1
from .optim import AdamW
from .util import rng_for

SPAN_STRATEGIES = (
    "head_word",
    "special_tokens_head",
    "special_tokens_full_span",
    "mask_token",
    "prompt",
    "masked_triple",
)

_PROMPT_PREFIX = ["the", "type", "of"]
_PROMPT_SUFFIX = ["is"]  # ... [MASK] .
_TRIPLE_REL = ["hastype"]


def mention_token_ids(vocab: Vocab, sentence: Sentence, mention: Mention,
                      strategy: str):
    """Token ids for one mention under a strategy, plus the read position.

    Returns (ids, position): the embedding at ``position`` of the
    encoded sequence is the mention representation.
    """
    toks = list(sentence.tokens)
    start, end, head = mention.start, mention.end, mention.head
    span = toks[start:end]

    if strategy == "head_word":
        ids = vocab.encode(toks)
        return ids, 1 + head
    if strategy == "special_tokens_head":
        body = toks[:head] + ["<m>"] + [toks[head]] + ["</m>"] + toks[head + 1 :]
        ids = [BOS] + [MSTART if t == "<m>" else MEND if t == "</m>" else vocab.id(t)
                       for t in body] + [EOS]
        return ids, 1 + head
    if strategy == "special_tokens_full_span":
        body_ids = ([vocab.id(t) for t in toks[:start]] + [MSTART]
                    + [vocab.id(t) for t in span] + [MEND]
                    + [vocab.id(t) for t in toks[end:]])
        return [BOS] + body_ids + [EOS], 1 + start
    if strategy == "mask_token":
        body_ids = ([vocab.id(t) for t in toks[:start]] + [MASK]
                    + [vocab.id(t) for t in toks[end:]])
        return [BOS] + body_ids + [EOS], 1 + start
    if strategy == "prompt":
        tail = _PROMPT_PREFIX + span + _PROMPT_SUFFIX
        ids = ([BOS] + [vocab.id(t) for t in toks]
               + [vocab.id(t) for t in tail] + [MASK] + [vocab.id(".")] + [EOS])
        return ids, len(ids) - 3
    if strategy == "masked_triple":
        tail_ids = ([vocab.id("<")] + [vocab.id(t) for t in span]
                    + [vocab.id(",")] + [vocab.id(t) for t in _TRIPLE_REL]
                    + [vocab.id(",")] + [MASK] + [vocab.id(">")])
        ids = [BOS] + [vocab.id(t) for t in toks] + tail_ids + [EOS]
        return ids, len(ids) - 3
    raise ValueError(f"unknown span strategy {strategy!r}")


def mention_embedding(encoder: Encoder, vocab: Vocab, sentence: Sentence,
                      mention: Mention, strategy: str = "head_word") -> np.ndarray:
    """Embed one mention.  For batched work use embed_mentions()."""
    X, _ = embed_mentions(encoder, vocab, [(sentence, mention)], strategy)
    return X[0]


def embed_mentions(encoder: Encoder, vocab: Vocab, pairs, strategy: str,
                   batch_size: int = 256, want_cache: bool = False):
    """Embeddings for (sentence, mention) pairs: (n, dim) matrix.

    With ``want_cache`` the per-batch forward caches and read positions
    are returned too, for fine-tuning.
    """
    seqs = []
    positions = []
    for sentence, mention in pairs:
        ids, pos = mention_token_ids(vocab, sentence, mention, strategy)
        if len(ids) > encoder.config.max_len:
            raise ValueError(
                f"strategy {strategy!r}: sequence of {len(ids)} tokens exceeds "
                f"encoder max_len {encoder.config.max_len}"
            )
        seqs.append(ids)
        positions.append(pos)

    out = np.zeros((len(seqs), encoder.config.dim))
    caches = []
    for lo in range(0, len(seqs), batch_size):
        chunk = seqs[lo : lo + batch_size]
        width = max(len(s) for s in chunk)
        ids = np.full((len(chunk), width), PAD, dtype=np.int64)
        for i, s in enumerate(chunk):
            ids[i, : len(s)] = s
        H, cache = encoder.forward(ids)
        for i in range(len(chunk)):
            out[lo + i] = H[i, positions[lo + i]]
        if want_cache:
            caches.append((lo, ids, cache, positions[lo : lo + batch_size]))
    return (out, caches) if want_cache else (out, None)


@dataclass
class TypingModel:
    labels: list                  # sorted hierarchical label paths
    weights: np.ndarray           # (n_labels, dim)
    bias: np.ndarray              # (n_labels,)
    strategy: str = "head_word"
    threshold: float = 0.5
    frozen: bool = True

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def probabilities(self, x: np.ndarray) -> np.ndarray:
        z = x @ self.weights.T + self.bias
        return _sigmoid(z)

    def predict(self, x: np.ndarray):
        """Per-label probabilities and the assigned set (strictly above
        threshold) for one embedding."""
        p = self.probabilities(x[None, :])[0]
        assigned = {lab for lab, prob in zip(self.labels, p) if prob > self.threshold}
        probs = {lab: float(prob) for lab, prob in zip(self.labels, p)}
        return probs, assigned


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_loss(weights, bias, X, Y):
    """Mean binary cross-entropy over all (instance, label) pairs.

    Computed from logits as y*softplus(-z) + (1-y)*softplus(z), which
    is exact and stable for any z; the gradient is sigmoid(z) - y.
    Returns (loss, dW, db, dX).
    """
    Z = X @ weights.T + bias
    softplus = np.logaddexp(0.0, Z)        # log(1 + e^z), stable
    loss = (softplus - Y * Z).mean()
    dZ = (_sigmoid(Z) - Y) / Y.size
    dW = dZ.T @ X
    db = dZ.sum(axis=0)
    dX = dZ @ weights
    return float(loss), dW, db, dX


@dataclass(frozen=True)
class TypingTrainConfig:
    epochs: int = 200
    lr: float = 0.05
    encoder_lr: float = 5e-4
    weight_decay: float = 0.0
    batch_size: int = 64
    val_fraction: float = 0.1
    threshold: float = 0.5
    strategy: str = "head_word"
    seed: int = 0

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, raw):
        return cls(**{k: raw[k] for k in raw if k in cls.__dataclass_fields__})


@dataclass
class TypingTrainResult:
    model: TypingModel
    checkpoint: Checkpoint        # fine-tuned encoder (or the input, if frozen)
    log: list                     # per-epoch micro/macro F1 on validation
    best_epoch: int


def fit_head(X: np.ndarray, Y: np.ndarray, labels, config: TypingTrainConfig,
             X_val=None, Y_val=None):
    """Train the per-label classifiers on fixed embeddings.

    Returns (weights, bias, log, best_epoch); the returned parameters
    are those of the best validation epoch (training epochs when no
    validation split is given).
    """
    rng = rng_for(config.seed, "typing", "head-init")
    n_labels, dim = len(labels), X.shape[1]
    W = rng.normal(0.0, 0.01, size=(n_labels, dim))
    b = np.zeros(n_labels)
    opt = AdamW(lr=config.lr, weight_decay=config.weight_decay)
    if X_val is None:
        X_val, Y_val = X, Y

    log = []
    best = (-1.0, -1)
    best_params = (W.copy(), b.copy())
    for epoch in range(config.epochs):
        _, dW, db, _ = bce_loss(W, b, X, Y)
        opt.step({"w": W, "b": b}, {"w": dW, "b": db})
        micro, macro = _f1_scores(W, b, X_val, Y_val, labels, config.threshold)
        log.append({"epoch": epoch, "val_micro_f1": micro, "val_macro_f1": macro})
        if micro > best[0]:
            best = (micro, epoch)
            best_params = (W.copy(), b.copy())
    W, b = best_params
    return W, b, log, best[1]


def _f1_scores(W, b, X, Y, labels, threshold):
    P = _sigmoid(X @ W.T + b)
    pred = [
        {labels[j] for j in np.nonzero(P[i] > threshold)[0]} for i in range(len(X))
    ]
    gold = [
        {labels[j] for j in np.nonzero(Y[i] > 0.5)[0]} for i in range(len(X))
    ]
    return micro_f1(pred, gold), macro_f1(pred, gold)


def train(dataset, checkpoint: Checkpoint, frozen: bool = True,
          config: TypingTrainConfig = None, labels=None,
          stories_by_id: dict = None) -> TypingTrainResult:
    """Train a typing model from TypedMentions.

    ``dataset`` is a list of (sentence, TypedMention) pairs, or of
    TypedMentions when ``stories_by_id`` resolves their sentences.
    With ``frozen`` the encoder parameters are left bit-identical;
    otherwise encoder and classifiers train under one optimizer.
    """
    if config is None:
        config = TypingTrainConfig()
    pairs, typed = _resolve_pairs(dataset, stories_by_id)
    if not pairs:
        raise ValueError("empty typing dataset")

    seen = sorted({lab for tm in typed for lab in tm.labels})
    if labels is None:
        labels = seen
    else:
        labels = sorted(labels)
        extra = [lab for lab in seen if lab not in set(labels)]
        if extra:
            raise ValueError(f"labels outside inventory: {extra}")

    lab_index = {lab: j for j, lab in enumerate(labels)}
    Y = np.zeros((len(typed), len(labels)))
    for i, tm in enumerate(typed):
        for lab in tm.labels:
            Y[i, lab_index[lab]] = 1.0

    order = rng_for(config.seed, "typing", "split").permutation(len(typed))
    n_val = int(round(config.val_fraction * len(typed)))
    val_idx = order[:n_val]
    train_idx = order[n_val:]
    if train_idx.size == 0:
        train_idx, val_idx = order, np.array([], dtype=int)

    encoder = Encoder(checkpoint.config, checkpoint.params)
    vocab = checkpoint.vocab

    if frozen:
        X, _ = embed_mentions(encoder, vocab, pairs, config.strategy)
        X_val = X[val_idx] if val_idx.size else None
        Y_val = Y[val_idx] if val_idx.size else None
        W, b, log, best_epoch = fit_head(
            X[train_idx], Y[train_idx], labels, config, X_val, Y_val
        )
        model = TypingModel(labels=labels, weights=W, bias=b,
                            strategy=config.strategy, threshold=config.threshold,
                            frozen=True)
        return TypingTrainResult(model=model, checkpoint=checkpoint, log=log,
                                 best_epoch=best_epoch)

    return _train_finetuned(pairs, Y, labels, checkpoint, config,
                            train_idx, val_idx)


def _resolve_pairs(dataset, stories_by_id):
    pairs = []
    typed = []
    for item in dataset:
        if isinstance(item, tuple):
            sentence, tm = item
        else:
            tm = item
            story = stories_by_id[tm.mention.story_id]
            sentence = story.sentences[tm.mention.sent_index]
        pairs.append((sentence, tm.mention))
        typed.append(tm)
    return pairs, typed


def _train_finetuned(pairs, Y, labels, checkpoint: Checkpoint,
                     config: TypingTrainConfig, train_idx, val_idx):
    encoder = Encoder(checkpoint.config, copy.deepcopy(checkpoint.params))
    vocab = checkpoint.vocab
    rng = rng_for(config.seed, "typing", "head-init")
    W = rng.normal(0.0, 0.01, size=(len(labels), encoder.config.dim))
    b = np.zeros(len(labels))
    opt_head = AdamW(lr=config.lr, weight_decay=config.weight_decay)
    opt_enc = AdamW(lr=config.encoder_lr, weight_decay=config.weight_decay)

    log = []
    best = (-1.0, -1)
    best_state = (W.copy(), b.copy(), copy.deepcopy(encoder.params))
    for epoch in range(config.epochs):
        order = rng_for(config.seed, "typing", "order", epoch).permutation(train_idx)
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo : lo + config.batch_size]
            X, caches = embed_mentions(
                encoder, vocab, [pairs[i] for i in idx], config.strategy,
                batch_size=len(idx) or 1, want_cache=True,
            )
            _, dW, db, dX = bce_loss(W, b, X, Y[idx])
            opt_head.step({"w": W, "b": b}, {"w": dW, "b": db})
            grads = zero_grads(encoder.params)
            for lo_c, ids, cache, read_pos in caches:
                dH = np.zeros((ids.shape[0], ids.shape[1], encoder.config.dim))
                for i in range(ids.shape[0]):
                    dH[i, read_pos[i]] = dX[lo_c + i]
                encoder.backward(dH, cache, grads)
            opt_enc.step(encoder.params, grads)

        eval_idx = val_idx if val_idx.size else train_idx
        X_eval, _ = embed_mentions(encoder, vocab,
                                   [pairs[i] for i in eval_idx], config.strategy)
        micro, macro = _f1_scores(W, b, X_eval, Y[eval_idx], labels, config.threshold)
        log.append({"epoch": epoch, "val_micro_f1": micro, "val_macro_f1": macro})
        if micro > best[0]:
            best = (micro, epoch)
            best_state = (W.copy(), b.copy(), copy.deepcopy(encoder.params))

    W, b, params = best_state
    tuned = Checkpoint(config=checkpoint.config, params=params, vocab=vocab,
                       step=checkpoint.step, rng_state=checkpoint.rng_state)
    model = TypingModel(labels=labels, weights=W, bias=b, strategy=config.strategy,
                        threshold=config.threshold, frozen=False)
    return TypingTrainResult(model=model, checkpoint=tuned, log=log,
                             best_epoch=best[1])


# -- model file I/O --

def save_typing_model(model: TypingModel, path) -> None:
    header = {
        "kind": "typing-model",
        "labels": model.labels,
        "strategy": model.strategy,
        "threshold": model.threshold,
        "dim": model.dim,
        "frozen": model.frozen,
    }
    write_container(path, header, {"weights": model.weights, "bias": model.bias})


def load_typing_model(path) -> TypingModel:
    header, arrays = read_container(path)
    if header.get("kind") != "typing-model":
        raise ValueError(f"{path}: not a typing model")
    return TypingModel(
        labels=list(header["labels"]),
        weights=arrays["weights"],
        bias=arrays["bias"],
        strategy=header["strategy"],
        threshold=float(header["threshold"]),
        frozen=bool(header["frozen"]),
    )
