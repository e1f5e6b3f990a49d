"""Contrastive pre-training over consensus coreference chains.

Each mini-batch is built from k stories.  The sentences holding chain
mentions are encoded; mention tokens anchor a contrastive loss that
pulls tokens of co-referring mentions together, with the candidate pool
drawn from other stories (so links missed by the coreference systems
cannot produce false negatives).  Non-mention tokens are masked at
random for an auxiliary masked-token objective; mention heads (or whole
spans) are masked with their own probability so the encoder must read
the surrounding context rather than the surface form.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import CorefAnnotation, Corpus
from .encoder import (
    MASK, PAD,
    Checkpoint, Encoder, EncoderConfig, Vocab, build_vocab, save_checkpoint,
    zero_grads,
)
from .optim import AdamW
from .util import rng_for

MASK_POLICIES = ("none", "head", "full_span")
NEGATIVE_SCOPES = ("different_stories", "same_story")
TOKEN_SCOPES = ("all_span_tokens", "head_only")
DENOMINATOR_MODES = ("include_positive", "literal_self")
OBJECTIVES = ("entity_mlm", "mlm_only")


@dataclass(frozen=True)
class PretrainConfig:
    stories_per_batch: int = 4
    temperature: float = 0.05
    head_mask_prob: float = 0.15
    mask_policy: str = "head"
    negative_scope: str = "different_stories"
    token_scope: str = "all_span_tokens"
    denominator_mode: str = "include_positive"
    mlm_mask_prob: float = 0.15
    epochs: int = 25
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    val_fraction: float = 0.1
    objective: str = "entity_mlm"
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        for name in ("head_mask_prob", "mlm_mask_prob", "val_fraction"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must be in [0,1]")
        if self.mask_policy not in MASK_POLICIES:
            raise ValueError(f"mask_policy must be one of {MASK_POLICIES}")
        if self.negative_scope not in NEGATIVE_SCOPES:
            raise ValueError(f"negative_scope must be one of {NEGATIVE_SCOPES}")
        if self.token_scope not in TOKEN_SCOPES:
            raise ValueError(f"token_scope must be one of {TOKEN_SCOPES}")
        if self.denominator_mode not in DENOMINATOR_MODES:
            raise ValueError(f"denominator_mode must be one of {DENOMINATOR_MODES}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.negative_scope == "different_stories" and self.stories_per_batch < 2:
            raise ValueError("cross-story negatives need stories_per_batch >= 2")

    @classmethod
    def from_dict(cls, raw: dict) -> "PretrainConfig":
        known = {k: raw[k] for k in raw if k in cls.__dataclass_fields__}
        return cls(**known)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class TokenRef:
    """One contrastive token: its position in the batch matrix plus the
    story/chain it belongs to."""
    row: int
    col: int
    story_ord: int
    chain_id: int


@dataclass
class PretrainBatch:
    ids: np.ndarray                 # (rows, seq) int64, after masking
    tokens: list                    # of TokenRef
    mlm_positions: list             # of (row, col)
    mlm_true_ids: list
    row_story: list                 # story ordinal per row
    n_masked_mentions: int = 0


@dataclass
class LossBreakdown:
    entity: float
    mlm: float
    positive_pairs: int
    negative_pool_sizes: list

    @property
    def total(self) -> float:
        return self.entity + self.mlm


def build_batch(stories_with_chains, vocab: Vocab, config: PretrainConfig,
                rng: np.random.Generator) -> PretrainBatch:
    """Assemble the masked id matrix and contrastive token sets for k stories.

    ``stories_with_chains`` is a list of (Story, chains) pairs.  Raises
    when no story contributes a chain (no positive pairs exist).
    """
    rows = []
    row_story = []
    row_key_to_index = {}
    tokens = []
    mention_cols = {}  # row -> set of in-mention columns
    n_masked = 0

    if not any(chains for _, chains in stories_with_chains):
        raise ValueError("no positive pairs: no story in the batch has a chain")

    for story_ord, (story, chains) in enumerate(stories_with_chains):
        for chain_ord, chain in enumerate(chains):
            chain_id = story_ord * 10_000 + chain_ord
            for mention in sorted(chain):
                key = (story_ord, mention.sent_index)
                if key not in row_key_to_index:
                    sent = story.sentences[mention.sent_index]
                    row_key_to_index[key] = len(rows)
                    rows.append(vocab.encode(sent.tokens))
                    row_story.append(story_ord)
                row = row_key_to_index[key]
                span_cols = list(range(mention.start + 1, mention.end + 1))
                head_col = mention.head + 1
                if config.token_scope == "head_only":
                    ref_cols = [head_col]
                else:
                    ref_cols = span_cols
                for col in ref_cols:
                    tokens.append(TokenRef(row=row, col=col, story_ord=story_ord,
                                           chain_id=chain_id))
                mention_cols.setdefault(row, set()).update(span_cols)

                if config.mask_policy != "none":
                    if rng.random() < config.head_mask_prob:
                        n_masked += 1
                        if config.mask_policy == "head":
                            rows[row][head_col] = MASK
                        else:
                            for col in span_cols:
                                rows[row][col] = MASK

    width = max(len(r) for r in rows)
    ids = np.full((len(rows), width), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r

    mlm_positions = []
    mlm_true_ids = []
    for i, r in enumerate(rows):
        in_mention = mention_cols.get(i, set())
        for col in range(1, len(r) - 1):  # skip [BOS]/[EOS]
            if col in in_mention:
                continue
            if rng.random() < config.mlm_mask_prob:
                mlm_positions.append((i, col))
                mlm_true_ids.append(int(ids[i, col]))
                ids[i, col] = MASK

    return PretrainBatch(
        ids=ids,
        tokens=tokens,
        mlm_positions=mlm_positions,
        mlm_true_ids=mlm_true_ids,
        row_story=row_story,
        n_masked_mentions=n_masked,
    )


def info_nce(H: np.ndarray, batch: PretrainBatch, temperature: float,
             negative_scope: str = "different_stories",
             denominator_mode: str = "include_positive"):
    """Contrastive loss over co-referring mention tokens.

    Returns (loss, dH, stats).  The loss averages, over all
    (anchor, positive) pairs, the negative log-probability of the
    positive against the anchor's negative pool; cosine similarities
    are divided by the temperature.  Gradients flow through both
    arguments of every cosine.
    """
    refs = batch.tokens
    N = len(refs)
    dH = np.zeros_like(H)
    if N == 0:
        return 0.0, dH, {"positive_pairs": 0, "negative_pool_sizes": []}

    rows = np.array([r.row for r in refs])
    cols = np.array([r.col for r in refs])
    story = np.array([r.story_ord for r in refs])
    chain = np.array([r.chain_id for r in refs])

    E = H[rows, cols]                       # (N, d)
    norms = np.sqrt((E * E).sum(axis=1))
    norms = np.maximum(norms, 1e-12)
    U = E / norms[:, None]
    C = U @ U.T

    inv_t = 1.0 / temperature
    dC = np.zeros_like(C)
    total = 0.0
    n_terms = 0
    pool_sizes = []

    for a in range(N):
        positives = np.nonzero((chain == chain[a]) & (np.arange(N) != a))[0]
        if positives.size == 0:
            continue
        if negative_scope == "different_stories":
            negs = np.nonzero(story != story[a])[0]
            # with cross-story negatives, a same-story token must never
            # enter the pool
            assert not (story[negs] == story[a]).any()
        else:
            negs = np.nonzero((story == story[a]) & (chain != chain[a]))[0]
        if negs.size == 0 and denominator_mode == "literal_self":
            raise ValueError(
                "degenerate contrastive term: empty negative pool and the "
                "positive is not in the denominator"
            )
        pool_sizes.append(int(negs.size))
        for p in positives:
            if denominator_mode == "include_positive":
                denom = np.concatenate([negs, [p]])
            else:
                denom = np.concatenate([negs, [a]])
            s = C[a, denom] * inv_t
            m = s.max()
            lse = m + np.log(np.exp(s - m).sum())
            total += lse - C[a, p] * inv_t
            w = np.exp(s - lse)
            np.add.at(dC[a], denom, w * inv_t)
            dC[a, p] -= inv_t
            n_terms += 1

    if n_terms == 0:
        raise ValueError("no positive pairs: every chain token stands alone")

    loss = total / n_terms
    dC /= n_terms

    # cosine backward: dU then project out the radial component
    dU = dC @ U + dC.T @ U
    radial = (dU * U).sum(axis=1, keepdims=True)
    dE = (dU - U * radial) / norms[:, None]
    np.add.at(dH, (rows, cols), dE)

    stats = {"positive_pairs": n_terms, "negative_pool_sizes": pool_sizes}
    return float(loss), dH, stats


def mlm_loss(logits: np.ndarray, positions, true_ids):
    """Mean cross-entropy over masked positions; zero positions contribute 0."""
    dlogits = np.zeros_like(logits)
    if not positions:
        return 0.0, dlogits
    n = len(positions)
    rows = np.array([p[0] for p in positions])
    cols = np.array([p[1] for p in positions])
    true = np.asarray(true_ids)
    X = logits[rows, cols]                       # (n, vocab)
    m = X.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(X - m).sum(axis=1))
    total = lse - X[np.arange(n), true]
    sm = np.exp(X - lse[:, None])
    sm[np.arange(n), true] -= 1.0
    dlogits[rows, cols] = sm / n
    return float(total.mean()), dlogits


@dataclass
class PretrainResult:
    best: Checkpoint
    final: Checkpoint
    best_epoch: int
    log: list  # one dict per epoch: epoch, entity_loss, mlm_loss, total, val_loss


def pretrain(corpus: Corpus, annotation: CorefAnnotation, config: PretrainConfig,
             encoder_config: EncoderConfig = None, vocab: Vocab = None,
             out_dir=None, log_fn=None) -> PretrainResult:
    """Train an encoder on the annotation's chains; deterministic per seed.

    Stories are split into train/validation; the checkpoint with the
    lowest validation loss is returned as ``best``.  When ``out_dir``
    is set, per-epoch checkpoints and a JSONL loss log are written
    there.
    """
    if vocab is None:
        vocab = build_vocab(corpus.stories)
    if encoder_config is None:
        encoder_config = EncoderConfig(vocab_size=len(vocab), seed=config.seed)
    if encoder_config.vocab_size != len(vocab):
        raise ValueError("encoder_config.vocab_size != len(vocab)")

    chained = [
        (story, list(annotation.story_chains(story.story_id)))
        for story in corpus.stories
    ]
    usable = [(s, ch) for s, ch in chained if ch]
    if not usable:
        raise ValueError(f"no chains in annotation {annotation.system_name!r}")

    order = rng_for(config.seed, "pretrain", "split")
    usable = list(usable)
    order.shuffle(usable)
    n_val = int(round(config.val_fraction * len(usable)))
    val_set = usable[:n_val]
    train_set = usable[n_val:]
    if not train_set:
        train_set, val_set = usable, []

    enc = Encoder(encoder_config)
    opt = AdamW(lr=config.lr, beta1=config.beta1, beta2=config.beta2,
                weight_decay=config.weight_decay)
    k = config.stories_per_batch

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    log = []
    best_epoch = -1
    best_val = np.inf
    best_params = None
    step = 0

    for epoch in range(config.epochs):
        epoch_rng = rng_for(config.seed, "pretrain", "order", epoch)
        batches = list(train_set)
        epoch_rng.shuffle(batches)
        ent_sum = mlm_sum = 0.0
        n_batches = 0
        for start in range(0, len(batches), k):
            group = batches[start : start + k]
            if config.negative_scope == "different_stories" and len(group) < 2:
                continue
            mask_rng = rng_for(config.seed, "pretrain", "mask", epoch, start)
            breakdown, grads = _step(enc, group, vocab, config, mask_rng)
            opt.step(enc.params, grads)
            step += 1
            ent_sum += breakdown.entity
            mlm_sum += breakdown.mlm
            n_batches += 1

        ent = ent_sum / max(n_batches, 1)
        mlm = mlm_sum / max(n_batches, 1)
        val = _validation_loss(enc, val_set, vocab, config)
        if val is None:
            val = ent + mlm
        row = {"epoch": epoch, "entity_loss": ent, "mlm_loss": mlm,
               "total": ent + mlm, "val_loss": val}
        log.append(row)
        if log_fn is not None:
            log_fn(row)

        if out_dir is not None:
            ckpt = Checkpoint(config=encoder_config, params=enc.params, vocab=vocab,
                              step=step, rng_state=_rng_note(config.seed, epoch))
            save_checkpoint(ckpt, out_dir / f"epoch_{epoch:03d}.ckpt")
        if val < best_val:
            best_val = val
            best_epoch = epoch
            best_params = copy.deepcopy(enc.params)

    best = Checkpoint(config=encoder_config, params=best_params, vocab=vocab,
                      step=step, rng_state=_rng_note(config.seed, best_epoch))
    final = Checkpoint(config=encoder_config, params=enc.params, vocab=vocab,
                       step=step, rng_state=_rng_note(config.seed, config.epochs - 1))
    if out_dir is not None:
        save_checkpoint(best, out_dir / "best.ckpt")
        with (out_dir / "log.jsonl").open("w", encoding="utf-8") as f:
            for row in log:
                f.write(json.dumps(row) + "\n")
    return PretrainResult(best=best, final=final, best_epoch=best_epoch, log=log)


def _rng_note(seed: int, epoch: int) -> dict:
    # Streams are re-derived from (seed, purpose, epoch, batch), so the
    # resumable state is just these two numbers.
    return {"master_seed": seed, "epoch": epoch}


def _step(enc: Encoder, group, vocab, config: PretrainConfig, rng):
    batch = build_batch(group, vocab, config, rng)
    if batch.ids.shape[1] > enc.config.max_len:
        raise ValueError(
            f"sentence of {batch.ids.shape[1]} tokens exceeds encoder max_len "
            f"{enc.config.max_len}"
        )
    H, cache = enc.forward(batch.ids)
    grads = zero_grads(enc.params)

    if config.objective == "entity_mlm":
        ent, dH_ent, stats = info_nce(
            H, batch, config.temperature,
            negative_scope=config.negative_scope,
            denominator_mode=config.denominator_mode,
        )
    else:
        ent, dH_ent, stats = 0.0, np.zeros_like(H), {
            "positive_pairs": 0, "negative_pool_sizes": []}

    logits = enc.mlm_logits(H)
    mlm, dlogits = mlm_loss(logits, batch.mlm_positions, batch.mlm_true_ids)
    dH = dH_ent + enc.mlm_logits_backward(dlogits, H, grads)
    enc.backward(dH, cache, grads)
    breakdown = LossBreakdown(entity=ent, mlm=mlm,
                              positive_pairs=stats["positive_pairs"],
                              negative_pool_sizes=stats["negative_pool_sizes"])
    return breakdown, grads


def _validation_loss(enc: Encoder, val_set, vocab, config: PretrainConfig):
    if not val_set:
        return None
    k = config.stories_per_batch
    rng = rng_for(config.seed, "pretrain", "val")  # same masks every epoch
    total = 0.0
    n = 0
    for start in range(0, len(val_set), k):
        group = val_set[start : start + k]
        if config.negative_scope == "different_stories" and len(group) < 2:
            continue
        batch = build_batch(group, vocab, config, rng)
        H, _ = enc.forward(batch.ids)
        if config.objective == "entity_mlm":
            ent, _, _ = info_nce(H, batch, config.temperature,
                                 negative_scope=config.negative_scope,
                                 denominator_mode=config.denominator_mode)
        else:
            ent = 0.0
        logits = enc.mlm_logits(H)
        mlm, _ = mlm_loss(logits, batch.mlm_positions, batch.mlm_true_ids)
        total += ent + mlm
        n += 1
    return total / n if n else None
