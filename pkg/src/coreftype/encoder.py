"""Compact trainable transformer encoder with exact reverse-mode gradients.

Pre-norm blocks, GELU feedforward, learned positional embeddings, and a
tied output projection for masked-token prediction.  All math is
float64 so analytic gradients can be held to central finite differences
at 1e-4 relative error.  No token attends to padding, so appending
[PAD]s never changes the outputs at real positions.
"""

from __future__ import annotations

import json
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .util import rng_for

PAD, MASK, UNK, BOS, EOS, MSTART, MEND = range(7)
RESERVED_TOKENS = ["[PAD]", "[MASK]", "[UNK]", "[BOS]", "[EOS]", "<m>", "</m>"]

# Tokens needed by the prompt-style mention encodings; always in the
# vocabulary so those strategies work on any corpus.
SCAFFOLD_TOKENS = ["the", "type", "of", "is", ".", "<", ">", ",", "hastype"]

_LN_EPS = 1e-5
_NEG_INF = -1e30
_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


class Vocab:
    """Token-to-id map with reserved ids 0..6 ([PAD] first)."""

    def __init__(self, tokens):
        self.tokens = list(tokens)
        if self.tokens[: len(RESERVED_TOKENS)] != RESERVED_TOKENS:
            raise ValueError("vocab must start with the reserved tokens")
        self.token_to_id = {t: i for i, t in enumerate(self.tokens)}
        if len(self.token_to_id) != len(self.tokens):
            raise ValueError("duplicate tokens in vocab")

    def __len__(self):
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def encode(self, tokens) -> list:
        """[BOS] + token ids + [EOS]; position of token i is i+1."""
        return [BOS] + [self.id(t) for t in tokens] + [EOS]


def build_vocab(stories, min_freq: int = 2) -> Vocab:
    """Whitespace-token vocabulary from story text.

    Tokens below ``min_freq`` map to [UNK]; scaffold tokens are always
    included.  Order: reserved, scaffold, then corpus tokens by
    descending count (ties alphabetical), which makes ids deterministic.
    """
    counts = Counter()
    for story in stories:
        for sent in story.sentences:
            counts.update(sent.tokens)
    tokens = list(RESERVED_TOKENS) + list(SCAFFOLD_TOKENS)
    seen = set(tokens)
    for tok, n in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])):
        if n >= min_freq and tok not in seen:
            tokens.append(tok)
            seen.add(tok)
    return Vocab(tokens)


@dataclass(frozen=True)
class EncoderConfig:
    dim: int = 64
    layers: int = 2
    heads: int = 4
    ff_dim: int = 256
    max_len: int = 128
    vocab_size: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError("dim must be divisible by heads")
        for name in ("dim", "layers", "heads", "ff_dim", "max_len", "vocab_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def to_dict(self):
        return {
            "dim": self.dim, "layers": self.layers, "heads": self.heads,
            "ff_dim": self.ff_dim, "max_len": self.max_len,
            "vocab_size": self.vocab_size, "seed": self.seed,
        }


def param_names(config: EncoderConfig) -> list:
    """Parameter order used everywhere, including checkpoint files."""
    names = ["tok_emb", "pos_emb"]
    for i in range(config.layers):
        names += [
            f"l{i}.ln1_g", f"l{i}.ln1_b",
            f"l{i}.wq", f"l{i}.bq", f"l{i}.wk", f"l{i}.bk",
            f"l{i}.wv", f"l{i}.bv", f"l{i}.wo", f"l{i}.bo",
            f"l{i}.ln2_g", f"l{i}.ln2_b",
            f"l{i}.w1", f"l{i}.b1", f"l{i}.w2", f"l{i}.b2",
        ]
    names += ["lnf_g", "lnf_b", "out_b"]
    return names


def _gelu(x):
    x2 = x * x
    t = np.tanh(_GELU_C * (x + _GELU_A * x2 * x))
    return 0.5 * x * (1.0 + t), t


def _gelu_grad(x, t):
    # t is the tanh cached by _gelu; avoids recomputing it
    x2 = x * x
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x2)


def _layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv_std
    return xhat * g + b, (xhat, inv_std)


def _layernorm_backward(dy, g, cache):
    xhat, inv_std = cache
    dims = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axis=dims)
    db = dy.sum(axis=dims)
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv_std * (dxhat - m1 - xhat * m2)
    return dx, dg, db


class Encoder:
    """Transformer encoder over a dict of float64 parameter arrays."""

    def __init__(self, config: EncoderConfig, params: dict = None):
        self.config = config
        if params is None:
            params = init_params(config)
        self.params = params

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def forward(self, ids: np.ndarray):
        """Contextual embeddings for a padded id matrix.

        Returns (H, cache): H has shape (batch, seq_len, dim).  The
        cache feeds backward() and mlm_logits().
        """
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise ValueError("ids must be (batch, seq_len)")
        if ids.max(initial=0) >= self.config.vocab_size or ids.min(initial=0) < 0:
            raise ValueError("token id out of range")
        B, S = ids.shape
        if S > self.config.max_len:
            raise ValueError(f"sequence length {S} exceeds max_len {self.config.max_len}")

        p = self.params
        cfg = self.config
        dh = cfg.dim // cfg.heads
        mask = ids != PAD  # (B,S); no one attends to PAD columns

        x = p["tok_emb"][ids] + p["pos_emb"][:S][None, :, :]
        cache = {"ids": ids, "mask": mask, "x0": x, "layers": []}

        for i in range(cfg.layers):
            lc = {}
            lc["x_in"] = x
            h1, lc["ln1"] = _layernorm(x, p[f"l{i}.ln1_g"], p[f"l{i}.ln1_b"])
            lc["h1"] = h1
            q = h1 @ p[f"l{i}.wq"] + p[f"l{i}.bq"]
            k = h1 @ p[f"l{i}.wk"] + p[f"l{i}.bk"]
            v = h1 @ p[f"l{i}.wv"] + p[f"l{i}.bv"]
            q = q.reshape(B, S, cfg.heads, dh).transpose(0, 2, 1, 3)
            k = k.reshape(B, S, cfg.heads, dh).transpose(0, 2, 1, 3)
            v = v.reshape(B, S, cfg.heads, dh).transpose(0, 2, 1, 3)
            scores = (q @ k.transpose(0, 1, 3, 2)) / np.sqrt(dh)
            scores = np.where(mask[:, None, None, :], scores, _NEG_INF)
            scores -= scores.max(axis=-1, keepdims=True)
            ex = np.exp(scores)
            attn = ex / ex.sum(axis=-1, keepdims=True)
            ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(B, S, cfg.dim)
            lc.update(q=q, k=k, v=v, attn=attn, ctx=ctx)
            x = x + ctx @ p[f"l{i}.wo"] + p[f"l{i}.bo"]

            lc["x_mid"] = x
            h2, lc["ln2"] = _layernorm(x, p[f"l{i}.ln2_g"], p[f"l{i}.ln2_b"])
            u = h2 @ p[f"l{i}.w1"] + p[f"l{i}.b1"]
            a, tanh_u = _gelu(u)
            lc.update(h2=h2, u=u, a=a, tanh_u=tanh_u)
            x = x + a @ p[f"l{i}.w2"] + p[f"l{i}.b2"]
            cache["layers"].append(lc)

        cache["x_final"] = x
        H, cache["lnf"] = _layernorm(x, p["lnf_g"], p["lnf_b"])
        cache["H"] = H
        return H, cache

    def mlm_logits(self, H: np.ndarray) -> np.ndarray:
        """Vocabulary logits per position, through the tied embedding."""
        return H @ self.params["tok_emb"].T + self.params["out_b"]

    def mlm_logits_backward(self, dlogits: np.ndarray, H: np.ndarray, grads: dict):
        """Gradient of the tied projection; returns dH, accumulates into grads."""
        V, d = self.params["tok_emb"].shape
        flat_dl = dlogits.reshape(-1, V)
        flat_h = H.reshape(-1, d)
        grads["tok_emb"] += flat_dl.T @ flat_h
        grads["out_b"] += flat_dl.sum(axis=0)
        return dlogits @ self.params["tok_emb"]

    def backward(self, dH: np.ndarray, cache: dict, grads: dict = None) -> dict:
        """Exact gradients of forward() for every parameter.

        ``dH`` is the loss gradient w.r.t. the final embeddings; pass an
        existing grads dict to accumulate (e.g. after
        mlm_logits_backward).
        """
        p = self.params
        cfg = self.config
        if dH.shape != cache["H"].shape:
            raise ValueError(f"dH shape {dH.shape} != forward output {cache['H'].shape}")
        B, S, _ = dH.shape
        dh = cfg.dim // cfg.heads
        if grads is None:
            grads = zero_grads(self.params)

        dx, dg, db = _layernorm_backward(dH, p["lnf_g"], cache["lnf"])
        grads["lnf_g"] += dg
        grads["lnf_b"] += db

        for i in reversed(range(cfg.layers)):
            lc = cache["layers"][i]
            # feedforward sublayer
            da = dx @ p[f"l{i}.w2"].T
            grads[f"l{i}.w2"] += lc["a"].reshape(-1, cfg.ff_dim).T @ dx.reshape(-1, cfg.dim)
            grads[f"l{i}.b2"] += dx.sum(axis=(0, 1))
            du = da * _gelu_grad(lc["u"], lc["tanh_u"])
            grads[f"l{i}.w1"] += lc["h2"].reshape(-1, cfg.dim).T @ du.reshape(-1, cfg.ff_dim)
            grads[f"l{i}.b1"] += du.sum(axis=(0, 1))
            dh2 = du @ p[f"l{i}.w1"].T
            dx_mid, dg2, db2 = _layernorm_backward(dh2, p[f"l{i}.ln2_g"], lc["ln2"])
            grads[f"l{i}.ln2_g"] += dg2
            grads[f"l{i}.ln2_b"] += db2
            dx = dx + dx_mid

            # attention sublayer
            dctx = dx @ p[f"l{i}.wo"].T
            grads[f"l{i}.wo"] += lc["ctx"].reshape(-1, cfg.dim).T @ dx.reshape(-1, cfg.dim)
            grads[f"l{i}.bo"] += dx.sum(axis=(0, 1))
            dctx = dctx.reshape(B, S, cfg.heads, dh).transpose(0, 2, 1, 3)
            attn, q, k, v = lc["attn"], lc["q"], lc["k"], lc["v"]
            dattn = dctx @ v.transpose(0, 1, 3, 2)
            dv = attn.transpose(0, 1, 3, 2) @ dctx
            dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
            dscores /= np.sqrt(dh)
            dq = dscores @ k
            dk = dscores.transpose(0, 1, 3, 2) @ q
            dq = dq.transpose(0, 2, 1, 3).reshape(B, S, cfg.dim)
            dk = dk.transpose(0, 2, 1, 3).reshape(B, S, cfg.dim)
            dv = dv.transpose(0, 2, 1, 3).reshape(B, S, cfg.dim)
            h1_flat = lc["h1"].reshape(-1, cfg.dim)
            grads[f"l{i}.wq"] += h1_flat.T @ dq.reshape(-1, cfg.dim)
            grads[f"l{i}.bq"] += dq.sum(axis=(0, 1))
            grads[f"l{i}.wk"] += h1_flat.T @ dk.reshape(-1, cfg.dim)
            grads[f"l{i}.bk"] += dk.sum(axis=(0, 1))
            grads[f"l{i}.wv"] += h1_flat.T @ dv.reshape(-1, cfg.dim)
            grads[f"l{i}.bv"] += dv.sum(axis=(0, 1))
            dh1 = dq @ p[f"l{i}.wq"].T + dk @ p[f"l{i}.wk"].T + dv @ p[f"l{i}.wv"].T
            dx_in, dg1, db1 = _layernorm_backward(dh1, p[f"l{i}.ln1_g"], lc["ln1"])
            grads[f"l{i}.ln1_g"] += dg1
            grads[f"l{i}.ln1_b"] += db1
            dx = dx + dx_in

        grads["pos_emb"][:S] += dx.sum(axis=0)
        np.add.at(grads["tok_emb"], cache["ids"].ravel(), dx.reshape(-1, cfg.dim))
        return grads


def init_params(config: EncoderConfig) -> dict:
    rng = rng_for(config.seed, "encoder", "init")
    d, ff, V = config.dim, config.ff_dim, config.vocab_size

    def w(*shape):
        return rng.normal(0.0, 0.02, size=shape)

    params = {
        "tok_emb": w(V, d),
        "pos_emb": w(config.max_len, d),
    }
    for i in range(config.layers):
        params.update({
            f"l{i}.ln1_g": np.ones(d), f"l{i}.ln1_b": np.zeros(d),
            f"l{i}.wq": w(d, d), f"l{i}.bq": np.zeros(d),
            f"l{i}.wk": w(d, d), f"l{i}.bk": np.zeros(d),
            f"l{i}.wv": w(d, d), f"l{i}.bv": np.zeros(d),
            f"l{i}.wo": w(d, d), f"l{i}.bo": np.zeros(d),
            f"l{i}.ln2_g": np.ones(d), f"l{i}.ln2_b": np.zeros(d),
            f"l{i}.w1": w(d, ff), f"l{i}.b1": np.zeros(ff),
            f"l{i}.w2": w(ff, d), f"l{i}.b2": np.zeros(d),
        })
    params["lnf_g"] = np.ones(d)
    params["lnf_b"] = np.zeros(d)
    params["out_b"] = np.zeros(V)
    return {k: params[k] for k in param_names(config)}


def zero_grads(params: dict) -> dict:
    return {k: np.zeros_like(v) for k, v in params.items()}


# -- checkpoint container --
#
# Deterministic binary layout so identical training runs produce
# byte-identical files (zip-based containers embed timestamps):
#   magic "CFTC0001" | uint32 LE header length | JSON header |
#   raw little-endian float64 arrays, C order, in header["arrays"] order.

_MAGIC = b"CFTC0001"


@dataclass
class Checkpoint:
    config: EncoderConfig
    params: dict
    vocab: Vocab
    step: int = 0
    rng_state: dict = field(default_factory=dict)

    def encoder(self) -> Encoder:
        return Encoder(self.config, self.params)


def write_container(path, header: dict, arrays: dict) -> None:
    header = dict(header)
    header["arrays"] = [[name, list(arr.shape)] for name, arr in arrays.items()]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, arr in arrays.items():
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_container(path):
    with open(path, "rb") as f:
        magic = f.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a parameter container")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        arrays = {}
        for name, shape in header["arrays"]:
            n = int(np.prod(shape)) if shape else 1
            buf = f.read(n * 8)
            arrays[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return header, arrays


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    header = {
        "kind": "encoder-checkpoint",
        "config": ckpt.config.to_dict(),
        "vocab": ckpt.vocab.tokens,
        "step": ckpt.step,
        "rng_state": ckpt.rng_state,
    }
    arrays = {name: ckpt.params[name] for name in param_names(ckpt.config)}
    write_container(path, header, arrays)


def load_checkpoint(path) -> Checkpoint:
    header, arrays = read_container(path)
    if header.get("kind") != "encoder-checkpoint":
        raise ValueError(f"{path}: not an encoder checkpoint")
    config = EncoderConfig(**header["config"])
    return Checkpoint(
        config=config,
        params=arrays,
        vocab=Vocab(header["vocab"]),
        step=int(header["step"]),
        rng_state=header.get("rng_state") or {},
    )


# -- gradient checking --

def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """Elementwise error: relative where the gradient is sizable,
    absolute (same scale) where both are near zero."""
    a, n = np.abs(analytic), np.abs(numeric)
    denom = np.maximum(np.maximum(a, n), 1e-6)
    return np.abs(analytic - numeric) / denom


def gradient_check(
    config: EncoderConfig = None,
    h: float = 1e-5,
    seed: int = 0,
    tolerance: float = 1e-4,
) -> dict:
    """Compare analytic parameter gradients against central differences.

    Uses a random projection of the embeddings plus a masked-token
    cross-entropy term, so every parameter (including the tied output
    head) receives gradient.  Returns per-parameter-group max errors
    plus the overall verdict.
    """
    if config is None:
        config = EncoderConfig(dim=8, layers=2, heads=2, ff_dim=16,
                               max_len=12, vocab_size=23, seed=seed)
    enc = Encoder(config)
    rng = rng_for(seed, "gradcheck")
    B, S = 2, 7
    ids = rng.integers(7, config.vocab_size, size=(B, S))
    ids[0, -2:] = PAD  # exercise attention masking
    ids[1, 2] = MASK
    R = rng.normal(size=(B, S, config.dim))
    mlm_pos = [(1, 2)]
    mlm_true = [int(rng.integers(7, config.vocab_size))]

    def loss_and_grads():
        H, cache = enc.forward(ids)
        logits = enc.mlm_logits(H)
        loss = float((H * R).sum())
        dlogits = np.zeros_like(logits)
        for (b, s), true_id in zip(mlm_pos, mlm_true):
            row = logits[b, s]
            m = row.max()
            lse = m + np.log(np.exp(row - m).sum())
            loss += lse - row[true_id]
            sm = np.exp(row - lse)
            sm[true_id] -= 1.0
            dlogits[b, s] = sm
        grads = zero_grads(enc.params)
        dH = R + enc.mlm_logits_backward(dlogits, H, grads)
        enc.backward(dH, cache, grads)
        return loss, grads

    def loss_only():
        H, _ = enc.forward(ids)
        logits = enc.mlm_logits(H)
        loss = float((H * R).sum())
        for (b, s), true_id in zip(mlm_pos, mlm_true):
            row = logits[b, s]
            m = row.max()
            loss += m + np.log(np.exp(row - m).sum()) - row[true_id]
        return loss

    _, grads = loss_and_grads()
    report = {}
    worst = 0.0
    for name in param_names(config):
        p = enc.params[name]
        numeric = np.zeros_like(p)
        flat_p = p.ravel()
        flat_n = numeric.ravel()
        for j in range(flat_p.size):
            orig = flat_p[j]
            flat_p[j] = orig + h
            up = loss_only()
            flat_p[j] = orig - h
            down = loss_only()
            flat_p[j] = orig
            flat_n[j] = (up - down) / (2.0 * h)
        err = float(relative_errors(grads[name], numeric).max())
        report[name] = err
        worst = max(worst, err)
    return {"per_group": report, "max_rel_error": worst, "ok": worst < tolerance}
