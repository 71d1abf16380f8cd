"""Small pre-norm transformer encoder-decoder on top of the autodiff engine.

The decoder accepts either token ids or word-level input embeddings, so a
second decoder pass can run on a mix of gold and predicted embeddings with
the very same parameters.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DimensionError, SequenceLengthError

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3


@dataclass
class TransformerConfig:
    n_layers: int = 2
    n_heads: int = 2
    d_model: int = 64
    d_ff: int = 128
    vocab_size: int = 16
    max_len: int = 32
    dropout_rate: float = 0.0
    share_embeddings: bool = True
    share_decoder_out_embedding: bool = True
    pad_id: int = PAD_ID
    bos_id: int = BOS_ID
    eos_id: int = EOS_ID

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.d_model % 2:
            raise ConfigError(f"d_model must be even for sinusoidal positions, got {self.d_model}")
        ids = (self.pad_id, self.bos_id, self.eos_id)
        if len(set(ids)) != 3 or max(ids) >= self.vocab_size or min(ids) < 0:
            raise ConfigError(f"pad/bos/eos ids {ids} must be distinct and < vocab_size {self.vocab_size}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if min(self.n_layers, self.n_heads, self.d_ff, self.max_len) < 1:
            raise ConfigError("n_layers, n_heads, d_ff and max_len must be positive")

    @classmethod
    def desk(cls, vocab_size: int = 16, **overrides) -> TransformerConfig:
        return cls(vocab_size=vocab_size, **overrides)

    @classmethod
    def table1(cls, vocab_size: int, dropout_rate: float = 0.2) -> TransformerConfig:
        """Full-size hyperparameters used for the DE-EN runs."""
        return cls(n_layers=6, n_heads=8, d_model=512, d_ff=2048, vocab_size=vocab_size,
                   max_len=256, dropout_rate=dropout_rate)

    def to_dict(self) -> dict:
        return asdict(self)


def positional_encoding(max_len: int, d_model: int) -> np.ndarray:
    if d_model % 2:
        raise ConfigError(f"positional encoding needs even d_model, got {d_model}")
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    freq = np.power(10000.0, np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    table = np.zeros((max_len, d_model))
    table[:, 0::2] = np.sin(pos / freq)
    table[:, 1::2] = np.cos(pos / freq)
    return table


def causal_mask(n: int) -> np.ndarray:
    """Boolean [n, n]; entry (i, j) allows attention iff j <= i."""
    return np.tril(np.ones((n, n), dtype=bool))


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return ad.multiply(x, keep)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, weight), bias)


def multi_head_attention(queries, keys, values, mask, n_heads: int, params) -> Tensor:
    """Scaled dot-product attention over ``n_heads`` heads.

    queries [B, Tq, d], keys/values [B, Tk, d]; mask broadcastable to
    [B, 1, Tq, Tk] with True = may attend. ``params`` maps wq, bq, wk, wv,
    bv, wo, bo to tensors. Keys carry no bias: a key bias shifts every score
    of a query by the same amount, which the softmax cancels exactly.
    """
    queries, keys, values = ad.as_tensor(queries), ad.as_tensor(keys), ad.as_tensor(values)
    b, tq, d = queries.shape
    tk = keys.shape[1]
    if keys.shape[-1] != d or values.shape[-1] != d or values.shape[1] != tk:
        raise DimensionError(f"attention: q {queries.shape}, k {keys.shape}, v {values.shape}")
    dk = d // n_heads

    def heads(x, w, bias, t):
        proj = ad.matmul(x, params[w]) if bias is None else linear(x, params[w], params[bias])
        return proj.reshape(b, t, n_heads, dk).transpose(0, 2, 1, 3)

    q = heads(queries, "wq", "bq", tq)
    k = heads(keys, "wk", None, tk)
    v = heads(values, "wv", "bv", tk)
    scores = ad.scale(q @ k.transpose(0, 1, 3, 2), 1.0 / math.sqrt(dk))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim == 2:
            mask = mask[None, None]
        elif mask.ndim == 3:
            mask = mask[:, None]
    weights = ad.softmax_rows(scores, mask)
    ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(b, tq, d)
    return linear(ctx, params["wo"], params["bo"])


@dataclass
class Memory:
    """Encoder output [B, S, d] with the source padding mask [B, S] (True = pad)."""

    states: Tensor
    src_pad_mask: np.ndarray

    def __len__(self) -> int:
        return self.states.shape[1]


class Transformer:
    """Encoder-decoder whose parameters live in a flat name -> Tensor dict."""

    def __init__(self, config: TransformerConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self._pe = positional_encoding(config.max_len, config.d_model)
        self._init_params(np.random.default_rng(seed))

    # -- parameters --------------------------------------------------------
    def _init_params(self, rng):
        c = self.config
        d = c.d_model

        def xavier(fan_in, fan_out):
            lim = math.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-lim, lim, size=(fan_in, fan_out))

        def add(name, value):
            self.params[name] = Tensor(value, requires_grad=True, name=name)

        def attn(prefix):
            for w in ("q", "k", "v", "o"):
                add(f"{prefix}.w{w}", xavier(d, d))
                if w != "k":
                    add(f"{prefix}.b{w}", np.zeros(d))

        def norm(prefix):
            add(f"{prefix}.gain", np.ones(d))
            add(f"{prefix}.bias", np.zeros(d))

        def ffn(prefix):
            add(f"{prefix}.w1", xavier(d, c.d_ff))
            add(f"{prefix}.b1", np.zeros(c.d_ff))
            add(f"{prefix}.w2", xavier(c.d_ff, d))
            add(f"{prefix}.b2", np.zeros(d))

        # The output layer reads unit-variance layer-norm states, so an
        # embedding std of s / sqrt(d) gives initial logits of std s and an
        # initial loss near ln V + s^2 / 2; s = 0.5 keeps that within 10% of
        # ln V for V >= 7.
        std = 0.5 * d ** -0.5
        add("tgt_embed", rng.normal(0.0, std, size=(c.vocab_size, d)))
        if not c.share_embeddings:
            add("src_embed", rng.normal(0.0, std, size=(c.vocab_size, d)))
        for i in range(c.n_layers):
            norm(f"enc.{i}.ln1")
            attn(f"enc.{i}.self")
            norm(f"enc.{i}.ln2")
            ffn(f"enc.{i}.ffn")
        norm("enc.ln_final")
        for i in range(c.n_layers):
            norm(f"dec.{i}.ln1")
            attn(f"dec.{i}.self")
            norm(f"dec.{i}.ln2")
            attn(f"dec.{i}.cross")
            norm(f"dec.{i}.ln3")
            ffn(f"dec.{i}.ffn")
        norm("dec.ln_final")
        if not c.share_decoder_out_embedding:
            add("generator.weight", rng.normal(0.0, std, size=(c.vocab_size, d)))
        add("generator.bias", np.zeros(c.vocab_size))

    @property
    def src_embed(self) -> Tensor:
        return self.params["tgt_embed" if self.config.share_embeddings else "src_embed"]

    @property
    def tgt_embed(self) -> Tensor:
        return self.params["tgt_embed"]

    @property
    def generator_weight(self) -> Tensor:
        if self.config.share_decoder_out_embedding:
            return self.params["tgt_embed"]
        return self.params["generator.weight"]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _sub(self, prefix: str) -> dict[str, Tensor]:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    def _norm(self, x: Tensor, prefix: str) -> Tensor:
        return ad.add(ad.multiply(ad.layer_norm(x), self.params[prefix + ".gain"]), self.params[prefix + ".bias"])

    def _ffn(self, x: Tensor, prefix: str, rng) -> Tensor:
        p = self._sub(prefix)
        hidden = dropout(ad.relu(linear(x, p["w1"], p["b1"])), self.config.dropout_rate, rng)
        return linear(hidden, p["w2"], p["b2"])

    def _embed(self, word_vectors: Tensor, rng) -> Tensor:
        t = word_vectors.shape[1]
        if t > self.config.max_len:
            raise SequenceLengthError(f"length {t} exceeds max_len {self.config.max_len}")
        x = ad.add(ad.scale(word_vectors, math.sqrt(self.config.d_model)), self._pe[:t])
        return dropout(x, self.config.dropout_rate, rng)

    # -- forward -----------------------------------------------------------
    def encode(self, src_ids, rng: np.random.Generator | None = None) -> Memory:
        """Encode a [B, S] (or [S]) id array; ``rng`` enables dropout."""
        src = np.atleast_2d(np.asarray(src_ids, dtype=np.int64))
        self._check_ids(src)
        if src.shape[1] > self.config.max_len:
            raise SequenceLengthError(f"source length {src.shape[1]} exceeds max_len {self.config.max_len}")
        pad = src == self.config.pad_id
        key_mask = ~pad[:, None, None, :]
        rate = self.config.dropout_rate
        x = self._embed(ad.embedding_lookup(self.src_embed, src), rng)
        for i in range(self.config.n_layers):
            h = self._norm(x, f"enc.{i}.ln1")
            x = x + dropout(multi_head_attention(h, h, h, key_mask, self.config.n_heads, self._sub(f"enc.{i}.self")), rate, rng)
            x = x + dropout(self._ffn(self._norm(x, f"enc.{i}.ln2"), f"enc.{i}.ffn", rng), rate, rng)
        return Memory(self._norm(x, "enc.ln_final"), pad)

    def decode(self, inputs, memory: Memory, rng: np.random.Generator | None = None) -> Tensor:
        """Per-position vocabulary logits [B, T, V].

        ``inputs`` is either an integer id array [B, T] or a Tensor of
        word-level embeddings [B, T, d]; positional encoding and the
        sqrt(d_model) scale are applied here for both forms.
        """
        if isinstance(inputs, Tensor):
            if inputs.shape[-1] != self.config.d_model:
                raise DimensionError(f"decoder embeddings have dim {inputs.shape[-1]}, expected {self.config.d_model}")
            words = inputs if inputs.ndim == 3 else inputs.reshape(1, *inputs.shape)
        else:
            ids = np.atleast_2d(np.asarray(inputs, dtype=np.int64))
            self._check_ids(ids)
            words = ad.embedding_lookup(self.tgt_embed, ids)
        t = words.shape[1]
        rate = self.config.dropout_rate
        self_mask = causal_mask(t)[None, None]
        cross_mask = ~memory.src_pad_mask[:, None, None, :]
        x = self._embed(words, rng)
        for i in range(self.config.n_layers):
            h = self._norm(x, f"dec.{i}.ln1")
            x = x + dropout(multi_head_attention(h, h, h, self_mask, self.config.n_heads, self._sub(f"dec.{i}.self")), rate, rng)
            h = self._norm(x, f"dec.{i}.ln2")
            x = x + dropout(
                multi_head_attention(h, memory.states, memory.states, cross_mask, self.config.n_heads, self._sub(f"dec.{i}.cross")),
                rate, rng,
            )
            x = x + dropout(self._ffn(self._norm(x, f"dec.{i}.ln3"), f"dec.{i}.ffn", rng), rate, rng)
        x = self._norm(x, "dec.ln_final")
        return ad.add(ad.matmul(x, ad.transpose(self.generator_weight)), self.params["generator.bias"])

    def _check_ids(self, ids: np.ndarray) -> None:
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise ContractError(f"token ids must lie in [0, {self.config.vocab_size})")

    def greedy_decode(self, src_ids, max_len: int) -> list[list[int]]:
        """Greedy decoding for a batch of sources; ties go to the lowest id.

        Returns one id list per source, without BOS and EOS.
        """
        c = self.config
        src = np.atleast_2d(np.asarray(src_ids, dtype=np.int64))
        max_len = max(0, min(max_len, c.max_len - 1))
        with ad.no_grad():
            memory = self.encode(src)
            ys = np.full((src.shape[0], 1), c.bos_id, dtype=np.int64)
            done = np.zeros(src.shape[0], dtype=bool)
            for _ in range(max_len):
                logits = self.decode(ys, memory).data[:, -1]
                nxt = np.where(done, c.pad_id, logits.argmax(axis=-1))
                done |= nxt == c.eos_id
                ys = np.concatenate([ys, nxt[:, None]], axis=1)
                if done.all():
                    break
        out = []
        for row in ys[:, 1:]:
            seq = []
            for tok in row:
                if tok == c.eos_id:
                    break
                seq.append(int(tok))
            out.append(seq)
        return out

    # -- snapshots ---------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise ContractError(f"parameter names differ: {sorted(set(state) ^ set(self.params))}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise DimensionError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)
