"""Embedding mixes fed to the second decoder pass.

Each mixer maps first-pass vocabulary scores (last axis = vocabulary) and the
target embedding table to one vector per position. All mixers work on a
single score row or on any batch of rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, UnsupportedCombinationError

MIX_KINDS = ("argmax", "topk", "softmax", "gumbel", "sparsemax")
DENSE_KINDS = ("softmax", "gumbel", "sparsemax")

GUMBEL_CLAMP = 1e-12


@dataclass(frozen=True)
class MixStrategy:
    kind: str = "softmax"
    alpha: float = 1.0
    k: int = 5

    def __post_init__(self):
        if self.kind not in MIX_KINDS:
            raise ConfigError(f"unknown mix strategy {self.kind!r}; expected one of {', '.join(MIX_KINDS)}")
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if int(self.k) != self.k or self.k < 1:
            raise ConfigError(f"k must be a positive integer, got {self.k}")

    @property
    def differentiable(self) -> bool:
        return self.kind in DENSE_KINDS

    def __str__(self) -> str:
        if self.kind in ("softmax", "gumbel"):
            return f"{self.kind}(alpha={self.alpha:g})"
        if self.kind == "topk":
            return f"topk(k={self.k})"
        return self.kind


@dataclass
class MixedInputs:
    """Second-pass decoder inputs [B, T, d] and where predictions were used."""

    embeddings: Tensor
    mix_mask: np.ndarray

    @property
    def mix_fraction(self) -> float:
        return float(self.mix_mask.mean()) if self.mix_mask.size else 0.0


def _scores(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _combine(weights: Tensor, table: Tensor) -> Tensor:
    table = ad.as_tensor(table)
    if weights.ndim == 1:
        return ad.matmul(weights.reshape(1, -1), table).reshape(table.shape[1])
    return ad.matmul(weights, table)


def mix_argmax(scores, table) -> Tensor:
    """Embedding row of the best-scoring token (lowest id on ties)."""
    ids = np.argmax(_scores(scores).data, axis=-1)
    return ad.embedding_lookup(table, ids)


def topk_weights(scores: np.ndarray, k: int) -> np.ndarray:
    """Softmax over the k highest scores per row, zero elsewhere."""
    scores = np.asarray(scores, dtype=np.float64)
    k = min(int(k), scores.shape[-1])
    # stable sort on negated scores keeps the lowest id first among ties
    top = np.argsort(-scores, axis=-1, kind="stable")[..., :k]
    picked = np.take_along_axis(scores, top, axis=-1)
    e = np.exp(picked - picked.max(axis=-1, keepdims=True))
    weights = np.zeros_like(scores)
    np.put_along_axis(weights, top, e / e.sum(axis=-1, keepdims=True), axis=-1)
    return weights


def mix_topk(scores, table, k: int = 5) -> Tensor:
    """Weighted average of the k best rows; weights carry no gradient."""
    return _combine(Tensor(topk_weights(_scores(scores).data, k)), table)


def mix_softmax(scores, table, alpha: float = 1.0) -> Tensor:
    return _combine(ad.softmax_rows(ad.scale(_scores(scores), alpha)), table)


def sample_gumbel(shape, rng: np.random.Generator) -> np.ndarray:
    u = np.clip(rng.random(shape), GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP)
    return -np.log(-np.log(u))


def mix_gumbel(scores, table, alpha: float = 1.0, rng: np.random.Generator | None = None, noise=None) -> Tensor:
    """Softmax mix of the noise-perturbed scores, weights ~ exp(alpha * (s + G)).

    Pass ``noise`` to fix G (gradient checks); otherwise it is drawn from ``rng``.
    """
    scores = _scores(scores)
    if noise is None:
        if rng is None:
            raise ContractError("mix_gumbel needs either rng or noise")
        noise = sample_gumbel(scores.shape, rng)
    return mix_softmax(ad.add(scores, np.asarray(noise, dtype=np.float64)), table, alpha)


def _sparsemax_np(z: np.ndarray) -> np.ndarray:
    # Threshold and difference are formed in extended precision (where the
    # platform has it) so that the result is the rounded exact projection
    # of the float64 input instead of carrying a rounded partial sum.
    z = np.asarray(z, dtype=np.float64).astype(np.longdouble)
    srt = -np.sort(-z, axis=-1)
    cumsum = np.cumsum(srt, axis=-1)
    ks = np.arange(1, z.shape[-1] + 1, dtype=np.longdouble)
    support = 1.0 + ks * srt > cumsum
    k = support.sum(axis=-1, keepdims=True)
    tau = (np.take_along_axis(cumsum, k - 1, axis=-1) - 1.0) / k
    return np.maximum(z - tau, 0.0).astype(np.float64)


def sparsemax(z) -> Tensor:
    """Euclidean projection of each row of ``z`` onto the probability simplex."""
    z = _scores(z)
    p = _sparsemax_np(z.data)
    support = p > 0

    def rule(g):
        g_supp = np.where(support, g, 0.0)
        avg = g_supp.sum(axis=-1, keepdims=True) / support.sum(axis=-1, keepdims=True)
        return (np.where(support, g - avg, 0.0),)

    return ad.record(p, (z,), rule, "sparsemax")


def mix_sparsemax(scores, table) -> Tensor:
    return _combine(sparsemax(scores), table)


def mix(strategy: MixStrategy, scores, table, rng: np.random.Generator | None = None, noise=None) -> Tensor:
    """Apply ``strategy`` to score rows; dispatch helper for the trainer."""
    if strategy.kind == "argmax":
        return mix_argmax(scores, table)
    if strategy.kind == "topk":
        return mix_topk(scores, table, strategy.k)
    if strategy.kind == "softmax":
        return mix_softmax(scores, table, strategy.alpha)
    if strategy.kind == "gumbel":
        return mix_gumbel(scores, table, strategy.alpha, rng=rng, noise=noise)
    return mix_sparsemax(scores, table)


def check_combination(strategy: MixStrategy, backprop_through_first: bool) -> None:
    if backprop_through_first and not strategy.differentiable:
        raise UnsupportedCombinationError(
            f"backprop through the first pass needs a dense mix ({', '.join(DENSE_KINDS)}), got {strategy.kind}"
        )


def build_second_pass_inputs(
    input_ids,
    first_pass_scores: Tensor,
    tf_prob: float,
    strategy: MixStrategy,
    rng: np.random.Generator,
    table: Tensor,
    backprop_through_first: bool = False,
    pad_id: int = 0,
    draws: np.ndarray | None = None,
    noise: np.ndarray | None = None,
) -> MixedInputs:
    """Mix gold decoder inputs with first-pass predictions.

    ``input_ids`` [B, T] are the teacher-forced decoder inputs (BOS first).
    The input at position p >= 1 may be replaced by the mix of the score row
    at p - 1, which is the row that predicted that token. Position 0 and
    padding always stay gold. A position uses the model mix when its uniform
    draw is >= ``tf_prob``; uniforms come from ``rng`` in row-major order,
    then Gumbel noise if needed. ``draws``/``noise`` override the rng.
    """
    if not 0.0 <= tf_prob <= 1.0:
        raise ContractError(f"tf_prob must lie in [0, 1], got {tf_prob}")
    check_combination(strategy, backprop_through_first)
    ids = np.atleast_2d(np.asarray(input_ids, dtype=np.int64))
    scores = first_pass_scores if first_pass_scores.ndim == 3 else first_pass_scores.reshape(1, *first_pass_scores.shape)
    if scores.shape[:2] != ids.shape:
        raise ContractError(f"scores {scores.shape} do not align with inputs {ids.shape}")
    if scores.shape[-1] != table.shape[0]:
        raise ContractError(f"score vocab {scores.shape[-1]} != embedding rows {table.shape[0]}")

    u = rng.random(ids.shape) if draws is None else np.asarray(draws, dtype=np.float64)
    eligible = ids != pad_id
    eligible[:, 0] = False
    mix_mask = eligible & (u >= tf_prob)

    gold = ad.embedding_lookup(table, ids)
    if not mix_mask.any():
        return MixedInputs(gold, mix_mask)

    b, t, v = scores.shape
    src = scores[:, :-1] if backprop_through_first else ad.detach(scores.data[:, :-1])
    if strategy.kind == "gumbel" and noise is None:
        noise = sample_gumbel((b, t - 1, v), rng)
    predicted = mix(strategy, src, table, rng=rng, noise=noise)
    predicted = ad.concat([gold[:, :1], predicted], axis=1)
    return MixedInputs(ad.where(mix_mask[..., None], predicted, gold), mix_mask)
