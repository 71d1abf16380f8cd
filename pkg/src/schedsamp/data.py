"""Vocabularies, parallel corpora, synthetic tasks and batching."""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .transformer import BOS_ID, EOS_ID, PAD_ID, UNK_ID

RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")
TASK_KINDS = ("copy", "reverse", "sort")


class Vocabulary:
    """Token string <-> id map with ids 0-3 reserved for pad/bos/eos/unk."""

    def __init__(self, tokens=()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def encode(self, tokens) -> list[int]:
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.itos[i] for i in ids]

    @classmethod
    def numeric(cls, size: int) -> Vocabulary:
        """Vocabulary whose content token for id i is the string ``str(i)``."""
        return cls(str(i) for i in range(len(RESERVED), size))

    @classmethod
    def build(cls, sentences, min_freq: int = 1) -> Vocabulary:
        counts = Counter(tok for sent in sentences for tok in sent)
        # frequency first, then token text, for a deterministic order
        ordered = sorted((t for t, n in counts.items() if n >= min_freq and t not in RESERVED),
                         key=lambda t: (-counts[t], t))
        return cls(ordered)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.itos[len(RESERVED):]) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> Vocabulary:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(line for line in lines if line)


@dataclass
class ParallelCorpus:
    src: list[list[int]]
    tgt: list[list[int]]
    src_vocab: Vocabulary
    tgt_vocab: Vocabulary = field(default=None)

    def __post_init__(self):
        if self.tgt_vocab is None:
            self.tgt_vocab = self.src_vocab
        if len(self.src) != len(self.tgt):
            raise DataError(f"{len(self.src)} source sentences vs {len(self.tgt)} targets")
        for side, sents, vocab in (("source", self.src, self.src_vocab), ("target", self.tgt, self.tgt_vocab)):
            for n, sent in enumerate(sents):
                if not sent:
                    raise DataError(f"empty {side} sentence at line {n + 1}")
                if max(sent) >= len(vocab):
                    raise DataError(f"{side} line {n + 1}: id {max(sent)} outside vocabulary of {len(vocab)}")

    def __len__(self) -> int:
        return len(self.src)

    def subset(self, indices) -> ParallelCorpus:
        return ParallelCorpus([self.src[i] for i in indices], [self.tgt[i] for i in indices],
                              self.src_vocab, self.tgt_vocab)

    def write(self, src_path, tgt_path) -> None:
        write_sentences(src_path, (self.src_vocab.decode(s) for s in self.src))
        write_sentences(tgt_path, (self.tgt_vocab.decode(s) for s in self.tgt))


def tokenize(line: str) -> list[str]:
    return line.split()


def detokenize(tokens) -> str:
    return " ".join(tokens)


def write_sentences(path, sentences) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sent in sentences:
            fh.write(detokenize(sent) + "\n")


def read_sentences(path) -> list[list[str]]:
    with open(path, encoding="utf-8") as fh:
        return [tokenize(line) for line in fh]


def task_target(kind: str, src: list[int]) -> list[int]:
    if kind == "copy":
        return list(src)
    if kind == "reverse":
        return list(reversed(src))
    if kind == "sort":
        return sorted(src)
    raise ConfigError(f"unknown task {kind!r}; expected one of {', '.join(TASK_KINDS)}")


def _split_of(seq: tuple[int, ...], cut_train: float, cut_dev: float) -> int:
    digest = hashlib.blake2b(bytes(seq), digest_size=8).digest()
    u = int.from_bytes(digest, "little") / 2.0 ** 64
    return 0 if u < cut_train else 1 if u < cut_dev else 2


def generate_task(kind: str, vocab_size: int, min_len: int, max_len: int,
                  n_train: int, n_dev: int, n_test: int, seed: int = 0):
    """Random source sequences with copy/reverse/sort targets.

    Returns (train, dev, test). Each source sequence is assigned to a split by
    hashing it, so the splits never share a source; sequences are unique
    within a split. Content ids run from 4 to ``vocab_size - 1``.
    """
    if kind not in TASK_KINDS:
        raise ConfigError(f"unknown task {kind!r}; expected one of {', '.join(TASK_KINDS)}")
    if vocab_size < len(RESERVED) + 1:
        raise ConfigError(f"vocab_size must be >= {len(RESERVED) + 1}, got {vocab_size}")
    if not 1 <= min_len <= max_len:
        raise ConfigError(f"need 1 <= min_len <= max_len, got {min_len}, {max_len}")
    if vocab_size > 256:
        raise ConfigError("synthetic tasks support vocab_size <= 256")
    wanted = (n_train, n_dev, n_test)
    total = sum(wanted)
    if total == 0:
        raise ConfigError("at least one split must be non-empty")
    n_content = vocab_size - len(RESERVED)
    space = sum(n_content ** n for n in range(min_len, max_len + 1))
    if space < 2 * total:
        raise ConfigError(f"only {space} distinct sources for {total} requested examples")
    cut_train = n_train / total
    cut_dev = (n_train + n_dev) / total

    rng = np.random.default_rng(seed)
    splits: list[dict[tuple[int, ...], None]] = [{}, {}, {}]
    attempts = 0
    while any(len(s) < n for s, n in zip(splits, wanted)):
        attempts += 1
        if attempts > 100 * total + 1000:
            raise ConfigError(f"could not fill disjoint splits {wanted} from a space of {space} sources")
        length = int(rng.integers(min_len, max_len + 1))
        seq = tuple(int(x) for x in rng.integers(len(RESERVED), vocab_size, size=length))
        part = _split_of(seq, cut_train, cut_dev)
        if len(splits[part]) < wanted[part]:
            splits[part].setdefault(seq, None)
    vocab = Vocabulary.numeric(vocab_size)
    out = []
    for part in splits:
        src = [list(s) for s in part]
        out.append(ParallelCorpus(src, [task_target(kind, s) for s in src], vocab))
    return tuple(out)


def load_corpus(src_path, tgt_path, vocab: Vocabulary | tuple[Vocabulary, Vocabulary] | None = None,
                min_freq: int = 1, shared: bool = True) -> ParallelCorpus:
    """Read line-aligned whitespace-tokenized files.

    Without ``vocab`` a vocabulary is built from these files (joint when
    ``shared``), dropping tokens rarer than ``min_freq``. Tokens missing from
    the vocabulary map to the unk id.
    """
    src_tok = read_sentences(src_path)
    tgt_tok = read_sentences(tgt_path)
    if len(src_tok) != len(tgt_tok):
        raise DataError(f"{src_path} has {len(src_tok)} lines but {tgt_path} has {len(tgt_tok)}; "
                        f"first unmatched line is {min(len(src_tok), len(tgt_tok)) + 1}")
    for name, sents in ((src_path, src_tok), (tgt_path, tgt_tok)):
        for n, sent in enumerate(sents):
            if not sent:
                raise DataError(f"{name}: empty line {n + 1}")
    if vocab is None:
        if shared:
            src_vocab = tgt_vocab = Vocabulary.build(src_tok + tgt_tok, min_freq)
        else:
            src_vocab, tgt_vocab = Vocabulary.build(src_tok, min_freq), Vocabulary.build(tgt_tok, min_freq)
    elif isinstance(vocab, tuple):
        src_vocab, tgt_vocab = vocab
    else:
        src_vocab = tgt_vocab = vocab
    return ParallelCorpus([src_vocab.encode(s) for s in src_tok], [tgt_vocab.encode(t) for t in tgt_tok],
                          src_vocab, tgt_vocab)


@dataclass
class Batch:
    """Right-padded id matrices.

    ``tgt`` rows are BOS + sentence + EOS + padding; the decoder reads
    ``tgt_in`` (all but the last column) and predicts ``tgt_out``.
    """

    src: np.ndarray
    tgt: np.ndarray

    @property
    def src_pad_mask(self) -> np.ndarray:
        return self.src == PAD_ID

    @property
    def tgt_in(self) -> np.ndarray:
        return self.tgt[:, :-1]

    @property
    def tgt_out(self) -> np.ndarray:
        return self.tgt[:, 1:]

    @property
    def tgt_pad_mask(self) -> np.ndarray:
        return self.tgt_out == PAD_ID

    def __len__(self) -> int:
        return self.src.shape[0]


def pad_batch(src: list[list[int]], tgt: list[list[int]]) -> Batch:
    s = np.full((len(src), max(map(len, src))), PAD_ID, dtype=np.int64)
    t = np.full((len(tgt), max(map(len, tgt)) + 2), PAD_ID, dtype=np.int64)
    for i, (a, b) in enumerate(zip(src, tgt)):
        s[i, : len(a)] = a
        t[i, 0] = BOS_ID
        t[i, 1 : len(b) + 1] = b
        t[i, len(b) + 1] = EOS_ID
    return Batch(s, t)


def iter_batches(corpus: ParallelCorpus, batch_size: int):
    for start in range(0, len(corpus), batch_size):
        idx = range(start, min(start + batch_size, len(corpus)))
        yield pad_batch([corpus.src[i] for i in idx], [corpus.tgt[i] for i in idx])


def sample_batch(corpus: ParallelCorpus, batch_size: int, rng: np.random.Generator) -> Batch:
    idx = rng.choice(len(corpus), size=min(batch_size, len(corpus)), replace=False)
    return pad_batch([corpus.src[i] for i in idx], [corpus.tgt[i] for i in idx])
