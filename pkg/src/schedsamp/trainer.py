"""Teacher-forced and two-pass scheduled-sampling training.

A scheduled step runs the decoder twice with one parameter set: pass 1 on
the gold prefix yields score rows, the gold inputs are then mixed with
embeddings built from those scores, and pass 2 on the mixed inputs produces
the logits that the loss is computed from.

Every random draw of a step comes from a stream derived from the run key and
the step number, so a resumed run replays exactly the batches, dropout masks
and mixing draws of an uninterrupted one.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .bleu import corpus_bleu
from .config import RunConfig
from .data import Batch, ParallelCorpus, Vocabulary, generate_task, iter_batches, load_corpus, sample_batch
from .errors import ContractError, NumericError
from .mixing import MixStrategy, build_second_pass_inputs, check_combination
from .scheduling import TeacherForcingSchedule, learning_rate, tf_probability
from .transformer import Transformer, TransformerConfig

log = logging.getLogger(__name__)

METRICS_HEADER = ["step", "split", "loss", "token_acc", "bleu", "tf_prob", "mix_fraction", "lr"]

# stream ids for per-step random generators
STREAM_BATCH, STREAM_DROPOUT, STREAM_DROPOUT_FIRST, STREAM_MIX = range(4)


def rng_key_from_seed(seed: int) -> bytes:
    return np.random.SeedSequence(seed).generate_state(8, np.uint32).tobytes()


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, ad.Tensor]) -> AdamState:
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()})


def adam_update(params: dict[str, ad.Tensor], state: AdamState, lr: float,
                beta1: float = 0.9, beta2: float = 0.998, eps: float = 1e-9) -> None:
    """One bias-corrected Adam step in place; parameters without grad are skipped."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_grad_norm(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    with np.errstate(over="ignore"):
        total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if not math.isfinite(total):
        raise NumericError(f"gradient norm overflowed ({total})")
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return total


@dataclass
class TrainState:
    step: int
    model: Transformer
    adam: AdamState
    rng_key: bytes
    best_validation_bleu: float = -1.0
    best_checkpoint_path: str | None = None


@dataclass
class StepResult:
    loss: float
    lr: float
    tf_prob: float = 1.0
    mix_fraction: float = 0.0
    grad_norm: float = 0.0


@dataclass
class EvalResult:
    loss: float
    token_acc: float
    bleu: float
    hypotheses: list = field(default_factory=list, repr=False)


class Trainer:
    """Owns one model and its optimizer state."""

    def __init__(self, model: Transformer, config: RunConfig | None = None, seed: int | None = None):
        self.config = config or RunConfig()
        self.model = model
        seed = self.config.train.seed if seed is None else seed
        self.state = TrainState(0, model, AdamState.zeros_like(model.params), rng_key_from_seed(seed))
        self.strategy: MixStrategy = self.config.strategy()
        self.schedule: TeacherForcingSchedule = self.config.tf_schedule()
        self.backprop_through_first: bool = self.config.mix.backprop_through_first

    # -- randomness ---------------------------------------------------------
    def stream(self, kind: int, step: int | None = None) -> np.random.Generator:
        step = self.state.step if step is None else step
        seq = np.random.SeedSequence(int.from_bytes(self.state.rng_key, "little"), spawn_key=(step, kind))
        return np.random.default_rng(seq)

    def next_batch(self, corpus: ParallelCorpus) -> Batch:
        return sample_batch(corpus, self.config.train.batch_size, self.stream(STREAM_BATCH))

    def current_lr(self, step: int | None = None) -> float:
        o = self.config.optim
        step = self.state.step + 1 if step is None else step
        return learning_rate(step, self.model.config.d_model, o.warmup_steps, o.lr_scale)

    def _dropout_rng(self, kind: int):
        return self.stream(kind) if self.model.config.dropout_rate > 0 else None

    # -- steps --------------------------------------------------------------
    def _apply(self, loss: ad.Tensor) -> tuple[float, float, float]:
        value = loss.item()
        self.model.zero_grad()
        o = self.config.optim
        try:
            loss.backward()
            norm = clip_grad_norm(self.model.parameters(), o.clip_norm)
        except NumericError as exc:
            raise NumericError(f"step {self.state.step}: {exc}") from None
        lr = self.current_lr()
        adam_update(self.model.params, self.state.adam, lr, o.beta1, o.beta2, o.eps)
        self.state.step += 1
        return value, lr, norm

    def _loss(self, logits: ad.Tensor, batch: Batch) -> ad.Tensor:
        return ad.cross_entropy(logits, batch.tgt_out, batch.tgt_pad_mask)

    def train_step_baseline(self, batch: Batch) -> StepResult:
        """Single teacher-forced pass, cross-entropy, Adam update."""
        rng = self._dropout_rng(STREAM_DROPOUT)
        try:
            memory = self.model.encode(batch.src, rng)
            loss = self._loss(self.model.decode(batch.tgt_in, memory, rng), batch)
        except NumericError as exc:
            raise NumericError(f"step {self.state.step}: {exc}") from None
        value, lr, norm = self._apply(loss)
        return StepResult(value, lr, grad_norm=norm)

    def scheduled_loss(self, batch: Batch, strategy: MixStrategy, tf_prob: float, backprop_through_first: bool,
                       draws=None, noise=None, first_pass_scores=None):
        """Two decoder passes sharing parameters; loss on pass-2 logits only.

        Returns (loss, mixed inputs). ``draws``/``noise`` pin the Bernoulli
        uniforms and Gumbel noise, otherwise they come from this step's stream.
        ``first_pass_scores`` replaces pass 1 with fixed scores; with the first
        pass detached this leaves the loss and its gradient unchanged.
        """
        check_combination(strategy, backprop_through_first)
        rng = self._dropout_rng(STREAM_DROPOUT)
        memory = self.model.encode(batch.src, rng)
        first_rng = self._dropout_rng(STREAM_DROPOUT_FIRST)
        if first_pass_scores is not None:
            scores = ad.as_tensor(first_pass_scores)
        elif backprop_through_first:
            scores = self.model.decode(batch.tgt_in, memory, first_rng)
        else:
            with ad.no_grad():
                scores = self.model.decode(batch.tgt_in, memory, first_rng)
        mixed = build_second_pass_inputs(batch.tgt_in, scores, tf_prob, strategy, self.stream(STREAM_MIX),
                                         self.model.tgt_embed, backprop_through_first, self.model.config.pad_id,
                                         draws=draws, noise=noise)
        logits = self.model.decode(mixed.embeddings, memory, rng)
        return self._loss(logits, batch), mixed

    def train_step_scheduled(self, batch: Batch, strategy: MixStrategy | None = None,
                             schedule: TeacherForcingSchedule | None = None,
                             backprop_through_first: bool | None = None) -> StepResult:
        strategy = strategy or self.strategy
        schedule = schedule or self.schedule
        bptf = self.backprop_through_first if backprop_through_first is None else backprop_through_first
        check_combination(strategy, bptf)
        step = self.state.step
        tf_prob = tf_probability(schedule, step)
        try:
            loss, mixed = self.scheduled_loss(batch, strategy, tf_prob, bptf)
        except NumericError as exc:
            raise NumericError(f"step {step}: {exc}") from None
        value, lr, norm = self._apply(loss)
        eligible = batch.tgt_in != self.model.config.pad_id
        eligible[:, 0] = False
        frac = float(mixed.mix_mask.sum() / max(eligible.sum(), 1))
        return StepResult(value, lr, tf_prob, frac, norm)

    def train_step(self, batch: Batch) -> StepResult:
        if self.config.train.mode == "baseline":
            return self.train_step_baseline(batch)
        return self.train_step_scheduled(batch)

    # -- evaluation ---------------------------------------------------------
    def evaluate(self, corpus: ParallelCorpus, batch_size: int | None = None, with_bleu: bool = True) -> EvalResult:
        """Teacher-forced loss and next-token accuracy, BLEU of greedy output."""
        if len(corpus) == 0:
            raise ContractError("cannot evaluate on an empty dataset")
        batch_size = batch_size or self.config.train.eval_batch_size
        total_loss = 0.0
        correct = count = 0
        hyps = []
        with ad.no_grad():
            for batch in iter_batches(corpus, batch_size):
                memory = self.model.encode(batch.src)
                logits = self.model.decode(batch.tgt_in, memory)
                live = ~batch.tgt_pad_mask
                n = int(live.sum())
                total_loss += self._loss(logits, batch).item() * n
                correct += int(((logits.data.argmax(-1) == batch.tgt_out) & live).sum())
                count += n
                if with_bleu:
                    hyps += self.model.greedy_decode(batch.src, 2 * batch.src.shape[1] + 10)
        bleu = 0.0
        if with_bleu:
            vocab = corpus.tgt_vocab
            bleu = corpus_bleu([vocab.decode(h) for h in hyps], [vocab.decode(r) for r in corpus.tgt])
        return EvalResult(total_loss / count, correct / count, bleu, hyps)

    # -- persistence --------------------------------------------------------
    def save_checkpoint(self, path) -> None:
        tensors = {}
        for name, p in self.model.params.items():
            tensors[f"param/{name}"] = p.data
        for name in self.model.params:
            tensors[f"adam.m/{name}"] = self.state.adam.m[name]
            tensors[f"adam.v/{name}"] = self.state.adam.v[name]
        tensors["meta/best_validation_bleu"] = np.array(self.state.best_validation_bleu)
        checkpoint.save(path, tensors, self.state.step, self.state.rng_key)

    def load_checkpoint(self, path) -> TrainState:
        tensors, step, key = checkpoint.load(path)
        params = {k[6:]: v for k, v in tensors.items() if k.startswith("param/")}
        self.model.load_state_dict(params)
        m = {k[7:]: v for k, v in tensors.items() if k.startswith("adam.m/")}
        v = {k[7:]: v for k, v in tensors.items() if k.startswith("adam.v/")}
        if set(m) != set(params) or set(v) != set(params):
            raise ContractError(f"{path}: Adam moments do not mirror parameters")
        self.state.step = step
        self.state.adam = AdamState(m, v, step)
        self.state.rng_key = key
        if "meta/best_validation_bleu" in tensors:
            self.state.best_validation_bleu = float(tensors["meta/best_validation_bleu"])
        return self.state


# -- whole runs -------------------------------------------------------------

def load_datasets(config: RunConfig):
    """(train, dev, test) corpora sharing the training vocabulary."""
    d = config.data
    if d.train_src:
        train = load_corpus(d.train_src, d.train_tgt, min_freq=d.min_freq, shared=d.shared_vocab)
        vocab = (train.src_vocab, train.tgt_vocab)
        dev = load_corpus(d.dev_src, d.dev_tgt, vocab) if d.dev_src else None
        test = load_corpus(d.test_src, d.test_tgt, vocab) if d.test_src else None
        return train, dev or train.subset(range(min(len(train), 200))), test
    t = config.task
    return generate_task(t.kind, t.vocab_size, t.min_len, t.max_len, t.n_train, t.n_dev, t.n_test, t.seed)


def build_model(config: RunConfig, vocab_size: int) -> Transformer:
    m = config.model
    tcfg = TransformerConfig(m.n_layers, m.n_heads, m.d_model, m.d_ff, vocab_size, m.max_len, m.dropout_rate,
                             m.share_embeddings, m.share_decoder_out_embedding)
    return Transformer(tcfg, seed=config.train.seed)


def _row(step, split, result: EvalResult, tf_prob, mix_fraction, lr):
    return [step, split, repr(float(result.loss)), repr(float(result.token_acc)), repr(float(result.bleu)),
            repr(float(tf_prob)), repr(float(mix_fraction)), repr(float(lr))]


def train_loop(config: RunConfig, out_dir, resume: str | None = None, datasets=None) -> dict:
    """Train to ``train.max_steps``, validating every ``validation_interval`` steps.

    Writes config.toml, vocab.txt, metrics.csv, best.ckpt, last.ckpt and
    report.json into ``out_dir``; returns the report.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, dev, test = datasets or load_datasets(config)
    vocab = train.tgt_vocab
    if train.src_vocab != train.tgt_vocab:
        raise ContractError("the transformer uses one shared vocabulary; set data.shared_vocab = true")
    config.save(out / "config.toml")
    vocab.save(out / "vocab.txt")
    trainer = Trainer(build_model(config, len(vocab)), config)
    best_path = out / "best.ckpt"
    metrics_path = out / "metrics.csv"
    tc = config.train

    if resume:
        trainer.load_checkpoint(resume)
        mode = "a"
    else:
        mode = "w"
    with open(metrics_path, mode, newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if not resume:
            writer.writerow(METRICS_HEADER)
        best_step = None

        def validate(tf_prob, mix_fraction, lr):
            nonlocal best_step
            res = trainer.evaluate(dev)
            writer.writerow(_row(trainer.state.step, "dev", res, tf_prob, mix_fraction, lr))
            fh.flush()
            log.info("step %d dev loss %.4f acc %.4f bleu %.2f", trainer.state.step, res.loss, res.token_acc, res.bleu)
            if res.bleu > trainer.state.best_validation_bleu:
                trainer.state.best_validation_bleu = res.bleu
                trainer.state.best_checkpoint_path = str(best_path)
                best_step = trainer.state.step
                trainer.save_checkpoint(best_path)

        if not resume:
            validate(tf_probability(trainer.schedule, 0) if tc.mode == "scheduled" else 1.0, 0.0, 0.0)
        fractions = []
        last = None
        while trainer.state.step < tc.max_steps:
            last = trainer.train_step(trainer.next_batch(train))
            fractions.append(last.mix_fraction)
            if trainer.state.step % tc.validation_interval == 0:
                validate(last.tf_prob, float(np.mean(fractions)), last.lr)
                fractions = []
    trainer.save_checkpoint(out / "last.ckpt")

    report = {
        "mode": tc.mode,
        "strategy": str(trainer.strategy) if tc.mode == "scheduled" else None,
        "backprop_through_first": trainer.backprop_through_first if tc.mode == "scheduled" else None,
        "steps": trainer.state.step,
        "best_step": best_step,
        "best_checkpoint": trainer.state.best_checkpoint_path,
        "best_dev_bleu": trainer.state.best_validation_bleu,
    }
    if best_path.exists():
        best = Trainer(build_model(config, len(vocab)), config)
        best.load_checkpoint(best_path)
        for split, corpus in (("dev", dev), ("test", test)):
            if corpus is not None and len(corpus):
                r = best.evaluate(corpus)
                report[split] = {"loss": r.loss, "token_acc": r.token_acc, "bleu": r.bleu}
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report
