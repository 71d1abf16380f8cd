"""Acceptance criteria A1-A9, one PASS/FAIL line each.

Run with ``pytest -v tests/test_acceptance.py`` or ``python tests/test_acceptance.py``.
The end-to-end criteria (A4, A5) train full desk-preset models and take
several minutes each.
"""

import math
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))
from oracles import sparsemax_bruteforce  # noqa: E402

from schedsamp import autodiff as ad  # noqa: E402
from schedsamp.autodiff import Tensor  # noqa: E402
from schedsamp.config import RunConfig  # noqa: E402
from schedsamp.data import generate_task  # noqa: E402
from schedsamp.gradcheck import TOLERANCE, run_suite  # noqa: E402
from schedsamp.mixing import MixStrategy, sparsemax  # noqa: E402
from schedsamp.scheduling import TeacherForcingSchedule, learning_rate, tf_probability  # noqa: E402
from schedsamp.trainer import Trainer, build_model, load_datasets, train_loop  # noqa: E402
from schedsamp.transformer import Transformer, TransformerConfig  # noqa: E402

RESULTS = {}


def report(code, ok, detail, capsys=None):
    line = f"{code} {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[code] = ok
    if capsys is not None:
        with capsys.disabled():
            print("\n" + line)
    else:
        print(line)
    return ok


def desk(**flat):
    return RunConfig().with_overrides({k.replace("__", "."): v for k, v in flat.items()})


_DESK_DATA = None


def desk_data():
    global _DESK_DATA
    if _DESK_DATA is None:
        _DESK_DATA = load_datasets(RunConfig())
    return _DESK_DATA


# -- A1 -------------------------------------------------------------------------

def check_a1(capsys=None):
    t0 = time.perf_counter()
    train = desk_data()[0]
    base = Trainer(build_model(desk(train__mode="baseline"), len(train.tgt_vocab)), desk(train__mode="baseline"))
    reference = [base.train_step_baseline(base.next_batch(train)).loss for _ in range(100)]
    worst = 0.0
    for kind in ("argmax", "topk", "softmax", "gumbel", "sparsemax"):
        config = desk(mix__strategy=kind)
        trainer = Trainer(build_model(config, len(train.tgt_vocab)), config)
        one = TeacherForcingSchedule.constant(1.0)
        losses = [trainer.train_step_scheduled(trainer.next_batch(train), schedule=one).loss for _ in range(100)]
        worst = max(worst, max(abs(a - b) / abs(b) for a, b in zip(losses, reference)))
    elapsed = time.perf_counter() - t0
    return report("A1", worst <= 1e-9, f"max relative loss gap {worst:.1e} over 5 strategies x 100 steps "
                  f"(tolerance 1e-9, {elapsed:.0f} s)", capsys)


# -- A2 -------------------------------------------------------------------------

def check_a2(capsys=None):
    t0 = time.perf_counter()
    results = run_suite(range(100))
    elapsed = time.perf_counter() - t0
    groups = {}
    for name, err in results.items():
        g = name.split("/")[0]
        groups[g] = max(groups.get(g, 0.0), err)
    failing = sorted(n for n, e in results.items() if e > TOLERANCE)
    detail = ", ".join(f"{g} {e:.1e}" for g, e in groups.items())
    detail += f" (tolerance {TOLERANCE:g}, {elapsed:.0f} s)"
    if failing:
        detail += " failing: " + ", ".join(failing)
    return report("A2", not failing and elapsed < 120, detail, capsys)


# -- A3 -------------------------------------------------------------------------

def check_a3(capsys=None):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        z = rng.normal(size=int(rng.integers(1, 7))) * rng.choice([0.1, 1.0, 5.0])
        worst = max(worst, float(np.abs(sparsemax(z).data - sparsemax_bruteforce(z)).max()))
    worked = (sparsemax([0.5, 0.5]).data.tolist() == [0.5, 0.5]
              and sparsemax([2.0, 0.0]).data.tolist() == [1.0, 0.0]
              and sparsemax([1.2, 1.0, -5.0]).data.tolist() == [0.6, 0.4, 0.0])
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and worked and elapsed < 10
    return report("A3", ok, f"max abs gap to support-set oracle {worst:.1e} on 1000 vectors, worked values "
                  f"{'exact' if worked else 'WRONG'} ({elapsed:.1f} s)", capsys)


# -- A4 -------------------------------------------------------------------------

def run_preset(config, out_dir):
    t0 = time.perf_counter()
    rep = train_loop(config, out_dir, datasets=desk_data())
    return rep, time.perf_counter() - t0


def check_a4(capsys=None):
    ok = True
    parts = []
    with tempfile.TemporaryDirectory() as tmp:
        for mode in ("baseline", "scheduled"):
            rep, elapsed = run_preset(desk(train__mode=mode), Path(tmp) / mode)
            test = rep["test"]
            good = test["token_acc"] >= 0.99 and test["bleu"] >= 99 and elapsed <= 600
            ok &= good
            parts.append(f"{mode}: test acc {test['token_acc']:.4f} bleu {test['bleu']:.2f} "
                         f"(best step {rep['best_step']}, {elapsed:.0f} s)")
    return report("A4", ok, "; ".join(parts), capsys)


# -- A5 -------------------------------------------------------------------------

A5_STEPS = 2000


def check_a5(capsys=None):
    """Directional only: argmax mixing should not beat the dense mixes on dev accuracy."""
    accs = {}
    with tempfile.TemporaryDirectory() as tmp:
        for kind in ("argmax", "softmax", "gumbel", "sparsemax"):
            config = desk(task__kind="reverse", mix__strategy=kind, schedule__epsilon=0.0, schedule__c=1 / 1000,
                          train__max_steps=A5_STEPS)
            data = load_datasets(config)
            rep = train_loop(config, Path(tmp) / kind, datasets=data)
            accs[kind] = rep["dev"]["token_acc"]
    ok = all(accs["argmax"] <= accs[k] for k in ("softmax", "gumbel", "sparsemax"))
    detail = ", ".join(f"{k} {v:.4f}" for k, v in accs.items())
    return report("A5", ok, f"reverse task dev accuracy, {A5_STEPS} steps, eps 0, c 1/1000: {detail} "
                  f"(reported, non-blocking)", capsys)


# -- A6 -------------------------------------------------------------------------

def check_a6(capsys=None):
    rng = np.random.default_rng(6)
    worst_causal = worst_pad = worst_path = 0.0
    for m in range(50):
        heads = int(rng.choice([1, 2, 4]))
        cfg = TransformerConfig(n_layers=int(rng.integers(1, 3)), n_heads=heads, d_model=heads * int(rng.choice([2, 4, 8])),
                                d_ff=int(rng.choice([8, 16, 32])), vocab_size=int(rng.integers(6, 20)), max_len=16)
        model = Transformer(cfg, seed=m)
        b, s, t = int(rng.integers(1, 4)), int(rng.integers(1, 8)), int(rng.integers(2, 9))
        src = rng.integers(4, cfg.vocab_size, size=(b, s))
        memory = model.encode(src)
        ids = rng.integers(3, cfg.vocab_size, size=(b, t))
        ids[:, 0] = cfg.bos_id
        ref = model.decode(ids, memory).data
        emb = ad.embedding_lookup(model.tgt_embed, ids).data
        worst_path = max(worst_path, float(np.abs(model.decode(Tensor(emb), memory).data - ref).max()))
        for j in range(t - 1):
            pert = emb.copy()
            pert[:, j + 1:] += rng.normal(size=pert[:, j + 1:].shape) * 5
            out = model.decode(Tensor(pert), memory).data
            worst_causal = max(worst_causal, float(np.abs(out[:, : j + 1] - ref[:, : j + 1]).max()))
        padded = np.concatenate([src, np.zeros((b, int(rng.integers(1, 5))), dtype=np.int64)], axis=1)
        mem_pad = model.encode(padded)
        worst_pad = max(worst_pad, float(np.abs(mem_pad.states.data[:, :s] - memory.states.data).max()),
                        float(np.abs(model.decode(ids, mem_pad).data - ref).max()))
    ok = max(worst_causal, worst_pad, worst_path) <= 1e-9
    return report("A6", ok, f"50 models: causality {worst_causal:.1e}, pad invariance {worst_pad:.1e}, "
                  f"id vs embedding path {worst_path:.1e} (tolerance 1e-9)", capsys)


# -- A7 -------------------------------------------------------------------------

def check_a7(capsys=None):
    data = desk_data()
    config = desk(mix__strategy="gumbel", train__max_steps=60, train__validation_interval=20)
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        train_loop(config, tmp / "a", datasets=data)
        train_loop(config, tmp / "b", datasets=data)
        identical = (tmp / "a" / "metrics.csv").read_bytes() == (tmp / "b" / "metrics.csv").read_bytes()

        vocab = len(data[0].tgt_vocab)
        straight = Trainer(build_model(config, vocab), config)
        trace = [straight.train_step(straight.next_batch(data[0])).loss for _ in range(60)]
        first = Trainer(build_model(config, vocab), config)
        for _ in range(30):
            first.train_step(first.next_batch(data[0]))
        first.save_checkpoint(tmp / "mid.ckpt")
        resumed = Trainer(build_model(config, vocab), config)
        resumed.load_checkpoint(tmp / "mid.ckpt")
        tail = [resumed.train_step(resumed.next_batch(data[0])).loss for _ in range(30)]
    gap = max(abs(a - b) / abs(b) for a, b in zip(tail, trace[30:]))
    ok = identical and gap <= 1e-6
    return report("A7", ok, f"metrics CSVs {'byte-identical' if identical else 'DIFFER'}; resume at step 30 "
                  f"max relative loss gap {gap:.1e} over 30 steps (tolerance 1e-6)", capsys)


# -- A8 -------------------------------------------------------------------------

def _random_schedule(rng):
    kind = rng.choice(["linear", "exponential", "inverse_sigmoid", "constant"])
    eps = float(rng.uniform(0, 0.99)) if rng.random() < 0.8 else 0.0
    pure = int(rng.integers(0, 50))
    if kind == "linear":
        return TeacherForcingSchedule(kind, eps, float(rng.uniform(0, 3)), float(10 ** rng.uniform(-6, -1)), pure)
    if kind == "exponential":
        return TeacherForcingSchedule(kind, eps, float(1 - 10 ** rng.uniform(-5, -0.5)), 0.0, pure)
    if kind == "inverse_sigmoid":
        return TeacherForcingSchedule(kind, eps, float(10 ** rng.uniform(0, 4)), 0.0, pure)
    return TeacherForcingSchedule.constant(float(rng.uniform(0, 1)))


def check_a8(capsys=None):
    lin = TeacherForcingSchedule("linear", epsilon=0.1, k=1.0, c=1e-5)
    spots = (tf_probability(lin, 0) == 1.0 and tf_probability(lin, 50_000) == 0.5
             and tf_probability(lin, 10 ** 6) == 0.1
             and tf_probability(TeacherForcingSchedule("exponential", k=0.9999), 0) == 1.0)
    rng = np.random.default_rng(8)
    steps = np.unique(np.concatenate([np.arange(200), np.geomspace(1, 10 ** 7, 200).astype(int)]))
    bad = 0
    for _ in range(10 ** 4):
        s = _random_schedule(rng)
        vals = [tf_probability(s, int(i)) for i in steps]
        lo = s.k if s.kind == "constant" else s.epsilon
        if any(a < b for a, b in zip(vals, vals[1:])) or min(vals) < lo or max(vals) > 1.0:
            bad += 1
    d, w = 64, 400
    branch = abs(w ** -0.5 - w * w ** -1.5)
    lr_ok = branch <= 1e-12 and abs(learning_rate(w, d, w) - 0.00625) <= 1e-12
    ok = spots and bad == 0 and lr_ok
    return report("A8", ok, f"spot values {'exact' if spots else 'WRONG'}; {bad} non-monotone of 10^4 random "
                  f"schedules; LR branch gap {branch:.1e}, LR(400) = {learning_rate(w, d, w)!r}", capsys)


# -- A9 -------------------------------------------------------------------------

def _mean_step_time(trainer, train, n, scheduled):
    for _ in range(3):  # warm-up
        (trainer.train_step_scheduled if scheduled else trainer.train_step_baseline)(trainer.next_batch(train))
    batches = [trainer.next_batch(train) for _ in range(n)]
    t0 = time.perf_counter()
    for batch in batches:
        (trainer.train_step_scheduled if scheduled else trainer.train_step_baseline)(batch)
    return (time.perf_counter() - t0) / n


def check_a9(capsys=None):
    train = desk_data()[0]
    vocab = len(train.tgt_vocab)
    config = desk()
    ratios = []
    for rep in range(3):
        base = _mean_step_time(Trainer(build_model(config, vocab), config), train, 30, False)
        sched = _mean_step_time(Trainer(build_model(config, vocab), config), train, 30, True)
        ratios.append(sched / base)
    ratio = float(np.median(ratios))
    return report("A9", ratio <= 2.5, f"scheduled/baseline step time {ratio:.2f} (median of 3 x 30 steps, "
                  f"softmax mix, bound 2.5)", capsys)


CHECKS = [check_a1, check_a2, check_a3, check_a4, check_a5, check_a6, check_a7, check_a8, check_a9]


@pytest.mark.slow
@pytest.mark.parametrize("check", CHECKS, ids=[f"A{i}" for i in range(1, 10)])
def test_acceptance(check, capsys):
    ok = check(capsys)
    if check is check_a5:
        return  # reported only
    assert ok


if __name__ == "__main__":
    for check in CHECKS:
        check()
    blocking = [k for k in RESULTS if k != "A5"]
    sys.exit(0 if all(RESULTS[k] for k in blocking) else 1)
