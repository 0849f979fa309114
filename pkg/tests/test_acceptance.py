"""Acceptance criteria, one test each, at the stated tolerances.

Every test records a ``criterion N: PASS|FAIL ...`` line; the lines are
printed in the pytest terminal summary and when this file is run directly.
"""

import math
import time

import numpy as np
import pytest

from rseq import numerics as nx
from rseq.checkpoint import checkpoint_bytes, load_checkpoint, save_checkpoint
from rseq.config import load_run_config
from rseq.data import Batch
from rseq.layers import CELL_GATES, init_layer, local_rnn_forward, multi_head_attention
from rseq.model import ModelConfig, RTransformerModel, cross_entropy_loss, model_forward, param_count
from rseq.numerics import Rng
from rseq.tasks import build_task
from rseq.training import OptimizerConfig, TrainState, evaluate, lr_on_plateau, train_epoch, train_step
from rseq.verify import run_gradcheck

import oracles
from test_layers import jitter
from test_model import closed_form_params

RESULTS: dict[int, str] = {}
KINDS = sorted(CELL_GATES)


def report(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(RESULTS[n])
    assert ok, RESULTS[n]


def random_layer(rng, kind=None, d=None, k=None, M=None):
    k = k or [1, 2, 4][int(rng.integers(0, 3))]
    d = d or k * int(rng.integers(2, 5))
    M = M or int(rng.integers(1, 9))
    kind = kind or KINDS[int(rng.integers(0, 3))]
    return jitter(init_layer(rng, d, k, 2 * d, M, kind), rng)


# 1 -------------------------------------------------------------------------------

def test_criterion_01_gradient_suite():
    cfg = load_run_config("gradcheck_tiny")
    start = time.perf_counter()
    rep = run_gradcheck(num_layers=cfg.num_layers, d_model=cfg.d_model, window=cfg.window,
                        num_heads=cfg.num_heads, d_ff=cfg.d_ff, seq_len=cfg.seq_len, seeds=range(10))
    secs = time.perf_counter() - start
    worst = max(rep.worst.values())
    ok = rep.passed and worst < 1e-4 and secs < 60 and len(rep.worst) >= 17
    report(1, ok, f"worst rel err {worst:.2e} over {len(rep.worst)} groups x 3 cells x 10 seeds, {secs:.1f}s")


# 2 -------------------------------------------------------------------------------

def test_criterion_02_causality():
    failures = 0
    for case in range(20):
        rng = Rng(200 + case)
        k = [1, 2, 4][int(rng.integers(0, 3))]
        cfg = ModelConfig(num_layers=int(rng.integers(1, 4)), d_model=4 * k, num_heads=k, d_ff=16,
                          window=int(rng.integers(1, 9)), cell_kind=KINDS[case % 3], vocab_size=13)
        model = RTransformerModel(cfg, rng)
        for _, t in model.named_parameters():
            if t.ndim == 1:
                t.data = (t.data + rng.normal(t.shape, 0.3)).astype(t.dtype)
        T = int(rng.integers(2, 25))
        ids = rng.integers(0, 13, (2, T))
        j = int(rng.integers(1, T))
        alt = ids.copy()
        alt[:, j] = (alt[:, j] + rng.integers(1, 13, 2)) % 13
        if not np.array_equal(model(ids).data[:, :j], model(alt).data[:, :j]):
            failures += 1
    report(2, failures == 0, f"{20 - failures}/20 triples bitwise identical before the perturbed position")


# 3 -------------------------------------------------------------------------------

def test_criterion_03_window_locality():
    failures = 0
    for case in range(20):
        rng = Rng(300 + case)
        p = random_layer(rng)
        M = p.window
        T = int(rng.integers(M + 1, M + 20))
        t = int(rng.integers(M, T))  # 0-based, so positions 0..t-M are outside the window
        s = int(rng.integers(0, t - M + 1))
        x = rng.normal((T, p.d_model)).astype(np.float32)
        y = x.copy()
        y[s] += rng.normal(p.d_model).astype(np.float32) * 3
        a = local_rnn_forward(p, nx.Tensor(x)).data[t]
        b = local_rnn_forward(p, nx.Tensor(y)).data[t]
        failures += not np.array_equal(a, b)
    report(3, failures == 0, f"{20 - failures}/20 windows bitwise unchanged")


# 4 -------------------------------------------------------------------------------

def test_criterion_04_local_rnn_oracle():
    worst = {"f32": 0.0, "f64": 0.0}
    for case in range(20):
        for prec in worst:
            with nx.precision(prec):
                rng = Rng(400 + case)
                p = random_layer(rng)
                T = int(rng.integers(1, 33))
                x = rng.normal((T, p.d_model)).astype(nx.get_default_dtype())
                out = local_rnn_forward(p, nx.Tensor(x)).data
            a = lambda t: np.asarray(t.data, np.float64)  # noqa: E731
            ref = oracles.local_rnn_windows(p.rnn.cell_kind, a(p.rnn.w_ih), a(p.rnn.w_hh), a(p.rnn.b),
                                            x.astype(np.float64), p.window)
            worst[prec] = max(worst[prec], float(np.max(np.abs(out - ref))))
    ok = worst["f32"] < 1e-6 and worst["f64"] < 1e-12
    report(4, ok, f"max abs diff f32 {worst['f32']:.2e} (< 1e-6), f64 {worst['f64']:.2e} (< 1e-12), 20 cases")


# 5 -------------------------------------------------------------------------------

def test_criterion_05_prefix_equivalence():
    worst = 0.0
    for case in range(10):
        for kind in ("vanilla", "gru"):
            rng = Rng(500 + case)
            M = int(rng.integers(1, 9))
            p = init_layer(rng, 8, 2, 16, M, kind)  # zero biases: step(0, 0) == 0
            x = rng.normal((M + 4, 8)).astype(np.float32)
            out = local_rnn_forward(p, nx.Tensor(x)).data
            a = lambda t: np.asarray(t.data, np.float64)  # noqa: E731
            for t in range(M):
                ref = oracles.run_rnn(kind, a(p.rnn.w_ih), a(p.rnn.w_hh), a(p.rnn.b), x[:t + 1])
                worst = max(worst, float(np.max(np.abs(out[t] - ref))))
    report(5, worst < 1e-6, f"max |h_t - fullRNN| over t <= M: {worst:.2e} (vanilla and gru, 10 seeds)")


# 6 -------------------------------------------------------------------------------

def test_criterion_06_attention_permutation():
    rng = Rng(600)
    p = random_layer(rng, d=16, k=4)
    T = 12
    h = rng.normal((T, 16)).astype(np.float32)
    last = multi_head_attention(p.attn, nx.Tensor(h)).data[-1]
    worst = 0.0
    for _ in range(10):
        perm = np.concatenate([rng.permutation(T - 1), [T - 1]])
        out = multi_head_attention(p.attn, nx.Tensor(h[perm])).data[-1]
        worst = max(worst, float(np.max(np.abs(out - last))))
    report(6, worst < 1e-5, f"max abs diff at last position over 10 permutations: {worst:.2e}")


# 7 -------------------------------------------------------------------------------

def test_criterion_07_overfit():
    run = load_run_config("char_lm_smoke")
    task = build_task(run)
    model = RTransformerModel(task.model_config, Rng(run.seed))
    stream = task.info["streams"]["train"]
    ids = np.stack([stream[i * 1000:i * 1000 + 33] for i in range(4)])
    batch = Batch(ids[:, :-1], ids[:, 1:], "next_step")
    cfg = OptimizerConfig(kind="adam", lr=run.lr, clip_norm=run.clip_norm)
    state = TrainState(current_lr=cfg.lr, rng=Rng(run.seed).spawn(1))
    start = time.perf_counter()
    initial = cross_entropy_loss(model_forward(model, batch), batch.targets).item()
    nx.clear_tape()
    for _ in range(50):
        train_step(model, batch, state, cfg)
    with nx.no_grad():
        final = cross_entropy_loss(model_forward(model, batch), batch.targets).item()
    secs = time.perf_counter() - start
    ok = final < 0.2 * initial and secs < 120
    report(7, ok, f"loss {initial:.3f} -> {final:.3f} ({final / initial:.1%} of initial) in 50 steps, {secs:.1f}s")


# 8 -------------------------------------------------------------------------------

def test_criterion_08_copy_task():
    run = load_run_config("copy_smoke")
    assert (run.copy_payload, run.copy_blank, run.copy_symbols) == (10, 40, 8)
    task = build_task(run)
    model = RTransformerModel(task.model_config, Rng(run.seed))
    ocfg = run.optimizer_config()
    state = TrainState(current_lr=ocfg.lr, rng=Rng(run.seed).spawn(0xD50))
    start = time.perf_counter()
    recall = test_recall = 0.0
    while state.step < 5000:
        train_epoch(model, task.train_batches(state.epoch + 1), state, ocfg)
        val_loss, recall = evaluate(model, task.eval_batches["valid"])
        lr_on_plateau(state, val_loss, ocfg)
        if recall > 0.99:
            break
    _, test_recall = evaluate(model, task.eval_batches["test"])
    secs = time.perf_counter() - start
    ok = recall > 0.99 and test_recall > 0.99 and state.step <= 5000 and secs < 1800
    report(8, ok, f"recall accuracy {recall:.2%} (held-out test {test_recall:.2%}) after {state.step} steps, "
                  f"{secs:.0f}s")


# 9 -------------------------------------------------------------------------------

def test_criterion_09_char_lm():
    run = load_run_config("char_lm_smoke")
    assert run.max_epochs <= 10
    task = build_task(run)
    model = RTransformerModel(task.model_config, Rng(run.seed))
    ocfg = run.optimizer_config()
    state = TrainState(current_lr=ocfg.lr, rng=Rng(run.seed).spawn(0xD50))
    baseline = task.info["unigram_valid_nll"]
    start = time.perf_counter()
    best = math.inf
    while state.epoch < run.max_epochs:
        train_epoch(model, task.train_batches(state.epoch + 1), state, ocfg)
        val, _ = evaluate(model, task.eval_batches["valid"])
        lr_on_plateau(state, val, ocfg)
        best = min(best, val)
    secs = time.perf_counter() - start
    gain = 1 - best / baseline
    ok = gain >= 0.10 and secs < 1800
    report(9, ok, f"valid NLL {best:.3f} vs unigram {baseline:.3f} ({gain:.1%} better) in {state.epoch} epochs, "
                  f"{secs:.0f}s")


# 10 ------------------------------------------------------------------------------

# reference shapes (layers, hidden size)
REFERENCE = {"mnist_paper": (8, 32), "music_paper": (3, 160), "charlm_paper": (3, 512), "wordlm_paper": (3, 128)}
# input/output widths the reference datasets imply: 1 pixel / 10 digits, 88 piano keys,
# 50 characters, 10K words
IO = {
    "mnist_paper": dict(input_dim=1, task_kind="seq_classify", num_classes=10),
    "music_paper": dict(input_dim=88, task_kind="seq_classify", num_classes=88),
    "charlm_paper": dict(vocab_size=50),
    "wordlm_paper": dict(vocab_size=10000),
}


def test_criterion_10_config_fidelity():
    problems = []
    counts = {}
    for name, shape in REFERENCE.items():
        run = load_run_config(name)
        if (run.num_layers, run.d_model) != shape:
            problems.append(f"{name} is {run.num_layers}/{run.d_model}")
        mc = ModelConfig(num_layers=run.num_layers, d_model=run.d_model, num_heads=run.num_heads, d_ff=run.d_ff,
                         window=run.window, cell_kind=run.cell_kind, dropout_rate=run.dropout,
                         tie_embeddings=run.tie_embeddings, **IO[name])
        model = RTransformerModel(mc, Rng(0))
        if len(model.layers) != shape[0]:
            problems.append(f"{name} built {len(model.layers)} layers")
        counts[name] = param_count(model)
        if counts[name] != closed_form_params(mc):
            problems.append(f"{name} param_count {counts[name]} != {closed_form_params(mc)}")
    detail = ", ".join(f"{n.split('_')[0]} {REFERENCE[n][0]}/{REFERENCE[n][1]}={counts.get(n, 0):,}" for n in REFERENCE)
    report(10, not problems, "; ".join(problems) or f"layers/hidden and closed-form counts match: {detail}")


# 11 ------------------------------------------------------------------------------

def _char_setup():
    run = load_run_config("char_lm_smoke")
    task = build_task(run)
    ocfg = run.optimizer_config()
    model = RTransformerModel(task.model_config, Rng(run.seed))
    state = TrainState(current_lr=ocfg.lr, rng=Rng(run.seed).spawn(0xD50))
    stream = [b for epoch in range(1, 4) for b in task.train_batches(epoch)]
    return model, state, ocfg, stream


def test_criterion_11_determinism_and_persistence(tmp_path):
    trajectories = []
    for _ in range(2):
        model, state, ocfg, stream = _char_setup()
        trajectories.append(np.array([train_step(model, b, state, ocfg)[0] for b in stream[:100]]))
    repro = float(np.max(np.abs(trajectories[0] - trajectories[1])))

    model, state, ocfg, stream = _char_setup()
    straight = [train_step(model, b, state, ocfg)[0] for b in stream[:20]]
    model, state, ocfg, _ = _char_setup()
    first = [train_step(model, b, state, ocfg)[0] for b in stream[:10]]
    save_checkpoint(model, state, tmp_path / "mid.rseq")
    model2, state2 = load_checkpoint(tmp_path / "mid.rseq")
    same_tensors = all(a.data.tobytes() == b.data.tobytes()
                       for (_, a), (_, b) in zip(model.named_parameters(), model2.named_parameters()))
    same_bytes = checkpoint_bytes(model2, state2) == (tmp_path / "mid.rseq").read_bytes()
    rest = [train_step(model2, b, state2, ocfg)[0] for b in stream[10:20]]
    resume = float(np.max(np.abs(np.array(straight[10:]) - np.array(rest))))
    first_ok = np.array_equal(first, straight[:10])

    ok = repro < 1e-6 and resume < 1e-6 and same_tensors and same_bytes and first_ok
    report(11, ok, f"100-step trajectory diff {repro:.1e}; resume diff over 10 steps {resume:.1e}; "
                   f"round trip bitwise {'yes' if same_tensors and same_bytes else 'NO'}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
