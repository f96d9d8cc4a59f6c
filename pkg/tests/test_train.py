"""Training harness: schedules, optimizer, objective assembly, evaluation
reports, and the end-to-end loop on tiny corpora."""

import csv
import json

import numpy as np
import pytest

from mixrec import tensor as T
from mixrec.config import ModelConfig, RouterConfig, TrainConfig
from mixrec.model import Model, load_checkpoint
from mixrec.train import (
    BOS,
    DOC_SEP,
    AdamW,
    WindowSampler,
    clip_gradients,
    cosine_lr,
    depth_annotation,
    encode_text,
    eval_batches,
    eval_report,
    evaluate,
    kv_similarity_report,
    load_corpus,
    make_synthetic_corpus,
    render_token,
    run_training,
    split_stream,
    train_step,
    trapezoid_lr,
)
from mixrec.tensor import Tensor

from conftest import central_diff_grad, rel_err

# -- learning-rate schedules -------------------------------------------------


def test_trapezoid_lr_hand_values():
    # warm-up 10, plateau until 80, cool-down 20, peak 2.0
    assert trapezoid_lr(0, 10, 80, 20, 2.0) == 0.0
    assert trapezoid_lr(10, 10, 80, 20, 2.0) == 2.0
    assert trapezoid_lr(50, 10, 80, 20, 2.0) == 2.0
    assert trapezoid_lr(90, 10, 80, 20, 2.0) == pytest.approx(1.0)  # halfway down
    assert trapezoid_lr(5, 10, 80, 20, 2.0) == pytest.approx(1.0)   # halfway up


def test_trapezoid_lr_exhausted():
    with pytest.raises(ValueError):
        trapezoid_lr(100, 10, 80, 20, 2.0)


def test_trapezoid_zero_warmup():
    assert trapezoid_lr(0, 0, 10, 5, 1.0) == 1.0


def test_cosine_lr_endpoints():
    assert cosine_lr(5, 100, 5, 1.0, 0.1) == pytest.approx(1.0)
    assert cosine_lr(99, 100, 5, 1.0, 0.1) < 0.11
    mid = cosine_lr(52, 100, 5, 1.0, 0.0)
    assert 0.4 < mid < 0.6


# -- corpus handling ---------------------------------------------------------


def test_encode_and_load_corpus(tmp_path):
    p = tmp_path / "c.txt"
    p.write_bytes(b"aaa\n\nbb")
    stream = load_corpus(p)
    expected = [BOS, 97, 97, 97, DOC_SEP, BOS, 98, 98, DOC_SEP]
    assert stream.tolist() == expected
    assert encode_text("ab").tolist() == [97, 98]
    assert render_token(97) == "a"
    assert render_token(BOS) == "<bos>"
    assert render_token(DOC_SEP) == "<sep>"
    assert render_token(0) == "\\x00"


def test_make_synthetic_corpus(tmp_path):
    p1 = make_synthetic_corpus(tmp_path / "a.txt", n_bytes=200_000, seed=5)
    p2 = make_synthetic_corpus(tmp_path / "b.txt", n_bytes=200_000, seed=5)
    d1, d2 = p1.read_bytes(), p2.read_bytes()
    assert d1 == d2                       # deterministic given the seed
    assert abs(len(d1) - 200_000) < 20_000
    assert b"\n\n" in d1                  # document boundaries present
    assert make_synthetic_corpus(tmp_path / "c.txt", n_bytes=200_000, seed=6).read_bytes() != d1


def test_window_sampler_and_eval_batches():
    stream = np.arange(500, dtype=np.int64) % 258
    train, held = split_stream(stream, eval_fraction=0.2)
    assert train.size == 400 and held.size == 100
    sampler = WindowSampler(train, seq_len=16, batch_size=4, rng=np.random.default_rng(0))
    x, y = sampler.next()
    assert x.shape == (4, 16) and y.shape == (4, 16)
    np.testing.assert_array_equal(x[:, 1:], y[:, :-1])  # shifted by one
    ev = list(eval_batches(held, seq_len=16, n_windows=6, batch_size=4))
    total = sum(b[0].shape[0] for b in ev)
    assert total == 6
    ev2 = list(eval_batches(held, seq_len=16, n_windows=6, batch_size=4))
    for (x1, y1), (x2, y2) in zip(ev, ev2):
        np.testing.assert_array_equal(x1, x2)


def test_window_sampler_rejects_short_stream():
    with pytest.raises(ValueError):
        WindowSampler(np.arange(10), seq_len=16, batch_size=2, rng=np.random.default_rng(0))


# -- optimizer ---------------------------------------------------------------


def test_adamw_converges_on_quadratic():
    w = Tensor(np.array([[10.0]]), requires_grad=True)
    opt = AdamW({"w": w}, betas=(0.9, 0.95), weight_decay=0.0)
    for _ in range(300):
        opt.zero_grad()
        loss = ((w + (-3.0)) * (w + (-3.0))).sum()
        loss.backward()
        opt.step(0.1)
    assert abs(w.data.item() - 3.0) < 1e-2


def test_adamw_decoupled_decay_matrix_only():
    mat = Tensor(np.full((2, 2), 4.0), requires_grad=True)
    gain = Tensor(np.full(2, 4.0), requires_grad=True)
    opt = AdamW({"m": mat, "g": gain}, betas=(0.9, 0.95), weight_decay=0.5)
    mat.grad = np.zeros_like(mat.data)
    gain.grad = np.zeros_like(gain.data)
    opt.step(0.1)
    np.testing.assert_allclose(mat.data, 4.0 * (1 - 0.1 * 0.5))  # decayed
    np.testing.assert_allclose(gain.data, 4.0)                   # gains exempt


def test_grad_clip_scales_to_max_norm():
    a = Tensor(np.zeros((2, 2)), requires_grad=True)
    b = Tensor(np.zeros(2), requires_grad=True)
    a.grad = np.full((2, 2), 3.0)
    b.grad = np.full(2, 4.0)
    norm = clip_gradients({"a": a, "b": b}, max_norm=1.0)
    assert norm == pytest.approx(np.sqrt(9 * 4 + 16 * 2))
    total = np.sqrt((a.grad ** 2).sum() + (b.grad ** 2).sum())
    assert total == pytest.approx(1.0)
    norm2 = clip_gradients({"a": a, "b": b}, max_norm=10.0)  # already small: untouched
    assert norm2 == pytest.approx(1.0)
    assert np.sqrt((a.grad ** 2).sum() + (b.grad ** 2).sum()) == pytest.approx(1.0)


# -- objective assembly ------------------------------------------------------


def _toy_model(family="expert_choice", scheme="aux_loss", dtype="float64", nr=2,
               seed=3, **router_kw):
    cfg = ModelConfig(
        vocab_size=258, d_model=16, n_layers=nr + 2, n_heads=2, n_kv_heads=1,
        d_head=8, d_inter=24, sharing="middle_cycle", n_recursions=nr,
        ctx_len=32, dtype=dtype,
    )
    rcfg = None
    if family is not None:
        rcfg = RouterConfig(family=family, scheme=scheme, **router_kw)
    return Model(cfg, rcfg, seed=seed)


def _toy_batch(rng, B=2, L=12, vocab=258):
    x = rng.integers(0, vocab, size=(B, L), dtype=np.int64)
    y = rng.integers(0, vocab, size=(B, L), dtype=np.int64)
    return x, y


def test_train_step_degenerate_objective_is_lm_only():
    model = _toy_model(scheme="aux_loss", aux_coeff=0.0, z_coeff=0.0)
    opt = AdamW(model.named_parameters())
    x, y = _toy_batch(np.random.default_rng(0))
    logs, _ = train_step(model, opt, x, y, lr=1e-3, grad_clip=1.0)
    assert logs["loss_total"] == pytest.approx(logs["loss_lm"], abs=1e-12)


def test_train_step_component_sum_matches_total():
    model = _toy_model(scheme="aux_loss", z_coeff=0.01)
    opt = AdamW(model.named_parameters())
    x, y = _toy_batch(np.random.default_rng(1))
    logs, _ = train_step(model, opt, x, y, lr=1e-3, grad_clip=1.0)
    parts = logs["loss_lm"] + logs["loss_aux"] + logs["loss_z"]
    assert logs["loss_total"] == pytest.approx(parts, abs=1e-6)
    assert logs["loss_aux"] > 0 and logs["loss_z"] > 0


def test_train_step_nonfinite_abort_names_component():
    model = _toy_model()
    model.blocks[0].wq.data[:] = np.inf
    opt = AdamW(model.named_parameters())
    x, y = _toy_batch(np.random.default_rng(2))
    with pytest.raises(RuntimeError, match="non-finite"):
        train_step(model, opt, x, y, lr=1e-3, grad_clip=1.0)


def test_repeating_corpus_convergence_smoke(tmp_path):
    p = tmp_path / "ab.txt"
    p.write_bytes(b"ab" * 4000)
    stream = load_corpus(p)
    model = _toy_model(dtype="float32")
    tcfg = TrainConfig(
        corpus=str(p), seq_len=16, batch_size=4, steps=50, lr_max=3e-3,
        warmup_steps=5, cooldown_steps=10, eval_every=1000, eval_windows=4,
        log_every=10, seed=0,
    ).validate()
    summary = run_training(model, tcfg, stream=stream)
    assert summary["nll_final"] < summary["nll_step0"]


def test_model_loss_gradients_match_finite_differences():
    """Full objective (LM + router terms) against central differences on a
    sample of coordinates from every parameter, double precision."""
    model = _toy_model(dtype="float64")
    rng = np.random.default_rng(7)
    x, y = _toy_batch(rng, B=2, L=8)
    params = model.named_parameters()

    def loss_value():
        out = model.forward(x)
        lm = T.cross_entropy(out.logits, y.reshape(-1))
        from mixrec.routing import combined_router_loss
        extra, _ = combined_router_loss(out.routing, model.router_cfg)
        total = lm if extra is None else lm + extra
        return total

    loss = loss_value()
    loss.backward()
    grads = {name: p.grad.copy() for name, p in params.items()}

    # max-norm relative error over sampled coordinates of every parameter
    fd_vals, ad_vals = [], []
    for name, p in params.items():
        flat = p.data.reshape(-1)
        gflat = grads[name].reshape(-1)
        idx = rng.choice(flat.size, size=min(6, flat.size), replace=False)
        for i in idx:
            keep = flat[i]
            eps = 1e-5 * max(1.0, abs(keep))
            flat[i] = keep + eps
            up = float(loss_value().data)
            flat[i] = keep - eps
            dn = float(loss_value().data)
            flat[i] = keep
            fd_vals.append((up - dn) / (2 * eps))
            ad_vals.append(gflat[i])
    fd_vals = np.asarray(fd_vals)
    ad_vals = np.asarray(ad_vals)
    err = np.abs(fd_vals - ad_vals).max() / max(np.abs(ad_vals).max(), 1e-8)
    assert err < 1e-3


# -- evaluation and reports --------------------------------------------------


def _eval_set(model, seed=0, n=3):
    rng = np.random.default_rng(seed)
    return [_toy_batch(rng, B=2, L=12) for _ in range(n)]


def test_evaluate_depth_limit_full_equals_unclamped():
    model = _toy_model(dtype="float64", nr=3)
    ev = _eval_set(model)
    base = evaluate(model, ev)
    clamped = evaluate(model, ev, depth_limit=3)
    assert base == clamped  # limit at N_r changes nothing, bit for bit


def test_eval_report_fields_and_ranges():
    model = _toy_model(dtype="float64", nr=2)
    ev = _eval_set(model)
    rep = eval_report(model, ev)
    d = rep.to_dict()
    assert len(d["per_depth_nll"]) == 2
    assert d["per_depth_nll"][-1] == pytest.approx(d["nll"])
    for key in ("dead_token_ratio", "sampling_accuracy"):
        assert 0.0 <= d[key] <= 1.0
    assert d["max_violation"] >= 0.0
    assert d["entropy"] >= 0.0
    assert "k_cosine" in d["kv_analysis"]


def test_eval_report_router_free_model():
    model = _toy_model(family=None, dtype="float64")
    rep = eval_report(model, _eval_set(model))
    assert len(rep.per_depth_nll) == 2  # recursion depths still clampable
    assert rep.sampling_accuracy == 1.0


def test_kv_similarity_report_shapes():
    model = _toy_model(dtype="float64")
    ids = np.random.default_rng(0).integers(0, 258, size=(2, 10))
    rep = kv_similarity_report(model, ids)
    L = len(model.schedule)
    assert np.asarray(rep["k_cosine"]).shape == (L, L)
    assert np.asarray(rep["v_cosine"]).shape == (L, L)
    assert len(rep["k_norms"]) == L and len(rep["v_norms"]) == L
    kc = np.asarray(rep["k_cosine"])
    np.testing.assert_allclose(np.diag(kc), 1.0, atol=1e-9)
    assert np.all(np.asarray(rep["k_norms"]) > 0)


def test_depth_annotation_basics():
    model = _toy_model(dtype="float64", nr=2)
    assert depth_annotation(model, "") == []
    ann = depth_annotation(model, "hello")
    assert len(ann) == 6  # BOS + five bytes
    assert ann[0][0] == "<bos>"
    assert all(1 <= d <= 2 for _, d in ann)
    assert depth_annotation(model, "hello") == ann  # deterministic


def test_depth_annotation_histogram_matches_eval():
    model = _toy_model(dtype="float64", nr=2)
    text = "histogram consistency"
    ann = depth_annotation(model, text)
    toks = np.concatenate([[BOS], encode_text(text)])
    out = model.forward(toks[None, :])
    from mixrec.routing import token_depths
    depths = token_depths(out.routing)
    hist_ann = np.bincount([d for _, d in ann], minlength=3)
    hist_eval = np.bincount(depths, minlength=3)
    np.testing.assert_array_equal(hist_ann, hist_eval)


# -- full loop ---------------------------------------------------------------


def _quick_cfg(corpus_path, steps=30, seed=0):
    return TrainConfig(
        corpus=str(corpus_path), seq_len=24, batch_size=4, steps=steps,
        lr_max=2e-3, warmup_steps=3, cooldown_steps=6, log_every=10,
        eval_every=20, eval_windows=4, seed=seed,
    ).validate()


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    path = tmp_path_factory.mktemp("corpus") / "small.txt"
    return make_synthetic_corpus(path, n_bytes=60_000, seed=11)


def test_run_training_artifacts(tmp_path, small_corpus):
    model = _toy_model(dtype="float32")
    out = tmp_path / "run"
    summary = run_training(model, _quick_cfg(small_corpus), out_dir=out)
    assert (out / "metrics.csv").exists()
    assert (out / "report.json").exists()
    assert (out / "checkpoint.mxrc").exists()
    with open(out / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and "loss_total" in rows[0] and "lr" in rows[0]
    for row in rows:
        total = float(row["loss_total"])
        parts = float(row["loss_lm"]) + float(row["loss_aux"]) + float(row["loss_z"])
        assert total == pytest.approx(parts, abs=1e-6)
    report = json.loads((out / "report.json").read_text())
    assert report["nll"] == pytest.approx(summary["nll_final"])

    # restored weights reproduce the eval NLL bit for bit (float32 storage)
    restored, _ = load_checkpoint(out / "checkpoint.mxrc")
    stream = load_corpus(small_corpus)
    _, held = split_stream(stream)
    ev = list(eval_batches(held, 24, 4, 4))
    assert evaluate(restored, ev) == evaluate(model, ev)


def test_run_training_deterministic(small_corpus):
    runs = []
    for _ in range(2):
        model = _toy_model(dtype="float64", seed=5)
        summary = run_training(model, _quick_cfg(small_corpus, steps=12, seed=9))
        runs.append(summary)
    assert runs[0]["nll_final"] == runs[1]["nll_final"]
    assert runs[0]["rows"][-1] == runs[1]["rows"][-1]


def test_run_training_token_choice_balance(small_corpus):
    model = _toy_model(family="token_choice", scheme="balance_loss", dtype="float32")
    summary = run_training(model, _quick_cfg(small_corpus, steps=12))
    assert any(r.get("loss_balance", 0.0) != 0.0 for r in summary["rows"])


def test_run_training_loss_free_bias_moves(small_corpus):
    model = _toy_model(family="token_choice", scheme="loss_free", dtype="float32")
    run_training(model, _quick_cfg(small_corpus, steps=12))
    assert np.any(model.router.bias != 0.0)
