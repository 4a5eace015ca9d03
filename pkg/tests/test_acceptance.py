"""Acceptance criteria, each at its stated tolerance.

Every test registers a one-line PASS/FAIL verdict (printed in the terminal
summary and on stdout) before asserting.
"""

import json
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_RESULTS, tiny_dataset, tiny_model
from test_metrics import bleu_oracle, meteor_oracle, random_pairs, rouge_oracle
from tinyvlm.cli import main as cli_main
from tinyvlm.data import corpus_words, synthesize_dataset
from tinyvlm.errors import CheckpointError
from tinyvlm.gradcheck import check_gradients
from tinyvlm.inference import generate_caption, generate_ids, load_checkpoint, save_checkpoint
from tinyvlm.language import Tokenizer
from tinyvlm.metrics import bleu, meteor, rouge_l
from tinyvlm.model import CaptionModel
from tinyvlm.tensor import (
    Tensor,
    concat,
    cross_entropy,
    default_dtype,
    embedding_lookup,
    gelu,
    layer_norm,
    matmul,
    no_grad,
    softmax_rows,
    stack,
)
from tinyvlm.training import CaptionDataset, TrainConfig, clip_gradients, cosine_lr, global_norm, run_stage

OVERFIT_SCENES = 8
OVERFIT_STAGE1_STEPS = 200
OVERFIT_STAGE2_STEPS = 300  # pilot: loss ~0.011 and 8/8 recovered on data seeds 0, 1, 2
OVERFIT_LR = 1e-3
OVERFIT_MAX_SEQ_LEN = 160


def verdict(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_RESULTS[n] = line
    print(line)


@pytest.fixture(scope="module")
def overfit():
    start = time.perf_counter()
    manifest = synthesize_dataset(0, OVERFIT_SCENES, "dense")
    model = CaptionModel.build(Tokenizer.from_texts(corpus_words()), seed=0, max_seq_len=OVERFIT_MAX_SEQ_LEN)
    ds = CaptionDataset.from_manifest(manifest, model, "overfit")
    r1 = run_stage(model, [ds], TrainConfig(stage=1, base_lr=OVERFIT_LR, total_steps=OVERFIT_STAGE1_STEPS))
    r2 = run_stage(model, [ds], TrainConfig(stage=2, base_lr=OVERFIT_LR, total_steps=OVERFIT_STAGE2_STEPS))
    return {"model": model, "manifest": manifest, "data": ds, "trace": r1.losses + r2.losses,
            "seconds": time.perf_counter() - start}


# -- 1 -------------------------------------------------------------------


# GELU's derivative vanishes here; within a few 1e-3 of it the O(h^2) truncation
# error of an h=1e-3 central difference exceeds 1e-4 of the (tiny) true gradient
GELU_STATIONARY = -0.7524614220710163
GELU_BAND = 5e-3


def _gelu_inputs(rng, shape):
    x = rng.uniform(-1, 1, shape)
    near = np.abs(x - GELU_STATIONARY) < GELU_BAND
    while near.any():
        x[near] = rng.uniform(-1, 1, near.sum())
        near = np.abs(x - GELU_STATIONARY) < GELU_BAND
    return x


def _op_cases(rng):
    def leaf(*shape):
        return Tensor(rng.uniform(-1, 1, shape), requires_grad=True)

    def weights(*shape):
        return Tensor(rng.uniform(-1, 1, shape))

    cases = {}
    a, b, w = leaf(4, 5), leaf(5, 4), weights(4, 4)
    cases["matmul"] = (lambda: (matmul(a, b) * w).sum(), [("a", a), ("b", b)])
    x, y, w2 = leaf(4, 8), leaf(4, 8), weights(4, 8)
    cases["add/sub/mul/neg"] = (lambda: ((x + y) * (x - y) * w2 + (-x)).sum(), [("x", x), ("y", y)])
    s, w3 = leaf(6, 6), weights(6, 6)
    cases["div/mean"] = (lambda: (s / 3.0 * w3).mean(), [("s", s)])
    ln_x, g, bias, w4 = leaf(4, 8), leaf(8), leaf(8), weights(4, 8)
    cases["layer_norm"] = (lambda: (layer_norm(ln_x, g, bias) * w4).sum(), [("x", ln_x), ("gain", g), ("bias", bias)])
    gx, w5 = Tensor(_gelu_inputs(rng, (4, 8)), requires_grad=True), weights(4, 8)
    cases["gelu"] = (lambda: (gelu(gx) * w5).sum(), [("x", gx)])
    sx, w6 = leaf(5, 8), weights(5, 8)
    mask = np.tril(np.ones((5, 8), dtype=bool), k=3)
    cases["masked softmax"] = (lambda: (softmax_rows(sx, mask) * w6).sum(), [("x", sx)])
    logits = leaf(8, 6)
    targets, lmask = rng.integers(0, 6, 8), np.array([1, 0, 1, 1, 1, 0, 1, 1], bool)
    cases["cross_entropy"] = (lambda: cross_entropy(logits, targets, lmask), [("logits", logits)])
    table, w7 = leaf(6, 8), weights(7, 8)
    ids = [0, 2, 2, 5, 1, 3, 2]
    cases["embedding_lookup"] = (lambda: (embedding_lookup(table, ids) * w7).sum(), [("table", table)])
    p, q, w8 = leaf(2, 3, 4), leaf(2, 3, 4), weights(4, 6, 2)
    cases["concat/stack/index/reshape/transpose"] = (
        lambda: (stack([concat([p, q], axis=1).transpose(2, 1, 0)] * 2)[1] * w8).sum()
        + p.reshape(6, 4)[1:4].sum(axis=0).sum(),
        [("p", p), ("q", q)],
    )
    return cases


def _gelu_band_error(h=1e-3):
    """Worst relative error inside the excluded band, against a five-point stencil (O(h^4))."""
    xs = np.linspace(GELU_STATIONARY - GELU_BAND, GELU_STATIONARY + GELU_BAND, 33)
    x = Tensor(xs.copy(), requires_grad=True)
    gelu(x).sum().backward()

    def f(v):
        return gelu(Tensor(v)).data

    numeric = (-f(xs + 2 * h) + 8 * f(xs + h) - 8 * f(xs - h) + f(xs - 2 * h)) / (12 * h)
    return float(np.max(np.abs(x.grad - numeric) / np.maximum(np.maximum(np.abs(x.grad), np.abs(numeric)), 1e-8)))


def test_criterion_01_gradient_suite():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    worst, failures, counts = 0.0, [], []
    with default_dtype(np.float64):
        for name, (fn, params) in _op_cases(rng).items():
            res = check_gradients(fn, params, coords_per_param=16, h=1e-3, min_total=32)
            counts.append(res.coordinates)
            worst = max(worst, res.max_rel_error)
            if res.coordinates < 32 or not res.passed(1e-4):
                failures.append(name)
        model = tiny_model(seed=2)
        for prm in model.parameters():
            prm.data = rng.uniform(-0.5, 0.5, prm.shape)
        ds = tiny_dataset(model, n=2)
        images = ds.images.astype(np.float64)
        res = check_gradients(lambda: model.loss(images, ds.instructions, ds.responses),
                              list(model.named_parameters()), coords_per_param=1, min_total=64)
        counts.append(res.coordinates)
        worst = max(worst, res.max_rel_error)
        if res.coordinates < 32 or not res.passed(1e-4):
            failures.append("encoder->projector->lm->loss")
        band = _gelu_band_error()
        if band >= 1e-4:
            failures.append("gelu near stationary point")
    seconds = time.perf_counter() - start
    ok = not failures and seconds < 60
    verdict(1, "gradient suite", ok, f"max rel err {worst:.2e} over {len(counts)} checks "
            f"(min {min(counts)} coords each), gelu inputs within {GELU_BAND} of x*={GELU_STATIONARY:.4f} "
            f"checked by 5-point stencil instead (max rel err {band:.1e}), {seconds:.1f}s; "
            f"failures: {failures or 'none'}")
    assert ok


# -- 2 -------------------------------------------------------------------


def test_criterion_02_freeze_invariant():
    start = time.perf_counter()
    model = CaptionModel.build(Tokenizer.from_texts(corpus_words()), seed=4, max_seq_len=OVERFIT_MAX_SEQ_LEN)
    ds = CaptionDataset.from_manifest(synthesize_dataset(11, 16, "short", source="alignment"), model)
    before = {c: model.checksum(c) for c in ("encoder", "projector", "lm")}
    run_stage(model, [ds], TrainConfig(stage=1, base_lr=1e-3, total_steps=50))
    after = {c: model.checksum(c) for c in before}
    seconds = time.perf_counter() - start
    ok = (after["encoder"] == before["encoder"] and after["lm"] == before["lm"]
          and after["projector"] != before["projector"] and seconds < 60)
    verdict(2, "stage-1 freeze", ok, f"encoder same={after['encoder'] == before['encoder']}, "
            f"lm same={after['lm'] == before['lm']}, projector changed={after['projector'] != before['projector']}, "
            f"{seconds:.1f}s")
    assert ok


# -- 3 -------------------------------------------------------------------


def test_criterion_03_uniform_loss():
    model = CaptionModel.build(Tokenizer.from_texts(corpus_words()), seed=0, max_seq_len=OVERFIT_MAX_SEQ_LEN)
    model.lm.head.weight.data[:] = 0
    model.lm.head.bias.data[:] = 0
    manifest = synthesize_dataset(5, 4, "dense")
    ds = CaptionDataset.from_manifest(manifest, model)
    with no_grad():
        value = model.loss(ds.images, ds.instructions, ds.responses).item()
    target = math.log(model.lm.config.vocab_size)
    ok = abs(value - target) < 1e-3
    verdict(3, "uniform objective", ok, f"loss {value:.6f} vs ln V {target:.6f} (|diff| {abs(value - target):.1e})")
    assert ok


# -- 4 -------------------------------------------------------------------


def test_criterion_04_causality():
    rng = np.random.default_rng(7)
    with default_dtype(np.float64):
        model = CaptionModel.build(Tokenizer.from_texts(corpus_words()), seed=3, max_seq_len=OVERFIT_MAX_SEQ_LEN)
        manifest = synthesize_dataset(2, 1, "short")
        ds = CaptionDataset.from_manifest(manifest, model)
        with no_grad():
            h_v = model.visual_tokens(ds.images)[0]
            seq = model.assemble(h_v, ds.instructions[0], ds.responses[0])
            base = model.lm(seq.embeddings).data
            violations = 0
            for _ in range(100):
                j = int(rng.integers(0, len(seq)))
                emb = seq.embeddings.data.copy()
                rows = rng.integers(j, len(seq), size=int(rng.integers(1, 4)))
                emb[rows] += rng.normal(0, 1, (len(rows), emb.shape[1]))
                out = model.lm(Tensor(emb)).data
                violations += not np.array_equal(out[:j], base[:j])
    ok = violations == 0
    verdict(4, "causality", ok, f"{violations}/100 trials changed an earlier logit (sequence length {len(seq)})")
    assert ok


# -- 5 -------------------------------------------------------------------


def test_criterion_05_overfit(overfit):
    model, manifest, ds = overfit["model"], overfit["manifest"], overfit["data"]
    with no_grad():
        loss = model.loss(ds.images, ds.instructions, ds.responses).item()
    recovered = sum(
        generate_caption(model, ds.images[i], s.instruction, 150) == s.response for i, s in enumerate(manifest)
    )
    seconds = overfit["seconds"]
    ok = loss < 0.05 and recovered >= 7 and seconds < 300
    verdict(5, "end-to-end overfit", ok, f"masked CE {loss:.4f} (< 0.05), {recovered}/8 captions verbatim (>= 7), "
            f"training {seconds:.0f}s (< 300)")
    assert ok


def test_overfit_loss_trend(overfit):
    trace = np.asarray(overfit["trace"])
    avg = lambda end: trace[end - 50 : end].mean()  # noqa: E731
    assert avg(400) < avg(100)


# -- 6 -------------------------------------------------------------------


def test_criterion_06_visual_grounding(overfit):
    model, ds = overfit["model"], overfit["data"]
    deltas = []
    with no_grad():
        h_v = model.visual_tokens(ds.images)
        for i in range(len(ds)):
            real = model.assemble(h_v[i], ds.instructions[i], ds.responses[i])
            blank = model.assemble(Tensor(np.zeros(h_v[i].shape, dtype=h_v.dtype)), ds.instructions[i],
                                   ds.responses[i])
            lo, hi = real.response_span
            a = model.lm(real.embeddings).data[lo - 1 : hi]
            b = model.lm(blank.embeddings).data[lo - 1 : hi]
            deltas.append(float(np.abs(a - b).max()))
    ok = min(deltas) > 1e-4
    verdict(6, "visual grounding", ok, f"min over scenes of max |logit change| = {min(deltas):.3e} (> 1e-4)")
    assert ok


# -- 7 -------------------------------------------------------------------


def test_criterion_07_metric_oracles():
    pairs = random_pairs(77, count=50, max_len=8, vocab=["a", "red", "blue", "square", "on"])
    errs = {
        "bleu": abs(bleu(pairs) - bleu_oracle(pairs)),
        "meteor": abs(meteor(pairs) - np.mean([meteor_oracle(h, r) for h, r in pairs])),
        "rouge_l": abs(rouge_l(pairs) - np.mean([rouge_oracle(h, r) for h, r in pairs])),
    }
    ident = [(h, h) for h, _ in pairs]
    ident_bleu, ident_rouge = bleu(ident), rouge_l(ident)
    ok = max(errs.values()) < 1e-9 and ident_bleu == 1.0 and ident_rouge == 1.0
    verdict(7, "metric oracles", ok, ", ".join(f"{k} err {v:.1e}" for k, v in errs.items())
            + f"; identity BLEU={ident_bleu!r} ROUGE-L={ident_rouge!r}")
    assert ok


# -- 8 -------------------------------------------------------------------


def test_criterion_08_schedule_and_clip():
    cfg = TrainConfig(base_lr=2e-5, min_lr=2e-6, warmup_steps=30, total_steps=1000)
    end_err = max(abs(cosine_lr(30, cfg) - 2e-5), abs(cosine_lr(1000, cfg) - 2e-6))
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(100):
        grads = [rng.normal(0, 10 ** rng.uniform(-3, 3), rng.integers(1, 8, size=2)) for _ in range(4)]
        max_norm = float(rng.uniform(0.05, 5))
        clipped, _ = clip_gradients(grads, max_norm)
        worst = max(worst, global_norm(clipped) - max_norm)
    ok = end_err <= 1e-12 and worst <= 1e-6
    verdict(8, "schedule and clipping", ok, f"endpoint error {end_err:.1e}, max post-clip excess {worst:.1e}")
    assert ok


# -- 9 -------------------------------------------------------------------


def test_criterion_09_persistence(overfit, tmp_path):
    model, manifest, ds = overfit["model"], overfit["manifest"], overfit["data"]
    path = tmp_path / "overfit.ckpt"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    same = all(
        generate_ids(loaded, ds.images[i], s.instruction, 150) == generate_ids(model, ds.images[i], s.instruction, 150)
        for i, s in enumerate(manifest)
    )

    blob = path.read_bytes()
    (tmp_path / "truncated.ckpt").write_bytes(blob[: len(blob) // 2])
    diagnostics = []
    try:
        load_checkpoint(tmp_path / "truncated.ckpt")
    except CheckpointError as exc:
        diagnostics.append(str(exc))

    import hashlib
    import struct

    body = blob[:-32]
    hlen = struct.unpack_from("<Q", body, 12)[0]
    header = json.loads(body[20 : 20 + hlen])
    victim = header["tensors"][3]["name"]
    header["tensors"][3]["name"] = victim + "_renamed"
    new = json.dumps(header).encode()
    body = body[:12] + struct.pack("<Q", len(new)) + new + body[20 + hlen :]
    (tmp_path / "renamed.ckpt").write_bytes(body + hashlib.sha256(body).digest())
    try:
        load_checkpoint(tmp_path / "renamed.ckpt")
    except CheckpointError as exc:
        diagnostics.append(str(exc))

    named = len(diagnostics) == 2 and victim in diagnostics[1] and "checksum" in diagnostics[0]
    ok = same and named
    verdict(9, "persistence", ok, f"round-trip captions identical={same}; corrupted files rejected "
            f"({len(diagnostics)}/2), renamed tensor named={victim in diagnostics[-1] if diagnostics else False}")
    assert ok


# -- 10 ------------------------------------------------------------------


def _pipeline(root):
    root.mkdir()
    data = root / "scenes"
    cfg = {
        "model": {"image_size": 16, "patch_size": 8, "vit_dim": 16, "vit_depth": 1, "vit_heads": 2, "lm_dim": 32,
                  "lm_depth": 1, "lm_heads": 2, "max_seq_len": 48, "seed": 3},
        "stage1": {"base_lr": 1e-3, "total_steps": 15, "batch_size": 4, "seed": 1,
                   "data": [{"manifest": str(data / "manifest.jsonl")}]},
        "stage2": {"base_lr": 1e-3, "total_steps": 15, "batch_size": 4, "seed": 2,
                   "data": [{"manifest": str(data / "manifest.jsonl")}]},
    }
    (root / "config.json").write_text(json.dumps(cfg))
    codes = [
        cli_main(["synth", "--seed", "5", "--count", "12", "--style", "short", "--resolution", "16",
                  "--out", str(data)]),
        cli_main(["train", "--config", str(root / "config.json"), "--stage", "1", "--out", str(root / "run")]),
        cli_main(["train", "--config", str(root / "config.json"), "--stage", "2", "--resume",
                  str(root / "run" / "stage1.ckpt"), "--out", str(root / "run")]),
        cli_main(["eval", "--checkpoint", str(root / "run" / "stage2.ckpt"), "--manifest",
                  str(data / "manifest.jsonl"), "--samples", "8", "--seed", "0", "--max-new-tokens", "30",
                  "--report", str(root / "report.txt")]),
    ]
    files = [root / "run" / "loss_stage1.csv", root / "run" / "loss_stage2.csv", root / "report.txt"]
    return codes, [f.read_bytes() if f.exists() else None for f in files]


def test_criterion_10_reproducibility(tmp_path):
    codes_a, outs_a = _pipeline(tmp_path / "a")
    codes_b, outs_b = _pipeline(tmp_path / "b")
    traces_same = outs_a[:2] == outs_b[:2] and None not in outs_a
    report_same = outs_a[2] == outs_b[2]
    ok = codes_a == codes_b == [0, 0, 0, 0] and traces_same and report_same
    verdict(10, "reproducibility", ok, f"exit codes {codes_a} / {codes_b}; loss traces identical={traces_same}; "
            f"reports identical={report_same}")
    assert ok
