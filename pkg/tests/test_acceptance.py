"""One test per release criterion; `pytest -v tests/test_acceptance.py` prints
a single pass/fail line for each. The two training-heavy criteria share one
experiment run through a module-scoped fixture.
"""

import itertools
import json
import math
import time
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

from harmony import tensor as T
from harmony import training as TR
from harmony.backbone import CausalLM, InterleavedSequence
from harmony.cli import main as cli_main
from harmony.config import DEFAULTS, deep_merge, rng_for
from harmony.diffusion import DiffusionHead
from harmony.experts import (SlideLoraLayer, attach, layer_overhead_closed_form,
                             param_overhead)
from harmony.layers import Linear
from harmony.metrics import acc_at_05, frechet_gaussian, ned, toy_fid
from harmony.synthworld import default_vocabulary, filter_caption, render

DATA_DIR = Path(__file__).parent / "data"


# ---------------------------------------------------------------- criterion 1

def central_diff(f, x, eps=1e-6):
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        keep = x[idx]
        x[idx] = keep + eps
        hi = f()
        x[idx] = keep - eps
        lo = f()
        x[idx] = keep
        grad[idx] = (hi - lo) / (2 * eps)
    return grad


def check_gradient(build, shapes, rng, cases=20, tol=1e-4):
    """build(*tensors) -> scalar Tensor; compares backward against central FD."""
    for _ in range(cases):
        T.reset_graph()
        tensors = [T.Tensor(rng.normal(size=s), requires_grad=True) for s in shapes]
        out = build(*tensors)
        T.backward(out)
        grads = [t.grad.copy() for t in tensors]
        for t, got in zip(tensors, grads):
            def value():
                T.reset_graph()
                fresh = [T.Tensor(u.data, requires_grad=False) for u in tensors]
                return float(build(*fresh).item())
            fd = central_diff(value, t.data)
            denom = max(np.abs(fd).max(), np.abs(got).max(), 1e-8)
            rel = np.abs(got - fd).max() / denom
            assert rel < tol, f"rel err {rel:.2e}"


def test_criterion_1_gradient_suite():
    rng = np.random.default_rng(11)
    started = time.time()
    m, n, k = 3, 4, 2
    labels = [1, 0, 2]
    bce_labels = np.array([[1.0], [0.0], [1.0]])
    ln_proj = np.random.default_rng(12).normal(size=(m, n))
    ops = [
        (lambda a, b: T.tsum(T.matmul(a, b)), [(m, n), (n, k)]),
        (lambda a, b: T.tsum(T.mul(T.add(a, b), T.add(a, b))), [(m, n), (m, n)]),
        (lambda a, b: T.tsum(T.mul(T.add(a, b), T.add(a, b))), [(m, n), (n,)]),
        (lambda a, b: T.tsum(T.mul(T.sub(a, b), T.sub(a, b))), [(m, n), (m, n)]),
        (lambda a, b: T.tsum(T.mul(a, b)), [(m, n), (m, n)]),
        (lambda a: T.tsum(T.mul(T.scale(a, -1.7), a)), [(m, n)]),
        (lambda a: T.tsum(T.mul(T.shift(a, 0.3), a)), [(m, n)]),
        (lambda a: T.tsum(T.sigmoid(a)), [(m, n)]),
        (lambda a: T.tsum(T.tanh(a)), [(m, n)]),
        (lambda a: T.tsum(T.gelu(a)), [(m, n)]),
        # sum(layer_norm(a)^2) is constant by construction, so weigh the
        # normalized rows against a fixed projection instead
        (lambda a: T.tsum(T.mul(T.layer_norm(a), T.Tensor(ln_proj))), [(m, n)]),
        (lambda a: T.tsum(T.mul(T.softmax(a), T.softmax(a))), [(m, n)]),
        (lambda a: T.softmax_cross_entropy(a, labels), [(m, n)]),
        (lambda a, b: T.mse(a, b), [(m, n), (m, n)]),
        (lambda a: T.bce_with_logits(a, bce_labels), [(m, 1)]),
        (lambda a: T.tsum(T.mul(a, a)), [(m, n)]),
        (lambda a: T.tsum(T.mul(T.mean_pool(a), T.mean_pool(a))), [(m, n)]),
        (lambda a: T.tsum(T.mul(T.transpose(a), T.transpose(a))), [(m, n)]),
        (lambda a: T.tsum(T.mul(T.reshape(a, (n, m)), T.reshape(a, (n, m)))),
         [(m, n)]),
        (lambda a, b: T.tsum(T.mul(T.concat_rows([a, b]), T.concat_rows([a, b]))),
         [(m, n), (k, n)]),
        (lambda a, b: T.tsum(T.mul(T.concat_cols([a, b]), T.concat_cols([a, b]))),
         [(m, n), (m, k)]),
        (lambda a: T.tsum(T.mul(T.narrow_rows(a, 1, 2), T.narrow_rows(a, 1, 2))),
         [(m + 1, n)]),
        (lambda a: T.tsum(T.mul(T.narrow_cols(a, 1, 2), T.narrow_cols(a, 1, 2))),
         [(m, n)]),
        (lambda a: T.tsum(T.mul(T.take_rows(a, [2, 0, 2]), T.take_rows(a, [2, 0, 2]))),
         [(m, n)]),
    ]
    for build, shapes in ops:
        check_gradient(build, shapes, rng)

    # composite paths: routed expert layer, full denoise loss
    layer = SlideLoraLayer(Linear(4, 3, rng), n=3, s=1, rank=2, alpha=4.0,
                           gate_hidden=4, rng=rng)
    for e in (layer.experts_text[0], layer.experts_shared[0]):
        e.b.data[:] = rng.normal(size=e.b.shape)
    # the branch choice is a step function of the gate logit, so pin the
    # route and check the differentiable surface inside one branch
    layer.route_lock = 1.0
    check_gradient(lambda x: T.tsum(T.mul(layer(x), layer(x))), [(5, 4)],
                   rng, cases=5)

    head = DiffusionHead(grid=8, channels=1, patch=4, dim=8, heads=2, blocks=1,
                         cond_dim=4, steps=4, beta_min=1e-3, beta_max=0.2,
                         rng=rng)
    target = rng.uniform(0.0, 1.0, size=(8, 8))
    pinned_eps = rng.normal(size=(8, 8))
    check_gradient(
        lambda c: head.denoise_loss(target, c, np.random.default_rng(3),
                                    t=2, eps=pinned_eps),
        [(2, 4)], rng, cases=5)
    assert time.time() - started < 60.0


# ---------------------------------------------------------------- criterion 2

def test_criterion_2_routing_algebra():
    started = time.time()
    rng = np.random.default_rng(5)
    for d_in, d_out, s, rank in itertools.product((2, 3, 5), (2, 4), (1, 2), (1,)):
        base = Linear(d_in, d_out, rng)
        layer = SlideLoraLayer(base, n=3 * s, s=s, rank=rank, alpha=2.0,
                               gate_hidden=3, rng=rng)
        x = T.Tensor(rng.normal(size=(4, d_in)))

        # zero-init transparency, bit-exact
        assert np.array_equal(layer(x).data, base(x).data)

        for group in (layer.experts_text, layer.experts_image, layer.experts_shared):
            for e in group:
                e.b.data[:] = rng.normal(size=e.b.shape)

        # a fresh gate emits logit 0, so gamma sits exactly on the 0.5
        # boundary and the text branch must win
        out = layer(x)
        assert layer.last_gamma == 0.5

        def group_delta(group):
            return sum(e.delta(x).data for e in group) / len(group)

        expected = base(x).data + 0.5 * (group_delta(layer.experts_text)
                                         + group_delta(layer.experts_shared))
        assert np.abs(out.data - expected).max() < 1e-12

        # branch exclusivity both ways
        layer.experts_image[0].b.data[:] += 100.0
        assert np.array_equal(layer(x).data, out.data)
        layer.route_lock = 0.0
        image_routed = layer(x)
        expected_img = base(x).data + 0.5 * (group_delta(layer.experts_image)
                                             + group_delta(layer.experts_shared))
        assert np.abs(image_routed.data - expected_img).max() < 1e-12
        layer.experts_text[0].b.data[:] += 100.0
        assert np.array_equal(layer(x).data, image_routed.data)
        layer.route_lock = None
    assert time.time() - started < 10.0


# ---------------------------------------------------------------- criterion 3

def test_criterion_3_parameter_accounting():
    vocab = default_vocabulary()
    small = deep_merge(DEFAULTS, {"model": {"dim": 32, "heads": 2,
                                            "vision_blocks": 1, "lm_blocks": 2,
                                            "resampler_blocks": 1}})
    for s, rank, hidden, placement in itertools.product(
            (1, 2), (1, 2, 4), (4, 16), ("vision_encoder", "llm", "both")):
        sl = {"n": 3 * s, "s": s, "rank": rank, "alpha": 4.0,
              "gate_hidden": hidden, "placement": placement}
        model = TR.build_model(deep_merge(small, {"slide_lora": sl}),
                               len(vocab), 0)
        registry = attach(model, placement, sl, rng_for(0, "lora"))
        seen = set()
        counted = 0
        for _, p in registry.named_params():
            if id(p) not in seen:
                seen.add(id(p))
                counted += p.size
        predicted = sum(
            layer_overhead_closed_form(layer.d_in, layer.d_out, s, rank, hidden)
            for layer in registry)
        assert counted == predicted
        assert param_overhead(model)["added"] == predicted


# ---------------------------------------------------------------- criterion 4

def test_criterion_4_diffusion_suite():
    started = time.time()
    rng = np.random.default_rng(2)
    head = DiffusionHead(grid=8, channels=1, patch=4, dim=16, heads=2, blocks=1,
                         cond_dim=4, steps=30, beta_min=1e-4, beta_max=0.3,
                         rng=rng)
    betas = np.linspace(1e-4, 0.3, 30)
    assert np.abs(head.schedule.alpha_bars - np.cumprod(1.0 - betas)).max() < 1e-15

    # forward-noising moments against the closed form
    x0 = rng.uniform(0.0, 1.0, size=(8, 8))
    t = 17
    draws = np.array([head.q_sample(x0, t, rng.standard_normal((8, 8)))
                      for _ in range(10_000)])
    ab = head.schedule.alpha_bars[t - 1]
    assert np.abs(draws.mean(axis=0) - math.sqrt(ab) * x0).max() < 0.05
    assert abs(draws.var(axis=0).mean() - (1.0 - ab)) < 0.05

    # an oracle that returns the exact pinned noise drives the loss to zero
    eps = rng.normal(size=(8, 8))

    class EpsOracle:
        def __call__(self, x_t, t_step, cond):
            return T.Tensor(eps)

    saved = head.net
    try:
        head.net = EpsOracle()
        loss = head.denoise_loss(x0, T.Tensor(rng.normal(size=(2, 4))),
                                 np.random.default_rng(0), t=t, eps=eps)
        assert loss.item() < 1e-24
    finally:
        head.net = saved

    # single-image overfit: the sampler reproduces a memorized target
    rng = np.random.default_rng(21)
    head = DiffusionHead(grid=16, channels=1, patch=4, dim=32, heads=2,
                         blocks=2, cond_dim=8, steps=12, beta_min=1e-4,
                         beta_max=0.05, rng=rng)
    x0 = render([("A", 0, 0), ("H", 1, 2), ("P", 3, 1)])
    cond = T.Tensor(np.zeros((3, 8)))
    named = dict(head.named_params())
    for p in named.values():
        p.requires_grad = True
        p.grad = np.zeros_like(p.data)
    opt = TR.Adam(named, lr=2e-3)
    for _ in range(1400):
        T.reset_graph()
        opt.zero_grad()
        loss = head.denoise_loss(x0, cond, rng)
        T.backward(loss)
        opt.step()
    mses = [float(np.mean((head.sample(cond, np.random.default_rng(100 + k)) - x0) ** 2))
            for k in range(16)]
    assert float(np.mean(mses)) < 0.05
    assert time.time() - started < 120.0


# ---------------------------------------------------------------- criterion 5

def test_criterion_5_factorization_oracle():
    lm = CausalLM(vocab_size=3, dim=8, heads=2, blocks=1, image_slots=2,
                  cond_dim=4, max_len=16, rng=rng_for(0, "lm"))

    def seq(tokens, n_t, targets):
        return InterleavedSequence(tokens=list(tokens), n_t=list(n_t),
                                   text_targets=list(targets))

    total = 0.0
    for tail in itertools.product(range(3), repeat=4):
        tokens = [0] + list(tail)
        out = lm.lm_forward(seq(tokens, [1, 2, 3, 4], list(tail)))
        logp = 0.0
        for row, tok in zip(out["text_logits"].data, tail):
            shifted = row - row.max()
            logp += shifted[tok] - math.log(np.exp(shifted).sum())
        total += math.exp(logp)
    assert abs(total - 1.0) < 1e-10

    # causality: a token edit may not disturb any logit strictly before it
    for length in range(2, 13):
        tokens = [0] + [int(v) for v in rng_for(length, "tok").integers(0, 3, length)]
        positions = list(range(1, length + 1))
        base = lm.lm_forward(seq(tokens, positions, tokens[1:]))["text_logits"].data.copy()
        for edit in range(1, length + 1):
            mutated = list(tokens)
            mutated[edit] = (mutated[edit] + 1) % 3
            got = lm.lm_forward(seq(mutated, positions,
                                    mutated[1:]))["text_logits"].data
            assert np.array_equal(got[:edit - 1], base[:edit - 1])


# ------------------------------------------------------- criteria 6 and 7

ACCEPT_CFG = deep_merge(DEFAULTS, {})


@pytest.fixture(scope="module")
def experiment_report(tmp_path_factory):
    out = tmp_path_factory.mktemp("experiment")
    started = time.time()
    report = TR.run_experiment(ACCEPT_CFG, out_dir=out, max_workers=6)
    elapsed = time.time() - started
    n_jobs = len(report["rows"]) + len(ACCEPT_CFG["experiment"]["seeds"])
    report["_wall_per_arm"] = elapsed / n_jobs
    return report


def test_criterion_6_interference_and_recovery(experiment_report):
    summary = experiment_report["summary"]
    n = summary["n_seeds"]
    assert summary["interference_seeds"] * 3 >= 2 * n, summary["per_seed"]
    assert summary["recovery_seeds"] * 3 >= 2 * n, summary["per_seed"]
    assert experiment_report["_wall_per_arm"] < 600.0


def test_criterion_7_placement_ordering(experiment_report):
    summary = experiment_report["summary"]
    n = summary["n_seeds"]
    assert summary["ablation_seeds"] * 3 >= 2 * n, summary["per_seed"]


# ---------------------------------------------------------------- criterion 8

@lru_cache(maxsize=None)
def lev_oracle(a: str, b: str) -> int:
    if not a:
        return len(b)
    if not b:
        return len(a)
    return min(lev_oracle(a[:-1], b) + 1,
               lev_oracle(a, b[:-1]) + 1,
               lev_oracle(a[:-1], b[:-1]) + (a[-1] != b[-1]))


def test_criterion_8_metric_oracles():
    words = [""]
    for length in range(1, 7):
        words += ["".join(p) for p in itertools.product("ab", repeat=length)]
    for a in words:
        for b in words:
            expected = 1.0 if not a and not b else \
                1.0 - lev_oracle(a, b) / max(len(a), len(b))
            assert ned(a, b) == pytest.approx(expected, abs=1e-12)

    hit, iou = acc_at_05((0, 0, 4, 4), (0, 0, 4, 4))
    assert hit and iou == 1.0
    hit, iou = acc_at_05((0, 0, 4, 4), (4, 4, 8, 8))
    assert not hit and iou == 0.0
    hit, iou = acc_at_05((0, 0, 4, 4), (2, 0, 6, 4))
    assert not hit and iou == pytest.approx(1 / 3)
    hit, iou = acc_at_05((0, 0, 4, 4), (0, 2, 4, 6))
    assert not hit and iou == pytest.approx(1 / 3)
    hit, iou = acc_at_05((0, 0, 4, 4), (1, 1, 5, 5))
    assert not hit and iou == pytest.approx(9 / 23)

    rng = np.random.default_rng(0)
    images = [rng.uniform(0.0, 1.0, size=(16, 16)) for _ in range(12)]
    assert toy_fid(images, [img.copy() for img in images]) < 1e-8

    # 1-D closed forms of the Gaussian Frechet distance
    assert frechet_gaussian([0.0], [[1.0]], [3.0], [[1.0]]) == \
        pytest.approx(9.0, abs=1e-8)
    assert frechet_gaussian([0.0], [[4.0]], [0.0], [[1.0]]) == \
        pytest.approx(1.0, abs=1e-8)
    assert frechet_gaussian([2.0], [[2.25]], [-1.0], [[0.25]]) == \
        pytest.approx(9.0 + 1.0, abs=1e-8)


# ---------------------------------------------------------------- criterion 9

def test_criterion_9_reproducibility(tmp_path):
    cfg = {"model": {"dim": 16, "heads": 2, "vision_blocks": 1,
                     "resampler_blocks": 1, "lm_blocks": 2, "queries": 4,
                     "image_slots": 3, "cond_dim": 8},
           "diffusion": {"steps": 5, "blocks": 1},
           "slide_lora": {"rank": 2, "gate_hidden": 8},
           "train": {"batch": 3, "pretrain_steps": 6, "log_every": 2},
           "data": {"train_size": 20, "eval_size": 6}}
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    logs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli_main(["pretrain", "--config", str(cfg_path),
                         "--out", str(out)]) == 0
        logs.append((out / "metrics.jsonl").read_bytes())
    assert logs[0] == logs[1]

    vocab = default_vocabulary()
    full = deep_merge(DEFAULTS, cfg)
    model = TR.build_model(full, len(vocab), seed=3)
    opt = TR.Adam(TR.stage_trainable(model, "finetune"), lr=1e-3)
    TR.save_checkpoint(tmp_path / "ck", model, opt, rng_for(3, "loop"), step=0)
    clone = TR.build_model(full, len(vocab), seed=8)
    opt2 = TR.Adam(TR.stage_trainable(clone, "finetune"), lr=1e-3)
    TR.load_checkpoint(tmp_path / "ck", clone, opt2)
    for (na, pa), (nb, pb) in zip(model.named_params(), clone.named_params()):
        assert na == nb
        assert np.array_equal(pa.data, pb.data), na


# --------------------------------------------------------------- criterion 10

def test_criterion_10_caption_filter_golden():
    rows = [json.loads(line) for line in
            (DATA_DIR / "filter_golden.jsonl").read_text().splitlines()]
    assert len(rows) == 50
    word_counts = {len(r["text"].split()) for r in rows if r["mode"] == "words"}
    assert {100, 101} <= word_counts
    for row in rows:
        keep, reason = filter_caption(row["text"], row["mode"])
        assert keep == row["keep"], row
        assert reason == row["reason"], row
