import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bvit.data import ImageBatch, load_checkpoint
from bvit.model import ModelConfig, VisionTransformer
from bvit.tensor import Tensor
from bvit.train import (
    OptimState,
    TrainRecipe,
    adamw_step,
    cross_entropy,
    decay_names,
    ema_update,
    fit,
    hard_distill_loss,
    init_train_state,
    label_smooth_ce,
    lr_at,
    train_epoch,
)


def tiny(**kw):
    base = dict(embed_dim=16, heads=2, steps=2, image=8, patch=4, classes=3)
    base.update(kw)
    return ModelConfig(**base)


def toy_data(n=24, seed=0, image=8, classes=3):
    rng = np.random.default_rng(seed)
    return ImageBatch(rng.random((n, 3, image, image)).astype(np.float32), rng.integers(0, classes, n))


# ------------------------------------------------------------------ AdamW
def test_adamw_first_step_closed_form():
    w = np.array([1.0])
    adamw_step({"w": w}, {"w": np.array([1.0])}, OptimState(), lr=0.1)
    assert abs(w[0] - 0.9) < 1e-6


def test_adamw_pure_decay():
    w = np.array([1.0])
    adamw_step({"w": w}, {"w": np.array([0.0])}, OptimState(weight_decay=0.05), lr=0.1)
    assert abs(w[0] - 0.995) < 1e-12


def test_adamw_zero_grad_no_decay_is_noop():
    w = np.array([0.3, -2.0])
    adamw_step({"w": w}, {"w": np.zeros(2)}, OptimState(), lr=0.1)
    np.testing.assert_array_equal(w, [0.3, -2.0])


def test_adamw_rejects_non_finite_grad():
    with pytest.raises(FloatingPointError, match="block0.qkv_w"):
        adamw_step({"block0.qkv_w": np.ones(2)}, {"block0.qkv_w": np.array([1.0, np.nan])}, OptimState(), 0.1)


def adam_reference(w, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return w


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=8), st.floats(-3, 3), st.floats(1e-4, 0.5))
def test_adamw_without_decay_equals_adam(grads, w0, lr):
    w = np.array([w0])
    state = OptimState()
    for g in grads:
        adamw_step({"w": w}, {"w": np.array([g])}, state, lr)
    assert abs(w[0] - adam_reference(w0, grads, lr)) < 1e-9


def test_decay_skips_norms_biases_embeddings():
    m = VisionTransformer(tiny(variant="te"))
    names = decay_names(n for n, _ in m.named_parameters())
    assert "block0.qkv_w" in names and "embed.head_w" in names
    for n in ["block0.qkv_b", "block0.norm1", "embed.pos", "embed.cls", "embed.time", "embed.norm"]:
        assert n not in names


# ------------------------------------------------------------------ schedule
def test_lr_schedule_endpoints():
    r = TrainRecipe(epochs=300, warmup_epochs=30, lr=5e-4, warmup_factor=0.033)
    assert lr_at(0, r) == pytest.approx(0.033 * 5e-4)
    assert lr_at(30, r) == pytest.approx(5e-4)
    assert lr_at(299, r) < 5e-4 * 1e-4


def test_lr_out_of_range():
    r = TrainRecipe(epochs=10)
    with pytest.raises(ValueError):
        lr_at(10, r)
    with pytest.raises(ValueError):
        lr_at(-1, r)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 60), st.integers(1, 20))
def test_lr_continuous_and_non_increasing_after_warmup(epochs, warmup):
    warmup = min(warmup, epochs - 1)
    r = TrainRecipe(epochs=epochs, warmup_epochs=warmup, lr=1e-3)
    lrs = [lr_at(e, r) for e in range(epochs)]
    assert all(a >= b for a, b in zip(lrs[warmup:], lrs[warmup + 1:]))
    assert all(a <= b for a, b in zip(lrs[:warmup + 1], lrs[1:warmup + 1]))
    # the linear ramp would reach base exactly at the junction
    assert lrs[warmup] == pytest.approx(1e-3)


def test_recipe_rejects_warmup_longer_than_epochs():
    with pytest.raises(ValueError):
        TrainRecipe(epochs=2, warmup_epochs=3)


# ------------------------------------------------------------------ losses
@pytest.mark.parametrize("k", [2, 10, 1000])
def test_uniform_logits_give_log_k(k):
    loss = label_smooth_ce(Tensor(np.zeros((3, k))), np.array([0, 1, k - 1]), 0.1).item()
    assert loss == pytest.approx(math.log(k), abs=1e-12)


def test_smoothing_direct_formula():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((4, 10))
    logits[np.arange(4), [1, 2, 3, 4]] += 8
    target = np.array([1, 2, 3, 4])
    logp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    ref = np.mean(-0.9 * logp[np.arange(4), target] - 0.1 * logp.mean(-1))
    assert label_smooth_ce(Tensor(logits), target, 0.1).item() == pytest.approx(ref, abs=1e-12)


def test_smoothing_zero_is_cross_entropy():
    logits = np.random.default_rng(1).standard_normal((5, 4))
    y = np.array([0, 1, 2, 3, 0])
    logp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    assert cross_entropy(Tensor(logits), y).item() == pytest.approx(-logp[np.arange(5), y].mean())


def test_soft_labels_and_class_mismatch():
    logits = Tensor(np.zeros((2, 3)))
    assert label_smooth_ce(logits, np.full((2, 3), 1 / 3)).item() == pytest.approx(math.log(3))
    with pytest.raises(ValueError):
        label_smooth_ce(logits, np.full((2, 4), 0.25))
    with pytest.raises(ValueError):
        label_smooth_ce(logits, np.array([0, 1]), 1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 8), st.floats(0, 0.9), st.integers(0, 2**31 - 1))
def test_smoothed_loss_bounded_by_target_entropy(k, eps, seed):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((1, k)) * 3
    y = np.array([rng.integers(k)])
    q = np.full(k, eps / k)
    q[y[0]] += 1 - eps
    entropy = -(q * np.log(q, where=q > 0, out=np.zeros(k))).sum()
    assert label_smooth_ce(Tensor(logits), y, eps).item() >= entropy - 1e-9
    if np.all(q > 0):
        at_target = label_smooth_ce(Tensor(np.log(q)[None]), y, eps).item()
        assert at_target == pytest.approx(entropy, abs=1e-9)


# ------------------------------------------------------------------ EMA
def test_ema_cases():
    s = {"w": np.array([0.0])}
    ema_update(s, {"w": np.array([1.0])}, 0.99995)
    assert s["w"][0] == pytest.approx(5e-5)
    ema_update(s, {"w": np.array([3.0])}, 1.0)
    assert s["w"][0] == pytest.approx(5e-5)
    ema_update(s, {"w": np.array([3.0])}, 0.0)
    assert s["w"][0] == 3.0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=10), st.floats(0, 1))
def test_ema_stays_in_history_hull(values, decay):
    s = {"w": np.array([values[0]])}
    for v in values:
        ema_update(s, {"w": np.array([v])}, decay)
    assert min(values) - 1e-9 <= s["w"][0] <= max(values) + 1e-9


# ------------------------------------------------------------------ distillation
def test_distill_is_half_sum():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((4, 5))
    y = np.array([0, 1, 2, 3])
    teacher = rng.standard_normal((4, 5))
    ref = 0.5 * cross_entropy(Tensor(a), y).item() + 0.5 * cross_entropy(Tensor(b), teacher.argmax(-1)).item()
    assert hard_distill_loss(Tensor(a), Tensor(b), y, teacher).item() == pytest.approx(ref)


def test_distill_teacher_agrees_with_target():
    a = np.random.default_rng(1).standard_normal((3, 4))
    y = np.array([2, 0, 3])
    assert hard_distill_loss(Tensor(a), Tensor(a), y, np.eye(4)[y]).item() == pytest.approx(cross_entropy(Tensor(a), y).item())


def test_distill_uniform_teacher_ties_to_lowest_index():
    b = np.random.default_rng(2).standard_normal((2, 3))
    a = np.zeros((2, 3))
    got = hard_distill_loss(Tensor(a), Tensor(b), np.array([1, 1]), np.zeros((2, 3))).item()
    ref = 0.5 * math.log(3) + 0.5 * cross_entropy(Tensor(b), np.array([0, 0])).item()
    assert got == pytest.approx(ref)


def test_distill_needs_token_and_matching_classes():
    with pytest.raises(ValueError):
        hard_distill_loss(Tensor(np.zeros((1, 3))), None, [0], np.zeros((1, 3)))
    with pytest.raises(ValueError):
        hard_distill_loss(Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 3))), [0], np.zeros((1, 4)))


# ------------------------------------------------------------------ epoch loop
def test_zero_lr_epoch_keeps_params_and_moves_ema():
    m = VisionTransformer(tiny(), seed=0)
    r = TrainRecipe(epochs=1, warmup_epochs=0, batch_size=8, ema_decay=0.5, weight_decay=0.05)
    state = init_train_state(m, r)
    before = m.state_dict()
    for k in state.ema:
        state.ema[k] = np.zeros_like(state.ema[k])
    train_epoch(m, toy_data(), r, state, lr=0.0)
    for k, v in m.state_dict().items():
        np.testing.assert_array_equal(v, before[k])
    # three steps of decay 0.5 toward fixed params: 1 - 0.5**3
    np.testing.assert_allclose(state.ema["embed.head_w"], 0.875 * before["embed.head_w"], rtol=1e-6)


def test_same_seed_same_metrics_and_checkpoint(tmp_path):
    r = TrainRecipe(epochs=2, warmup_epochs=1, batch_size=8, lr=1e-3, mixup_alpha=0.8)
    runs = []
    for k in range(2):
        m = VisionTransformer(tiny(), seed=3)
        hist = fit(m, toy_data(), toy_data(8, 1), r, tmp_path / f"run{k}")
        runs.append(([{a: b for a, b in h.items() if a != "seconds"} for h in hist], tmp_path / f"run{k}" / "final.bvw"))
    assert runs[0][0] == runs[1][0]
    assert runs[0][1].read_bytes() == runs[1][1].read_bytes()
    text = (tmp_path / "run0" / "metrics.csv").read_text().splitlines()
    assert text[0] == "epoch,split,loss,acc,lr,seconds"
    assert len(text) == 1 + 2 * 3
    assert load_checkpoint(runs[0][1]).ema


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_reports_batch():
    m = VisionTransformer(tiny(), seed=0)
    m.embed_params.head_b.data[:] = np.inf
    r = TrainRecipe(epochs=1, warmup_epochs=0, batch_size=8)
    with pytest.raises(FloatingPointError, match="batch 0"):
        train_epoch(m, toy_data(), r, init_train_state(m, r))


def test_trainable_subset_only_updates_subset():
    m = VisionTransformer(tiny(), seed=0)
    r = TrainRecipe(epochs=1, warmup_epochs=0, batch_size=8, lr=1e-2)
    before = m.state_dict()
    train_epoch(m, toy_data(), r, init_train_state(m, r), trainable={"embed.head_w", "embed.head_b"})
    after = m.state_dict()
    changed = {k for k in before if not np.array_equal(before[k], after[k])}
    assert changed == {"embed.head_w", "embed.head_b"}


def test_distillation_epoch_runs_with_teacher():
    student = VisionTransformer(tiny(distill=True), seed=0)
    teacher = VisionTransformer(tiny(), seed=1)
    r = TrainRecipe(epochs=1, warmup_epochs=0, batch_size=8)
    state = init_train_state(student, r)
    state.teacher = teacher
    out = train_epoch(student, toy_data(), r, state)
    assert math.isfinite(out["loss"])


@pytest.mark.slow
def test_tiny_model_memorizes_64_images():
    # random pixels with random labels: memorization, not generalization
    rng = np.random.default_rng(0)
    data = ImageBatch(rng.random((64, 3, 32, 32)).astype(np.float32), rng.integers(0, 10, 64))
    m = VisionTransformer(ModelConfig(embed_dim=64, heads=4, steps=4, patch=4, image=32, classes=10), seed=0)
    r = TrainRecipe(epochs=200, warmup_epochs=0, lr=1e-3, weight_decay=0.0, label_smoothing=0.0, batch_size=64, hflip=False)
    state = init_train_state(m, r)
    for step in range(200):
        acc = train_epoch(m, data, r, state, lr=1e-3)["acc"]
        if acc == 1.0:
            break
    assert acc == 1.0, f"train accuracy {acc} after {step + 1} steps"
