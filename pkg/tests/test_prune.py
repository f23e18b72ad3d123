import copy
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bvit import tensor as T
from bvit.data import ImageBatch
from bvit.model import BLOCK_LAYERS, ModelConfig, VisionTransformer
from bvit.prune import (
    ROUND_FIELDS,
    StepMaskSet,
    analytic_mask_sparsity,
    effective_sparsity,
    init_prune_state,
    jaccard,
    mask_context,
    mask_sparsity,
    masked_forward,
    prune_by_magnitude,
    prune_round,
    run_pruning,
    specialization,
    utilization_histogram,
    weighted_jaccard,
)
from bvit.tensor import Tensor
from bvit.train import TrainRecipe

masks_strategy = st.integers(0, 2**31 - 1).map(lambda s: np.random.default_rng(s).random((4, 3, 5)) < 0.5)


def tiny_model(seed=0):
    return VisionTransformer(ModelConfig(embed_dim=8, heads=2, steps=3, image=8, patch=4, classes=3), seed=seed)


def toy_data(n=16, seed=0):
    rng = np.random.default_rng(seed)
    return ImageBatch(rng.random((n, 3, 8, 8)).astype(np.float32), rng.integers(0, 3, n))


# ------------------------------------------------------------------ masked linear
def test_masked_forward_full_and_empty():
    rng = np.random.default_rng(0)
    w, b, x = rng.standard_normal((4, 3)), rng.standard_normal(3), rng.standard_normal((2, 4))
    np.testing.assert_allclose(masked_forward(w, b, np.ones((4, 3)), x).data, x @ w + b)
    np.testing.assert_allclose(masked_forward(w, b, np.zeros((4, 3)), x).data, np.broadcast_to(b, (2, 3)))


def test_masked_forward_step_masks_differ():
    w = np.arange(6.0).reshape(2, 3)
    x = np.array([[1.0, 0.0]])
    m1 = np.ones((2, 3))
    m2 = m1.copy()
    m2[0, 1] = 0  # row 0 is the one x touches
    a, b = masked_forward(w, None, m1, x).data, masked_forward(w, None, m2, x).data
    np.testing.assert_array_equal(a, [[0.0, 1.0, 2.0]])
    np.testing.assert_array_equal(b, [[0.0, 0.0, 2.0]])
    m3 = m1.copy()
    m3[1, 1] = 0  # untouched row: same output
    np.testing.assert_array_equal(masked_forward(w, None, m3, x).data, a)


def test_masked_forward_shape_error():
    with pytest.raises(ValueError):
        masked_forward(np.ones((2, 3)), None, np.ones((3, 2)), np.ones((1, 2)))


def test_masked_forward_gradient_is_masked():
    w = Tensor(np.ones((3, 2)), requires_grad=True)
    mask = np.array([[1, 0], [1, 1], [0, 0]])
    masked_forward(w, None, mask, np.ones((1, 3))).sum().backward()
    np.testing.assert_array_equal(w.grad, mask)


def test_mask_context_drives_model():
    m = tiny_model()
    m = m.astype(np.float64)
    state = init_prune_state(m)
    x = toy_data(4).images.astype(np.float64)
    with T.no_grad():
        np.testing.assert_allclose(m(x, ctx=mask_context(m, state.masks)).data, m(x).data)
        state.masks["block0.fc2"].masks[1][:] = False
        out = m(x, ctx=mask_context(m, state.masks)).data
    assert not np.allclose(out, m(x).data)


# ------------------------------------------------------------------ magnitude pruning
def test_prune_by_magnitude_counts_and_ties():
    mask = np.ones((2, 5), bool)
    mag = np.array([[3, 1, 1, 2, 5], [1, 4, 4, 4, 9]], float)
    out = prune_by_magnitude(mask, mag, 0.3)
    # floor(0.3 * 10) = 3 smallest, ties among 1s resolved in row-major order
    np.testing.assert_array_equal(~out, [[0, 1, 1, 0, 0], [1, 0, 0, 0, 0]])
    out = prune_by_magnitude(mask, np.ones((2, 5)), 0.2)
    np.testing.assert_array_equal(~out, [[1, 1, 0, 0, 0], [0, 0, 0, 0, 0]])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0, 0.99))
def test_prune_by_magnitude_properties(seed, rate):
    rng = np.random.default_rng(seed)
    mask = rng.random((6, 7)) < 0.7
    mag = rng.standard_normal((6, 7))
    out = prune_by_magnitude(mask, mag, rate)
    assert not (out & ~mask).any()
    assert (mask.sum() - out.sum()) == math.floor(rate * mask.sum())
    removed = mask & ~out
    if removed.any() and out.any():
        assert np.abs(mag[removed]).max() <= np.abs(mag[out]).min()


# ------------------------------------------------------------------ rounds
@pytest.fixture(scope="module")
def two_rounds():
    m = tiny_model(1)
    data = toy_data()
    recipe = TrainRecipe(epochs=1, warmup_epochs=0, batch_size=8, lr=1e-3, mixup_alpha=0.0)
    state = init_prune_state(m, rounds=2, full_epochs=1, graft_epochs=1, graft_lr=1e-3)
    theta = {k: v.copy() for k, v in state.theta_init.items()}
    snaps = [{k: ms.masks.copy() for k, ms in state.masks.items()}]
    for _ in range(2):
        prune_round(m, state, data, toy_data(8, 1), recipe)
        snaps.append({k: ms.masks.copy() for k, ms in state.masks.items()})
    return m, state, theta, snaps


def test_round_one_removes_exact_fraction(two_rounds):
    _, _, _, snaps = two_rounds
    for name, masks in snaps[1].items():
        for t in range(masks.shape[0]):
            assert (~masks[t]).sum() == math.floor(0.2 * masks[t].size), (name, t)


def test_rewind_restores_theta_init(two_rounds):
    m, _, theta, _ = two_rounds
    for k, v in m.state_dict().items():
        assert np.array_equal(v, theta[k]), k


def test_masks_monotone_over_rounds(two_rounds):
    _, _, _, snaps = two_rounds
    for a, b in zip(snaps, snaps[1:]):
        for k in a:
            assert not (b[k] & ~a[k]).any()


def test_round_history_and_limit(two_rounds):
    m, state, _, _ = two_rounds
    assert state.round == 2
    assert set(state.history[0]) == set(ROUND_FIELDS)
    assert len(state.history) == 2 * len(BLOCK_LAYERS) * 3
    with pytest.raises(ValueError):
        prune_round(m, state, toy_data())


def test_no_graft_training_ranks_theta_init():
    m = tiny_model(2)
    state = init_prune_state(m, rounds=1, full_epochs=0, graft_epochs=0)
    prune_round(m, state, toy_data())
    for name, ms in state.masks.items():
        blk, layer = name.split(".")
        ref = prune_by_magnitude(np.ones(ms.masks[0].shape, bool), state.theta_init[f"{blk}.{layer}_w"], 0.2)
        for t in range(3):
            np.testing.assert_array_equal(ms.masks[t], ref)


def test_graft_touches_only_its_step():
    m = tiny_model(3).astype(np.float64)
    state = init_prune_state(m)
    x = toy_data(4).images.astype(np.float64)
    zero = copy.deepcopy(m.blocks)
    for blk in zero:
        for n, t in blk.named():
            t.data = np.zeros_like(t.data)
    traces = {}
    with T.no_grad():
        for step in (None, 1):
            ctx = mask_context(m, state.masks, override=lambda t, s=step: zero if t == s else None)
            _, hist = m.forward(m.embed(x), trace=True, ctx=ctx)
            traces[step] = [h.tokens.data for h in hist]
    np.testing.assert_array_equal(traces[None][0], traces[1][0])
    # zero-weight block is a residual identity, so step 2 output equals step 1 output
    np.testing.assert_array_equal(traces[1][1], traces[1][0])
    assert not np.allclose(traces[None][1], traces[None][0])


def test_run_pruning_writes_outputs(tmp_path):
    m = tiny_model(4)
    state = run_pruning(m, toy_data(), None, rounds=2, full_epochs=0, graft_epochs=0, out_dir=tmp_path)
    rows = (tmp_path / "prune_rounds.csv").read_text().splitlines()
    assert rows[0] == ",".join(ROUND_FIELDS)
    z = np.load(tmp_path / "masks.npz")
    assert set(z.files) == set(state.masks)
    assert mask_sparsity(state) == pytest.approx(np.full(3, 0.36), abs=0.02)


# ------------------------------------------------------------------ sparsity
@pytest.mark.parametrize("p,ref", [(0, 0.0), (5, 0.672), (10, 0.893), (15, 0.965), (20, 0.988), (25, 0.996), (30, 0.999)])
def test_analytic_sparsity_table(p, ref):
    assert round(analytic_mask_sparsity(p, 0.2), 3) == pytest.approx(ref, abs=1e-3)


def test_iterated_exact_pruning_tracks_analytic():
    mask = np.ones((64, 64), bool)
    rng = np.random.default_rng(0)
    for p in range(1, 16):
        mask = prune_by_magnitude(mask, rng.random((64, 64)), 0.2)
        ms = StepMaskSet("w", mask[None])
        # floor() removes at most one weight fewer per round
        assert 0 <= analytic_mask_sparsity(p) - mask_sparsity(ms)[0] <= p / mask.size


@settings(max_examples=50, deadline=None)
@given(masks_strategy)
def test_weight_sparsity_at_most_mask_sparsity(masks):
    ms = StepMaskSet("w", masks)
    assert effective_sparsity(ms) <= mask_sparsity(ms).mean() + 1e-12
    assert effective_sparsity(ms) <= mask_sparsity(ms).min() + 1e-12


def test_effective_sparsity_example():
    masks = np.array([[[1, 0, 0, 0]], [[0, 1, 0, 0]]], bool)
    ms = StepMaskSet("w", masks)
    assert effective_sparsity(ms) == 0.5
    np.testing.assert_allclose(mask_sparsity(ms), [0.75, 0.75])


# ------------------------------------------------------------------ overlap metrics
def test_jaccard_examples():
    a = np.array([1, 1, 0, 0], bool)
    assert jaccard(a, a) == 1
    assert jaccard(a, ~a) == 0
    assert jaccard(np.array([1, 1, 0]), np.array([0, 1, 1])) == pytest.approx(1 / 3)
    assert jaccard(np.zeros(3), np.zeros(3)) == 1
    with pytest.raises(ValueError):
        jaccard(np.ones(3), np.ones(4))


def test_weighted_jaccard_is_union_weighted_mean():
    rng = np.random.default_rng(0)
    masks = rng.random((4, 20)) < 0.4
    pairs = [(0, 1), (0, 2), (1, 3)]
    w = [(masks[i] | masks[j]).sum() for i, j in pairs]
    ref = sum(wi * jaccard(masks[i], masks[j]) for wi, (i, j) in zip(w, pairs)) / sum(w)
    assert weighted_jaccard(masks, pairs) == pytest.approx(ref)


def test_specialization_examples():
    a = np.array([1, 1, 0, 0, 0, 0], bool)
    assert specialization(a, [np.array([0, 0, 1, 1, 0, 0])]) == (1.0, False)
    assert specialization(a, [np.array([1, 1, 1, 0, 0, 0])]) == (0.0, False)
    b = np.array([1, 1, 1, 1, 0, 0], bool)
    assert specialization(b, [np.array([1, 0, 0, 0, 0, 1]), np.array([0, 1, 0, 0, 0, 0])]) == (0.5, False)
    assert specialization(np.zeros(6), [a]) == (1.0, True)


@settings(max_examples=50, deadline=None)
@given(masks_strategy)
def test_unique_counts_bounded_by_union(masks):
    flat = masks.reshape(masks.shape[0], -1)
    total = 0.0
    for t in range(len(flat)):
        val, empty = specialization(flat[t], [flat[o] for o in range(len(flat)) if o != t])
        assert 0 <= val <= 1
        if not empty:
            total += val * flat[t].sum()
    assert total <= flat.any(axis=0).sum() + 1e-9


def test_utilization_examples():
    assert list(utilization_histogram(np.ones((12, 3, 3), bool))) == [0, 0, 9]
    assert list(utilization_histogram(np.eye(12, dtype=bool)[:, :, None])) == [12, 0, 0]
    use = [2, 6, 11]
    masks = np.zeros((12, 3), bool)
    for j, u in enumerate(use):
        masks[:u, j] = True
    assert list(utilization_histogram(masks)) == [1, 1, 1]
    # boundaries for S=12: 1-4 / 5-8 / 9-12
    masks = np.zeros((12, 6), bool)
    for j, u in enumerate([1, 4, 5, 8, 9, 12]):
        masks[:u, j] = True
    assert list(utilization_histogram(masks)) == [2, 2, 2]


@settings(max_examples=50, deadline=None)
@given(masks_strategy)
def test_utilization_partitions_live_weights(masks):
    assert utilization_histogram(masks).sum() == masks.any(axis=0).sum()
