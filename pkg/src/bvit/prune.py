"""Step-conditioned masks, iterative magnitude pruning with graft training, pathway metrics."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from .data import ImageBatch, iterate_batches, random_hflip, rng_stream
from .model import BLOCK_LAYERS, BlockParams, StepContext, VisionTransformer
from .tensor import Tensor
from .train import OptimState, TrainRecipe, adamw_step, cross_entropy, init_train_state, lr_at, train_epoch

log = logging.getLogger(__name__)


@dataclass
class StepMaskSet:
    layer: str
    masks: np.ndarray  # (S, in, out) bool

    @property
    def steps(self) -> int:
        return self.masks.shape[0]

    @classmethod
    def full(cls, layer: str, steps: int, shape: tuple[int, ...]) -> "StepMaskSet":
        return cls(layer, np.ones((steps,) + tuple(shape), dtype=bool))


@dataclass
class PruneState:
    theta_init: dict[str, np.ndarray]
    masks: dict[str, StepMaskSet]
    rate: float = 0.2
    rounds: int = 13
    full_epochs: int = 1
    graft_epochs: int = 1
    graft_lr: float = 1e-4
    round: int = 0
    history: list[dict] = field(default_factory=list)


def masked_forward(w, bias, mask, x) -> Tensor:
    """(W * M_t) applied to x, bias left unmasked."""
    w = w if isinstance(w, Tensor) else Tensor(w)
    x = x if isinstance(x, Tensor) else Tensor(x)
    mask = np.asarray(mask)
    if mask.shape != w.shape:
        raise ValueError(f"mask shape {mask.shape} does not match weight shape {w.shape}")
    y = x @ (w * mask.astype(w.dtype))
    return y + bias if bias is not None else y


def init_prune_state(model: VisionTransformer, **kw) -> PruneState:
    masks = {}
    for i, blk in enumerate(model.blocks):
        for layer in BLOCK_LAYERS:
            name = f"block{i}.{layer}"
            masks[name] = StepMaskSet.full(name, model.cfg.steps, blk.weight(layer).shape)
    return PruneState(theta_init=model.state_dict(), masks=masks, **kw)


def mask_context(model: VisionTransformer, masks: dict[str, StepMaskSet], override=None) -> StepContext:
    dtype = model.dtype
    cache: dict[tuple[int, int], dict] = {}

    def lookup(t: int, i: int) -> dict:
        key = (t, i)
        if key not in cache:
            cache[key] = {
                layer: masks[f"block{i}.{layer}"].masks[t].astype(dtype)
                for layer in BLOCK_LAYERS
                if f"block{i}.{layer}" in masks
            }
        return cache[key]

    return StepContext(masks=lookup, override=override)


def prune_by_magnitude(mask: np.ndarray, magnitude: np.ndarray, rate: float) -> np.ndarray:
    """Drop floor(rate * active) of the smallest-magnitude active entries.

    Ties are broken by row-major index so the result is deterministic.
    """
    flat_mask = mask.reshape(-1)
    active = np.flatnonzero(flat_mask)
    k = int(math.floor(rate * active.size))
    out = flat_mask.copy()
    if k == 0:
        return out.reshape(mask.shape)
    mags = np.abs(magnitude.reshape(-1)[active])
    order = np.argsort(mags, kind="stable")
    out[active[order[:k]]] = False
    return out.reshape(mask.shape)


def _fresh_blocks(model: VisionTransformer, theta: dict[str, np.ndarray]) -> list[BlockParams]:
    blocks = copy.deepcopy(model.blocks)
    for i, blk in enumerate(blocks):
        for name, t in blk.named():
            t.data = np.array(theta[f"block{i}.{name}"], dtype=model.dtype)
            t.requires_grad = True
            t.grad = None
    return blocks


def train_graft(
    model: VisionTransformer,
    state: PruneState,
    step: int,
    data: ImageBatch,
    batch_size: int,
    seed: int,
) -> list[BlockParams]:
    """Clone the encoder from theta_init and train it only at recurrent ``step``; main model frozen."""
    graft = _fresh_blocks(model, state.theta_init)
    ctx = mask_context(model, state.masks, override=lambda t: graft if t == step else None)
    params = {f"g{i}.{n}": t for i, blk in enumerate(graft) for n, t in blk.named()}
    frozen = model.parameters()
    for p in frozen:
        p.requires_grad = False
    opt = OptimState()
    try:
        for epoch in range(state.graft_epochs):
            shuffle = rng_stream(seed, f"graft/{state.round}/{step}/{epoch}")
            for batch in iterate_batches(data, batch_size, shuffle):
                for p in params.values():
                    p.grad = None
                loss = cross_entropy(model(random_hflip(batch.images, shuffle), ctx=ctx), batch.labels)
                loss.backward()
                grads = {n: p.grad for n, p in params.items() if p.grad is not None}
                adamw_step({n: params[n].data for n in grads}, grads, opt, state.graft_lr)
    finally:
        for p in frozen:
            p.requires_grad = True
    return graft


def prune_round(
    model: VisionTransformer,
    state: PruneState,
    data: ImageBatch,
    val: ImageBatch | None = None,
    recipe: TrainRecipe | None = None,
) -> PruneState:
    """Train under masks, estimate per-step importance by graft training, prune, rewind."""
    if state.round >= state.rounds:
        raise ValueError(f"all {state.rounds} rounds already done")
    recipe = recipe or TrainRecipe(epochs=max(state.full_epochs, 1), warmup_epochs=0, mixup_alpha=0.0)
    ctx = mask_context(model, state.masks)

    tstate = init_train_state(model, recipe)
    for e in range(state.full_epochs):
        lr = lr_at(min(e, recipe.epochs - 1), recipe)
        train_epoch(model, data, recipe, tstate, lr=lr, forward=lambda x: model(x, ctx=ctx))
    val_acc = float("nan")
    if val is not None and len(val):
        val_acc = masked_accuracy(model, state.masks, val)

    new_masks = {name: StepMaskSet(name, ms.masks.copy()) for name, ms in state.masks.items()}
    for t in range(model.cfg.steps):
        graft = train_graft(model, state, t, data, recipe.batch_size, recipe.seed)
        for name, ms in state.masks.items():
            block_idx = int(name.split(".")[0][5:])
            layer = name.split(".")[1]
            weight = graft[block_idx].weight(layer).data
            if not ms.masks[t].any():
                log.warning("layer %s step %d has no active weights; skipping", name, t + 1)
                continue
            new_masks[name].masks[t] = prune_by_magnitude(ms.masks[t], weight, state.rate)

    state.masks = new_masks
    model.load_state_dict(state.theta_init)
    state.round += 1
    state.history.extend(round_metrics(state, val_acc))
    return state


def masked_accuracy(model: VisionTransformer, masks: dict[str, StepMaskSet], data: ImageBatch, batch_size: int = 256) -> float:
    from . import tensor as T

    ctx = mask_context(model, masks)
    correct = 0
    with T.no_grad():
        for s in range(0, len(data), batch_size):
            logits = model(data.images[s : s + batch_size], ctx=ctx).data
            correct += int((logits.argmax(-1) == data.labels[s : s + batch_size]).sum())
    return correct / max(len(data), 1)


# ------------------------------------------------------------------ metrics
def mask_sparsity(state_or_masks) -> np.ndarray:
    """Per-step fraction of zero mask entries, pooled over all masked layers."""
    masks = state_or_masks.masks if isinstance(state_or_masks, PruneState) else state_or_masks
    sets = list(masks.values()) if isinstance(masks, dict) else [masks]
    steps = sets[0].steps
    zeros = np.zeros(steps)
    total = 0
    for ms in sets:
        zeros += (~ms.masks).reshape(steps, -1).sum(axis=1)
        total += ms.masks[0].size
    return zeros / total


def mean_mask_sparsity(state_or_masks) -> float:
    return float(mask_sparsity(state_or_masks).mean())


def effective_sparsity(state_or_masks) -> float:
    """Fraction of weights inactive in every step's mask."""
    masks = state_or_masks.masks if isinstance(state_or_masks, PruneState) else state_or_masks
    sets = list(masks.values()) if isinstance(masks, dict) else [masks]
    dead = sum(int((~ms.masks.any(axis=0)).sum()) for ms in sets)
    total = sum(ms.masks[0].size for ms in sets)
    return dead / total


def analytic_mask_sparsity(rounds: int, rate: float = 0.2) -> float:
    return 1.0 - (1.0 - rate) ** rounds


def jaccard(a: np.ndarray, b: np.ndarray) -> float:
    """|a and b| / |a or b| over active entries; 1 when both are empty."""
    a = np.asarray(a, bool)
    b = np.asarray(b, bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return int((a & b).sum()) / union


def weighted_jaccard(masks: np.ndarray, pairs=None) -> float:
    """Pairwise Jaccard averaged with weights |M_i or M_j| (= sum of intersections / sum of unions)."""
    masks = np.asarray(masks, bool)
    pairs = pairs if pairs is not None else list(combinations(range(len(masks)), 2))
    inter = union = 0
    for i, j in pairs:
        inter += int((masks[i] & masks[j]).sum())
        union += int((masks[i] | masks[j]).sum())
    return 1.0 if union == 0 else inter / union


def specialization(mask_t: np.ndarray, others) -> tuple[float, bool]:
    """Share of step t's active weights used by no other step.

    Returns ``(1.0, True)`` when the step's mask is empty (fully pruned).
    """
    m = np.asarray(mask_t, bool)
    if not m.any():
        return 1.0, True
    used = np.zeros_like(m)
    for o in others:
        o = np.asarray(o, bool)
        if o.shape != m.shape:
            raise ValueError("mask shapes differ")
        used |= o
    return float((m & ~used).sum() / m.sum()), False


def utilization_histogram(masks: np.ndarray) -> np.ndarray:
    """Counts of weights active in the lower, middle and upper third of the steps (1-4/5-8/9-12 at S=12)."""
    masks = np.asarray(masks, bool)
    steps = masks.shape[0]
    use = masks.reshape(steps, -1).sum(axis=0)
    use = use[use > 0]
    bucket = np.ceil(use * 3 / steps).astype(int) - 1
    return np.bincount(np.clip(bucket, 0, 2), minlength=3)


def round_metrics(state: PruneState, val_acc: float = float("nan")) -> list[dict]:
    rows = []
    for name, ms in state.masks.items():
        weight_sp = effective_sparsity({name: ms})
        for t in range(ms.steps):
            others = [ms.masks[o] for o in range(ms.steps) if o != t]
            spec, _ = specialization(ms.masks[t], others)
            pairs = [(t, o) for o in range(ms.steps) if o != t]
            rows.append(
                {
                    "round": state.round,
                    "layer": name,
                    "step": t + 1,
                    "mask_sparsity": float((~ms.masks[t]).mean()),
                    "weight_sparsity": weight_sp,
                    "specialization": spec,
                    "mean_jaccard": weighted_jaccard(ms.masks, pairs) if pairs else 1.0,
                    "val_acc": val_acc,
                }
            )
    return rows


ROUND_FIELDS = ["round", "layer", "step", "mask_sparsity", "weight_sparsity", "specialization", "mean_jaccard", "val_acc"]


def write_round_csv(path: str | Path, rows: list[dict]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ROUND_FIELDS)
        w.writeheader()
        w.writerows(rows)


def run_pruning(
    model: VisionTransformer,
    data: ImageBatch,
    val: ImageBatch | None,
    rounds: int,
    full_epochs: int,
    graft_epochs: int,
    rate: float = 0.2,
    recipe: TrainRecipe | None = None,
    out_dir: str | Path | None = None,
) -> PruneState:
    state = init_prune_state(model, rate=rate, rounds=rounds, full_epochs=full_epochs, graft_epochs=graft_epochs)
    for _ in range(rounds):
        prune_round(model, state, data, val, recipe)
        log.info("round %d: mask sparsity %.4f", state.round, mean_mask_sparsity(state))
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_round_csv(out / "prune_rounds.csv", state.history)
        np.savez(out / "masks.npz", **{name: ms.masks for name, ms in state.masks.items()})
    return state
