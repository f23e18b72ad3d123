"""Internal classifiers on recurrent steps and confidence-thresholded inference."""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import ImageBatch, rng_stream
from .model import TokenState, VisionTransformer, count_flops, head_flops
from .tensor import Tensor
from .train import OptimState, adamw_step, cross_entropy


@dataclass
class ExitHead:
    step: int
    weight: Tensor
    bias: Tensor

    def __call__(self, features: Tensor) -> Tensor:
        return features @ self.weight + self.bias


@dataclass
class ExitPolicy:
    threshold: float
    steps: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.threshold < 0:
            raise ValueError("threshold must be non-negative")
        if any(b <= a for a, b in zip(self.steps, self.steps[1:])):
            raise ValueError("exit steps must be strictly increasing")

    @property
    def disabled(self) -> bool:
        return self.threshold >= 1.0


def default_exit_steps(total_steps: int) -> list[int]:
    """Upper half of the horizon, e.g. 6..12 for 12 steps and 3..6 for 6."""
    return list(range(max(1, total_steps // 2), total_steps + 1))


def make_heads(model: VisionTransformer, steps: list[int], seed: int = 0) -> list[ExitHead]:
    cfg = model.cfg
    rng = rng_stream(seed, "exit-heads")
    heads = []
    for s in steps:
        if not 1 <= s <= cfg.steps:
            raise ValueError(f"exit step {s} outside 1..{cfg.steps}")
        w = (rng.standard_normal((cfg.embed_dim, cfg.classes)) * 0.02).astype(model.dtype)
        heads.append(ExitHead(s, Tensor(w, requires_grad=True), Tensor(np.zeros(cfg.classes, model.dtype), requires_grad=True)))
    return heads


def energy_confidence(logits) -> np.ndarray:
    """log sum_k exp(logit_k), stable under large logits."""
    x = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    m = x.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True)))[..., 0]


def ce_auroc_loss(exit_logits: list[Tensor], targets, alpha: float) -> Tensor:
    """Sum over heads of (1-alpha) CE + alpha * mean_{pos,neg} sigmoid(E(neg) - E(pos))."""
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must lie in [0, 1]")
    targets = np.asarray(targets)
    total = None
    for logits in exit_logits:
        term = (1.0 - alpha) * cross_entropy(logits, targets)
        if alpha > 0:
            correct = logits.data.argmax(-1) == targets
            pos = np.flatnonzero(correct)
            neg = np.flatnonzero(~correct)
            if len(pos) and len(neg):
                energy = T.logsumexp(logits, axis=-1)
                diff = energy[neg].reshape(-1, 1) - energy[pos].reshape(1, -1)
                term = term + alpha * T.sigmoid(diff).mean()
        total = term if total is None else total + term
    if total is None:
        return Tensor(np.zeros((), dtype=np.float64))
    return total


def backbone_digest(model: VisionTransformer) -> str:
    h = hashlib.sha256()
    for name, t in model.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


def step_features(model: VisionTransformer, images: np.ndarray, steps: list[int], batch_size: int = 256) -> dict[int, np.ndarray]:
    """Normalized CLS features after each requested step (frozen backbone, no tape)."""
    out = {s: [] for s in steps}
    last = max(steps)
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            state = model.embed(images[start : start + batch_size])
            for t in range(1, last + 1):
                state = model.step(state)
                if t in out:
                    out[t].append(model.cls_features(state).data)
    return {s: np.concatenate(v) for s, v in out.items()}


def train_exit_heads(
    model: VisionTransformer,
    heads: list[ExitHead],
    data: ImageBatch,
    epochs: int,
    lr: float = 1e-3,
    alpha: float = 0.5,
    batch_size: int = 128,
    seed: int = 0,
) -> list[dict]:
    """Adam on the heads only; the backbone is left bitwise untouched."""
    before = backbone_digest(model)
    feats = step_features(model, data.images, [h.step for h in heads])
    for p in model.parameters():
        p.requires_grad = False
    opt = OptimState()
    history = []
    try:
        for epoch in range(epochs):
            rng = rng_stream(seed, f"exit-heads/{epoch}")
            order = rng.permutation(len(data))
            losses = []
            for start in range(0, len(order), batch_size):
                idx = order[start : start + batch_size]
                for h in heads:
                    h.weight.grad = h.bias.grad = None
                logits = [h(Tensor(feats[h.step][idx])) for h in heads]
                loss = ce_auroc_loss(logits, data.labels[idx], alpha)
                loss.backward()
                params, grads = {}, {}
                for i, h in enumerate(heads):
                    params[f"{i}.w"], grads[f"{i}.w"] = h.weight.data, h.weight.grad
                    params[f"{i}.b"], grads[f"{i}.b"] = h.bias.data, h.bias.grad
                adamw_step(params, grads, opt, lr)
                losses.append(loss.item())
            history.append({"epoch": epoch, "loss": float(np.mean(losses)) if losses else float("nan")})
    finally:
        for p in model.parameters():
            p.requires_grad = True
    if any(p.grad is not None for p in model.parameters()) or backbone_digest(model) != before:
        raise AssertionError("gradient reached the frozen backbone")
    return history


@dataclass
class ExitResult:
    predictions: np.ndarray
    exit_steps: np.ndarray
    flops: np.ndarray
    seconds: float

    @property
    def mean_flops(self) -> float:
        return float(self.flops.mean())


def sample_flops(model: VisionTransformer, steps_run: int, heads_run: int) -> int:
    """Embedding + steps_run recurrent steps + heads_run exit heads."""
    cfg = model.cfg
    base = count_flops(cfg, steps=steps_run) - head_flops(cfg) * (2 if cfg.distill else 1)
    return base + heads_run * head_flops(cfg)


def infer_early_exit(
    model: VisionTransformer,
    heads: list[ExitHead],
    policy: ExitPolicy,
    images: np.ndarray,
    batch_size: int = 256,
) -> ExitResult:
    """Stop each sample at the first head whose max softmax reaches the threshold.

    Samples that never exit take the last head's prediction. Only still-running
    samples are carried into later steps.
    """
    if policy.steps:
        heads = [h for h in heads if h.step in policy.steps]
    heads = sorted(heads, key=lambda h: h.step)
    by_step = {h.step: (i, h) for i, h in enumerate(heads)}
    n = len(images)
    preds = np.zeros(n, dtype=np.int64)
    exit_steps = np.zeros(n, dtype=np.int64)
    heads_run = np.zeros(n, dtype=np.int64)
    last = heads[-1].step
    t0 = time.perf_counter()
    with T.no_grad():
        for start in range(0, n, batch_size):
            idx = np.arange(start, min(start + batch_size, n))
            state = model.embed(images[idx])
            for t in range(1, last + 1):
                state = model.step(state)
                if t not in by_step:
                    continue
                _, head = by_step[t]
                logits = head(model.cls_features(state)).data
                heads_run[idx] += 1
                prob = T.softmax(Tensor(logits)).data
                done = np.ones(len(idx), bool) if t == last else (
                    (prob.max(-1) >= policy.threshold) if not policy.disabled else np.zeros(len(idx), bool)
                )
                preds[idx[done]] = logits[done].argmax(-1)
                exit_steps[idx[done]] = t
                keep = ~done
                if not keep.any():
                    break
                idx = idx[keep]
                state = TokenState(state.tokens[keep], state.step)
    flops = np.array([sample_flops(model, int(s), int(h)) for s, h in zip(exit_steps, heads_run)], dtype=np.int64)
    return ExitResult(preds, exit_steps, flops, time.perf_counter() - t0)


def threshold_sweep(model, heads, data: ImageBatch, taus=(0.1, 0.25, 0.5, 0.75, 0.9, 1.0), steps=None) -> list[dict]:
    """Accuracy / cost table across thresholds (columns of the CLI CSV)."""
    rows = []
    steps = steps or [h.step for h in heads]
    for tau in taus:
        res = infer_early_exit(model, heads, ExitPolicy(tau, steps), data.images)
        rows.append(
            {
                "tau": tau,
                "accuracy": float((res.predictions == data.labels).mean()),
                "mean_gflops": res.mean_flops / 1e9,
                "mean_ms": 1000.0 * res.seconds / max(len(data), 1),
                "mean_exit_step": float(res.exit_steps.mean()),
            }
        )
    return rows
