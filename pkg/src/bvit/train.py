"""AdamW, warmup+cosine schedule, smoothed cross-entropy, EMA and the epoch loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Checkpoint, ImageBatch, iterate_batches, mixup, one_hot, random_hflip, rng_stream, save_checkpoint
from .model import VisionTransformer
from .tensor import Tensor

log = logging.getLogger(__name__)

NO_DECAY_SUFFIXES = ("_b", "norm", "norm1", "norm2", "pos", "cls", "registers", "time", "dist")


@dataclass
class TrainRecipe:
    epochs: int = 20
    warmup_epochs: int = 2
    lr: float = 1e-3
    warmup_factor: float = 0.033
    min_lr: float = 0.0
    weight_decay: float = 0.05
    label_smoothing: float = 0.1
    mixup_alpha: float = 0.0
    ema_decay: float = 0.999
    batch_size: int = 64
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 0.0
    hflip: bool = True
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.warmup_epochs > self.epochs:
            raise ValueError("warmup_epochs cannot exceed epochs")
        if not 0 < self.warmup_factor <= 1:
            raise ValueError("warmup_factor must lie in (0, 1]")
        if not 0 <= self.ema_decay <= 1:
            raise ValueError("ema_decay must lie in [0, 1]")

    @classmethod
    def from_dict(cls, values: dict) -> "TrainRecipe":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})

    def to_dict(self) -> dict:
        return asdict(self)


IMAGENET_RECIPE = TrainRecipe(
    epochs=300, warmup_epochs=30, lr=5e-4, warmup_factor=0.033, weight_decay=0.05,
    label_smoothing=0.1, mixup_alpha=0.8, ema_decay=0.99995, batch_size=1024,
)


# -------------------------------------------------------------- optimizer
@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimState,
    lr: float,
    decay: set[str] | None = None,
) -> None:
    """In-place AdamW update. ``decay`` names the tensors that receive weight decay (default: all)."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
        if state.weight_decay and (decay is None or name in decay):
            p -= (lr * state.weight_decay) * p
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)


def decay_names(names) -> set[str]:
    """Weights that take decoupled decay: everything except norms, biases and embeddings."""
    out = set()
    for name in names:
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith(NO_DECAY_SUFFIXES) or leaf in NO_DECAY_SUFFIXES:
            continue
        out.add(name)
    return out


def lr_at(epoch: int, recipe: TrainRecipe) -> float:
    """Linear warmup from warmup_factor*lr to lr, then cosine to min_lr."""
    if not 0 <= epoch < recipe.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {recipe.epochs})")
    base = recipe.lr
    w = recipe.warmup_epochs
    if epoch < w:
        f = recipe.warmup_factor
        return base * (f + (1.0 - f) * epoch / w)
    span = recipe.epochs - w
    progress = (epoch - w) / span
    return recipe.min_lr + (base - recipe.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


# ------------------------------------------------------------------ losses
def label_smooth_ce(logits: Tensor, target, eps: float = 0.0) -> Tensor:
    """Cross-entropy against (1-eps)*target + eps/K; ``target`` is class ids or rows of probabilities."""
    if not 0 <= eps < 1:
        raise ValueError("label smoothing must lie in [0, 1)")
    k = logits.shape[-1]
    target = np.asarray(target)
    if target.ndim == 1:
        dist = one_hot(target, k, dtype=logits.dtype)
    else:
        if target.shape[-1] != k:
            raise ValueError(f"target has {target.shape[-1]} classes, logits have {k}")
        dist = target.astype(logits.dtype)
    q = (1.0 - eps) * dist + eps / k
    return -(T.log_softmax(logits, axis=-1) * q).sum(axis=-1).mean()


def cross_entropy(logits: Tensor, labels) -> Tensor:
    return label_smooth_ce(logits, labels, 0.0)


def hard_distill_loss(cls_logits: Tensor, dist_logits: Tensor | None, target, teacher_logits) -> Tensor:
    """0.5 CE(cls head, labels) + 0.5 CE(distillation head, teacher argmax); ties go to the lowest index."""
    if dist_logits is None:
        raise ValueError("hard distillation needs a model with a distillation token")
    teacher = np.asarray(teacher_logits.data if isinstance(teacher_logits, Tensor) else teacher_logits)
    if teacher.shape[-1] != cls_logits.shape[-1]:
        raise ValueError("teacher and student class counts differ")
    teacher_labels = np.argmax(teacher, axis=-1)
    return 0.5 * cross_entropy(cls_logits, target) + 0.5 * cross_entropy(dist_logits, teacher_labels)


def ema_update(shadow: dict[str, np.ndarray], params: dict[str, np.ndarray], decay: float) -> None:
    for name, p in params.items():
        s = shadow[name]
        s *= decay
        s += (1.0 - decay) * p


# -------------------------------------------------------------- training
@dataclass
class TrainState:
    opt: OptimState
    ema: dict[str, np.ndarray]
    epoch: int = 0
    teacher: VisionTransformer | None = None


def init_train_state(model: VisionTransformer, recipe: TrainRecipe) -> TrainState:
    opt = OptimState(beta1=recipe.beta1, beta2=recipe.beta2, eps=recipe.adam_eps, weight_decay=recipe.weight_decay)
    return TrainState(opt=opt, ema=model.state_dict())


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


def train_epoch(
    model: VisionTransformer,
    data: ImageBatch,
    recipe: TrainRecipe,
    state: TrainState,
    trainable: set[str] | None = None,
    lr: float | None = None,
    forward=None,
) -> dict:
    """One pass over ``data``. Returns loss/accuracy/lr/seconds for the epoch.

    ``trainable`` restricts updates to a subset of parameter names; ``forward``
    replaces ``model(images)`` (used for adapters and graft training).
    """
    t0 = time.perf_counter()
    lr = lr_at(state.epoch, recipe) if lr is None else lr
    params = dict(model.named_parameters())
    if trainable is None:
        trainable = set(params)
    for name, p in params.items():
        p.requires_grad = name in trainable
    decay = decay_names(trainable)
    shuffle = rng_stream(recipe.seed, f"shuffle/{state.epoch}")
    aug = rng_stream(recipe.seed, f"augment/{state.epoch}")
    total_loss = 0.0
    correct = 0
    seen = 0
    for bi, batch in enumerate(iterate_batches(data, recipe.batch_size, shuffle)):
        images = random_hflip(batch.images, aug) if recipe.hflip else batch.images
        target = batch.labels
        if recipe.mixup_alpha > 0 and len(batch) > 1:
            mixed = mixup(ImageBatch(images, batch.labels), recipe.mixup_alpha, aug, model.cfg.classes)
            images, target = mixed.images, mixed.soft_labels
        model.zero_grad()
        if forward is not None:
            logits = forward(images)
            loss = label_smooth_ce(logits, target, recipe.label_smoothing)
        elif state.teacher is not None:
            st, _ = model.forward(model.embed(images))
            logits = model.classify(st)
            teacher_logits = state.teacher.predict_logits(images)
            loss = hard_distill_loss(logits, model.classify_dist(st), batch.labels, teacher_logits)
        else:
            logits = model(images)
            loss = label_smooth_ce(logits, target, recipe.label_smoothing)
        value = loss.item()
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite loss at batch {bi} of epoch {state.epoch}")
        loss.backward()
        grads = {n: params[n].grad for n in trainable if params[n].grad is not None}
        if recipe.grad_clip > 0:
            clip_grads(grads, recipe.grad_clip)
        adamw_step({n: params[n].data for n in grads}, grads, state.opt, lr, decay)
        ema_update(state.ema, {n: p.data for n, p in params.items()}, recipe.ema_decay)
        total_loss += value * len(batch)
        correct += int((logits.data.argmax(-1) == batch.labels).sum())
        seen += len(batch)
    for p in params.values():
        p.requires_grad = True
        p.grad = None
    state.epoch += 1
    return {
        "loss": total_loss / max(seen, 1),
        "acc": correct / max(seen, 1),
        "lr": lr,
        "seconds": time.perf_counter() - t0,
    }


def evaluate(model: VisionTransformer, data: ImageBatch, batch_size: int = 256, steps: int | None = None) -> dict:
    logits = model.predict_logits(data.images, batch_size, steps=steps)
    with T.no_grad():
        loss = cross_entropy(Tensor(logits), data.labels).item() if len(data) else float("nan")
    acc = float((logits.argmax(-1) == data.labels).mean()) if len(data) else float("nan")
    return {"loss": loss, "acc": acc}


def ema_model(model: VisionTransformer, state: TrainState) -> VisionTransformer:
    shadow = model.clone()
    shadow.load_state_dict(state.ema)
    return shadow


METRIC_FIELDS = ["epoch", "split", "loss", "acc", "lr", "seconds"]


def append_metrics(path: Path, rows: list[dict]) -> None:
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        if new:
            w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in METRIC_FIELDS})


def make_checkpoint(model: VisionTransformer, state: TrainState | None = None, extra: dict | None = None) -> Checkpoint:
    config = model.cfg.to_dict()
    if extra:
        config.update(extra)
    return Checkpoint(config=config, tensors=model.state_dict(), ema=dict(state.ema) if state else {})


def fit(
    model: VisionTransformer,
    train: ImageBatch,
    val: ImageBatch | None,
    recipe: TrainRecipe,
    out_dir: str | Path | None = None,
    teacher: VisionTransformer | None = None,
) -> list[dict]:
    """Full training run; evaluates raw and EMA weights after each epoch."""
    state = init_train_state(model, recipe)
    state.teacher = teacher
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    history = []
    for epoch in range(recipe.epochs):
        m = train_epoch(model, train, recipe, state)
        rows = [dict(epoch=epoch, split="train", **m)]
        if val is not None and len(val):
            ev = evaluate(model, val)
            ev_ema = evaluate(ema_model(model, state), val)
            rows.append(dict(epoch=epoch, split="val", lr=m["lr"], seconds="", **ev))
            rows.append(dict(epoch=epoch, split="val_ema", lr=m["lr"], seconds="", **ev_ema))
        log.info("epoch %d: %s", epoch, rows)
        history.extend(rows)
        if out:
            append_metrics(out / "metrics.csv", rows)
            if recipe.checkpoint_every and (epoch + 1) % recipe.checkpoint_every == 0:
                save_checkpoint(out / f"epoch{epoch + 1:04d}.bvw", make_checkpoint(model, state))
    if out:
        save_checkpoint(out / "final.bvw", make_checkpoint(model, state))
    return history
