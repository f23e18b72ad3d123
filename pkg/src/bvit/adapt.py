"""Transfer protocols: linear probe, full fine-tuning, LoRA on QV or FFN, time-embedding tuning."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import ImageBatch, iterate_batches, random_hflip, rng_stream
from .model import ModelConfig, StepContext, VisionTransformer, _trunc_normal
from .tensor import Tensor
from .train import OptimState, TrainRecipe, adamw_step, decay_names, label_smooth_ce, lr_at

log = logging.getLogger(__name__)

MODES = ("probe", "full", "lora_qv", "lora_ffn", "te_only")
MODE_ALIASES = {
    "linear_probe": "probe",
    "lora-qv": "lora_qv",
    "lora-ffn": "lora_ffn",
    "te": "te_only",
    "te-only": "te_only",
}
HEAD_NAMES = ("embed.head_w", "embed.head_b")


@dataclass
class LoraAdapter:
    """Additive low-rank delta (alpha / r) * (x @ A) @ B; B starts at zero."""

    A: Tensor
    B: Tensor
    alpha: float = 8.0
    enabled: bool = True
    target: str = ""

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @classmethod
    def create(cls, fan_in: int, fan_out: int, rank: int, alpha: float, rng: np.random.Generator, dtype=np.float32, target: str = ""):
        if rank < 1:
            raise ValueError("LoRA rank must be >= 1")
        if rank > min(fan_in, fan_out):
            raise ValueError(f"rank {rank} exceeds min({fan_in}, {fan_out})")
        a = (rng.standard_normal((fan_in, rank)) / math.sqrt(fan_in)).astype(dtype)
        return cls(Tensor(a, requires_grad=True), Tensor(np.zeros((rank, fan_out), dtype), requires_grad=True), alpha, True, target)

    def delta(self, x: Tensor) -> Tensor:
        if not self.enabled or self.alpha == 0:
            return Tensor(np.zeros(x.shape[:-1] + (self.B.shape[1],), dtype=x.dtype))
        return ((x @ self.A) @ self.B) * (self.alpha / self.rank)

    def params(self) -> dict[str, Tensor]:
        return {f"{self.target}.A": self.A, f"{self.target}.B": self.B}

    def num_params(self) -> int:
        return self.A.size + self.B.size


@dataclass
class QvAdapter:
    """Q and V adapters on a fused QKV projection; the K slice gets no delta."""

    q: LoraAdapter
    v: LoraAdapter

    def delta(self, x: Tensor) -> Tensor:
        dq = self.q.delta(x)
        dv = self.v.delta(x)
        zeros = Tensor(np.zeros(dq.shape, dtype=dq.dtype))
        return T.concat([dq, zeros, dv], axis=-1)

    def params(self) -> dict[str, Tensor]:
        return {**self.q.params(), **self.v.params()}

    def num_params(self) -> int:
        return self.q.num_params() + self.v.num_params()


def lora_forward(w, x, adapter: LoraAdapter | None, bias=None) -> Tensor:
    """x @ W (+ b) plus the adapter delta; W is used as given and never updated here."""
    w = w if isinstance(w, Tensor) else Tensor(np.asarray(w))
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    if adapter is not None and adapter.rank > min(w.shape):
        raise ValueError(f"rank {adapter.rank} exceeds min{w.shape}")
    y = x @ w
    if bias is not None:
        y = y + bias
    return y + adapter.delta(x) if adapter is not None else y


def lora_param_count(cfg: ModelConfig, target: str, rank: int = 8) -> int:
    """r * (in + out) per adapted matrix, summed over distinct blocks."""
    d, h = cfg.embed_dim, cfg.hidden
    target = MODE_ALIASES.get(target, target).replace("lora_", "")
    if target == "qv":
        per_block = 2 * rank * (d + d)
    elif target == "ffn":
        per_block = rank * (d + h) + rank * (h + d)
    else:
        raise ValueError(f"unknown LoRA target {target!r}")
    return per_block * cfg.blocks


def make_adapters(model: VisionTransformer, target: str, rank: int = 8, alpha: float = 8.0, seed: int = 0) -> list[dict]:
    """One adapter dict per distinct block, keyed by layer name as the model expects."""
    cfg = model.cfg
    d, h = cfg.embed_dim, cfg.hidden
    rng = rng_stream(seed, f"lora/{target}")
    out = []
    for i in range(cfg.blocks):
        if target == "qv":
            q = LoraAdapter.create(d, d, rank, alpha, rng, model.dtype, f"lora{i}.q")
            v = LoraAdapter.create(d, d, rank, alpha, rng, model.dtype, f"lora{i}.v")
            out.append({"qkv": QvAdapter(q, v)})
        elif target == "ffn":
            out.append({
                "fc1": LoraAdapter.create(d, h, rank, alpha, rng, model.dtype, f"lora{i}.fc1"),
                "fc2": LoraAdapter.create(h, d, rank, alpha, rng, model.dtype, f"lora{i}.fc2"),
            })
        else:
            raise ValueError(f"unknown LoRA target {target!r}")
    return out


def adapter_params(adapters: list[dict]) -> dict[str, Tensor]:
    out = {}
    for blk in adapters:
        for a in blk.values():
            out.update(a.params())
    return out


def adapter_context(adapters: list[dict] | None) -> StepContext | None:
    if not adapters:
        return None
    return StepContext(adapters=lambda i: adapters[i])


# ------------------------------------------------------------------ freezing
@dataclass
class FreezePolicy:
    mode: str
    extra: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        self.mode = MODE_ALIASES.get(self.mode, self.mode)
        if self.mode not in MODES:
            raise ValueError(f"unknown transfer mode {self.mode!r}; expected one of {MODES}")

    @property
    def lora_target(self) -> str | None:
        return {"lora_qv": "qv", "lora_ffn": "ffn"}.get(self.mode)


def apply_freeze(model: VisionTransformer, policy: FreezePolicy) -> tuple[set[str], set[str]]:
    """Partition model parameter names into (trainable, frozen) and set requires_grad to match."""
    params = dict(model.named_parameters())
    if policy.mode == "full":
        trainable = set(params)
    else:
        trainable = set(HEAD_NAMES)
        if policy.mode == "te_only":
            if "embed.time" not in params:
                raise ValueError("te_only needs a model with time embeddings")
            trainable.add("embed.time")
    for name in policy.extra:
        if name not in params:
            raise KeyError(f"unknown tensor {name!r} in freeze policy")
        trainable.add(name)
    frozen = set(params) - trainable
    for name, t in params.items():
        t.requires_grad = name in trainable
    return trainable, frozen


def backbone_count(model: VisionTransformer) -> int:
    return sum(t.size for n, t in model.named_parameters() if n not in HEAD_NAMES)


def time_embedding_count(cfg: ModelConfig) -> int:
    return cfg.steps * cfg.embed_dim if cfg.has_time_embed else 0


def digest(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arrays[name]).tobytes())
    return h.hexdigest()


def reset_head(model: VisionTransformer, classes: int, seed: int = 0) -> VisionTransformer:
    """Copy of ``model`` with a freshly initialized classifier for ``classes`` outputs."""
    out = model.clone()
    out.cfg = model.cfg.replace(classes=classes)
    rng = rng_stream(seed, "transfer-head")
    e = out.embed_params
    e.head_w = Tensor(_trunc_normal(rng, (out.cfg.embed_dim, classes), dtype=out.dtype), requires_grad=True)
    e.head_b = Tensor(np.zeros(classes, out.dtype), requires_grad=True)
    return out


# lr, min_lr, weight decay per protocol; te_only borrows the adapter setting
MODE_HPARAMS = {
    "probe": (1e-3, 0.0, 1e-3),
    "full": (5e-5, 1e-6, 0.05),
    "lora_qv": (5e-4, 5e-6, 1e-4),
    "lora_ffn": (5e-4, 5e-6, 1e-4),
    "te_only": (5e-4, 5e-6, 1e-4),
}


def transfer_recipe(
    epochs: int = 40,
    lr: float | None = None,
    batch_size: int = 64,
    seed: int = 0,
    mode: str = "probe",
) -> TrainRecipe:
    """Warmup min(5, epochs) then cosine; ``lr`` overrides the mode default and scales min_lr with it."""
    base, floor, wd = MODE_HPARAMS[MODE_ALIASES.get(mode, mode)]
    if lr is not None:
        floor, base = floor * lr / base, lr
    return TrainRecipe(
        epochs=epochs, warmup_epochs=min(5, epochs), lr=base, min_lr=floor, weight_decay=wd,
        label_smoothing=0.0, mixup_alpha=0.0, batch_size=batch_size, seed=seed,
    )


def transfer_run(
    model: VisionTransformer,
    train: ImageBatch,
    val: ImageBatch | None,
    policy: FreezePolicy,
    recipe: TrainRecipe,
    classes: int | None = None,
    rank: int = 8,
    alpha: float = 8.0,
) -> dict:
    """Re-head ``model``, train the policy's parameter set, and check the frozen part stayed put."""
    classes = classes or int(train.labels.max()) + 1
    work = reset_head(model, classes, recipe.seed)
    trainable, frozen = apply_freeze(work, policy)
    params = {n: t for n, t in work.named_parameters() if n in trainable}
    adapters = None
    if policy.lora_target:
        adapters = make_adapters(work, policy.lora_target, rank, alpha, recipe.seed)
        params.update(adapter_params(adapters))
    ctx = adapter_context(adapters)
    frozen_before = digest({n: t.data for n, t in work.named_parameters() if n in frozen})
    decay = decay_names(params)
    opt = OptimState(beta1=recipe.beta1, beta2=recipe.beta2, eps=recipe.adam_eps, weight_decay=recipe.weight_decay)
    history = []
    for epoch in range(recipe.epochs):
        lr = lr_at(epoch, recipe)
        shuffle = rng_stream(recipe.seed, f"transfer/{epoch}")
        total = 0.0
        for batch in iterate_batches(train, recipe.batch_size, shuffle):
            images = random_hflip(batch.images, shuffle) if recipe.hflip else batch.images
            for p in params.values():
                p.grad = None
            loss = label_smooth_ce(work(images, ctx=ctx), batch.labels, recipe.label_smoothing)
            loss.backward()
            grads = {n: p.grad for n, p in params.items() if p.grad is not None}
            adamw_step({n: params[n].data for n in grads}, grads, opt, lr, decay)
            total += loss.item() * len(batch)
        history.append({"epoch": epoch, "loss": total / max(len(train), 1), "lr": lr})
    for t in work.parameters():
        t.requires_grad = True
        t.grad = None
    if digest({n: t.data for n, t in work.named_parameters() if n in frozen}) != frozen_before:
        raise AssertionError("frozen parameters changed during transfer")
    acc = float("nan")
    if val is not None and len(val):
        acc = adapted_accuracy(work, val, adapters)
    te = time_embedding_count(work.cfg) if policy.mode == "te_only" else 0
    n_adapter = sum(p.size for n, p in params.items() if n.startswith("lora"))
    return {
        "mode": policy.mode,
        "accuracy": acc,
        "trainable": sum(p.size for p in params.values()),
        "adapter_params": n_adapter,
        "te_params": te,
        "history": history,
        "model": work,
        "adapters": adapters,
    }


def adapted_accuracy(model: VisionTransformer, data: ImageBatch, adapters=None, batch_size: int = 256) -> float:
    ctx = adapter_context(adapters)
    correct = 0
    with T.no_grad():
        for s in range(0, len(data), batch_size):
            logits = model(data.images[s : s + batch_size], ctx=ctx).data
            correct += int((logits.argmax(-1) == data.labels[s : s + batch_size]).sum())
    return correct / max(len(data), 1)
