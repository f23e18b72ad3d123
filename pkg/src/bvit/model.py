"""ViT / bViT family: B distinct blocks applied for S recurrent steps."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .data import patchify, rng_stream
from .tensor import Tensor

VARIANTS = ("base", "te", "registers", "fl", "sc")
BLOCK_LAYERS = ("qkv", "proj", "fc1", "fc2")


@dataclass
class ModelConfig:
    embed_dim: int = 128
    heads: int = 4
    blocks: int = 1
    steps: int = 6
    patch: int = 4
    image: int = 32
    channels: int = 3
    classes: int = 10
    ffn_ratio: int = 4
    variant: str = "base"
    registers: int = 0
    fl_n: int = 1
    sc_n: int = 1
    tied: bool = True
    eps: float = 1e-6
    distill: bool = False
    mean: tuple | None = None
    std: tuple | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if self.blocks < 1:
            raise ValueError("blocks must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.registers < 0:
            raise ValueError("registers must be >= 0")
        if self.image % self.patch:
            raise ValueError("image extent must be divisible by patch")
        if self.fl_n < 1 or self.sc_n < 1:
            raise ValueError("fl_n and sc_n must be >= 1")
        if self.variant == "registers" and self.registers == 0:
            self.registers = 4
        for key in ("mean", "std"):
            v = getattr(self, key)
            if v is not None and not isinstance(v, tuple):
                setattr(self, key, tuple(v) if isinstance(v, (list, np.ndarray)) else (float(v),))

    @property
    def grid(self) -> int:
        return self.image // self.patch

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def prefix(self) -> int:
        """Tokens ahead of the patches: CLS, optional distillation token, registers."""
        return 1 + int(self.distill) + self.registers

    @property
    def tokens(self) -> int:
        return self.prefix + self.num_patches

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def hidden(self) -> int:
        return self.ffn_ratio * self.embed_dim

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch * self.patch

    @property
    def has_time_embed(self) -> bool:
        return self.variant in ("te", "fl", "sc")

    @property
    def has_aux_block(self) -> bool:
        return self.variant in ("fl", "sc") and not self.tied

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})

    def replace(self, **kw) -> "ModelConfig":
        d = self.to_dict()
        d.update(kw)
        return ModelConfig(**d)


MODEL_PRESETS = {
    "vit-s": dict(embed_dim=384, heads=6, blocks=12, steps=1),
    "vit-b": dict(embed_dim=768, heads=12, blocks=12, steps=1),
    "vit-l": dict(embed_dim=1024, heads=16, blocks=24, steps=1),
    "bvit-s": dict(embed_dim=384, heads=6, blocks=1, steps=12),
    "bvit-b": dict(embed_dim=768, heads=12, blocks=1, steps=12),
    "bvit-l": dict(embed_dim=1024, heads=16, blocks=1, steps=24),
}


def imagenet_config(name: str, **kw) -> ModelConfig:
    """Full-scale configurations at 224x224, patch 16, 1000 classes."""
    base = dict(patch=16, image=224, channels=3, classes=1000)
    base.update(MODEL_PRESETS[name])
    base.update(kw)
    return ModelConfig(**base)


# ------------------------------------------------------------------ params
@dataclass
class BlockParams:
    qkv_w: Tensor
    qkv_b: Tensor
    proj_w: Tensor
    proj_b: Tensor
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor
    norm1: Tensor
    norm2: Tensor

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for f in fields(self):
            yield f.name, getattr(self, f.name)

    def weight(self, layer: str) -> Tensor:
        return getattr(self, f"{layer}_w")


@dataclass
class EmbedParams:
    patch_w: Tensor
    patch_b: Tensor
    pos: Tensor
    cls: Tensor
    head_w: Tensor
    head_b: Tensor
    norm: Tensor
    registers: Tensor | None = None
    time: Tensor | None = None
    dist: Tensor | None = None
    dist_w: Tensor | None = None
    dist_b: Tensor | None = None

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for f in fields(self):
            t = getattr(self, f.name)
            if t is not None:
                yield f.name, t


@dataclass
class TokenState:
    tokens: Tensor
    step: int = 0


def _trunc_normal(rng, shape, std=0.02, dtype=np.float32):
    return (np.clip(rng.standard_normal(shape), -2, 2) * std).astype(dtype)


def init_block(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> BlockParams:
    d, h = cfg.embed_dim, cfg.hidden

    def p(arr):
        return Tensor(arr, requires_grad=True)

    return BlockParams(
        qkv_w=p(_trunc_normal(rng, (d, 3 * d), dtype=dtype)),
        qkv_b=p(np.zeros(3 * d, dtype)),
        proj_w=p(_trunc_normal(rng, (d, d), dtype=dtype)),
        proj_b=p(np.zeros(d, dtype)),
        fc1_w=p(_trunc_normal(rng, (d, h), dtype=dtype)),
        fc1_b=p(np.zeros(h, dtype)),
        fc2_w=p(_trunc_normal(rng, (h, d), dtype=dtype)),
        fc2_b=p(np.zeros(d, dtype)),
        norm1=p(np.ones(d, dtype)),
        norm2=p(np.ones(d, dtype)),
    )


def init_embed(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> EmbedParams:
    d = cfg.embed_dim

    def p(arr):
        return Tensor(arr, requires_grad=True)

    e = EmbedParams(
        patch_w=p(_trunc_normal(rng, (cfg.patch_dim, d), dtype=dtype)),
        patch_b=p(np.zeros(d, dtype)),
        pos=p(_trunc_normal(rng, (cfg.tokens, d), dtype=dtype)),
        cls=p(_trunc_normal(rng, (d,), dtype=dtype)),
        head_w=p(_trunc_normal(rng, (d, cfg.classes), dtype=dtype)),
        head_b=p(np.zeros(cfg.classes, dtype)),
        norm=p(np.ones(d, dtype)),
    )
    if cfg.registers:
        e.registers = p(_trunc_normal(rng, (cfg.registers, d), dtype=dtype))
    if cfg.has_time_embed:
        e.time = p(_trunc_normal(rng, (max(cfg.steps, 1), d), dtype=dtype))
    if cfg.distill:
        e.dist = p(_trunc_normal(rng, (d,), dtype=dtype))
        e.dist_w = p(_trunc_normal(rng, (d, cfg.classes), dtype=dtype))
        e.dist_b = p(np.zeros(cfg.classes, dtype))
    return e


# ---------------------------------------------------------------- layers
def linear(x: Tensor, w: Tensor, b: Tensor | None, mask: np.ndarray | None = None, adapter=None) -> Tensor:
    """x @ (w * mask) + b, plus an optional low-rank adapter delta."""
    weight = w if mask is None else w * mask
    y = x @ weight
    if b is not None:
        y = y + b
    if adapter is not None:
        y = y + adapter.delta(x)
    return y


def attention(
    h: Tensor,
    p: BlockParams,
    heads: int,
    masks: dict | None = None,
    adapters: dict | None = None,
    record: dict | None = None,
) -> Tensor:
    b, n, d = h.shape
    dh = d // heads
    masks = masks or {}
    adapters = adapters or {}
    qkv = linear(h, p.qkv_w, p.qkv_b, masks.get("qkv"), adapters.get("qkv"))
    qkv = qkv.reshape(b, n, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    att = T.softmax(scores, axis=-1)
    if record is not None:
        record["attention"] = att.data
    out = (att @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
    return linear(out, p.proj_w, p.proj_b, masks.get("proj"), adapters.get("proj"))


def ffn(h: Tensor, p: BlockParams, masks: dict | None = None, adapters: dict | None = None, record: dict | None = None) -> Tensor:
    masks = masks or {}
    adapters = adapters or {}
    hidden = T.gelu(linear(h, p.fc1_w, p.fc1_b, masks.get("fc1"), adapters.get("fc1")))
    if record is not None:
        record["ffn_hidden"] = hidden
    return linear(hidden, p.fc2_w, p.fc2_b, masks.get("fc2"), adapters.get("fc2"))


def block_forward(
    x: Tensor,
    p: BlockParams,
    heads: int,
    eps: float = 1e-6,
    masks: dict | None = None,
    adapters: dict | None = None,
    record: dict | None = None,
) -> Tensor:
    """Pre-norm block: z = x + MHSA(Norm(x)); out = z + FFN(Norm(z))."""
    z = x + attention(T.rmsnorm(x, p.norm1, eps), p, heads, masks, adapters, record)
    return z + ffn(T.rmsnorm(z, p.norm2, eps), p, masks, adapters, record)


# ---------------------------------------------------------------- model
@dataclass
class StepContext:
    """Per-step hooks: masks[block][layer] -> array, block overrides, adapters, records."""

    masks: Callable[[int, int], dict | None] | None = None
    override: Callable[[int], list | None] | None = None
    adapters: Callable[[int], dict | None] | None = None
    record: Callable[[int, int], dict | None] | None = None


class VisionTransformer:
    """Embedding, ``cfg.blocks`` blocks applied ``cfg.steps`` times, linear classifier."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = rng_stream(seed, "init")
        self.embed_params = init_embed(cfg, rng, dtype)
        self.blocks = [init_block(cfg, rng, dtype) for _ in range(cfg.blocks)]
        self.aux_blocks = [init_block(cfg, rng, dtype) for _ in range(cfg.blocks)] if cfg.has_aux_block else []
        self.block_evals = 0

    # -------------------------------------------------------- parameters
    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for name, t in self.embed_params.named():
            yield f"embed.{name}", t
        for i, blk in enumerate(self.blocks):
            for name, t in blk.named():
                yield f"block{i}.{name}", t
        for i, blk in enumerate(self.aux_blocks):
            for name, t in blk.named():
                yield f"aux{i}.{name}", t

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        if strict:
            missing = set(params) - set(state)
            unexpected = set(state) - set(params)
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, arr in state.items():
            if name not in params:
                continue
            t = params[name]
            if t.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}: {t.shape} vs {arr.shape}")
            t.data = np.array(arr, dtype=self.dtype)

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def clone(self) -> "VisionTransformer":
        other = copy.deepcopy(self)
        other.block_evals = 0
        return other

    def astype(self, dtype) -> "VisionTransformer":
        other = self.clone()
        other.dtype = np.dtype(dtype)
        for t in other.parameters():
            t.data = t.data.astype(dtype)
        return other

    # ------------------------------------------------------------ forward
    def normalize(self, images):
        cfg = self.cfg
        if cfg.mean is None or cfg.std is None:
            return images
        shape = (1, cfg.channels, 1, 1)
        mean = np.asarray(cfg.mean, dtype=self.dtype).reshape(shape)
        std = np.asarray(cfg.std, dtype=self.dtype).reshape(shape)
        return (images - mean) / std

    def embed(self, images) -> TokenState:
        """x0 = [CLS, (DIST), registers, patch projections] + P."""
        cfg, e = self.cfg, self.embed_params
        if not isinstance(images, Tensor):
            images = np.asarray(images, dtype=self.dtype)
        if tuple(images.shape[1:]) != (cfg.channels, cfg.image, cfg.image):
            raise ValueError(f"expected images of shape (B, {cfg.channels}, {cfg.image}, {cfg.image}), got {images.shape}")
        x = patchify(self.normalize(images), cfg.patch)
        if not isinstance(x, Tensor):
            x = Tensor(x)
        b = x.shape[0]
        d = cfg.embed_dim
        patches = x @ e.patch_w + e.patch_b
        prefix = [T.broadcast_to(e.cls.reshape(1, 1, d), (b, 1, d))]
        if cfg.distill:
            prefix.append(T.broadcast_to(e.dist.reshape(1, 1, d), (b, 1, d)))
        if cfg.registers:
            prefix.append(T.broadcast_to(e.registers.reshape(1, cfg.registers, d), (b, cfg.registers, d)))
        tokens = T.concat(prefix + [patches], axis=1) + e.pos
        return TokenState(tokens, 0)

    def time_embedding(self, t: int) -> Tensor | None:
        e = self.embed_params
        if e.time is None:
            return None
        return e.time[min(t, e.time.shape[0] - 1)]

    def apply_blocks(self, x: Tensor, t: int, ctx: StepContext | None = None, blocks: list | None = None) -> Tensor:
        cfg = self.cfg
        if blocks is None:
            blocks = self.blocks
            if ctx is not None and ctx.override is not None:
                blocks = ctx.override(t) or blocks
        for i, blk in enumerate(blocks):
            masks = ctx.masks(t, i) if ctx is not None and ctx.masks is not None else None
            adapters = ctx.adapters(i) if ctx is not None and ctx.adapters is not None else None
            record = ctx.record(t, i) if ctx is not None and ctx.record is not None else None
            x = block_forward(x, blk, cfg.heads, cfg.eps, masks, adapters, record)
            self.block_evals += 1
        return x

    def step(self, state: TokenState, ctx: StepContext | None = None) -> TokenState:
        """One recurrent step: add TE^t (te variant), then blocks 1..B."""
        t = state.step
        x = state.tokens
        te = self.time_embedding(t) if self.cfg.variant == "te" else None
        if te is not None:
            x = x + te
        x = self.apply_blocks(x, t, ctx)
        if not np.all(np.isfinite(x.data)):
            raise FloatingPointError(f"non-finite activations at recurrent step {t + 1}")
        return TokenState(x, t + 1)

    def forward(
        self,
        state: TokenState,
        steps: int | None = None,
        trace: bool = False,
        ctx: StepContext | None = None,
    ) -> tuple[TokenState, list[TokenState]]:
        """Run ``steps`` (default cfg.steps) recurrences; optionally keep every intermediate state."""
        steps = self.cfg.steps if steps is None else steps
        if self.cfg.variant == "fl":
            return self.forward_fl(state, steps, trace, ctx)
        if self.cfg.variant == "sc":
            return self.forward_sc(state, steps, trace, ctx)
        history: list[TokenState] = []
        for _ in range(steps):
            state = self.step(state, ctx)
            if trace:
                history.append(state)
        return state, history

    def _aux(self) -> list[BlockParams]:
        return self.aux_blocks if self.aux_blocks else self.blocks

    def forward_fl(self, state, steps=None, trace=False, ctx=None):
        """Fast latent updates: y <- G(y + x) N times, then x <- F(x + TE + y)."""
        steps = self.cfg.steps if steps is None else steps
        x = state.tokens
        y = Tensor(np.zeros(x.shape, dtype=x.dtype))
        history = []
        for i in range(state.step, state.step + steps):
            for _ in range(self.cfg.fl_n):
                y = self.apply_blocks(y + x, i, blocks=self._aux())
            z = x + y
            te = self.time_embedding(i)
            if te is not None:
                z = z + te
            x = self.apply_blocks(z, i, ctx)
            if trace:
                history.append(TokenState(x, i + 1))
        return TokenState(x, state.step + steps), history

    def forward_sc(self, state, steps=None, trace=False, ctx=None):
        """Memory skip: y <- G(x) whenever i mod N == 0, then x <- F(x + TE + y)."""
        steps = self.cfg.steps if steps is None else steps
        x = state.tokens
        y = None
        self.memory_refreshes = 0
        history = []
        for i in range(state.step, state.step + steps):
            if i % self.cfg.sc_n == 0 or y is None:
                y = self.apply_blocks(x, i, blocks=self._aux())
                self.memory_refreshes += 1
            z = x + y
            te = self.time_embedding(i)
            if te is not None:
                z = z + te
            x = self.apply_blocks(z, i, ctx)
            if trace:
                history.append(TokenState(x, i + 1))
        return TokenState(x, state.step + steps), history

    def cls_features(self, state: TokenState) -> Tensor:
        return T.rmsnorm(state.tokens[:, 0, :], self.embed_params.norm, self.cfg.eps)

    def classify(self, state: TokenState) -> Tensor:
        """y = W Norm(x_CLS) + b."""
        e = self.embed_params
        return self.cls_features(state) @ e.head_w + e.head_b

    def classify_dist(self, state: TokenState) -> Tensor:
        e = self.embed_params
        if e.dist is None:
            raise ValueError("model was built without a distillation token")
        feat = T.rmsnorm(state.tokens[:, 1, :], e.norm, self.cfg.eps)
        return feat @ e.dist_w + e.dist_b

    def __call__(self, images, steps: int | None = None, ctx: StepContext | None = None) -> Tensor:
        state, _ = self.forward(self.embed(images), steps=steps, ctx=ctx)
        return self.classify(state)

    def predict_logits(self, images, batch_size: int = 256, steps: int | None = None) -> np.ndarray:
        """Inference logits; distillation models average the two heads' softmaxes."""
        out = []
        with T.no_grad():
            for s in range(0, len(images), batch_size):
                state, _ = self.forward(self.embed(images[s : s + batch_size]), steps=steps)
                logits = self.classify(state).data
                if self.cfg.distill:
                    p = T.softmax(Tensor(logits)).data + T.softmax(self.classify_dist(state)).data
                    logits = np.log(0.5 * p)
                out.append(logits)
        return np.concatenate(out) if out else np.zeros((0, self.cfg.classes), dtype=self.dtype)


def tie_into_vit(model: VisionTransformer) -> VisionTransformer:
    """ViT with ``steps`` distinct block slots that all hold the bViT block's values."""
    cfg = model.cfg
    if cfg.blocks != 1:
        raise ValueError("tie_into_vit expects a single-block model")
    vit = VisionTransformer(cfg.replace(blocks=cfg.steps, steps=1), dtype=model.dtype)
    state = {k: v for k, v in model.state_dict().items() if k.startswith("embed.")}
    for i in range(cfg.steps):
        for name, t in model.blocks[0].named():
            state[f"block{i}.{name}"] = t.data.copy()
    vit.load_state_dict(state)
    return vit


# --------------------------------------------------------------- accounting
def block_param_count(cfg: ModelConfig) -> int:
    d, h = cfg.embed_dim, cfg.hidden
    return (d * 3 * d + 3 * d) + (d * d + d) + (d * h + h) + (h * d + d) + 2 * d


def param_breakdown(cfg: ModelConfig) -> dict[str, int]:
    d = cfg.embed_dim
    out = {
        "patch_embed": cfg.patch_dim * d + d,
        "pos_embed": cfg.tokens * d,
        "cls": d,
        "registers": cfg.registers * d,
        "time_embed": max(cfg.steps, 1) * d if cfg.has_time_embed else 0,
        "blocks": cfg.blocks * block_param_count(cfg),
        "aux_blocks": cfg.blocks * block_param_count(cfg) if cfg.has_aux_block else 0,
        "final_norm": d,
        "classifier": d * cfg.classes + cfg.classes,
        "distill": (d + d * cfg.classes + cfg.classes) if cfg.distill else 0,
    }
    return out


def count_params(cfg: ModelConfig) -> int:
    return sum(param_breakdown(cfg).values())


def block_evaluations(cfg: ModelConfig, steps: int | None = None) -> int:
    s = cfg.steps if steps is None else steps
    per_group = cfg.blocks
    if cfg.variant == "fl":
        return s * per_group * (cfg.fl_n + 1)
    if cfg.variant == "sc":
        return per_group * (s + math.ceil(s / cfg.sc_n))
    return s * per_group


def block_flops(cfg: ModelConfig, include_attention: bool = False) -> int:
    """2*MAC for one block evaluation over all tokens."""
    d, h, n = cfg.embed_dim, cfg.hidden, cfg.tokens
    linear = n * (d * 3 * d + d * d + 2 * d * h)
    attn = 2 * n * n * d if include_attention else 0
    return 2 * (linear + attn)


def flop_breakdown(cfg: ModelConfig, steps: int | None = None, include_attention: bool = False) -> dict[str, int]:
    heads = 2 if cfg.distill else 1
    return {
        "patch_embed": 2 * cfg.num_patches * cfg.patch_dim * cfg.embed_dim,
        "blocks": block_evaluations(cfg, steps) * block_flops(cfg, include_attention),
        "classifier": heads * 2 * cfg.embed_dim * cfg.classes,
    }


def count_flops(cfg: ModelConfig, steps: int | None = None, include_attention: bool = False) -> int:
    """Forward FLOPs under the 2*MAC convention over linear layers.

    Attention score and value products are excluded by default; pass
    ``include_attention=True`` to add them (2 * tokens^2 * d MACs per block).
    """
    return sum(flop_breakdown(cfg, steps, include_attention).values())


def head_flops(cfg: ModelConfig) -> int:
    return 2 * cfg.embed_dim * cfg.classes
