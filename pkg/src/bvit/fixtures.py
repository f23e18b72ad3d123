"""Seeded fixtures (shapes dataset, tiny checkpoints, golden CSVs) and desk-scale table builders."""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path

import numpy as np

from .adapt import lora_param_count, time_embedding_count
from .analyze import stepwise_accuracy, write_rows
from .data import Checkpoint, ImageBatch, load_checkpoint, rng_stream, save_checkpoint
from .earlyexit import ExitHead, default_exit_steps, make_heads, threshold_sweep, train_exit_heads
from .model import ModelConfig, VisionTransformer, count_flops, count_params, imagenet_config, tie_into_vit
from .prune import analytic_mask_sparsity
from .tensor import Tensor
from .train import TrainRecipe, fit, make_checkpoint

log = logging.getLogger(__name__)

SHAPES = ("square", "disk", "cross", "triangle")


# --------------------------------------------------------------- shapes data
def _shape_mask(kind: str, size: int, cy: int, cx: int, r: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    dy, dx = yy - cy, xx - cx
    if kind == "square":
        m = (np.abs(dy) <= r) & (np.abs(dx) <= r)
    elif kind == "disk":
        m = dy * dy + dx * dx <= r * r
    elif kind == "cross":
        w = max(1, r // 3)
        m = ((np.abs(dy) <= w) & (np.abs(dx) <= r)) | ((np.abs(dx) <= w) & (np.abs(dy) <= r))
    elif kind == "triangle":
        m = (dy <= r) & (dy >= -r) & (np.abs(dx) <= (dy + r) / 2)
    else:
        raise ValueError(kind)
    return m


def make_shapes(n: int, seed: int = 0, image: int = 32) -> tuple[ImageBatch, np.ndarray]:
    """Coloured shapes on a noisy background; label = shape kind, masks = exact object pixels."""
    rng = rng_stream(seed, "shapes")
    images = np.empty((n, 3, image, image), dtype=np.float32)
    masks = np.zeros((n, image, image), dtype=bool)
    labels = rng.integers(0, len(SHAPES), n)
    for i in range(n):
        r = int(rng.integers(max(2, image // 5), image // 3 + 1))
        cy, cx = rng.integers(r, image - r, size=2)
        m = _shape_mask(SHAPES[labels[i]], image, int(cy), int(cx), r)
        bg = rng.random(3) * 0.4
        fg = 0.5 + rng.random(3) * 0.5
        img = bg[:, None, None] + 0.05 * rng.standard_normal((3, image, image))
        img[:, m] = fg[:, None]
        images[i] = np.clip(img, 0, 1)
        masks[i] = m
    return ImageBatch(images, labels.astype(np.int64)), masks


# --------------------------------------------------------------- fixtures
FIXTURE_CONFIG = dict(embed_dim=32, heads=2, blocks=1, steps=4, patch=4, image=16, classes=len(SHAPES))


def fixture_config(**kw) -> ModelConfig:
    cfg = dict(FIXTURE_CONFIG)
    cfg.update(kw)
    return ModelConfig(**cfg)


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_exit_heads(path: Path, heads: list[ExitHead], cfg: ModelConfig) -> None:
    tensors = {}
    for h in heads:
        tensors[f"exit{h.step}.w"] = h.weight.data
        tensors[f"exit{h.step}.b"] = h.bias.data
    save_checkpoint(path, Checkpoint(config={"exit_steps": tuple(h.step for h in heads)}, tensors=tensors))


def load_exit_heads(path: str | Path) -> list[ExitHead]:
    ck = load_checkpoint(path)
    steps = ck.config["exit_steps"]
    steps = steps if isinstance(steps, tuple) else (steps,)
    return [ExitHead(int(s), Tensor(ck.tensors[f"exit{s}.w"]), Tensor(ck.tensors[f"exit{s}.b"])) for s in steps]


def load_model(path: str | Path, use_ema: bool = False) -> VisionTransformer:
    ck = load_checkpoint(path)
    cfg = ModelConfig.from_dict(ck.config)
    model = VisionTransformer(cfg)
    model.load_state_dict(ck.ema if use_ema and ck.ema else ck.tensors)
    return model


def make_fixtures(out_dir: str | Path, seed: int = 0, train_size: int = 1024, val_size: int = 256, epochs: int = 20) -> dict[str, str]:
    """Write every fixture under ``out_dir`` and return {file name: sha256}."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = fixture_config()
    train, train_masks = make_shapes(train_size, seed, cfg.image)
    val, val_masks = make_shapes(val_size, seed + 1, cfg.image)
    np.savez(out / "shapes_train.npz", images=train.images, labels=train.labels, masks=train_masks)
    np.savez(out / "shapes_val.npz", images=val.images, labels=val.labels, masks=val_masks)

    recipe = TrainRecipe(epochs=epochs, warmup_epochs=2, lr=3e-3, batch_size=64, seed=seed, label_smoothing=0.0, ema_decay=0.9)
    bvit = VisionTransformer(cfg, seed=seed)
    fit(bvit, train, val, recipe, out / "bvit_run")
    save_checkpoint(out / "bvit_tiny.bvw", make_checkpoint(bvit))

    tied = tie_into_vit(bvit)
    save_checkpoint(out / "vit_tiny_tied.bvw", make_checkpoint(tied))

    untied = VisionTransformer(cfg.replace(blocks=cfg.steps, steps=1), seed=seed)
    fit(untied, train, val, recipe, out / "vit_run")
    save_checkpoint(out / "vit_tiny_untied.bvw", make_checkpoint(untied))

    heads = make_heads(bvit, default_exit_steps(cfg.steps), seed)
    train_exit_heads(bvit, heads, train, epochs=5, lr=3e-3, seed=seed)
    save_exit_heads(out / "exit_heads.bvw", heads, cfg)

    write_rows(out / "golden_steps.csv", stepwise_accuracy(bvit, val, 2 * cfg.steps))
    write_rows(out / "golden_earlyexit.csv", _strip_time(threshold_sweep(bvit, heads, val, taus=TAUS)))
    for name in TABLES:
        write_rows(out / f"{name}.csv", repro_table(name, out))

    digests = {p.name: sha256_file(p) for p in sorted(out.glob("*")) if p.is_file() and p.name != "digests.json"}
    (out / "digests.json").write_text(json.dumps(digests, indent=2, sort_keys=True))
    return digests


def _strip_time(rows: list[dict]) -> list[dict]:
    # wall-clock columns would break digest reproducibility
    return [{k: v for k, v in r.items() if k != "mean_ms"} for r in rows]


def verify_fixtures(out_dir: str | Path) -> list[str]:
    """Names whose current digest differs from digests.json."""
    out = Path(out_dir)
    recorded = json.loads((out / "digests.json").read_text())
    return [n for n, h in recorded.items() if not (out / n).exists() or sha256_file(out / n) != h]


def load_shapes(path: str | Path) -> tuple[ImageBatch, np.ndarray]:
    z = np.load(path)
    return ImageBatch(z["images"], z["labels"]), z["masks"]


# --------------------------------------------------------------- tables
TAUS = (0.0, 0.25, 0.5, 0.75, 0.9, 1.0)

TABLE1 = {  # name: (params M, GFLOPs)
    "vit-s": (22.0, 8.5), "vit-b": (86.6, 33.7), "vit-l": (304.3, 119.3),
    "bvit-s": (2.5, 8.5), "bvit-b": (8.6, 33.7), "bvit-l": (14.6, 119.3),
}
TABLE2 = {(1, 12): 2.5, (2, 6): 4.3, (3, 4): 6.1, (4, 3): 7.9, (6, 2): 11.4, (12, 1): 22.0}
TABLE4 = {  # (model, mode): reported count
    ("bvit-b", "lora_qv"): "25K", ("vit-b", "lora_qv"): "296K",
    ("bvit-b", "lora_ffn"): "62K", ("vit-b", "lora_ffn"): "738K",
    ("bvit-b", "te_only"): "9K",
}
TABLE5 = {5: 67.2, 10: 89.3, 15: 96.5, 20: 98.8, 25: 99.6, 30: 99.9}
TABLES = ("t1_params", "t2_ablation", "t4_lora_counts", "t5_sparsity", "t6_earlyexit_shape")


def repro_table(name: str, fixture_dir: str | Path | None = None) -> list[dict]:
    if name == "t1_params":
        rows = []
        for key, (p_ref, f_ref) in TABLE1.items():
            cfg = imagenet_config(key)
            p = count_params(cfg) / 1e6
            f = count_flops(cfg) / 1e9
            rows.append({
                "model": key, "params_M": round(p, 4), "reported_params_M": p_ref,
                "gflops": round(f, 4), "reported_gflops": f_ref, "kind": "exact-accounting",
            })
        return rows
    if name == "t2_ablation":
        rows = []
        for (b, s), p_ref in TABLE2.items():
            cfg = imagenet_config("bvit-s", blocks=b, steps=s)
            rows.append({
                "blocks": b, "steps": s, "params_M": round(count_params(cfg) / 1e6, 4), "reported_params_M": p_ref,
                "gflops": round(count_flops(cfg) / 1e9, 4), "reported_gflops": 8.5, "kind": "exact-accounting",
            })
        return rows
    if name == "t4_lora_counts":
        rows = []
        for (key, mode), ref in TABLE4.items():
            if mode == "te_only":
                count = time_embedding_count(imagenet_config(key, variant="te"))
            else:
                count = lora_param_count(imagenet_config(key), mode, 8)
            rows.append({"model": key, "mode": mode, "params": count, "reported": ref, "kind": "exact-accounting"})
        return rows
    if name == "t5_sparsity":
        return [
            {"round": p, "mask_sparsity_pct": round(100 * analytic_mask_sparsity(p, 0.2), 4), "reported_pct": ref, "kind": "exact-accounting"}
            for p, ref in TABLE5.items()
        ]
    if name == "t6_earlyexit_shape":
        if fixture_dir is None:
            raise ValueError("t6_earlyexit_shape needs the fixture directory")
        d = Path(fixture_dir)
        model = load_model(d / "bvit_tiny.bvw")
        heads = load_exit_heads(d / "exit_heads.bvw")
        val, _ = load_shapes(d / "shapes_val.npz")
        rows = _strip_time(threshold_sweep(model, heads, val, taus=TAUS))
        for r in rows:
            r["kind"] = "desk-scale-only"
        return rows
    raise ValueError(f"unknown table {name!r}; expected one of {TABLES}")


def write_table(path: str | Path, rows: list[dict]) -> None:
    write_rows(path, rows)
