"""Spectral and mechanistic probes: energy rank, low-rank FFN sweeps, CLS attention, neuron images, trajectories."""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .data import ImageBatch, rng_stream
from .linalg import svd
from .model import BLOCK_LAYERS, StepContext, VisionTransformer
from .tensor import Tensor


# ------------------------------------------------------------------ spectra
@dataclass
class RankReport:
    layer: str
    threshold: float
    rank: int
    singular_values: np.ndarray


def numeric_rank(sigma: np.ndarray, shape: tuple[int, int]) -> int:
    if sigma.size == 0 or sigma[0] == 0:
        return 0
    tol = max(shape) * np.finfo(np.float64).eps * sigma[0]
    return int((sigma > tol).sum())


def _energy_rank_from_sigma(sigma: np.ndarray, shape: tuple[int, int], threshold: float) -> int:
    if not 0 < threshold <= 1:
        raise ValueError("threshold must lie in (0, 1]")
    k = numeric_rank(sigma, shape)
    if k == 0:
        return 0
    energy = np.cumsum(sigma[:k] ** 2)
    return int(np.searchsorted(energy, threshold * energy[-1], side="left") + 1)


def energy_rank(w, threshold: float = 0.95) -> int:
    """Smallest r whose top-r squared singular values hold ``threshold`` of the total.

    Singular values below the numeric-rank tolerance are treated as zero; the
    zero matrix has rank 0.
    """
    w = np.asarray(w, dtype=np.float64)
    return _energy_rank_from_sigma(svd(w).sigma, w.shape, threshold)


def truncated_svd(w, r: int) -> np.ndarray:
    """Best rank-r approximation U_r diag(s_r) V_r^T."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError("expected a matrix")
    if not 1 <= r <= min(w.shape):
        raise ValueError(f"rank {r} outside 1..{min(w.shape)}")
    return svd(w).reconstruct(r)


def rank_reports(model: VisionTransformer, threshold: float = 0.95) -> list[RankReport]:
    out = []
    for i, blk in enumerate(model.blocks):
        for layer in BLOCK_LAYERS:
            w = blk.weight(layer).data.astype(np.float64)
            res = svd(w)
            out.append(RankReport(f"block{i}.{layer}", threshold, _energy_rank_from_sigma(res.sigma, w.shape, threshold), res.sigma))
    return out


def write_rank_csv(path: str | Path, reports: list[RankReport]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "threshold", "rank", "max_rank", "sigma_max", "sigma_min"])
        for r in reports:
            w.writerow([r.layer, r.threshold, r.rank, r.singular_values.size, r.singular_values[0], r.singular_values[-1]])


def svd_compression_sweep(model: VisionTransformer, data: ImageBatch, ranks, batch_size: int = 256) -> list[dict]:
    """Zero-shot rank-r replacement of every FFN matrix; works on a private copy."""
    work = model.clone()
    factors = {}
    for i, blk in enumerate(work.blocks):
        for layer in ("fc1", "fc2"):
            factors[(i, layer)] = svd(blk.weight(layer).data.astype(np.float64))
    originals = {k: work.blocks[k[0]].weight(k[1]).data.copy() for k in factors}
    rows = []
    for r in ranks:
        for (i, layer), res in factors.items():
            if not 1 <= r <= res.sigma.size:
                raise ValueError(f"rank {r} outside 1..{res.sigma.size} for block{i}.{layer}")
            work.blocks[i].weight(layer).data = res.reconstruct(r).astype(work.dtype)
        logits = work.predict_logits(data.images, batch_size)
        rows.append({"rank": int(r), "accuracy": float((logits.argmax(-1) == data.labels).mean())})
        for (i, layer), w in originals.items():
            work.blocks[i].weight(layer).data = w.copy()
    return rows


# ---------------------------------------------------------------- attention
@dataclass
class AttentionMap:
    head: int | None  # None for the mean over heads
    step: int
    grid: np.ndarray
    image_id: int = 0


def attention_at(model: VisionTransformer, images, step: int, block: int = 0) -> np.ndarray:
    """Softmaxed attention (batch, heads, tokens, tokens) of ``block`` during recurrent ``step`` (1-based)."""
    cfg = model.cfg
    if not 1 <= step <= cfg.steps:
        raise ValueError(f"step {step} outside 1..{cfg.steps}")
    if not 0 <= block < cfg.blocks:
        raise ValueError(f"block {block} outside 0..{cfg.blocks - 1}")
    store: dict = {}
    ctx = StepContext(record=lambda t, i: store if (t == step - 1 and i == block) else None)
    with T.no_grad():
        model.forward(model.embed(images), steps=step, ctx=ctx)
    return store["attention"]


def cls_attention(model: VisionTransformer, image, head: int | None, step: int, block: int = 0, image_id: int = 0) -> AttentionMap:
    """CLS-query attention over patches at one head (or the head mean when ``head`` is None).

    Prefix columns (CLS, distillation, registers) are dropped and the rest is
    not renormalized.
    """
    cfg = model.cfg
    if head is not None and not 0 <= head < cfg.heads:
        raise ValueError(f"head {head} outside 0..{cfg.heads - 1}")
    image = np.asarray(image)
    if image.ndim == 3:
        image = image[None]
    att = attention_at(model, image, step, block)[0]
    row = att[:, 0, cfg.prefix :]
    row = row.mean(axis=0) if head is None else row[head]
    return AttentionMap(head, step, row.reshape(cfg.grid, cfg.grid).astype(np.float64), image_id)


def mask_to_grid(mask: np.ndarray, patch: int) -> np.ndarray:
    """Max-pool a pixel mask to the patch grid: a patch counts if any pixel is set."""
    mask = np.asarray(mask, bool)
    h, w = mask.shape
    if h % patch or w % patch:
        raise ValueError("mask size must be a multiple of the patch size")
    return mask.reshape(h // patch, patch, w // patch, patch).any(axis=(1, 3))


def pointing_game(amap: AttentionMap | np.ndarray, mask: np.ndarray) -> tuple[bool, bool]:
    """(hit, empty_mask). Ties in the argmax go to the first cell in row-major order."""
    grid = amap.grid if isinstance(amap, AttentionMap) else np.asarray(amap)
    mask = np.asarray(mask, bool)
    if mask.shape != grid.shape:
        raise ValueError(f"mask grid {mask.shape} does not match map grid {grid.shape}")
    if not mask.any():
        return False, True
    peak = int(np.argmax(grid))
    return bool(mask.reshape(-1)[peak]), False


def pointing_game_table(model: VisionTransformer, images: np.ndarray, masks: np.ndarray, block: int = 0) -> list[dict]:
    """Hit ratio for every (head, step) over a set of images with pixel masks."""
    cfg = model.cfg
    grids = np.stack([mask_to_grid(m, cfg.patch) for m in masks])
    hits = np.zeros((cfg.heads + 1, cfg.steps))
    counted = np.zeros_like(hits)
    for step in range(1, cfg.steps + 1):
        att = attention_at(model, images, step, block)[:, :, 0, cfg.prefix :]
        for hd in range(cfg.heads + 1):
            rows = att.mean(axis=1) if hd == cfg.heads else att[:, hd]
            for n in range(len(images)):
                hit, empty = pointing_game(rows[n].reshape(cfg.grid, cfg.grid), grids[n])
                if not empty:
                    hits[hd, step - 1] += hit
                    counted[hd, step - 1] += 1
    out = []
    for hd in range(cfg.heads + 1):
        for step in range(cfg.steps):
            out.append({
                "head": "mean" if hd == cfg.heads else hd,
                "step": step + 1,
                "hit_ratio": hits[hd, step] / counted[hd, step] if counted[hd, step] else float("nan"),
                "images": int(counted[hd, step]),
            })
    return out


# ------------------------------------------------------ activation maximization
def total_variation(x: Tensor) -> Tensor:
    dh = x[..., 1:, :] - x[..., :-1, :]
    dw = x[..., :, 1:] - x[..., :, :-1]
    return (dh * dh).mean() + (dw * dw).mean()


def clamp01(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0.0, 1.0)


def sphere(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x)
    return x / n if n > 0 else x


def maximize_input(
    objective: Callable[[Tensor], Tensor],
    x0: np.ndarray,
    iters: int,
    lr: float,
    project: Callable[[np.ndarray], np.ndarray] = clamp01,
    backtracks: int = 8,
) -> tuple[np.ndarray, list[float]]:
    """Projected gradient ascent; a step is taken only if it does not lower the objective."""
    x = project(np.array(x0, dtype=np.float64))
    history = []
    for _ in range(iters):
        xt = Tensor(x, requires_grad=True)
        value = objective(xt)
        if not history:
            history.append(value.item())
        value.backward()
        step = lr
        for _ in range(backtracks):
            cand = project(x + step * xt.grad)
            with T.no_grad():
                cand_val = objective(Tensor(cand)).item()
            if cand_val >= history[-1]:
                x = cand
                history.append(cand_val)
                break
            step *= 0.5
        else:
            history.append(history[-1])
    return x, history


def neuron_objective(model: VisionTransformer, step: int, neuron: int, tv_weight: float = 0.0, block: int = 0):
    cfg = model.cfg
    if not 0 <= neuron < cfg.hidden:
        raise ValueError(f"neuron {neuron} outside 0..{cfg.hidden - 1}")
    if not 1 <= step <= cfg.steps:
        raise ValueError(f"step {step} outside 1..{cfg.steps}")

    def objective(x: Tensor) -> Tensor:
        store: dict = {}
        ctx = StepContext(record=lambda t, i: store if (t == step - 1 and i == block) else None)
        model.forward(model.embed(x), steps=step, ctx=ctx)
        unit = store["ffn_hidden"][:, cfg.prefix :, neuron].mean()
        return unit - tv_weight * total_variation(x) if tv_weight else unit

    return objective


def neuron_maximization(
    model: VisionTransformer,
    step: int,
    neuron: int,
    iters: int = 100,
    lr: float = 0.05,
    tv_weight: float = 0.0,
    seed: int = 0,
    block: int = 0,
) -> tuple[np.ndarray, list[float]]:
    """Synthesize an image in [0,1] that drives one post-GELU FFN unit at ``step``."""
    cfg = model.cfg
    rng = rng_stream(seed, f"neuron/{step}/{neuron}")
    x0 = rng.random((1, cfg.channels, cfg.image, cfg.image))
    work = model.astype(np.float64)
    for p in work.parameters():
        p.requires_grad = False
    if iters == 0:
        return x0, []
    x, hist = maximize_input(neuron_objective(work, step, neuron, tv_weight, block), x0, iters, lr)
    return x, hist


def write_pnm(path: str | Path, image: np.ndarray) -> None:
    """Binary PGM (one channel) or PPM (three channels) from a CHW or HW array, min-max stretched to 0..255."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 4:
        img = img[0]
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    lo, hi = float(img.min()), float(img.max())
    img = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
    u8 = np.round(img * 255).astype(np.uint8)
    if u8.ndim == 2:
        header, body = b"P5", u8
    elif u8.ndim == 3 and u8.shape[0] == 3:
        header, body = b"P6", np.transpose(u8, (1, 2, 0))
    else:
        raise ValueError(f"cannot write image with shape {image.shape}")
    h, w = body.shape[:2]
    with Path(path).open("wb") as fh:
        fh.write(header + f"\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(body).tobytes())


def read_pnm(path: str | Path) -> np.ndarray:
    """uint8 HW (PGM) or CHW (PPM) array."""
    raw = Path(path).read_bytes()
    m = re.match(rb"(P[56])\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM/PPM file")
    magic, w, h = m.group(1), int(m.group(2)), int(m.group(3))
    body = np.frombuffer(raw[m.end():], dtype=np.uint8)
    if magic == b"P5":
        return body.reshape(h, w)
    return body.reshape(h, w, 3).transpose(2, 0, 1)


# -------------------------------------------------------------- trajectories
def cls_trajectories(model: VisionTransformer, images: np.ndarray, steps: int | None = None, batch_size: int = 256) -> np.ndarray:
    """Raw CLS state after every step: (samples, steps, d)."""
    steps = model.cfg.steps if steps is None else steps
    out = []
    with T.no_grad():
        for s in range(0, len(images), batch_size):
            _, hist = model.forward(model.embed(images[s : s + batch_size]), steps=steps, trace=True)
            out.append(np.stack([h.tokens.data[:, 0, :] for h in hist], axis=1))
    return np.concatenate(out)


def export_cls_trajectories(model: VisionTransformer, data: ImageBatch, path: str | Path, steps: int | None = None) -> int:
    traj = cls_trajectories(model, data.images, steps)
    d = traj.shape[-1]
    rows = 0
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "label", "step"] + [f"e{k}" for k in range(d)])
        for n in range(traj.shape[0]):
            for t in range(traj.shape[1]):
                w.writerow([n, int(data.labels[n]), t + 1] + [repr(float(v)) for v in traj[n, t]])
                rows += 1
    return rows


def stepwise_accuracy(model: VisionTransformer, data: ImageBatch, max_steps: int, batch_size: int = 256) -> list[dict]:
    """Accuracy of the final classifier after t = 0..max_steps recurrences."""
    correct = np.zeros(max_steps + 1)
    with T.no_grad():
        for s in range(0, len(data), batch_size):
            imgs = data.images[s : s + batch_size]
            labels = data.labels[s : s + batch_size]
            state = model.embed(imgs)
            correct[0] += (model.classify(state).data.argmax(-1) == labels).sum()
            stateful = model.cfg.variant in ("fl", "sc")
            for t in range(1, max_steps + 1):
                # fast-latent and skip variants carry hidden memory, so rerun from the embedding
                state = model.forward(model.embed(imgs), steps=t)[0] if stateful else model.step(state)
                correct[t] += (model.classify(state).data.argmax(-1) == labels).sum()
    n = max(len(data), 1)
    return [{"steps": t, "accuracy": float(correct[t] / n)} for t in range(max_steps + 1)]


def write_rows(path: str | Path, rows: list[dict]) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
