"""Command-line entry point: ``bvit <subcommand> ...`` or ``python -m bvit``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .data import FormatError, ImageBatch, _parse_value, load_cifar10, load_mnist_idx, read_config, rng_stream
from .model import ModelConfig, VisionTransformer
from .train import TrainRecipe

log = logging.getLogger("bvit")

DATA_KEYS = {"dataset": "shapes", "data_dir": "data/cifar-10-batches-bin", "train_subset": 0, "val_subset": 0}
MODEL_KEYS = {f.name for f in fields(ModelConfig)}
RECIPE_KEYS = {f.name for f in fields(TrainRecipe)}
KNOWN_KEYS = MODEL_KEYS | RECIPE_KEYS | set(DATA_KEYS)


class UsageError(Exception):
    """Bad flags, config keys or unreadable config: exit code 2."""


@dataclass
class RunSpec:
    command: str
    config_path: str | None = None
    overrides: dict = field(default_factory=dict)
    out: str = "runs/latest"
    seed: int = 0
    args: argparse.Namespace | None = None

    def resolved(self) -> dict:
        values = dict(DATA_KEYS)
        if self.config_path:
            try:
                values.update(read_config(self.config_path))
            except OSError as exc:
                raise UsageError(f"cannot read config {self.config_path}: {exc}") from exc
            except ValueError as exc:
                raise UsageError(str(exc)) from exc
        values.update(self.overrides)
        unknown = sorted(set(values) - KNOWN_KEYS)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        values["seed"] = self.seed
        return values


# ------------------------------------------------------------------ parser
def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--out", default="runs/latest", help="output directory")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bvit", description="Recurrent single-block vision transformer toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("train", help="train a model from a config")
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ema", action="store_true", help="use EMA weights")
    p.add_argument("--steps", type=int, help="recurrent steps at inference")

    p = sub.add_parser("early-exit", help="train exit heads and sweep thresholds")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--heads", help="saved exit heads; trained when absent")
    p.add_argument("--head-epochs", type=int, default=5)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--taus", default="0.1,0.25,0.5,0.75,0.9,1.0")

    p = sub.add_parser("prune", help="step-mask pruning with graft training")
    _add_common(p)
    p.add_argument("--checkpoint", help="start from this checkpoint instead of a fresh init")
    p.add_argument("--rounds", type=int, default=13)
    p.add_argument("--full-epochs", type=int, default=1)
    p.add_argument("--graft-epochs", type=int, default=1)
    p.add_argument("--rate", type=float, default=0.2)

    p = sub.add_parser("analyze", help="spectral and attention analyses")
    asub = p.add_subparsers(dest="analysis", required=True, metavar="ANALYSIS")
    for name, help_text in [
        ("rank", "95%%-energy rank of every block matrix"),
        ("svd-sweep", "accuracy under rank-r FFN truncation"),
        ("attention", "CLS attention maps and pointing game"),
        ("neurons", "activation-maximization images"),
        ("trajectories", "CLS state after every step"),
        ("steps", "accuracy versus number of steps"),
    ]:
        a = asub.add_parser(name, help=help_text)
        _add_common(a)
        a.add_argument("--checkpoint", required=True)
        if name == "rank":
            a.add_argument("--threshold", type=float, default=0.95)
        if name == "svd-sweep":
            a.add_argument("--ranks", default="")
        if name == "attention":
            a.add_argument("--images", type=int, default=64)
        if name == "neurons":
            a.add_argument("--step", type=int, default=1)
            a.add_argument("--neurons", default="0,1,2,3")
            a.add_argument("--iters", type=int, default=50)
            a.add_argument("--lr", type=float, default=0.05)
            a.add_argument("--tv", type=float, default=0.01)
        if name == "steps":
            a.add_argument("--max-steps", type=int)

    p = sub.add_parser("adapt", help="transfer a checkpoint to another dataset")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=["probe", "full", "lora-qv", "lora-ffn", "te"], required=True)
    p.add_argument("--rank", type=int, default=8)
    p.add_argument("--alpha", type=float, default=8.0)

    p = sub.add_parser("distill", help="train a distillation-token student from a teacher checkpoint")
    _add_common(p)
    p.add_argument("--teacher", required=True)

    p = sub.add_parser("simulate", help="looped-block equivalence trials")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--dmax", type=int, default=16)
    p.add_argument("--rmax", type=int, default=4)
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)

    p = sub.add_parser("fixtures", help="generate seeded fixtures and golden files")
    p.add_argument("--out", default="fixtures")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--verify", action="store_true", help="check existing digests instead of writing")

    p = sub.add_parser("repro", help="write a desk-scale table analogue")
    p.add_argument("--table", required=True, choices=["t1_params", "t2_ablation", "t4_lora_counts", "t5_sparsity", "t6_earlyexit_shape"])
    p.add_argument("--fixtures", default="fixtures")
    p.add_argument("--out", default=None)
    return parser


def parse_overrides(items: list[str]) -> dict:
    out = {}
    for item in items:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        if key not in KNOWN_KEYS:
            raise UsageError(f"unknown config key {key!r}")
        out[key] = _parse_value(value)
    return out


def parse_args(argv: list[str]) -> RunSpec:
    args = build_parser().parse_args(argv)
    command = args.command if args.command != "analyze" else f"analyze {args.analysis}"
    overrides = parse_overrides(getattr(args, "set", []) or [])
    return RunSpec(command, getattr(args, "config", None), overrides, getattr(args, "out", None) or "", getattr(args, "seed", 0), args)


# ------------------------------------------------------------------ helpers
def model_config(values: dict) -> ModelConfig:
    try:
        return ModelConfig.from_dict({k: v for k, v in values.items() if k in MODEL_KEYS})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid model config: {exc}") from exc


def train_recipe(values: dict) -> TrainRecipe:
    try:
        return TrainRecipe.from_dict({k: v for k, v in values.items() if k in RECIPE_KEYS})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training recipe: {exc}") from exc


def _take(batch: ImageBatch, n: int, seed: int, name: str) -> ImageBatch:
    if not n or n >= len(batch):
        return batch
    idx = np.sort(rng_stream(seed, name).permutation(len(batch))[:n])
    return batch.subset(idx)


def load_dataset(values: dict, cfg: ModelConfig | None = None) -> tuple[ImageBatch, ImageBatch]:
    name = values.get("dataset", "shapes")
    seed = values.get("seed", 0)
    if name == "cifar10":
        train, val = load_cifar10(values["data_dir"])
    elif name == "mnist":
        train, val = load_mnist_idx(values["data_dir"])
    elif name == "shapes":
        from .fixtures import make_shapes

        image = cfg.image if cfg else 16
        train, _ = make_shapes(values.get("train_subset") or 1024, seed, image)
        val, _ = make_shapes(values.get("val_subset") or 256, seed + 1, image)
    else:
        raise UsageError(f"unknown dataset {name!r}")
    return _take(train, values.get("train_subset", 0), seed, "train-subset"), _take(val, values.get("val_subset", 0), seed, "val-subset")


def load_model(path: str, use_ema: bool = False) -> VisionTransformer:
    from .fixtures import load_model as _load

    return _load(path, use_ema)


def write_manifest(out: Path, spec: RunSpec, values: dict | None, extra: dict | None = None) -> None:
    import scipy

    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": spec.command,
        "argv": list(sys.argv[1:]),
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in (values or {}).items()},
        "seed": spec.seed,
        "versions": {"bvit": __version__, "python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__},
        "threads": os.environ.get("BVW_THREADS"),
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str))


def _write_csv(path: Path, rows: list[dict]) -> None:
    from .analyze import write_rows

    path.parent.mkdir(parents=True, exist_ok=True)
    write_rows(path, rows)


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


# ------------------------------------------------------------------ commands
def cmd_train(spec: RunSpec) -> int:
    from .train import fit

    values = spec.resolved()
    cfg, recipe = model_config(values), train_recipe(values)
    train, val = load_dataset(values, cfg)
    out = Path(spec.out)
    write_manifest(out, spec, values)
    model = VisionTransformer(cfg, seed=spec.seed)
    history = fit(model, train, val, recipe, out)
    final = [r for r in history if r["split"] == "val"]
    if final:
        print(f"final val acc {final[-1]['acc']:.6f}")
    return 0


def cmd_distill(spec: RunSpec) -> int:
    from .train import fit

    values = spec.resolved()
    values["distill"] = True
    cfg, recipe = model_config(values), train_recipe(values)
    teacher = load_model(spec.args.teacher)
    train, val = load_dataset(values, cfg)
    out = Path(spec.out)
    write_manifest(out, spec, values, {"teacher": spec.args.teacher})
    student = VisionTransformer(cfg, seed=spec.seed)
    fit(student, train, val, recipe, out, teacher=teacher)
    return 0


def cmd_eval(spec: RunSpec) -> int:
    from .train import evaluate

    values = spec.resolved()
    model = load_model(spec.args.checkpoint, spec.args.ema)
    _, val = load_dataset(values, model.cfg)
    res = evaluate(model, val, steps=spec.args.steps)
    out = Path(spec.out)
    write_manifest(out, spec, values, {"checkpoint": spec.args.checkpoint})
    _write_csv(out / "eval.csv", [{"split": "val", "loss": res["loss"], "acc": res["acc"]}])
    print(f"accuracy {res['acc']:.6f}")
    return 0


def cmd_early_exit(spec: RunSpec) -> int:
    from .earlyexit import default_exit_steps, make_heads, threshold_sweep, train_exit_heads
    from .fixtures import load_exit_heads, save_exit_heads

    values = spec.resolved()
    model = load_model(spec.args.checkpoint)
    train, val = load_dataset(values, model.cfg)
    out = Path(spec.out)
    write_manifest(out, spec, values, {"checkpoint": spec.args.checkpoint})
    if spec.args.heads:
        heads = load_exit_heads(spec.args.heads)
    else:
        heads = make_heads(model, default_exit_steps(model.cfg.steps), spec.seed)
        train_exit_heads(model, heads, train, spec.args.head_epochs, alpha=spec.args.alpha, seed=spec.seed)
        save_exit_heads(out / "exit_heads.bvw", heads, model.cfg)
    rows = threshold_sweep(model, heads, val, taus=_floats(spec.args.taus))
    _write_csv(out / "early_exit.csv", rows)
    for r in rows:
        print(f"tau={r['tau']:<5} acc={r['accuracy']:.4f} gflops={r['mean_gflops']:.6f} exit_step={r['mean_exit_step']:.2f}")
    return 0


def cmd_prune(spec: RunSpec) -> int:
    from .prune import mean_mask_sparsity, run_pruning

    values = spec.resolved()
    if spec.args.checkpoint:
        model = load_model(spec.args.checkpoint)
    else:
        model = VisionTransformer(model_config(values), seed=spec.seed)
    recipe = train_recipe(values)
    train, val = load_dataset(values, model.cfg)
    out = Path(spec.out)
    write_manifest(out, spec, values)
    state = run_pruning(
        model, train, val, spec.args.rounds, spec.args.full_epochs, spec.args.graft_epochs, spec.args.rate, recipe, out
    )
    print(f"rounds {state.round} mask sparsity {mean_mask_sparsity(state):.4f}")
    return 0


def cmd_analyze(spec: RunSpec) -> int:
    from . import analyze as A

    values = spec.resolved()
    args = spec.args
    model = load_model(args.checkpoint)
    out = Path(spec.out)
    write_manifest(out, spec, values, {"checkpoint": args.checkpoint})
    kind = args.analysis
    if kind == "rank":
        reports = A.rank_reports(model, args.threshold)
        A.write_rank_csv(out / "rank_report.csv", reports)
        for r in reports:
            print(f"{r.layer}: r95={r.rank}/{r.singular_values.size}")
        return 0
    _, val = load_dataset(values, model.cfg)
    if kind == "svd-sweep":
        d = model.cfg.embed_dim
        ranks = [int(x) for x in _floats(args.ranks)] or sorted({max(1, d // 8), d // 4, d // 2, d})
        rows = A.svd_compression_sweep(model, val, ranks)
        _write_csv(out / "svd_sweep.csv", rows)
    elif kind == "attention":
        from .fixtures import make_shapes

        images, masks = make_shapes(args.images, spec.seed + 7, model.cfg.image)
        if model.cfg.channels != 3:
            raise UsageError("attention pointing game uses the RGB shapes set")
        rows = A.pointing_game_table(model, images.images, masks)
        _write_csv(out / "pointing_game.csv", rows)
    elif kind == "neurons":
        for n in [int(x) for x in _floats(args.neurons)]:
            img, hist = A.neuron_maximization(model, args.step, n, args.iters, args.lr, args.tv, spec.seed)
            A.write_pnm(out / f"neuron_s{args.step}_n{n}.ppm", img)
            print(f"neuron {n}: objective {hist[0] if hist else float('nan'):.4f} -> {hist[-1] if hist else float('nan'):.4f}")
        return 0
    elif kind == "trajectories":
        n = A.export_cls_trajectories(model, val, out / "trajectories.csv")
        print(f"{n} rows")
        return 0
    elif kind == "steps":
        rows = A.stepwise_accuracy(model, val, args.max_steps or 2 * model.cfg.steps)
        _write_csv(out / "step_accuracy.csv", rows)
    else:
        raise UsageError(kind)
    for r in rows:
        print(", ".join(f"{k}={v}" for k, v in r.items()))
    return 0


def cmd_adapt(spec: RunSpec) -> int:
    from .adapt import FreezePolicy, transfer_recipe, transfer_run

    values = spec.resolved()
    model = load_model(spec.args.checkpoint)
    train, val = load_dataset(values, model.cfg)
    recipe = transfer_recipe(values.get("epochs", 40), values.get("lr"), values.get("batch_size", 64), spec.seed, spec.args.mode)
    out = Path(spec.out)
    write_manifest(out, spec, values, {"checkpoint": spec.args.checkpoint})
    res = transfer_run(model, train, val, FreezePolicy(spec.args.mode), recipe, rank=spec.args.rank, alpha=spec.args.alpha)
    row = {k: res[k] for k in ("mode", "accuracy", "trainable", "adapter_params", "te_params")}
    _write_csv(out / "transfer.csv", [row])
    print(", ".join(f"{k}={v}" for k, v in row.items()))
    return 0


def cmd_simulate(spec: RunSpec) -> int:
    from .simulate import run_trials, write_trials_csv

    a = spec.args
    t0 = time.perf_counter()
    results = run_trials(a.trials, a.dmax, a.rmax, a.tol, a.seed)
    print(f"{'trial':>5} {'d':>3} {'R':>2} {'max_dev':>12} result")
    for r in results:
        print(f"{r.trial:>5} {r.d:>3} {r.R:>2} {r.max_deviation:>12.3e} {'pass' if r.passed else 'FAIL'}")
    worst = max((r.max_deviation for r in results), default=0.0)
    failed = sum(not r.passed for r in results)
    print(f"worst deviation {worst:.3e}; {failed} failed of {len(results)}; {time.perf_counter() - t0:.1f}s")
    if a.out:
        Path(a.out).mkdir(parents=True, exist_ok=True)
        write_trials_csv(Path(a.out) / "simulate_trials.csv", results)
    return 1 if failed else 0


def cmd_fixtures(spec: RunSpec) -> int:
    from .fixtures import make_fixtures, verify_fixtures

    if spec.args.verify:
        bad = verify_fixtures(spec.args.out)
        for n in bad:
            print(f"digest mismatch: {n}")
        return 1 if bad else 0
    digests = make_fixtures(spec.args.out, spec.seed)
    for n, h in digests.items():
        print(f"{h}  {n}")
    return 0


def cmd_repro(spec: RunSpec) -> int:
    from .fixtures import repro_table, write_table

    rows = repro_table(spec.args.table, spec.args.fixtures)
    if spec.args.out:
        Path(spec.args.out).mkdir(parents=True, exist_ok=True)
        write_table(Path(spec.args.out) / f"{spec.args.table}.csv", rows)
    for r in rows:
        print(", ".join(f"{k}={v}" for k, v in r.items()))
    return 0


COMMANDS = {
    "train": cmd_train,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "early-exit": cmd_early_exit,
    "prune": cmd_prune,
    "analyze": cmd_analyze,
    "adapt": cmd_adapt,
    "simulate": cmd_simulate,
    "fixtures": cmd_fixtures,
    "repro": cmd_repro,
}


def run(spec: RunSpec) -> int:
    handler = COMMANDS[spec.command.split()[0]]
    threads = os.environ.get("BVW_THREADS")
    try:
        if threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(int(threads)):
                return handler(spec)
        return handler(spec)
    except UsageError as exc:
        print(f"bvit: error: {exc}", file=sys.stderr)
        return 2
    except (FloatingPointError, FormatError, FileNotFoundError, ValueError, KeyError, AssertionError, RuntimeError) as exc:
        print(f"bvit: {spec.command} failed: {exc}", file=sys.stderr)
        return 1


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    logging.basicConfig(level=logging.INFO if "-v" in argv or "--verbose" in argv else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        spec = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else 2
    except UsageError as exc:
        print(f"bvit: error: {exc}", file=sys.stderr)
        return 2
    return run(spec)


if __name__ == "__main__":
    sys.exit(main())
