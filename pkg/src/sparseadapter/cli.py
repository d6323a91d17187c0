"""Experiment front door: declarative JSON configs and the prune / train /
sweep / eval / inspect-mask subcommands.

Every successful run leaves a re-runnable set of artifacts in the output
directory: the exact config, the step metrics CSV, a summary JSON, and the
final checkpoint. Sweep points execute as independent processes bounded by
--workers and are aggregated into one CSV by the coordinator.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .adapters import AdapterSpec, insert_adapters, large_sparse_config, \
    trainable_param_report
from .data import SyntheticTaskSpec, TaskData, generate, load_dir
from .model import EncoderConfig, Model, build_encoder, freeze_backbone, \
    load_checkpoint
from .pruning import compute_mask, load_mask, load_mask_for_model, save_mask
from .training import OptimizerConfig, TrainingDiverged, evaluate, train

OUT_ENV_VAR = "SPARSEADAPTER_OUT"
SEED_STRIDE = 10007  # run-index offset applied to every seed in a sweep

PRUNE_METHODS = ("random", "magnitude", "er", "snip", "grasp")


@dataclass
class PruneConfig:
    method: str = "snip"
    s: float = 0.4
    seed: int = 0
    snip_abs: bool = False
    score_batches: int = 1

    def validate(self) -> None:
        if self.method not in PRUNE_METHODS:
            raise ValueError(f"unknown prune method '{self.method}'")
        if not 0.0 <= self.s < 1.0:
            raise ValueError("prune.s must be in [0, 1)")
        if self.score_batches < 1:
            raise ValueError("prune.score_batches must be >= 1")


@dataclass
class DataConfig:
    path: str | None = None
    task: SyntheticTaskSpec | None = None

    def validate(self) -> None:
        if (self.path is None) == (self.task is None):
            raise ValueError("data must set exactly one of 'path' or 'task'")


@dataclass
class ExperimentConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    adapter: AdapterSpec = field(default_factory=AdapterSpec)
    prune: PruneConfig = field(default_factory=PruneConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = "runs"
    seed: int = 0

    def validate(self) -> None:
        self.encoder.validate()
        self.adapter.validate()
        self.prune.validate()
        self.optimizer.validate()
        self.data.validate()
        if self.data.task is not None:
            self.data.task.validate()


_NESTED = {
    (ExperimentConfig, "encoder"): EncoderConfig,
    (ExperimentConfig, "adapter"): AdapterSpec,
    (ExperimentConfig, "prune"): PruneConfig,
    (ExperimentConfig, "optimizer"): OptimizerConfig,
    (ExperimentConfig, "data"): DataConfig,
    (DataConfig, "task"): SyntheticTaskSpec,
}


def _from_dict(cls, payload, where: str):
    if not isinstance(payload, dict):
        raise ValueError(f"{where}: expected an object, got {type(payload).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - names
    if unknown:
        raise ValueError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in payload.items():
        nested = _NESTED.get((cls, key))
        if nested is not None and value is not None:
            value = _from_dict(nested, value, f"{where}.{key}")
        kwargs[key] = value
    return cls(**kwargs)


def parse_config(payload: dict) -> ExperimentConfig:
    """Build a validated ExperimentConfig from a parsed JSON object."""
    cfg = _from_dict(ExperimentConfig, payload, "config")
    cfg.validate()
    return cfg


def load_config(path: str) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(json.load(f))


def serialize_config(cfg: ExperimentConfig) -> str:
    return json.dumps(dataclasses.asdict(cfg), indent=2, sort_keys=True) + "\n"


def override_seeds(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Point the model init, prune, and shuffle seeds at one value."""
    return replace(cfg, seed=seed,
                   prune=replace(cfg.prune, seed=seed),
                   optimizer=replace(cfg.optimizer, seed=seed))


def shift_seeds(cfg: ExperimentConfig, run_index: int) -> ExperimentConfig:
    """Independent seeds for the run_index-th repeat of a sweep point."""
    off = run_index * SEED_STRIDE
    return replace(cfg, seed=cfg.seed + off,
                   prune=replace(cfg.prune, seed=cfg.prune.seed + off),
                   optimizer=replace(cfg.optimizer, seed=cfg.optimizer.seed + off))


# ---------------------------------------------------------------------------
# Pipeline pieces shared by the subcommands
# ---------------------------------------------------------------------------

def build_model(cfg: ExperimentConfig) -> Model:
    model = build_encoder(cfg.encoder, cfg.seed)
    insert_adapters(model, cfg.adapter, cfg.seed + 1)
    freeze_backbone(model)
    return model


def load_data(cfg: ExperimentConfig) -> TaskData:
    if cfg.data.task is not None:
        return generate(cfg.data.task)
    return load_dir(cfg.data.path)


def scoring_batches(cfg: ExperimentConfig, dataset: TaskData) -> list[tuple]:
    """Deterministic mini-batches of training data for snip/grasp scoring."""
    rng = np.random.default_rng(cfg.prune.seed)
    n = len(dataset.train.labels)
    batches = []
    for _ in range(cfg.prune.score_batches):
        idx = rng.choice(n, size=min(cfg.optimizer.batch_size, n), replace=False)
        batches.append((dataset.train.tokens[idx], dataset.train.labels[idx]))
    return batches


def make_mask(cfg: ExperimentConfig, model: Model, dataset: TaskData):
    batches = scoring_batches(cfg, dataset) if cfg.prune.method in ("snip", "grasp") \
        else ()
    return compute_mask(model, cfg.prune.method, cfg.prune.s, cfg.prune.seed,
                        batches=batches, snip_abs=cfg.prune.snip_abs)


def resolve_out(flag_value: str | None, cfg: ExperimentConfig) -> str:
    env = os.environ.get(OUT_ENV_VAR)
    if env:
        return env
    if flag_value:
        return flag_value
    return cfg.output_dir


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_prune(cfg: ExperimentConfig, out_dir: str) -> str:
    model = build_model(cfg)
    dataset = load_data(cfg)
    mask = make_mask(cfg, model, dataset)
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "mask.sadm")
    save_mask(mask, path)
    print(f"method={mask.method} s={mask.s} seed={mask.seed}")
    for name, kept, total in mask.group_stats():
        print(f"  {name}: kept {kept}/{total} (sparsity {1 - kept / total:.4f})")
    print(f"global: kept {mask.kept()}/{mask.total()} "
          f"(sparsity {1 - mask.kept_fraction():.4f})")
    print(f"wrote {path}")
    return path


def cmd_train(cfg: ExperimentConfig, out_dir: str, mask_path: str | None) -> dict:
    model = build_model(cfg)
    mask = load_mask_for_model(model, mask_path) if mask_path else None
    dataset = load_data(cfg)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as f:
        f.write(serialize_config(cfg))
    metrics = train(model, dataset, cfg.optimizer, mask=mask,
                    checkpoint_path=os.path.join(out_dir, "checkpoint.sacp"))
    with open(os.path.join(out_dir, "metrics.csv"), "w", encoding="utf-8") as f:
        f.write(metrics.to_csv())
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as f:
        f.write(metrics.summary_json())
    summary = metrics.summary()
    print(f"final eval accuracy: {summary['final_eval_accuracy']}")
    print(f"artifacts in {out_dir}")
    return summary


def cmd_eval(cfg: ExperimentConfig, checkpoint_path: str) -> tuple[float, float]:
    model = build_model(cfg)
    load_checkpoint(model, checkpoint_path)
    dataset = load_data(cfg)
    loss, acc = evaluate(model, dataset.eval.tokens, dataset.eval.labels,
                         cfg.optimizer.batch_size)
    print(f"eval loss {loss:.6f} accuracy {acc:.4f}")
    return loss, acc


def cmd_inspect_mask(path: str) -> None:
    mask = load_mask(path)
    print(f"method={mask.method} s={mask.s} seed={mask.seed} "
          f"groups={len(mask.masks)}")
    for name, kept, total in mask.group_stats():
        print(f"  {name}: {total} bits, kept {kept} "
              f"(sparsity {1 - kept / total:.4f})")
    total = mask.total()
    print(f"global sparsity {1 - mask.kept_fraction():.4f} over {total} bits")


# -- sweep ------------------------------------------------------------------

def _sweep_points(cfg: ExperimentConfig, axis: str, values: list[str]) -> list[dict]:
    points = []
    if axis == "sparsity":
        for v in values:
            points.append({"method": cfg.prune.method, "s": float(v),
                           "r": cfg.adapter.r})
    elif axis == "method":
        for v in values:
            if v not in PRUNE_METHODS:
                raise ValueError(f"unknown method '{v}' in sweep values")
            points.append({"method": v, "s": cfg.prune.s, "r": cfg.adapter.r})
    elif axis == "large-sparse":
        for v in values:
            ls = large_sparse_config(cfg.adapter.r, int(v))
            points.append({"method": cfg.prune.method, "s": ls.s, "r": ls.r})
    else:
        raise ValueError(f"unknown sweep axis '{axis}'")
    return points


def _run_sweep_job(job: dict) -> dict:
    """One (point, seed) training run; executed in a worker process."""
    cfg = parse_config(job["config"])
    cfg = replace(cfg,
                  adapter=replace(cfg.adapter, r=job["r"]),
                  prune=replace(cfg.prune, method=job["method"], s=job["s"]))
    cfg = shift_seeds(cfg, job["run_index"])
    model = build_model(cfg)
    dataset = load_data(cfg)
    mask = make_mask(cfg, model, dataset)
    metrics = train(model, dataset, cfg.optimizer, mask=mask)
    final = metrics.final_eval_accuracy
    sts = metrics.steps_to_accuracy(0.9 * final) if final is not None else None
    return {
        "method": job["method"], "s": job["s"], "r": job["r"],
        "run_index": job["run_index"],
        "kept_fraction": metrics.kept_fraction,
        "final_accuracy": final,
        "steps_to_threshold": sts if sts is not None else metrics.total_steps,
    }


SWEEP_COLUMNS = ["method", "s", "r", "kept_fraction", "seeds",
                 "final_acc_mean", "final_acc_std",
                 "steps_to_threshold_mean", "steps_to_threshold_std"]


def _aggregate_rows(results: list[dict]) -> list[dict]:
    rows = []
    keys = []
    for res in results:
        key = (res["method"], res["s"], res["r"])
        if key not in keys:
            keys.append(key)
    for key in keys:
        runs = [r for r in results if (r["method"], r["s"], r["r"]) == key]
        accs = np.array([r["final_accuracy"] for r in runs])
        stss = np.array([r["steps_to_threshold"] for r in runs], dtype=np.float64)
        ddof = 1 if len(runs) > 1 else 0
        rows.append({
            "method": key[0], "s": key[1], "r": key[2],
            "kept_fraction": runs[0]["kept_fraction"],
            "seeds": len(runs),
            "final_acc_mean": float(accs.mean()),
            "final_acc_std": float(accs.std(ddof=ddof)),
            "steps_to_threshold_mean": float(stss.mean()),
            "steps_to_threshold_std": float(stss.std(ddof=ddof)),
        })
    return rows


def _write_sweep_csv(path: str, rows: list[dict], aborted: str | None = None) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(SWEEP_COLUMNS) + "\n")
        for row in rows:
            f.write(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c])
                             for c in SWEEP_COLUMNS) + "\n")
        if aborted:
            f.write(f"# aborted: {aborted}\n")


def cmd_sweep(cfg: ExperimentConfig, axis: str, values: list[str], out_dir: str,
              seeds: int = 3, workers: int = 1) -> str:
    points = _sweep_points(cfg, axis, values)
    payload = dataclasses.asdict(cfg)
    jobs = [{"config": payload, "run_index": k, **point}
            for point in points for k in range(seeds)]
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "sweep.csv")

    results: list[dict] = []
    try:
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                for res in pool.map(_run_sweep_job, jobs):
                    results.append(res)
        else:
            for job in jobs:
                results.append(_run_sweep_job(job))
    except Exception as exc:
        complete = [r for r in results
                    if sum(1 for x in results
                           if (x["method"], x["s"], x["r"]) ==
                           (r["method"], r["s"], r["r"])) == seeds]
        _write_sweep_csv(csv_path, _aggregate_rows(complete),
                         aborted=f"{type(exc).__name__}: {exc}")
        raise
    _write_sweep_csv(csv_path, _aggregate_rows(results))
    print(f"wrote {csv_path} ({len(points)} points x {seeds} seeds)")
    return csv_path


# ---------------------------------------------------------------------------
# argparse front end
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="path to experiment JSON")
    p.add_argument("--out", default=None,
                   help=f"output directory (env {OUT_ENV_VAR} overrides)")
    p.add_argument("--seed", type=int, default=None,
                   help="override model/prune/shuffle seeds with one value")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sparseadapter",
        description="Prune adapter modules at initialization and fine-tune the rest.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prune", help="score, threshold, and write a mask file")
    _add_common(p)

    p = sub.add_parser("train", help="fine-tune (optionally under a mask)")
    _add_common(p)
    p.add_argument("--mask", default=None, help="path to a mask file")

    p = sub.add_parser("sweep", help="grid of prune+train runs, aggregated CSV")
    _add_common(p)
    p.add_argument("--sweep-axis", required=True,
                   choices=["sparsity", "method", "large-sparse"])
    p.add_argument("--values", required=True,
                   help="comma-separated axis values")
    p.add_argument("--seeds", type=int, default=3, help="runs per point")
    p.add_argument("--workers", type=int, default=1, help="parallel jobs")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the eval split")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("inspect-mask", help="report the contents of a mask file")
    p.add_argument("--mask", required=True)

    args = parser.parse_args(argv)
    try:
        if args.command == "inspect-mask":
            cmd_inspect_mask(args.mask)
            return 0
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = override_seeds(cfg, args.seed)
        out_dir = resolve_out(args.out, cfg)
        if args.command == "prune":
            cmd_prune(cfg, out_dir)
        elif args.command == "train":
            cmd_train(cfg, out_dir, args.mask)
        elif args.command == "sweep":
            cmd_sweep(cfg, args.sweep_axis, args.values.split(","), out_dir,
                      seeds=args.seeds, workers=args.workers)
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoint)
        return 0
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
