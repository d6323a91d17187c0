"""Masked fine-tuning loop: Adam with decoupled weight decay, linear warmup
then linear decay, frozen backbone, and mask-preserving updates.

After every optimizer step the weights AND both Adam moments are re-zeroed at
masked positions, so pruned slots can never leak back through momentum.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .adapters import trainable_param_report
from .model import Model, save_checkpoint
from .pruning import PruneMask, apply_mask

ADAM_EPS = 1e-8


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, cause: Exception):
        super().__init__(f"training diverged at step {step}: {cause}")
        self.step = step


@dataclass
class OptimizerConfig:
    beta1: float = 0.9
    beta2: float = 0.98
    weight_decay: float = 0.1
    peak_lr: float = 1e-3
    warmup_fraction: float = 0.10
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0

    def validate(self) -> None:
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be > 0")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must be in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


def lr_at(step: int, total_steps: int, cfg: OptimizerConfig) -> float:
    """Linear 0 -> peak over the first ceil(warmup_fraction * total) steps,
    then linear decay to 0 at total_steps."""
    if step > total_steps:
        raise ValueError(f"step {step} > total_steps {total_steps}")
    warmup = math.ceil(cfg.warmup_fraction * total_steps)
    if warmup > 0 and step < warmup:
        return cfg.peak_lr * step / warmup
    if total_steps == warmup:
        return cfg.peak_lr if step == warmup else 0.0
    return cfg.peak_lr * (total_steps - step) / (total_steps - warmup)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls(m={n: np.zeros(p.tensor.shape) for n, p in params.items()},
                   v={n: np.zeros(p.tensor.shape) for n, p in params.items()})


def masked_adam_step(params, grads: dict[str, np.ndarray],
                     mask: PruneMask | None, state: AdamState,
                     cfg: OptimizerConfig, lr: float) -> None:
    """One AdamW step over the trainable groups; masked slots stay exactly zero.

    `params` is a mapping name -> ParamGroup (trainable only); `grads` holds
    plain arrays of matching shapes.
    """
    state.t += 1
    bc1 = 1.0 - cfg.beta1 ** state.t
    bc2 = 1.0 - cfg.beta2 ** state.t
    for name, pg in params.items():
        g = grads[name]
        w = pg.tensor.data
        if g.shape != w.shape:
            raise ValueError(f"group '{name}': grad shape {g.shape} != {w.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS) + cfg.weight_decay * w
        w -= lr * update
        if mask is not None and name in mask.masks:
            dead = ~mask.masks[name]
            w[dead] = 0.0
            m[dead] = 0.0
            v[dead] = 0.0
        if not np.all(np.isfinite(w)):
            raise ad.NumericError(f"non-finite update for group '{name}'")


@dataclass
class StepRecord:
    step: int
    split: str
    loss: float
    accuracy: float
    lr: float
    kept_fraction: float


@dataclass
class RunMetrics:
    records: list[StepRecord] = field(default_factory=list)
    kept_fraction: float = 1.0
    total_steps: int = 0
    adam_state: "AdamState | None" = None   # final optimizer state, for audits

    def eval_history(self) -> list[tuple[int, float]]:
        return [(r.step, r.accuracy) for r in self.records if r.split == "eval"]

    @property
    def final_eval_accuracy(self) -> float | None:
        hist = self.eval_history()
        return hist[-1][1] if hist else None

    @property
    def best_eval_accuracy(self) -> float | None:
        hist = self.eval_history()
        return max(a for _, a in hist) if hist else None

    @property
    def final_eval_loss(self) -> float | None:
        losses = [r.loss for r in self.records if r.split == "eval"]
        return losses[-1] if losses else None

    def steps_to_accuracy(self, threshold: float) -> int | None:
        """First step whose eval accuracy reaches `threshold`, else None."""
        for step, acc in self.eval_history():
            if acc >= threshold:
                return step
        return None

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["step", "split", "loss", "accuracy", "lr", "kept_fraction"])
        for r in self.records:
            writer.writerow([r.step, r.split, repr(r.loss), repr(r.accuracy),
                             repr(r.lr), repr(r.kept_fraction)])
        return buf.getvalue()

    def summary(self) -> dict:
        thresholds = {f"{t:.1f}": self.steps_to_accuracy(t)
                      for t in (0.5, 0.6, 0.7, 0.8, 0.9)}
        return {
            "final_eval_accuracy": self.final_eval_accuracy,
            "best_eval_accuracy": self.best_eval_accuracy,
            "final_eval_loss": self.final_eval_loss,
            "total_steps": self.total_steps,
            "kept_fraction": self.kept_fraction,
            "steps_to_threshold": thresholds,
        }

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"


def evaluate(model: Model, tokens: np.ndarray, labels: np.ndarray,
             batch_size: int = 64) -> tuple[float, float]:
    """Mean loss and accuracy over a split; never mutates the model."""
    n = len(labels)
    if n == 0:
        raise ValueError("evaluate: empty dataset")
    loss_sum = 0.0
    correct = 0
    with ad.no_grad():
        for start in range(0, n, batch_size):
            tb = tokens[start:start + batch_size]
            lb = labels[start:start + batch_size]
            logits = model.forward(tb)
            loss_sum += ad.cross_entropy_logits(logits, lb).item() * len(lb)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == lb))
    return loss_sum / n, correct / n


def train(model: Model, dataset, cfg: OptimizerConfig,
          mask: PruneMask | None = None, checkpoint_path: str | None = None,
          evals_per_epoch: int = 2) -> RunMetrics:
    """Fine-tune the trainable groups; deterministic in cfg.seed.

    The model is expected to be frozen via freeze_backbone (adapters + head
    trainable). `dataset` carries .train and .eval splits (see
    sparseadapter.data). When a mask is given it is applied first and
    re-enforced on every step.
    """
    cfg.validate()
    if len(dataset.train.labels) == 0:
        raise ValueError("train: empty training split")
    if mask is not None:
        apply_mask(model, mask)
    active_mask = model.mask

    params = model.trainable_groups()
    state = AdamState.for_params(params)
    report = trainable_param_report(model, active_mask)
    kept_fraction = report["fraction_kept"]

    n = len(dataset.train.labels)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    metrics = RunMetrics(kept_fraction=kept_fraction, total_steps=total_steps,
                         adam_state=state)
    if cfg.epochs == 0:
        return metrics

    eval_every = max(1, steps_per_epoch // max(1, evals_per_epoch))
    rng = np.random.default_rng(cfg.seed)
    step = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            tokens = dataset.train.tokens[idx]
            labels = dataset.train.labels[idx]
            step += 1
            try:
                # overflow warnings are redundant here: any non-finite value
                # raises NumericError, reported below with the step number
                with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                    logits = model.forward(tokens)
                    loss = ad.cross_entropy_logits(logits, labels)
                    grads = ad.backward(loss,
                                        {n_: p.tensor for n_, p in params.items()})
                    lr = lr_at(step, total_steps, cfg)
                    masked_adam_step(params, {n_: g.data for n_, g in grads.items()},
                                     active_mask, state, cfg, lr)
            except ad.NumericError as exc:
                raise TrainingDiverged(step, exc) from exc
            acc = float(np.mean(np.argmax(logits.data, axis=1) == labels))
            metrics.records.append(StepRecord(step, "train", loss.item(), acc,
                                              lr, kept_fraction))
            if step % eval_every == 0 or step == total_steps:
                try:
                    with np.errstate(over="ignore", invalid="ignore",
                                     divide="ignore"):
                        ev_loss, ev_acc = evaluate(model, dataset.eval.tokens,
                                                   dataset.eval.labels,
                                                   cfg.batch_size)
                except ad.NumericError as exc:
                    raise TrainingDiverged(step, exc) from exc
                metrics.records.append(StepRecord(step, "eval", ev_loss, ev_acc,
                                                  lr, kept_fraction))
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)
    return metrics
