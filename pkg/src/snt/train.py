"""SGD with momentum, the warmup/step-decay schedule, and the epoch loop."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .data import AugmentConfig, SceneDataset, batch_iterator
from .metrics import ConfusionMatrix, MetricReport
from .model import SNTModel, predict_labels, save_checkpoint
from .tensor import Parameter, no_grad

LOG_HEADER = ("epoch", "lr", "loss_total", "loss_routing", "loss_leaf", "loss_final",
              "val_pixel_acc", "val_mean_acc", "val_miou", "seconds")


class NumericError(FloatingPointError):
    """Non-finite loss or activation during training."""


@dataclass(frozen=True)
class Schedule:
    base_lr: float = 1e-3
    warmup_lr: float = 1e-4
    warmup_epochs: int = 10
    ramp_epochs: int = 10
    decay_factor: float = 0.5
    decay_every: int = 30
    total_epochs: int = 30


def lr_at(epoch: int, s: Schedule = Schedule()) -> float:
    """Constant warmup, linear ramp to ``base_lr``, then step decay counted from the ramp end."""
    if epoch < 0:
        raise ValueError(f"epoch must be nonnegative, got {epoch}")
    if epoch < s.warmup_epochs:
        return s.warmup_lr
    ramp_end = s.warmup_epochs + s.ramp_epochs
    if epoch < ramp_end:
        return s.warmup_lr + (s.base_lr - s.warmup_lr) * (epoch - s.warmup_epochs) / s.ramp_epochs
    return s.base_lr * s.decay_factor ** ((epoch - ramp_end) // s.decay_every)


@dataclass
class OptimState:
    momentum: float = 0.9
    weight_decay: float = 5e-5
    lr: float = 1e-3
    velocity: dict = field(default_factory=dict)


def sgd_step(params: Sequence[Parameter], opt: OptimState) -> None:
    """v <- m*v + g + wd*theta (decay-exempt params skip wd); theta <- theta - lr*v; grads cleared."""
    for p in params:
        if p.grad is None:
            raise ValueError(f"parameter {p.name} has no gradient")
    for p in params:
        g = p.grad
        if opt.weight_decay and not p.decay_exempt:
            g = g + opt.weight_decay * p.data
        v = opt.velocity.get(p.name)
        if v is None:
            v = np.zeros_like(p.data)
        if v.shape != p.data.shape:
            raise ValueError(f"velocity shape {v.shape} does not match parameter {p.name} {p.data.shape}")
        v = (opt.momentum * v + g).astype(p.data.dtype, copy=False)
        opt.velocity[p.name] = v
        p.data = (p.data - opt.lr * v).astype(p.data.dtype, copy=False)
        p.grad = None


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss_total: float
    loss_routing: float
    loss_leaf: float
    loss_final: float
    val_pixel_acc: float
    val_mean_acc: float
    val_miou: float
    seconds: float

    def row(self) -> list:
        vals = asdict(self)
        return [str(vals["epoch"])] + [repr(float(vals[k])) for k in LOG_HEADER[1:]]


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def write_csv(self, path: Union[str, Path], include_time: bool = True) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(LOG_HEADER)
            for r in self.records:
                row = r.row()
                if not include_time:
                    row[-1] = "0"
                w.writerow(row)

    @staticmethod
    def read_csv(path: Union[str, Path]) -> list:
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in rows]


def evaluate(model: SNTModel, dataset: SceneDataset, batch_size: int = 8,
             return_predictions: bool = False):
    """Run the model in eval mode over ``dataset`` and return a MetricReport."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    was_training = model.train_mode
    model.eval()
    cm = ConfusionMatrix(model.spec.num_labels)
    preds = []
    try:
        with no_grad():
            for images, labels, _, _ in batch_iterator(dataset, batch_size):
                pred = predict_labels(model(images))
                cm.update(pred, labels)
                if return_predictions:
                    preds.extend(pred)
    finally:
        model.train_mode = was_training
    report = MetricReport.from_confusion(cm)
    return (report, preds) if return_predictions else report


def train_loop(model: SNTModel, train_set: SceneDataset, val_set: SceneDataset,
               schedule: Schedule = Schedule(), aug: Optional[AugmentConfig] = AugmentConfig(),
               seed: int = 0, batch_size: int = 4, out_dir: Union[str, Path, None] = None,
               opt: Optional[OptimState] = None, verbose: bool = False) -> tuple:
    """Train for ``schedule.total_epochs`` epochs; returns (model, TrainLog).

    With ``out_dir`` set, ``best.ckpt`` (highest val mIoU), ``last.ckpt`` and
    ``train_log.csv`` are written there after every epoch.
    """
    opt = opt or OptimState()
    log = TrainLog()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    best = -math.inf
    params = model.parameters()
    for epoch in range(schedule.total_epochs):
        t0 = time.perf_counter()
        opt.lr = lr_at(epoch, schedule)
        model.train()
        drop_rng = np.random.default_rng([seed, 1, epoch])
        sums = np.zeros(4)
        n = 0
        batches = batch_iterator(train_set, batch_size, shuffle_seed=seed, aug=aug, spec=model.spec, epoch=epoch)
        for b, (images, labels, _, _) in enumerate(batches):
            try:
                outputs = model(images, drop_rng)
                loss = model.total_loss(outputs, labels)
            except FloatingPointError as e:
                raise NumericError(f"epoch {epoch} batch {b}: {e}") from e
            value = loss.total.item()
            if not math.isfinite(value):
                raise NumericError(f"epoch {epoch} batch {b}: non-finite loss {value}")
            loss.total.backward()
            sgd_step(params, opt)
            sums += (value, loss.routing, loss.leaf, loss.final)
            n += 1
        report = evaluate(model, val_set)
        mean = sums / max(n, 1)
        rec = EpochRecord(epoch + 1, opt.lr, *mean, report.pixel_acc, report.mean_acc, report.miou,
                          time.perf_counter() - t0)
        log.records.append(rec)
        if verbose:
            print(f"epoch {rec.epoch:3d} lr {rec.lr:.2e} loss {rec.loss_total:.4f} "
                  f"val mIoU {rec.val_miou:.4f} ({rec.seconds:.1f}s)", flush=True)
        if out is not None:
            save_checkpoint(model, out / "last.ckpt")
            if report.miou > best:
                best = report.miou
                save_checkpoint(model, out / "best.ckpt")
            log.write_csv(out / "train_log.csv")
    return model, log
