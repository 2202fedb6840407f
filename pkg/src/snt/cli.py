"""Command-line entry point: gen, train, eval, predict, parse-instances, gradcheck."""
from __future__ import annotations

import argparse
import json
import sys
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from . import data as D
from .gradcheck import corrupted_backward, run_suite
from .hierarchy import HierarchyError, load_hierarchy, serialize
from .metrics import (
    ConfusionMatrix,
    InstanceAccumulator,
    MetricReport,
    instances_from_maps,
    write_report,
)
from .model import CheckpointError, ModelConfig, SNTModel, build_model, load_checkpoint
from .ops import softmax_channels
from .tensor import ConfigurationError, no_grad
from .train import Schedule, train_loop

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERIC, EXIT_COMPAT = 0, 1, 2, 3, 4
RUN_CONFIG = "run_config.json"


@dataclass
class RunConfig:
    hierarchy: str = "toy7"
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: Schedule = field(default_factory=Schedule)
    augment: Optional[D.AugmentConfig] = field(default_factory=D.AugmentConfig)
    train_dir: str = ""
    val_dir: str = ""
    seed: int = 0
    batch_size: int = 4

    def to_dict(self) -> dict:
        return {
            "hierarchy": self.hierarchy,
            "model": self.model.to_dict(),
            "schedule": asdict(self.schedule),
            "augment": None if self.augment is None else
            {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.augment).items()},
            "train_dir": self.train_dir,
            "val_dir": self.val_dir,
            "seed": self.seed,
            "batch_size": self.batch_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown run-config keys {sorted(unknown)}")
        d = dict(d)
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        if "schedule" in d:
            d["schedule"] = Schedule(**d["schedule"])
        if d.get("augment") is not None:
            d["augment"] = D.AugmentConfig(**{k: tuple(v) if isinstance(v, list) else v
                                              for k, v in d["augment"].items()})
        return cls(**d)


def _hierarchy_ref(name: str) -> str:
    """Keep shipped names short; resolve anything else to an absolute path."""
    p = Path(name)
    return str(p.resolve()) if p.suffix == ".json" and p.exists() else name


def load_run(checkpoint: Path, config: Optional[str]) -> tuple:
    path = Path(config) if config else checkpoint.parent / RUN_CONFIG
    if not path.exists():
        raise FileNotFoundError(f"no run config at {path}; pass --config")
    return RunConfig.from_dict(json.loads(path.read_text())), path


def _model_from(args, checkpoint: str) -> tuple:
    ckpt = Path(checkpoint)
    run, _ = load_run(ckpt, getattr(args, "config", None))
    spec = load_hierarchy(args.hierarchy or run.hierarchy)
    return load_checkpoint(ckpt, spec, run.model), spec, run


def _probabilities(model: SNTModel, images: np.ndarray) -> np.ndarray:
    with no_grad():
        return softmax_channels(model(images).final_logits).data


# -- commands -------------------------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = D.GenConfig()
    if args.config:
        cfg = D.GenConfig.from_dict(json.loads(Path(args.config).read_text()))
    if args.figures:
        cfg = D.GenConfig.from_dict({**cfg.to_dict(), "figures": list(args.figures)})
    D.write_dataset(args.out, args.seed, args.count, cfg, hierarchy=args.hierarchy or "toy7")
    print(f"wrote {args.count} scenes to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    run = RunConfig()
    if args.config:
        run = RunConfig.from_dict(json.loads(Path(args.config).read_text()))
    model_cfg = run.model.to_dict()
    if args.height is not None:
        model_cfg["height_override"] = args.height
    if args.ablate:
        model_cfg["ablations"] = sorted(set(model_cfg["ablations"]) | set(args.ablate))
    for key in ("base_width", "level_width", "head_width"):
        if getattr(args, key) is not None:
            model_cfg[key] = getattr(args, key)
    sched = asdict(run.schedule)
    if args.epochs is not None:
        sched["total_epochs"] = args.epochs
    run = RunConfig(
        hierarchy=_hierarchy_ref(args.hierarchy or run.hierarchy),
        model=ModelConfig.from_dict(model_cfg),
        schedule=Schedule(**sched),
        augment=None if args.no_augment else run.augment,
        train_dir=str(Path(args.train or run.train_dir).resolve()),
        val_dir=str(Path(args.val or run.val_dir).resolve()),
        seed=run.seed if args.seed is None else args.seed,
        batch_size=args.batch_size or run.batch_size,
    )
    spec = load_hierarchy(run.hierarchy)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / RUN_CONFIG).write_text(json.dumps(run.to_dict(), indent=2, sort_keys=True) + "\n")
    train_set, val_set = D.SceneDataset.load(run.train_dir), D.SceneDataset.load(run.val_dir)
    model = build_model(spec, run.model, run.seed)
    print(f"model: {model.num_parameters()} parameters")
    _, log = train_loop(model, train_set, val_set, run.schedule, run.augment, run.seed,
                        run.batch_size, out, verbose=not args.quiet)
    if log.records:
        print(f"final val mIoU {log.records[-1].val_miou:.4f}, best {max(r.val_miou for r in log.records):.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, spec, _ = _model_from(args, args.checkpoint)
    ds = D.SceneDataset.load(args.data)
    if len(ds) == 0:
        raise ValueError(f"{args.data}: empty dataset")
    cm = ConfusionMatrix(spec.num_labels)
    inst = InstanceAccumulator()
    for images, labels, instances, _ in D.batch_iterator(ds, args.batch_size):
        if args.oracle_gt:
            pred = labels.astype(np.uint8)
            probs = np.eye(spec.num_labels)[np.where(labels == 255, 0, labels)].transpose(0, 3, 1, 2)
        else:
            probs = _probabilities(model, images)
            pred = np.argmax(probs, axis=1).astype(np.uint8)
        cm.update(pred, labels)
        if args.instances:
            for k in range(len(labels)):
                inst.add(instances_from_maps(instances[k], pred[k], probs[k]),
                         instances_from_maps(instances[k], labels[k]))
    report = MetricReport.from_confusion(cm)
    if args.instances:
        report.ap_r, report.pcp, report.ap_p = inst.ap_r(), inst.pcp(), inst.ap_p()
    out = Path(args.out) if args.out else Path(args.checkpoint).with_suffix(".report.csv")
    write_report(out, report, spec.label_set.names)
    print(f"pixel_acc {report.pixel_acc:.4f} mean_acc {report.mean_acc:.4f} miou {report.miou:.4f}")
    if args.instances:
        print(f"ap_r mean {report.ap_r['mean']:.4f} pcp {report.pcp:.4f} ap_p mean {report.ap_p['mean']:.4f}")
    print(f"report written to {out}")
    return EXIT_OK


def _check_dims(image: np.ndarray, model: SNTModel, what: str) -> None:
    h, w = image.shape[:2]
    if h % 8 or w % 8:
        raise ConfigurationError(f"{what}: image dims {(h, w)} must be divisible by 8")
    if (h, w) != tuple(model.config.input_size):
        raise ConfigurationError(f"{what}: image dims {(h, w)} differ from model input {model.config.input_size}")


def cmd_predict(args) -> int:
    model, spec, _ = _model_from(args, args.checkpoint)
    image = D.read_ppm(args.image)
    _check_dims(image, model, args.image)
    probs = _probabilities(model, D.to_model_input(image[None]))[0]
    pred = np.argmax(probs, axis=0).astype(np.uint8)
    D.write_labels(args.out, pred, spec.num_labels)
    if args.probs:
        d = Path(args.probs)
        d.mkdir(parents=True, exist_ok=True)
        for c, name in enumerate(spec.label_set.names):
            D.write_pgm(d / f"prob_{c:02d}.pgm", np.round(probs[c] * 255))
    print(f"wrote {args.out}")
    return EXIT_OK


def _square_crop(image: np.ndarray, mask: np.ndarray, fill: np.ndarray) -> tuple:
    """Bounding box of ``mask`` padded to a square around its center; returns (crop, y0, x0, side)."""
    ys, xs = np.nonzero(mask)
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    side = int(max(y1 - y0, x1 - x0))
    sy = int(y0 - (side - (y1 - y0)) // 2)
    sx = int(x0 - (side - (x1 - x0)) // 2)
    H, W = mask.shape
    crop = np.broadcast_to(fill, (side, side, 3)).copy()
    ty0, tx0 = max(sy, 0), max(sx, 0)
    ty1, tx1 = min(sy + side, H), min(sx + side, W)
    crop[ty0 - sy:ty1 - sy, tx0 - sx:tx1 - sx] = image[ty0:ty1, tx0:tx1]
    return crop, sy, sx, side


def _resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of (H, W, ...) with pixel-center alignment."""
    H, W = arr.shape[:2]
    yy = (np.arange(out_h) + 0.5) * (H / out_h) - 0.5
    xx = (np.arange(out_w) + 0.5) * (W / out_w) - 0.5
    coords = np.stack(np.meshgrid(yy, xx, indexing="ij"))
    chans = arr.reshape(H, W, -1)
    out = [ndimage.map_coordinates(chans[..., k], coords, order=1, mode="nearest") for k in range(chans.shape[-1])]
    return np.stack(out, axis=-1).reshape((out_h, out_w) + arr.shape[2:])


def parse_instances(image: np.ndarray, instances: np.ndarray, global_model: SNTModel,
                    local_model: SNTModel) -> tuple:
    """Fuse global and per-instance local class probabilities.

    Returns (fused labels, global labels, {instance id: local labels}).
    """
    _check_dims(image, global_model, "global model")
    pg = _probabilities(global_model, D.to_model_input(image[None]))[0]
    fused_probs = pg.copy()
    fused = np.argmax(pg, axis=0).astype(np.uint8)
    global_pred = fused.copy()
    S = local_model.config.input_size
    outside = instances == 0
    fill = image[outside].mean(axis=0) if outside.any() else image.reshape(-1, 3).mean(axis=0)
    per_instance = {}
    ids = [int(k) for k in np.unique(instances) if k != 0]
    if not ids:
        warnings.warn("instance map holds no instances; returning the global prediction")
    for k in ids:
        mask = instances == k
        crop, sy, sx, side = _square_crop(image, mask, fill)
        local_in = _resize(crop, S[0], S[1])
        pl = _probabilities(local_model, D.to_model_input(local_in[None]))[0]
        back = _resize(pl.transpose(1, 2, 0), side, side).transpose(2, 0, 1)
        ys, xs = np.nonzero(mask)
        avg = 0.5 * (pg[:, ys, xs] + back[:, ys - sy, xs - sx])
        fused_probs[:, ys, xs] = avg
        lab = np.zeros_like(fused)
        lab[ys, xs] = np.argmax(avg, axis=0)
        fused[ys, xs] = lab[ys, xs]
        per_instance[k] = lab
    return fused, global_pred, per_instance, fused_probs


def cmd_parse_instances(args) -> int:
    gmodel, spec, _ = _model_from(args, args.global_ckpt)
    lmodel, lspec, _ = _model_from(args, args.local_ckpt)
    if serialize(spec) != serialize(lspec):
        raise CheckpointError("global and local checkpoints use different hierarchies")
    image = D.read_ppm(args.image)
    inst = D.read_pgm(args.instances)
    if inst.shape != image.shape[:2]:
        raise ValueError(f"instance map dims {inst.shape} differ from image {image.shape[:2]}")
    fused, gpred, per_inst, probs = parse_instances(image, inst, gmodel, lmodel)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    D.write_labels(out / "fused.labels.pgm", fused, spec.num_labels)
    D.write_labels(out / "global.labels.pgm", gpred, spec.num_labels)
    scores = {}
    for k, lab in per_inst.items():
        D.write_labels(out / f"instance_{k:03d}.labels.pgm", lab, spec.num_labels)
        mask = inst == k
        scores[k] = float(np.take_along_axis(probs, fused[None].astype(np.intp), 0)[0][mask].mean())
    (out / "scores.json").write_text(json.dumps({str(k): v for k, v in scores.items()}, indent=2) + "\n")
    print(f"parsed {len(per_inst)} instance(s) into {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    names = None if args.module == "all" else [args.module]
    if args.corrupt:
        with corrupted_backward(args.corrupt):
            results = run_suite(names)
    else:
        results = run_suite(names)
    print(f"{'check':24s} {'max rel err':>12s} {'seconds':>8s}  status")
    for r in results:
        print(f"{r.name:24s} {r.error:12.3e} {r.seconds:8.2f}  {'ok' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed")
    return EXIT_OK if not failed else EXIT_FAIL


# -- parser -----------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="snt", description="Hierarchical part-parsing toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic scene dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--config", help="GenConfig JSON")
    g.add_argument("--figures", type=int, nargs=2, metavar=("MIN", "MAX"))
    g.add_argument("--hierarchy")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--train")
    t.add_argument("--val")
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="RunConfig JSON")
    t.add_argument("--hierarchy")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--height", type=int, help="tree height override (0 = flat baseline)")
    t.add_argument("--ablate", action="append", choices=("no_mask", "no_skip", "no_pred", "no_dconv"))
    t.add_argument("--base-width", type=int)
    t.add_argument("--level-width", type=int)
    t.add_argument("--head-width", type=int)
    t.add_argument("--no-augment", action="store_true")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--config", help="RunConfig JSON (default: next to the checkpoint)")
    e.add_argument("--hierarchy")
    e.add_argument("--out")
    e.add_argument("--instances", action="store_true", help="also report instance-level metrics")
    e.add_argument("--oracle-gt", action="store_true", help="score ground truth as the prediction")
    e.add_argument("--batch-size", type=int, default=8)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="predict a label map for one image")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--config")
    r.add_argument("--hierarchy")
    r.add_argument("--probs", help="directory for per-class probability PGMs")
    r.set_defaults(func=cmd_predict)

    q = sub.add_parser("parse-instances", help="fuse global and per-instance local predictions")
    q.add_argument("--image", required=True)
    q.add_argument("--instances", required=True, help="instance-id PGM")
    q.add_argument("--global", dest="global_ckpt", required=True)
    q.add_argument("--local", dest="local_ckpt", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--config")
    q.add_argument("--hierarchy")
    q.set_defaults(func=cmd_parse_instances)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--module", default="all")
    c.add_argument("--corrupt", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_COMPAT
    except FloatingPointError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError, HierarchyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
