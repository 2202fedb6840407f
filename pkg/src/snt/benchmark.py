"""Seeded toy7 benchmark: tree height and ablation comparisons with cached results."""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

from .data import AugmentConfig, GenConfig, SceneDataset
from .hierarchy import TreeSpec, load_hierarchy
from .model import ModelConfig, build_model
from .train import Schedule, train_loop

PACKAGE_DIR = Path(__file__).resolve().parent


@dataclass(frozen=True)
class BenchmarkConfig:
    hierarchy: str = "toy7"
    train_count: int = 512
    val_count: int = 128
    train_seed: int = 1
    val_seed: int = 2
    epochs: int = 30
    batch_size: int = 4
    model: ModelConfig = ModelConfig()
    gen: GenConfig = GenConfig()
    augment: AugmentConfig = AugmentConfig()

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("hierarchy", "train_count", "val_count", "train_seed",
                                           "val_seed", "epochs", "batch_size")}
        d["model"] = self.model.to_dict()
        d["gen"] = self.gen.to_dict()
        d["augment"] = asdict(self.augment)
        return d


@dataclass(frozen=True)
class Variant:
    name: str
    model: ModelConfig
    seed: int


@dataclass
class RunResult:
    name: str
    seed: int
    params: int
    final_miou: float
    best_miou: float
    seconds: float
    log: list = field(default_factory=list)


def source_digest() -> str:
    """Hash of every module and shipped config, so cached results go stale when code changes."""
    h = hashlib.sha256()
    for p in sorted(PACKAGE_DIR.rglob("*")):
        if p.suffix in (".py", ".json") and "__pycache__" not in p.parts:
            h.update(p.relative_to(PACKAGE_DIR).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def run_key(bench: BenchmarkConfig, variant: Variant, digest: str) -> str:
    doc = {"bench": bench.to_dict(), "model": variant.model.to_dict(), "seed": variant.seed, "source": digest}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def param_count(spec: TreeSpec, config: ModelConfig) -> int:
    return sum(p.data.size for p in build_model(spec, config, 0).parameters())


def matched_flat_config(spec: TreeSpec, config: ModelConfig, tolerance: float = 0.10) -> ModelConfig:
    """Height-0 config whose parameter count is closest to the full tree's.

    The backbone is widened first, with the flat head at the tree's level
    width; the head width is then tuned within [level/2, 2*level] in steps
    of 8. Raises if nothing lands within ``tolerance``.
    """
    target = param_count(spec, config)
    lw = config.level_width
    flat = replace(config, height_override=0, ablations=(), head_width=lw)

    def gap(c):
        return abs(param_count(spec, c) - target) / target

    bw = config.base_width
    while param_count(spec, replace(flat, base_width=bw + 1)) <= target:
        bw += 1
    cands = [replace(flat, base_width=b, head_width=h) for b in (bw, bw + 1)
             for h in range(max(8, lw // 2), 2 * lw + 1, 8)]
    best = min(cands, key=gap)
    if gap(best) > tolerance:
        raise ValueError(f"no flat baseline within {tolerance:.0%} of {target} parameters "
                         f"(closest {gap(best):.1%})")
    return best


def standard_variants(bench: BenchmarkConfig, seeds=(0, 1, 2)) -> list:
    spec = load_hierarchy(bench.hierarchy)
    base = bench.model
    out = [Variant("full", base, seeds[0]), Variant("height0", matched_flat_config(spec, base), seeds[0])]
    for s in seeds:
        if s != seeds[0]:
            out.append(Variant("full", base, s))
        out.append(Variant("no_mask", replace(base, ablations=("no_mask",)), s))
        out.append(Variant("no_skip", replace(base, ablations=("no_skip",)), s))
    return out


def run_variant(bench: BenchmarkConfig, variant: Variant, datasets=None, verbose: bool = False) -> RunResult:
    spec = load_hierarchy(bench.hierarchy)
    if datasets is None:
        datasets = make_datasets(bench)
    train_set, val_set = datasets
    model = build_model(spec, variant.model, variant.seed)
    t0 = time.perf_counter()
    _, log = train_loop(model, train_set, val_set, Schedule(total_epochs=bench.epochs), aug=bench.augment,
                        seed=variant.seed, batch_size=bench.batch_size, verbose=verbose)
    mious = [r.val_miou for r in log.records]
    return RunResult(variant.name, variant.seed, param_count(spec, variant.model), mious[-1], max(mious),
                     time.perf_counter() - t0, mious)


def make_datasets(bench: BenchmarkConfig) -> tuple:
    return (SceneDataset.generate(bench.train_seed, bench.train_count, bench.gen),
            SceneDataset.generate(bench.val_seed, bench.val_count, bench.gen))


class ResultCache:
    """JSON file of run results keyed by benchmark, variant and source hash."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.entries = json.loads(self.path.read_text()) if self.path.exists() else {}

    def get(self, key: str) -> Optional[RunResult]:
        e = self.entries.get(key)
        return RunResult(**e) if e is not None else None

    def put(self, key: str, result: RunResult) -> None:
        self.entries[key] = asdict(result)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.entries, indent=1, sort_keys=True))
        tmp.replace(self.path)


def run_all(bench: BenchmarkConfig, variants: list, cache: Optional[ResultCache] = None,
            allow_run: bool = True, verbose: bool = False) -> list:
    """Results for ``variants``, training only those missing from ``cache``.

    With ``allow_run`` false a missing result raises LookupError instead.
    """
    digest = source_digest()
    results, datasets = [], None
    for v in variants:
        key = run_key(bench, v, digest)
        res = cache.get(key) if cache is not None else None
        if res is None:
            if not allow_run:
                raise LookupError(f"no cached result for {v.name} seed {v.seed} (key {key})")
            if datasets is None:
                datasets = make_datasets(bench)
            if verbose:
                print(f"== {v.name} seed {v.seed}", flush=True)
            res = run_variant(bench, v, datasets, verbose)
            if cache is not None:
                cache.put(key, res)
        results.append(res)
    return results


@dataclass
class TrendSummary:
    """Scores are each run's best val mIoU over its epochs (the best.ckpt value)."""
    full_miou: float
    flat_miou: float
    full_params: int
    flat_params: int
    mean_miou: dict
    mean_final_miou: dict

    @property
    def height_gap(self) -> float:
        return self.full_miou - self.flat_miou


def summarize(results: list, seed: int = 0) -> TrendSummary:
    by = {}
    for r in results:
        by.setdefault(r.name, []).append(r)
    full = next(r for r in by["full"] if r.seed == seed)
    flat = next(r for r in by["height0"] if r.seed == seed)
    means = {k: sum(r.best_miou for r in v) / len(v) for k, v in by.items()}
    finals = {k: sum(r.final_miou for r in v) / len(v) for k, v in by.items()}
    return TrendSummary(full.best_miou, flat.best_miou, full.params, flat.params, means, finals)
