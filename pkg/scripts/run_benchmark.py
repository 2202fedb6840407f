"""Train every toy7 benchmark variant (cached) and write a summary.

    python3 scripts/run_benchmark.py                 # all variants, results/ cache
    python3 scripts/run_benchmark.py --only full --seeds 0
"""
import argparse
import json
from dataclasses import asdict
from pathlib import Path

from snt.benchmark import BenchmarkConfig, ResultCache, run_all, standard_variants, summarize

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cache", type=Path, default=ROOT / "results" / "benchmark_cache.json")
    ap.add_argument("--summary", type=Path, default=ROOT / "results" / "benchmark_summary.json")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--only", nargs="+", help="variant names to run (full, no_mask, no_skip, height0)")
    ap.add_argument("--epochs", type=int, default=30)
    args = ap.parse_args()

    bench = BenchmarkConfig(epochs=args.epochs)
    variants = standard_variants(bench, tuple(args.seeds))
    if args.only:
        variants = [v for v in variants if v.name in args.only]
    results = run_all(bench, variants, ResultCache(args.cache), verbose=True)
    for r in results:
        print(f"{r.name:8s} seed {r.seed} params {r.params:8d} final mIoU {r.final_miou:.4f} "
              f"best {r.best_miou:.4f} ({r.seconds / 60:.1f} min)")
    names = {r.name for r in results}
    if {"full", "height0"} <= names and 0 in args.seeds:
        s = summarize(results, seed=args.seeds[0])
        doc = {"bench": bench.to_dict(), "summary": {**asdict(s), "height_gap": s.height_gap},
               "runs": [{k: v for k, v in asdict(r).items()} for r in results]}
        args.summary.parent.mkdir(parents=True, exist_ok=True)
        args.summary.write_text(json.dumps(doc, indent=1))
        print(f"height 3 {s.full_miou:.4f} vs height 0 {s.flat_miou:.4f} (gap {s.height_gap:+.4f})")
        print("3-seed means: " + ", ".join(f"{k} {v:.4f}" for k, v in sorted(s.mean_miou.items())))


if __name__ == "__main__":
    main()
