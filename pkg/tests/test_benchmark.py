import pytest

from snt.benchmark import (
    BenchmarkConfig,
    ResultCache,
    RunResult,
    Variant,
    matched_flat_config,
    param_count,
    run_all,
    run_key,
    source_digest,
    standard_variants,
    summarize,
)
from snt.model import ModelConfig

TINY = BenchmarkConfig(train_count=4, val_count=2, epochs=1,
                       model=ModelConfig(base_width=2, level_width=4))


def test_flat_baseline_is_parameter_matched(toy7):
    for cfg in (ModelConfig(), ModelConfig(base_width=4, level_width=8)):
        flat = matched_flat_config(toy7, cfg)
        assert flat.height_override == 0
        assert abs(param_count(toy7, flat) / param_count(toy7, cfg) - 1) <= 0.10


def test_unreachable_tolerance_raises(toy7):
    with pytest.raises(ValueError, match="no flat baseline"):
        matched_flat_config(toy7, ModelConfig(base_width=2, level_width=4), tolerance=0.0)


def test_standard_variants_cover_the_table():
    vs = standard_variants(TINY)
    names = [(v.name, v.seed) for v in vs]
    assert names.count(("height0", 0)) == 1
    for s in (0, 1, 2):
        for n in ("full", "no_mask", "no_skip"):
            assert (n, s) in names


def test_run_key_depends_on_everything():
    v = Variant("full", TINY.model, 0)
    base = run_key(TINY, v, "abc")
    assert run_key(TINY, v, "abd") != base
    assert run_key(TINY, Variant("full", TINY.model, 1), "abc") != base
    assert run_key(BenchmarkConfig(epochs=2, model=TINY.model, train_count=4, val_count=2), v, "abc") != base
    assert run_key(TINY, v, "abc") == base
    assert len(source_digest()) == 64


def test_cache_round_trip_and_reuse(tmp_path):
    cache = ResultCache(tmp_path / "c.json")
    variants = [Variant("full", TINY.model, 0)]
    first = run_all(TINY, variants, cache)
    assert len(first) == 1 and 0.0 <= first[0].best_miou <= 1.0
    again = run_all(TINY, variants, ResultCache(tmp_path / "c.json"), allow_run=False)
    assert again == first


def test_missing_result_without_training_raises(tmp_path):
    with pytest.raises(LookupError, match="no cached result"):
        run_all(TINY, [Variant("full", TINY.model, 0)], ResultCache(tmp_path / "c.json"), allow_run=False)


def test_summary_uses_best_epoch_and_seed_means():
    rs = [RunResult("full", s, 100, 0.5, 0.6 + 0.1 * s, 1.0) for s in range(3)]
    rs += [RunResult("no_mask", s, 90, 0.4, 0.5, 1.0) for s in range(3)]
    rs += [RunResult("height0", 0, 101, 0.45, 0.55, 1.0)]
    s = summarize(rs)
    assert s.full_miou == 0.6 and s.flat_miou == 0.55
    assert s.height_gap == pytest.approx(0.05)
    assert s.mean_miou["full"] == pytest.approx(0.7)
    assert s.mean_final_miou["no_mask"] == pytest.approx(0.4)
