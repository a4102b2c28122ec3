import numpy as np
import pytest

from tipatch.imagery import rng_stream
from tipatch.metrics import ProxyMetric
from tipatch.trainer import (
    SLUGS,
    VARIANT_NAMES,
    VARIANTS,
    TrainConfig,
    draw_placement,
    get_variant,
    init_patch,
    train,
    train_all_variants,
)


@pytest.fixture(scope="module")
def metric():
    return ProxyMetric()


def _tc(**kw):
    base = dict(patch_size=12, batch_size=4, iterations=20, val_every=5, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_variant_table():
    assert len(VARIANTS) == 8
    assert len(set(SLUGS.values())) == 8
    flags = {v.name: (v.use_tv_nps, v.use_relight, v.use_rotation, v.use_bw) for v in VARIANTS}
    assert flags["Baseline"] == (False, False, True, False)
    assert flags["BaselineWR"] == (False, False, False, False)
    assert flags["B-WBaselineWRL+"] == (True, True, False, True)
    for name in VARIANT_NAMES:
        assert get_variant(name).name == name
        assert get_variant(SLUGS[name].upper()).name == name
    with pytest.raises(ValueError):
        get_variant("nope")


def test_init_patch_range():
    p = init_patch(10, rng_stream(0, "init"))
    assert p.shape == (3, 10, 10)
    assert p.min() >= 0.25 and p.max() <= 0.75


def test_draw_placement_rotation_independent_of_position():
    a = [draw_placement(rng_stream(0, "p"), rng_stream(0, "r"), (3, 40, 40), 8, True)
         for _ in range(1)]
    b = [draw_placement(rng_stream(0, "p"), rng_stream(0, "r"), (3, 40, 40), 8, False)
         for _ in range(1)]
    assert a[0][:2] == b[0][:2]
    assert b[0].rot == 0


def test_config_validation():
    for kw in ({"patch_size": 1}, {"iterations": -1}, {"batch_size": 0}, {"step": 0},
               {"optimizer": "sgd"}, {"val_every": 0}):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


def test_zero_iterations_returns_init(metric, small_corpus):
    tr, va = small_corpus
    p, log = train(tr, va, metric, get_variant("Baseline"), _tc(iterations=0))
    assert np.array_equal(p.pixels, init_patch(12, rng_stream(0, "init")))
    assert log.rows == [] and p.meta["best_iteration"] == 0


def test_training_improves_validation_gain(metric, small_corpus):
    tr, va = small_corpus
    p, log = train(tr, va, metric, get_variant("Baseline"), _tc(iterations=40))
    assert log.best_val_gain > log.initial_val_gain + 1.0
    assert log.best_val_gain >= max(g for _, g in log.val_gains)
    assert p.meta["variant"] == "Baseline" and p.meta["metric"] == "proxy"
    assert [r["iter"] for r in log.rows] == list(range(1, 41))
    assert p.pixels.min() >= 0 and p.pixels.max() <= 1


def test_best_checkpoint_at_least_initial(metric, small_corpus):
    tr, va = small_corpus
    for seed in range(3):
        _, log = train(tr, va, metric, get_variant("BaselineL+"), _tc(seed=seed, iterations=10))
        assert log.best_val_gain >= log.initial_val_gain


def test_bw_variants_are_gray(metric, small_corpus):
    tr, va = small_corpus
    for name in ("B-WBaselineL+", "B-WBaselineWRL+"):
        p, _ = train(tr, va, metric, get_variant(name), _tc(iterations=6))
        assert np.array_equal(p.pixels[0], p.pixels[1])
        assert np.array_equal(p.pixels[1], p.pixels[2])


def test_bit_identical_reruns(metric, small_corpus):
    tr, va = small_corpus
    vc = get_variant("BaselineL+")
    a, la = train(tr, va, metric, vc, _tc(iterations=8))
    b, lb = train(tr, va, metric, vc, _tc(iterations=8, threads=2))
    assert np.array_equal(a.pixels, b.pixels)
    assert la.to_csv() == lb.to_csv()
    c, _ = train(tr, va, metric, vc, _tc(iterations=8, seed=1))
    assert not np.array_equal(a.pixels, c.pixels)


def test_adam_optimizer_runs(metric, small_corpus):
    tr, va = small_corpus
    _, log = train(tr, va, metric, get_variant("Baseline"),
                   _tc(optimizer="adam", step=0.01, iterations=15))
    assert log.best_val_gain > log.initial_val_gain


def test_tv_nps_terms_only_for_plus_variants(metric, small_corpus):
    tr, va = small_corpus
    _, log = train(tr, va, metric, get_variant("Baseline"), _tc(iterations=2))
    r = log.rows[0]
    assert r["total"] == pytest.approx(r["attack"], abs=0)


def test_log_csv(metric, small_corpus):
    tr, va = small_corpus
    _, log = train(tr, va, metric, get_variant("Baseline"), _tc(iterations=5))
    text = log.to_csv(comments=["seed=0"])
    lines = text.splitlines()
    assert lines[0] == "# seed=0"
    assert lines[1] == "iter,attack,tv,nps,total,val_gain"
    assert len(lines) == 2 + 1 + 5


def test_data_checks(metric, small_corpus):
    tr, va = small_corpus
    with pytest.raises(ValueError):
        train([], va, metric, get_variant("Baseline"), _tc())
    with pytest.raises(ValueError):
        train(tr[:2], va, metric, get_variant("Baseline"), _tc())
    with pytest.raises(ValueError):
        train(tr, va, metric, get_variant("Baseline"), _tc(patch_size=65))


def test_train_all_variants_table(metric, small_corpus):
    tr, va = small_corpus
    patches, logs, reports, table = train_all_variants(
        tr, va, metric, _tc(iterations=3), eval_sets={"a": va[:3], "b": tr[:3]})
    assert list(patches) == list(VARIANT_NAMES)
    assert table["rows"] == list(VARIANT_NAMES)
    assert table["columns"] == ["a", "b"]
    assert len(reports) == 16


def test_first_baseline_step_is_signed_attack_gradient(metric, small_corpus):
    from tipatch.objective import LossWeights, total_loss
    tr, va = small_corpus
    tc = _tc(iterations=1)
    p, log = train(tr, va, metric, get_variant("Baseline"), tc)
    # replay the first iteration's draws
    px0 = init_patch(12, rng_stream(0, "init"))
    idx = rng_stream(0, "batch").choice(len(tr), size=4, replace=False)
    pos, rot = rng_stream(0, "position"), rng_stream(0, "rotation")
    batch = [tr[i] for i in idx]
    pls = [draw_placement(pos, rot, x.shape, 12, True) for x in batch]
    lb = total_loss(batch, px0, pls, metric, LossWeights(0, 0))
    assert log.rows[0]["total"] == lb.total == lb.attack
    px1 = np.clip(px0 - tc.step * np.sign(lb.grad_patch), 0, 1)
    if log.best_iteration == 1:
        assert np.array_equal(p.pixels, px1)
    else:
        assert np.array_equal(p.pixels, px0)
