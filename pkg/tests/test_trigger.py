import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fdwm import metrics, spectral, trigger
from fdwm.clustering import ClusteringMap


def _mask(h=8, w=8, positions=((1, 2), (3, 3))):
    m = np.zeros((h, w), np.uint8)
    for p in positions:
        m[p] = 1
        m[spectral.sym_index(*p, h, w)] = 1
    return ClusteringMap(m)


def test_lambdas_deterministic_and_in_range():
    key = trigger.PerturbationKey(42, -0.5, 0.25)
    a = trigger.derive_lambdas(key, _mask(), 3)
    assert a == trigger.derive_lambdas(key, _mask(), 3)
    assert len(a) == 2 * 3
    assert all(-0.5 <= lam <= 0.25 for _, _, lam in a)
    zero = trigger.derive_lambdas(trigger.PerturbationKey(42, 0.0, 0.0), _mask(), 3)
    assert all(lam == 0 for _, _, lam in zero)


def test_different_keys_differ():
    for s in range(10):
        a = trigger.derive_lambdas(trigger.PerturbationKey(2 * s), _mask(), 1)
        b = trigger.derive_lambdas(trigger.PerturbationKey(2 * s + 1), _mask(), 1)
        assert a != b


def test_lambda_depends_only_on_position():
    key = trigger.PerturbationKey(7)
    small = dict(((p, k), lam) for p, k, lam in
                 trigger.derive_lambdas(key, _mask(positions=[(3, 3)]), 1))
    big = dict(((p, k), lam) for p, k, lam in trigger.derive_lambdas(key, _mask(), 1))
    assert small[((3, 3), 0)] == big[((3, 3), 0)]


def test_shared_lambda_across_channels():
    key = trigger.PerturbationKey(5, per_channel=False)
    lams = trigger.derive_lambdas(key, _mask(positions=[(1, 2)]), 3)
    assert len({lam for _, _, lam in lams}) == 1


def test_empty_mask_rejected():
    with pytest.raises(ValueError):
        trigger.derive_lambdas(trigger.PerturbationKey(0), np.zeros((8, 8)), 1)


def test_generate_key_floor():
    mask = _mask()
    assert trigger.generate_key(mask, 1, 9) == trigger.PerturbationKey(9)
    key = trigger.generate_key(mask, 2, 9, min_strength=0.8)
    assert all(abs(lam) >= 0.8 for _, _, lam in trigger.derive_lambdas(key, mask, 2))
    assert key == trigger.generate_key(mask, 2, 9, min_strength=0.8)
    with pytest.raises(ValueError):
        trigger.generate_key(mask, 1, 9, min_strength=1.5)
    wide = np.ones((16, 16), np.uint8)
    with pytest.raises(ValueError, match="unreachable"):
        trigger.generate_key(wide, 1, 9, min_strength=0.75)


def test_zero_key_gives_identical_triggers():
    src = np.random.default_rng(0).random((3, 8, 8, 1))
    ts = trigger.gen_triggers(src, _mask(), trigger.PerturbationKey(1, 0.0, 0.0))
    np.testing.assert_array_equal(ts.images, src)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32), st.integers(1, 3))
def test_all_triggers_share_one_perturbation(seed, d):
    rng = np.random.default_rng(seed)
    src = rng.random((4, 8, 8, d))
    key = trigger.PerturbationKey(seed)
    ts = trigger.gen_triggers(src, _mask(), key)
    diff = ts.raw - src
    for n in range(1, 4):
        assert np.max(np.abs(diff[n] - diff[0])) < 1e-6
    pattern = trigger.trigger_pattern(key, _mask(), (8, 8, d))
    assert np.max(np.abs(diff[0] - pattern)) < 1e-9
    assert ts.images.min() >= 0 and ts.images.max() <= 1


def test_scaled_key_scales_pattern():
    key = trigger.PerturbationKey(3)
    a = trigger.trigger_pattern(key, _mask(), (8, 8, 1))
    b = trigger.trigger_pattern(key.scaled(0.5), _mask(), (8, 8, 1))
    np.testing.assert_allclose(b, 0.5 * a, atol=1e-12)


def test_gen_triggers_shape_checks():
    with pytest.raises(ValueError):
        trigger.gen_triggers(np.zeros((2, 9, 8, 1)), _mask(), trigger.PerturbationKey(0))
    with pytest.raises(ValueError):
        trigger.gen_triggers(np.zeros((0, 8, 8, 1)), _mask(), trigger.PerturbationKey(0))


def test_key_fingerprint_is_stable_and_hides_seed():
    key = trigger.PerturbationKey(1234)
    assert key.fingerprint() == trigger.PerturbationKey(1234).fingerprint()
    assert key.fingerprint() != trigger.PerturbationKey(1235).fingerprint()
    assert "1234" not in key.fingerprint()


def _ts(n=5):
    src = np.random.default_rng(0).random((n, 8, 8, 1))
    return trigger.gen_triggers(src, _mask(), trigger.PerturbationKey(0))


def test_label_strategies():
    ts = trigger.assign_labels(_ts(), trigger.NEW_CLASS, 10)
    assert np.all(ts.labels == 10)
    for seed in range(30):
        rf = trigger.assign_labels(_ts(), trigger.RANDOM_FIXED, 10, seed=seed, forbidden={3})
        assert len(set(rf.labels)) == 1 and rf.labels[0] != 3 and 0 <= rf.labels[0] < 10
    rf = trigger.assign_labels(_ts(), trigger.RANDOM_FIXED, 3, source_labels=[1, 1, 2],
                               forbidden={0})
    assert np.all(rf.labels == 2)
    with pytest.raises(ValueError):
        trigger.assign_labels(_ts(), "mystery", 3)
    with pytest.raises(ValueError):
        trigger.random_fixed_label(2, 0, source_labels=[0], forbidden={1})


def test_nbt_baseline():
    src = np.random.default_rng(1).uniform(0.2, 0.8, (20, 16, 16, 1))
    same = trigger.baseline_triggers("NBT", src, {"variance": 0.0})
    np.testing.assert_array_equal(same.images, src)
    noisy = trigger.baseline_triggers("NBT", src, {"variance": 0.01}, seed=3)
    before = np.mean([metrics.psnr(a, b) for a, b in zip(src, noisy.raw)])
    after = metrics.quality_report(src, noisy.images).mean_psnr
    assert before == pytest.approx(20.0, abs=0.3)
    assert after >= 20.0
    with pytest.raises(ValueError):
        trigger.baseline_triggers("NBT", src, {})


def test_lbt_baseline_changes_only_patch():
    src = np.random.default_rng(2).uniform(0.1, 0.9, (3, 16, 16, 3))
    out = trigger.baseline_triggers("LBT", src, {"logo": np.zeros((4, 5)), "position": (2, 3)})
    changed = np.any(out.images != src, axis=(0, 3))
    want = np.zeros((16, 16), bool)
    want[2:6, 3:8] = True
    np.testing.assert_array_equal(changed, want)
    assert np.all(out.images[:, 2:6, 3:8] == 0)
    default = trigger.baseline_triggers("LBT", src)
    assert np.all(default.images[:, 8:, 8:] == 1.0)
    with pytest.raises(ValueError):
        trigger.baseline_triggers("LBT", src, {"logo": np.ones((4, 4)), "position": (14, 0)})


def test_urs_baseline():
    pool = np.random.default_rng(3).random((4, 8, 8, 1))
    out = trigger.baseline_triggers("URS", params={"pool": pool})
    np.testing.assert_array_equal(out.images, pool)
    with pytest.raises(ValueError):
        trigger.baseline_triggers("URS")
    with pytest.raises(ValueError):
        trigger.baseline_triggers("XYZ", pool)


def test_save_and_load(tmp_path):
    ts = trigger.assign_labels(_ts(), trigger.NEW_CLASS, 3)
    ts = trigger.TriggerSet(ts.images, ts.labels, np.array([7, 3, 9, 1, 0]),
                            ts.key_fingerprint, ts.mask_id)
    paths = trigger.save_trigger_set(tmp_path / "T2", ts, "mask.pbm")
    assert [p.name for p in paths] == ["T2.fdwm", "T2.txt"]
    text = (tmp_path / "T2.txt").read_text()
    assert "label=3" in text and "mask_file=mask.pbm" in text
    back = trigger.load_trigger_set(tmp_path / "T2")
    np.testing.assert_array_equal(back.images, ts.images.astype(np.float32))
    np.testing.assert_array_equal(back.labels, ts.labels)
    np.testing.assert_array_equal(back.source_ids, [7, 3, 9, 1, 0])
    assert back.key_fingerprint == ts.key_fingerprint and back.mask_id == ts.mask_id


@pytest.mark.slow
def test_toy_triggers(toy, toy_quality):
    assert toy_quality.mean_psnr >= 30
    lams = trigger.derive_lambdas(toy.key, toy.cmap, 1)
    assert all(abs(lam) >= 0.75 for _, _, lam in lams)
