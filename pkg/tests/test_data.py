import numpy as np
import pytest

from fdwm import data, nn


def _record(label, pixel):
    return bytes([label]) + bytes([pixel]) * 3072


def test_cifar_scaling(tmp_path):
    (tmp_path / "data_batch_1.bin").write_bytes(_record(3, 255) + _record(7, 0) * 19)
    b = data.load_cifar10(tmp_path, seed=0)
    allx = data.Samples.concat(b.D1, b.D2, b.E)
    assert b.class_count == 10 and b.image_shape == (32, 32, 3)
    first = allx.take(np.flatnonzero(allx.ids == 0))
    assert first.labels[0] == 3 and np.all(first.images == 1.0)
    rest = allx.take(np.flatnonzero(allx.ids != 0))
    assert np.all(rest.images == 0.0) and np.all(rest.labels == 7)


def test_cifar_planar_layout(tmp_path):
    rec = bytearray(_record(1, 0))
    rec[1 + 0 * 1024 + 5] = 255      # red, row 0, col 5
    rec[1 + 2 * 1024 + 32 + 1] = 51  # blue, row 1, col 1
    (tmp_path / "one.bin").write_bytes(bytes(rec))
    b = data.load_cifar10(tmp_path / "one.bin")
    img = data.Samples.concat(b.D1, b.D2, b.E).images[0]
    assert img[0, 5, 0] == 1.0 and img[1, 1, 2] == pytest.approx(0.2)
    assert img.sum() == pytest.approx(1.2)


def test_cifar_errors(tmp_path):
    with pytest.raises(data.IngestionError, match="no such file"):
        data.load_cifar10(tmp_path / "missing")
    (tmp_path / "a.bin").write_bytes(_record(0, 1) + _record(0, 1)[:100])
    with pytest.raises(data.IngestionError, match="byte offset 3073"):
        data.load_cifar10(tmp_path / "a.bin")
    (tmp_path / "b.bin").write_bytes(_record(0, 1) + _record(10, 1))
    with pytest.raises(data.CorruptRecordError, match="record 1"):
        data.load_cifar10(tmp_path / "b.bin")
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(data.IngestionError):
        data.load_cifar10(empty)


def _full_size_bundle():
    n = 60_000
    ids = np.arange(n)
    return data.split_bundle(np.zeros((n, 1, 1, 1), np.float32), ids % 10, ids, 10, seed=0)


def test_full_cifar_split_counts_and_partition():
    b = _full_size_bundle()
    assert (len(b.D1), len(b.D2), len(b.E)) == (45_000, 3_000, 12_000)
    b.check()
    plan = data.make_partition(b, 500, 0)
    assert len(plan.A1) == len(plan.A2) == len(plan.V) == 500
    assert len(plan.U) == 11_500
    assert not set(plan.U) & set(plan.V)
    assert set(plan.U) | set(plan.V) == set(range(12_000))


def test_split_rounds_down_remainder_to_test():
    ids = np.arange(101)
    b = data.split_bundle(np.zeros((101, 1, 1, 1)), ids % 2, ids, 2, seed=1)
    assert (len(b.D1), len(b.D2), len(b.E)) == (75, 5, 21)


def test_synthetic_deterministic_and_balanced():
    a = data.gen_synthetic(1, class_count=3, per_class=200)
    b = data.gen_synthetic(1, class_count=3, per_class=200)
    for x, y in zip((a.D1, a.D2, a.E), (b.D1, b.D2, b.E)):
        np.testing.assert_array_equal(x.images, y.images)
        np.testing.assert_array_equal(x.labels, y.labels)
    labels = np.concatenate([a.D1.labels, a.D2.labels, a.E.labels])
    assert len(labels) == 600
    assert np.bincount(labels).tolist() == [200, 200, 200]
    for s in (a.D1, a.D2, a.E):
        assert s.images.min() >= 0 and s.images.max() <= 1
    a.check()
    c = data.gen_synthetic(2, class_count=3, per_class=200)
    assert not np.array_equal(a.D1.images, c.D1.images)


def test_synthetic_rgb_and_validation():
    b = data.gen_synthetic(0, class_count=4, per_class=20, h=16, w=16, d=3)
    assert b.image_shape == (16, 16, 3) and b.class_count == 4
    for kwargs in ({"class_count": 1}, {"per_class": 19}, {"h": 8}, {"d": 2}):
        with pytest.raises(ValueError):
            data.gen_synthetic(0, **kwargs)


def test_grating_radii():
    assert data.grating_radii(3, 32, 32).tolist() == [2, 4]
    # step 2 would reach radius 8 >= 0.8 * 8, so the step drops to 1
    assert data.grating_radii(5, 16, 16).tolist() == [2, 3, 4, 5]
    with pytest.raises(ValueError):
        data.grating_radii(10, 16, 16)


def test_partition_edges():
    b = data.gen_synthetic(0, per_class=40)
    p0 = data.make_partition(b, 0, 0)
    assert len(p0.A1) == len(p0.A2) == len(p0.V) == 0
    np.testing.assert_array_equal(p0.U, np.arange(len(b.E)))
    p1, p2 = data.make_partition(b, 5, 3), data.make_partition(b, 5, 3)
    for f in ("A1", "A2", "U", "V"):
        np.testing.assert_array_equal(getattr(p1, f), getattr(p2, f))
    with pytest.raises(ValueError):
        data.make_partition(b, len(b.D2) + 1, 0)


def test_check_detects_overlap():
    b = data.gen_synthetic(0, per_class=40)
    bad = data.DatasetBundle(b.D1, b.D1.take([0]), b.E, b.class_count)
    with pytest.raises(ValueError, match="disjoint"):
        bad.check()


@pytest.mark.slow
def test_synthetic_is_learnable(toy):
    # default budget: tinycnn, 30 epochs
    assert nn.evaluate(toy.m0, toy.bundle.E) >= 0.90
