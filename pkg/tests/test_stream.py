import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from cler.errors import ConfigError, DataError
from cler.pretext import get_family
from cler.stream import (LabeledImages, build_class_il_stream, iterate_task, load_dataset, load_image_folder,
                         make_synthetic_dataset, save_dataset)


def _labels_only(num_classes, per_class, shape=(1, 2, 2)):
    y = np.repeat(np.arange(num_classes), per_class)
    x = np.zeros((len(y), *shape), np.float32)
    return LabeledImages(x, y, x[:num_classes], np.arange(num_classes), num_classes)


@pytest.mark.parametrize("classes,tasks,per_task", [(100, 10, 10), (100, 20, 5)])
def test_equal_class_split(classes, tasks, per_task):
    s = build_class_il_stream(_labels_only(classes, 2), tasks)
    assert s.num_tasks == tasks
    assert all(len(t.class_ids) == per_task for t in s.tasks)
    assert s.tasks[0].class_ids == tuple(range(per_task))


def test_non_divisible_is_config_error():
    with pytest.raises(ConfigError):
        build_class_il_stream(_labels_only(10, 2), 3)


def test_bad_class_order_rejected():
    with pytest.raises(ConfigError):
        build_class_il_stream(_labels_only(4, 2), 2, class_order=[0, 1, 1, 2])


def test_empty_class_is_data_error():
    data = _labels_only(4, 2)
    keep = data.train_labels != 3
    data = LabeledImages(data.train_images[keep], data.train_labels[keep], data.test_images, data.test_labels, 4)
    with pytest.raises(DataError):
        build_class_il_stream(data, 2)


def test_class_order_permutes_assignment():
    s = build_class_il_stream(_labels_only(4, 3), 2, class_order=[3, 1, 0, 2])
    assert s.tasks[0].class_ids == (3, 1)
    _, y = s.task_train(0)
    assert set(y.tolist()) == {1, 3}
    assert s.classes_up_to(1) == [3, 1, 0, 2]


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 10_000))
def test_tasks_partition_classes_and_examples(tasks, per_task, seed):
    n = tasks * per_task
    order = np.random.default_rng(seed).permutation(n)
    s = build_class_il_stream(_labels_only(n, 3), tasks, class_order=order)
    ids = [c for t in s.tasks for c in t.class_ids]
    assert sorted(ids) == list(range(n))
    all_idx = np.concatenate(s.train_indices)
    assert sorted(all_idx.tolist()) == list(range(3 * n))


@pytest.mark.parametrize("count,expected", [(500, [10] * 50), (503, [10] * 50 + [3])])
def test_batch_sizes(count, expected):
    data = LabeledImages(np.zeros((count, 1, 2, 2)), np.zeros(count, np.int64), np.zeros((1, 1, 2, 2)),
                         np.zeros(1, np.int64), 1)
    s = build_class_il_stream(data, 1)
    assert [len(y) for _, y in iterate_task(s, 0, 10, 0)] == expected


def test_epoch_recovers_task_multiset_and_is_seeded(small_stream):
    x, y = small_stream.task_train(1)
    batches = list(iterate_task(small_stream, 1, 7, shuffle_seed=3))
    bx = np.concatenate([b[0].numpy() for b in batches])
    by = np.concatenate([b[1].numpy() for b in batches])
    key = lambda a: sorted(map(bytes, a.reshape(len(a), -1)))
    assert key(bx) == key(x)
    assert sorted(by.tolist()) == sorted(y.tolist())
    again = np.concatenate([b[1].numpy() for b in iterate_task(small_stream, 1, 7, shuffle_seed=3)])
    assert np.array_equal(by, again)
    other = np.concatenate([b[0].numpy() for b in iterate_task(small_stream, 1, 7, shuffle_seed=4)])
    assert not np.array_equal(bx, other)


def test_iterate_task_bounds(small_stream):
    with pytest.raises(IndexError):
        list(iterate_task(small_stream, 2, 10, 0))


def test_synthetic_dataset_contract():
    d = make_synthetic_dataset(10, 50, 16, seed=0)
    assert d.train_images.shape == (500, 3, 16, 16)
    assert np.all(np.bincount(d.train_labels) == 50)
    assert d.train_images.min() >= 0 and d.train_images.max() <= 1
    again = make_synthetic_dataset(10, 50, 16, seed=0)
    assert np.array_equal(d.train_images, again.train_images)
    assert np.array_equal(d.test_images, again.test_images)
    rot = get_family("rotation")
    rotated = rot.apply(1, d.train_images)
    assert np.all(np.any((rotated != d.train_images).reshape(500, -1), axis=1))


@pytest.mark.parametrize("size", [7, 15, 6])
def test_synthetic_rejects_bad_size(size):
    with pytest.raises(ConfigError):
        make_synthetic_dataset(2, 2, size, seed=0)


def test_dataset_cache_roundtrip(tmp_path, small_data):
    path = tmp_path / "d.bin"
    save_dataset(path, small_data)
    back = load_dataset(path)
    assert back.num_classes == small_data.num_classes
    for name in ("train_images", "train_labels", "test_images", "test_labels"):
        assert np.array_equal(getattr(back, name), getattr(small_data, name))
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(DataError):
        load_dataset(path)
    (tmp_path / "junk").write_bytes(b"x" * 64)
    with pytest.raises(DataError):
        load_dataset(tmp_path / "junk")


def _write_images(base, classes, count):
    rng = np.random.default_rng(0)
    for c in classes:
        (base / c).mkdir(parents=True)
        for i in range(count):
            Image.fromarray(rng.integers(0, 256, (6, 6, 3), dtype=np.uint8)).save(base / c / f"{i}.png")


def test_image_folder_split(tmp_path):
    _write_images(tmp_path, ["b", "a"], 5)
    d = load_image_folder(tmp_path, test_fraction=0.2)
    assert d.num_classes == 2
    assert d.train_images.shape[1:] == (3, 6, 6)
    assert len(d.train_labels) == 8 and len(d.test_labels) == 2
    assert d.train_images.max() <= 1.0


def test_image_folder_train_test_layout(tmp_path):
    _write_images(tmp_path / "train", ["x", "y"], 3)
    _write_images(tmp_path / "test", ["x", "y"], 1)
    d = load_image_folder(tmp_path, image_size=4)
    assert d.train_images.shape == (6, 3, 4, 4)
    assert d.test_labels.tolist() == [0, 1]
