import numpy as np
import pytest

from fedcka.data import (
    CIFAR10_RECORD_BYTES,
    CIFAR10_TEST_FILE,
    CIFAR10_TRAIN_FILES,
    batch_iterator,
    dirichlet_partition,
    iid_partition,
    load_cifar10_binary,
    partition_heatmap,
    read_partition_csv,
    stratified_subset,
    synthetic_dataset,
    write_heatmap_csv,
    write_partition_csv,
)
from fedcka.errors import ContractError, IngestionError

RECORDS = 10000


def balanced_labels(k: int, per_class: int) -> np.ndarray:
    return np.repeat(np.arange(k), per_class)


# -- CIFAR-10 binary ---------------------------------------------------------------


@pytest.fixture(scope="module")
def fake_cifar(tmp_path_factory):
    """Full-size binary files with patterned labels and a few marked pixels."""
    root = tmp_path_factory.mktemp("cifar") / "cifar-10-batches-bin"
    root.mkdir()
    for f, name in enumerate(CIFAR10_TRAIN_FILES + [CIFAR10_TEST_FILE]):
        rec = np.zeros((RECORDS, CIFAR10_RECORD_BYTES), dtype=np.uint8)
        rec[:, 0] = (np.arange(RECORDS) + f) % 10
        rec[:, 1] = 255  # red plane, pixel (0, 0)
        rec[:, 1 + 1024 + 33] = 51  # green plane, pixel (1, 1)
        rec[0, 0] = 6
        rec.tofile(root / name)
    return root


def test_cifar_shapes_and_scaling(fake_cifar):
    train, test = load_cifar10_binary(fake_cifar.parent)
    assert len(train) == 50000 and len(test) == 10000
    assert train.num_classes == 10
    assert train.images.shape == (50000, 3, 32, 32)
    assert train.images.dtype == np.float64
    assert train.images[5, 0, 0, 0] == 1.0
    assert train.images[5, 1, 1, 1] == pytest.approx(0.2, abs=1e-15)
    assert train.images[5, 2].max() == 0.0


def test_cifar_first_label_matches_raw_byte(fake_cifar):
    with open(fake_cifar / CIFAR10_TRAIN_FILES[0], "rb") as f:
        first = f.read(1)[0]
        f.seek(3 * CIFAR10_RECORD_BYTES)
        fourth = f.read(1)[0]
    train, _ = load_cifar10_binary(fake_cifar)
    assert first == 6
    assert train.labels[0] == first
    assert train.labels[3] == fourth
    # the second file's records carry labels shifted by one class
    assert train.labels[RECORDS + 1] == 2


def test_cifar_env_var(fake_cifar, monkeypatch):
    monkeypatch.setenv("FEDCKA_DATA_DIR", str(fake_cifar))
    _, test = load_cifar10_binary()
    assert len(test) == 10000


def test_cifar_truncated_file(tmp_path):
    for name in CIFAR10_TRAIN_FILES + [CIFAR10_TEST_FILE]:
        (tmp_path / name).write_bytes(b"")
    np.zeros(CIFAR10_RECORD_BYTES * 3 + 17, dtype=np.uint8).tofile(tmp_path / CIFAR10_TRAIN_FILES[0])
    with pytest.raises(IngestionError) as exc:
        load_cifar10_binary(tmp_path)
    msg = str(exc.value)
    assert "expected 30730000 bytes" in msg
    assert f"got {CIFAR10_RECORD_BYTES * 3 + 17}" in msg
    assert f"byte offset {CIFAR10_RECORD_BYTES * 3}" in msg


def test_cifar_missing_dir(tmp_path, monkeypatch):
    monkeypatch.delenv("FEDCKA_DATA_DIR", raising=False)
    with pytest.raises(IngestionError):
        load_cifar10_binary()
    with pytest.raises(IngestionError, match="missing"):
        load_cifar10_binary(tmp_path)


def test_stratified_subset():
    labels = balanced_labels(10, 50)
    idx = stratified_subset(labels, 105, seed=0)
    assert idx.size == 105 and np.unique(idx).size == 105
    counts = np.bincount(labels[idx], minlength=10)
    assert counts.max() - counts.min() <= 1
    np.testing.assert_array_equal(idx, stratified_subset(labels, 105, seed=0))


# -- synthetic -------------------------------------------------------------------


def test_synthetic_same_seed_same_bytes():
    a = synthetic_dataset(3, 5, dim=8, seed=11)
    b = synthetic_dataset(3, 5, dim=8, seed=11)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()


def test_synthetic_size_and_range():
    d = synthetic_dataset(10, 100, dim=8)
    assert len(d) == 1000
    assert d.images.shape == (1000, 3, 8, 8)
    assert np.bincount(d.labels).tolist() == [100] * 10
    assert d.images.min() >= 0.0 and d.images.max() <= 1.0


def test_synthetic_needs_two_classes():
    with pytest.raises(ContractError):
        synthetic_dataset(1, 10)


# -- Dirichlet partition -------------------------------------------------------------


def test_huge_alpha_is_uniform():
    labels = balanced_labels(10, 1000)
    p = dirichlet_partition(labels, 10, 1e6, seed=0)
    frac = p.class_counts / p.class_counts.sum(axis=1, keepdims=True)
    assert np.abs(frac - 0.1).max() < 0.02


def test_small_alpha_concentrates():
    labels = balanced_labels(10, 500)
    for seed in range(5):
        p = dirichlet_partition(labels, 10, 0.1, seed=seed)
        top2 = np.sort(p.class_counts, axis=1)[:, -2:].sum(axis=1) / p.sizes()
        assert top2.max() > 0.5


def test_coverage_and_disjointness_over_seeds():
    labels = balanced_labels(10, 60)
    for seed in range(100):
        p = dirichlet_partition(labels, 10, 0.5, seed=seed, min_size=5)
        p.validate(labels.size, min_size=5)
        allidx = np.concatenate(p.assignments)
        np.testing.assert_array_equal(np.sort(allidx), np.arange(labels.size))


def test_partition_deterministic():
    labels = balanced_labels(10, 60)
    a = dirichlet_partition(labels, 10, 0.5, seed=3)
    b = dirichlet_partition(labels, 10, 0.5, seed=3)
    for x, y in zip(a.assignments, b.assignments):
        np.testing.assert_array_equal(x, y)
    c = dirichlet_partition(labels, 10, 0.5, seed=4)
    assert any(x.size != y.size or not np.array_equal(x, y) for x, y in zip(a.assignments, c.assignments))


def test_dirichlet_mean_proportions_within_three_sigma():
    # Marginal of Dir(alpha 1_C) is Beta(alpha, (C-1) alpha) with mean 1/C and
    # variance (1/C)(1 - 1/C) / (C alpha + 1); average over 100 draws.
    C, K, alpha, draws, per_class = 10, 10, 5.0, 100, 500
    labels = balanced_labels(K, per_class)
    acc = np.zeros((C, K))
    for seed in range(draws):
        acc += dirichlet_partition(labels, C, alpha, seed=seed).class_counts / per_class
    mean = acc / draws
    p = 1.0 / C
    sigma = np.sqrt(p * (1 - p) / (C * alpha + 1) / draws)
    assert np.abs(mean - p).max() < 3 * sigma + 1.0 / per_class


def test_partition_errors():
    labels = balanced_labels(2, 10)
    with pytest.raises(ContractError):
        dirichlet_partition(labels, 2, 0.0)
    with pytest.raises(ContractError):
        dirichlet_partition(labels, 2, -1.0)
    with pytest.raises(ContractError):
        dirichlet_partition(labels, 1, 1.0)
    with pytest.raises(ContractError):
        dirichlet_partition(labels, 3, 1.0, min_size=10)
    # one class at tiny alpha lands on a single client, so min_size never holds
    with pytest.raises(ContractError, match="draws"):
        dirichlet_partition(balanced_labels(1, 20), 2, 1e-4, min_size=5, max_retries=5)


def test_heatmap_counts():
    labels = balanced_labels(10, 100)
    p = dirichlet_partition(labels, 10, 0.5, seed=1)
    h = partition_heatmap(p)
    assert h.shape == (10, 10)
    assert h.sum() == labels.size
    np.testing.assert_array_equal(h.sum(axis=0), np.bincount(labels))
    for i, idx in enumerate(p.assignments):
        np.testing.assert_array_equal(h[i], np.bincount(labels[idx], minlength=10))


def test_heatmap_alpha_contrast():
    labels = balanced_labels(10, 500)
    wide = partition_heatmap(dirichlet_partition(labels, 10, 5.0, seed=0))
    sharp = partition_heatmap(dirichlet_partition(labels, 10, 0.1, seed=0))

    def mean_max_share(h):
        return float(np.mean(h.max(axis=1) / h.sum(axis=1)))

    assert mean_max_share(wide) < 0.3
    assert mean_max_share(sharp) > 0.5
    assert (sharp == 0).sum() > (wide == 0).sum()


def test_partition_csv_round_trip(tmp_path):
    labels = balanced_labels(10, 30)
    p = dirichlet_partition(labels, 4, 0.5, seed=2)
    path = tmp_path / "p.csv"
    write_partition_csv(p, path, comment="config_sha256=abc")
    assert path.read_text().startswith("# config_sha256=abc\nclient_id,sample_index\n")
    q = read_partition_csv(path, labels, alpha=0.5, seed=2)
    for x, y in zip(p.assignments, q.assignments):
        np.testing.assert_array_equal(x, y)
    np.testing.assert_array_equal(p.class_counts, q.class_counts)


def test_heatmap_csv_bytes_deterministic(tmp_path):
    labels = balanced_labels(10, 30)
    for name in ("a.csv", "b.csv"):
        write_heatmap_csv(dirichlet_partition(labels, 4, 0.5, seed=2), tmp_path / name)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0].split(",")[:2] == ["client", "class_0"]
    assert len(lines) == 5


def test_iid_partition_equal_sizes():
    labels = balanced_labels(10, 30)
    p = iid_partition(300, 4, seed=0, labels=labels)
    p.validate(300)
    assert sorted(p.sizes().tolist()) == [75, 75, 75, 75]


# -- batching --------------------------------------------------------------------


@pytest.fixture
def small_set():
    return synthetic_dataset(3, 100, dim=4, seed=0)


def test_batch_sizes(small_set):
    sizes = [len(y) for _, y in batch_iterator(small_set, np.arange(300), 128, (0, 0, 0))]
    assert sizes == [128, 128, 44]


def test_batches_cover_indices_once(small_set):
    idx = np.arange(7, 250, 3)
    seen = np.concatenate([x.reshape(len(x), -1)[:, 0] for x, _ in batch_iterator(small_set, idx, 16, 5)])
    np.testing.assert_array_equal(np.sort(seen), np.sort(small_set.images[idx, 0, 0, 0]))


def test_batch_order_keyed_by_epoch(small_set):
    def order(key):
        return np.concatenate([y for _, y in batch_iterator(small_set, np.arange(300), 300, key)])

    first = [x for x, _ in batch_iterator(small_set, np.arange(300), 300, (1, 2, 3))][0]
    again = [x for x, _ in batch_iterator(small_set, np.arange(300), 300, (1, 2, 3))][0]
    other = [x for x, _ in batch_iterator(small_set, np.arange(300), 300, (1, 2, 4))][0]
    np.testing.assert_array_equal(first, again)
    assert not np.array_equal(first, other)
    np.testing.assert_array_equal(order((0, 0, 0)), order((0, 0, 0)))


def test_batch_errors(small_set):
    with pytest.raises(ContractError):
        next(batch_iterator(small_set, [], 4, 0))
    with pytest.raises(ContractError):
        next(batch_iterator(small_set, [0, 1], 0, 0))
