import numpy as np
import pytest

from tempmix import InvalidInputError, MissingDataError
from tempmix.datagen import (
    MultiDomainDataset,
    SyntheticTaskSpec,
    draw_domains,
    load_corpus,
    make_homogeneous,
    make_synthetic,
    sample_batch,
)
from tempmix.rng import make_rng


def test_synthetic_shapes_and_splits():
    spec = SyntheticTaskSpec(sizes=(100, 10), dim=3, valid_fraction=0.2)
    data = make_synthetic(spec, 0)
    assert data.kind == "regression"
    assert data.width == 3
    assert list(data.train_sizes) == [80, 8]
    assert [len(v) for v in data.valid] == [20, 2]
    assert data.names == ("d1", "d2")


def test_synthetic_valid_size_mode():
    spec = SyntheticTaskSpec(sizes=(50, 5), valid_size=30)
    data = make_synthetic(spec, 1)
    assert list(data.train_sizes) == [50, 5]
    assert [len(v) for v in data.valid] == [30, 30]
    assert spec.catalog().sizes.tolist() == [50.0, 5.0]


def test_synthetic_is_seeded():
    spec = SyntheticTaskSpec(sizes=(40, 10))
    a, b, c = make_synthetic(spec, 3), make_synthetic(spec, 3), make_synthetic(spec, 4)
    assert a.fingerprint() == b.fingerprint()
    assert a.fingerprint() != c.fingerprint()


def test_private_blocks():
    spec = SyntheticTaskSpec(sizes=(20, 20, 20), dim=2, private_dim=3, feature_decay=0.5, valid_size=5)
    data = make_synthetic(spec, 0)
    assert data.width == 2 + 3 * 3
    for i, split in enumerate(data.train):
        own = np.zeros(data.width, dtype=bool)
        own[:2] = True
        own[2 + 3 * i:2 + 3 * (i + 1)] = True
        assert np.all(split.x[:, ~own] == 0)
        assert np.all(split.x[:, own] != 0)


def test_noiseless_targets_match_true_params():
    spec = SyntheticTaskSpec(sizes=(30, 10), dim=4, noise=0.0)
    data = make_synthetic(spec, 2)
    for split, theta in zip(data.train, data.meta["true_params"]):
        np.testing.assert_allclose(split.x @ np.asarray(theta), split.y, atol=1e-12)


def test_explicit_params():
    spec = SyntheticTaskSpec(sizes=(10, 10), dim=2, noise=0.0, shared_theta=(1.0, 2.0),
                             domain_thetas=((0.0, 0.0), (1.0, -1.0)))
    data = make_synthetic(spec, 0)
    np.testing.assert_allclose(data.train[1].y, data.train[1].x @ [2.0, 1.0])
    with pytest.raises(InvalidInputError):
        make_synthetic(SyntheticTaskSpec(sizes=(10,), dim=2, shared_theta=(1.0,)), 0)


@pytest.mark.parametrize("kwargs", [
    dict(sizes=()),
    dict(sizes=(1, 5)),
    dict(sizes=(10,), noise=-1),
    dict(sizes=(10,), valid_fraction=1.0),
    dict(sizes=(10,), feature_decay=0),
    dict(sizes=(10,), dim=0),
    dict(sizes=(0,), valid_size=3),
])
def test_spec_validation(kwargs):
    with pytest.raises(InvalidInputError):
        SyntheticTaskSpec(**kwargs)


def test_cache_round_trip(tmp_path):
    data = make_synthetic(SyntheticTaskSpec(sizes=(12, 4), dim=2), 5)
    path = tmp_path / "data.bin"
    data.save(path)
    back = MultiDomainDataset.load(path)
    assert back.fingerprint() == data.fingerprint()
    assert back.names == data.names and back.meta == data.meta
    for a, b in zip(back.train + back.valid, data.train + data.valid):
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.y, b.y)
    # byte-stable across writes
    assert path.read_bytes() == data.to_bytes()


def test_cache_rejects_foreign_bytes():
    with pytest.raises(InvalidInputError):
        MultiDomainDataset.from_bytes(b"PK\x03\x04 not ours")


def test_gather_keeps_slot_order():
    data = make_synthetic(SyntheticTaskSpec(sizes=(10, 10), dim=2), 0)
    x, y = data.gather(np.array([1, 0, 1]), np.array([3, 4, 0]))
    np.testing.assert_array_equal(x[0], data.train[1].x[3])
    np.testing.assert_array_equal(x[1], data.train[0].x[4])
    assert y[2] == data.train[1].y[0]


def test_homogeneous_dataset():
    data = make_homogeneous([5, 3], [1.0, 2.0], target=0.5)
    assert list(data.train_sizes) == [5, 3]
    assert np.all(data.train[1].x == [1.0, 2.0])
    assert np.all(data.train[0].y == 0.5)


def _write_corpus(root, texts):
    root.mkdir()
    for name, (tr, va) in texts.items():
        (root / f"{name}.train.txt").write_bytes(tr)
        (root / f"{name}.valid.txt").write_bytes(va)


def test_corpus_windows(tmp_path):
    root = tmp_path / "corpus"
    _write_corpus(root, {"en": (b"abcdef", b"xyz!"), "sw": (b"hello", b"jambo")})
    data = load_corpus(root, 3)
    assert data.kind == "bytes"
    assert data.names == ("en", "sw")
    assert list(data.train_sizes) == [3, 2]
    np.testing.assert_array_equal(data.train[0].x[0], list(b"abc"))
    assert data.train[0].y[0] == ord("d")
    assert data.train[0].y[-1] == ord("f")
    assert len(data.valid[0]) == 1


def test_corpus_missing_split(tmp_path):
    root = tmp_path / "corpus"
    root.mkdir()
    (root / "en.train.txt").write_bytes(b"abcdef")
    with pytest.raises(MissingDataError):
        load_corpus(root, 2)
    with pytest.raises(MissingDataError):
        load_corpus(tmp_path / "nowhere", 2)


def test_corpus_too_short(tmp_path):
    root = tmp_path / "corpus"
    _write_corpus(root, {"en": (b"ab", b"abcdef")})
    with pytest.raises(InvalidInputError):
        load_corpus(root, 2)


def test_draw_domains_frequencies():
    p = np.array([0.5, 0.0, 0.3, 0.2, 0.0])
    d = draw_domains(p, 200_000, make_rng(0, "t"))
    freq = np.bincount(d, minlength=5) / len(d)
    assert freq[1] == 0 and freq[4] == 0
    np.testing.assert_allclose(freq, p, atol=5 * np.sqrt(0.25 / len(d)))


def test_sample_batch_attaches_weights():
    data = make_synthetic(SyntheticTaskSpec(sizes=(50, 50), dim=2), 0)
    batch = sample_batch(data, [0.5, 0.5], [1.0, 3.0], 64, make_rng(0, "s"))
    assert len(batch) == 64
    np.testing.assert_array_equal(batch.weights, np.where(batch.domains == 1, 3.0, 1.0))
    assert np.all(batch.indices < 50)
    assert batch.domain_counts(2).sum() == 64


def test_homogeneous_batches_draw_one_domain():
    data = make_synthetic(SyntheticTaskSpec(sizes=(50, 50), dim=2), 0)
    rng = make_rng(0, "s")
    for _ in range(20):
        batch = sample_batch(data, [0.5, 0.5], [1.0, 1.0], 8, rng, homogeneous=True)
        assert len(set(batch.domains.tolist())) == 1


def test_sample_batch_validation():
    data = make_synthetic(SyntheticTaskSpec(sizes=(10, 10), dim=2), 0)
    with pytest.raises(InvalidInputError):
        sample_batch(data, [1.0], [1.0], 4, make_rng(0))
    with pytest.raises(InvalidInputError):
        sample_batch(data, [0.5, 0.5], [1.0, 1.0], 0, make_rng(0))
