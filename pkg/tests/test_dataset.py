import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from ulc import dataset as ds
from ulc.errors import ConfigurationError, ContractError, ParseError, ReportIOError


def _blobs(class_count=10, per_class=500, dim=4, seed=0):
    return ds.generate_blobs(ds.BlobConfig.balanced(class_count, dim, per_class, seed=seed))


def test_generate_well_separated():
    config = ds.BlobConfig(
        class_count=2, dim=2, per_class_count=(3, 3), class_centers=((0.0, 0.0), (10.0, 10.0)), within_std=0.1
    )
    data = ds.generate_blobs(config)
    assert data.size == 6
    nearest = np.argsort(np.linalg.norm(data.features, axis=1))[:3]
    assert (data.true_labels[nearest] == 0).all()
    assert not data.is_noisy.any()


def test_generate_counts_and_determinism():
    data = _blobs()
    assert data.size == 5000
    assert data.class_counts().tolist() == [500] * 10
    assert data == _blobs()
    assert data != _blobs(seed=1)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"class_count": 1, "dim": 2, "per_class_count": (3,)},
        {"class_count": 2, "dim": 2, "per_class_count": (3, 0)},
        {"class_count": 2, "dim": 2, "per_class_count": (3,)},
        {"class_count": 2, "dim": 2, "per_class_count": (3, 3), "within_std": 0.0},
    ],
)
def test_generate_invalid_config(kwargs):
    with pytest.raises(ConfigurationError):
        ds.generate_blobs(ds.BlobConfig(**kwargs))


def test_dataset_is_immutable():
    data = _blobs(class_count=2, per_class=5)
    with pytest.raises(ValueError):
        data.features[0, 0] = 1.0


def test_dataset_rejects_bad_labels():
    with pytest.raises(ContractError):
        ds.Dataset(features=np.zeros((2, 1)), true_labels=[0, 2], noisy_labels=[0, 1], class_count=2)


def test_resample_imbalance_counts():
    data = ds.resample_imbalance(_blobs(), 10, seed=4)
    counts = data.class_counts()
    minority = list(data.meta.minority_classes)
    assert len(minority) == 5
    assert sorted(counts[minority].tolist()) == [50] * 5
    majority = [c for c in range(10) if c not in minority]
    assert counts[majority].tolist() == [500] * 5


def test_resample_imbalance_two_classes():
    data = ds.resample_imbalance(_blobs(class_count=2, per_class=100), 5, seed=0)
    assert sorted(data.class_counts().tolist()) == [20, 100]
    assert data.size == 120


def test_resample_ratio_one_is_identity():
    base = _blobs(class_count=4, per_class=20)
    data = ds.resample_imbalance(base, 1, seed=0)
    assert np.array_equal(data.features, base.features)
    assert data.meta.imbalance_ratio == 1.0
    assert len(data.meta.minority_classes) == 2


def test_resample_keeps_rows_unchanged():
    base = _blobs(class_count=4, per_class=30)
    data = ds.resample_imbalance(base, 3, seed=2)
    rows = {tuple(r) for r in base.features.tolist()}
    assert all(tuple(r) in rows for r in data.features.tolist())


def test_resample_errors():
    with pytest.raises(ConfigurationError):
        ds.resample_imbalance(_blobs(class_count=2, per_class=5), 0.5, seed=0)
    noisy = ds.inject_symmetric_noise(_blobs(class_count=2, per_class=5), 1.0, seed=0)
    with pytest.raises(ContractError):
        ds.resample_imbalance(noisy, 2, seed=0)


def test_symmetric_noise_edge_rates():
    base = _blobs(class_count=2, per_class=50)
    assert not ds.inject_symmetric_noise(base, 0.0, seed=1).is_noisy.any()
    flipped = ds.inject_symmetric_noise(base, 1.0, seed=1)
    assert (flipped.noisy_labels == 1 - base.true_labels).all()
    with pytest.raises(ConfigurationError):
        ds.inject_symmetric_noise(base, 1.5, seed=1)


def test_symmetric_noise_statistics():
    base = _blobs(class_count=10, per_class=1000, dim=1)
    data = ds.inject_symmetric_noise(base, 0.5, seed=5)
    assert abs(data.is_noisy.mean() - 0.5) <= 0.02
    offsets = (data.noisy_labels - data.true_labels)[data.is_noisy] % 10
    observed = np.bincount(offsets, minlength=10)[1:]
    assert chisquare(observed).pvalue > 0.01


def test_include_self_convention_can_keep_label():
    base = _blobs(class_count=2, per_class=500, dim=1)
    data = ds.inject_symmetric_noise(base, 1.0, seed=5, convention="include-self")
    assert 0.4 < data.is_noisy.mean() < 0.6
    assert data.meta.convention == "include-self"


def test_asymmetric_noise():
    base = _blobs(class_count=2, per_class=50)
    assert not ds.inject_asymmetric_noise(base, 0.0, seed=0, asym_map={0: 1}).is_noisy.any()
    data = ds.inject_asymmetric_noise(base, 1.0, seed=0, asym_map={0: 1})
    assert (data.noisy_labels == 1).all()
    with pytest.raises(ConfigurationError):
        ds.inject_asymmetric_noise(base, 0.5, seed=0, asym_map={0: 0})


def test_asymmetric_noise_cyclic_statistics():
    base = _blobs(class_count=10, per_class=1000, dim=1)
    data = ds.inject_asymmetric_noise(base, 0.4, seed=8)
    assert data.meta.asym_map == ds.cyclic_map(10)
    assert abs(data.is_noisy.mean() - 0.4) <= 0.02
    for c in range(10):
        idx = data.true_labels == c
        assert abs(data.is_noisy[idx].mean() - 0.4) <= 0.07
        assert (data.noisy_labels[idx & data.is_noisy] == (c + 1) % 10).all()


@settings(max_examples=20, deadline=None)
@given(rate=st.floats(0.0, 1.0), seed=st.integers(0, 2**16))
def test_symmetric_noise_never_lands_on_true_class(rate, seed):
    data = ds.inject_symmetric_noise(_blobs(class_count=3, per_class=20, dim=1), rate, seed=seed)
    flipped = data.is_noisy
    assert (data.noisy_labels[flipped] != data.true_labels[flipped]).all()
    assert data == ds.inject_symmetric_noise(_blobs(class_count=3, per_class=20, dim=1), rate, seed=seed)


def test_make_experiment_test_set_is_balanced_and_clean():
    train, test = ds.make_experiment(
        classes=4, dim=2, per_class=50, test_per_class=10, imbalance_ratio=5, noise_rate=0.3, seed=1
    )
    assert test.class_counts().tolist() == [10] * 4
    assert not test.is_noisy.any()
    assert test.meta.minority_classes == train.meta.minority_classes
    assert train.meta.kind == "symmetric"


def test_save_load_round_trip(tmp_path):
    train, _ = ds.make_experiment(classes=3, dim=2, per_class=10, imbalance_ratio=2, noise="asym", noise_rate=0.5)
    path = tmp_path / "train.txt"
    ds.save(train, str(path))
    assert path.read_text().startswith("#ulc-dataset v1 ")
    assert ds.load(str(path)) == train


def test_save_missing_directory(tmp_path):
    with pytest.raises(ReportIOError, match="missing"):
        ds.save(_blobs(class_count=2, per_class=2), str(tmp_path / "missing" / "d.txt"))


def _write(tmp_path, text):
    path = tmp_path / "bad.txt"
    path.write_text(text)
    return str(path)


@pytest.mark.parametrize(
    "text, line, field",
    [
        ("#ulc-dataset v1 1 2 1\n0.5,2,0\n", 2, "true_label"),
        ("#ulc-dataset v1 1 2 1\n0.5,0\n", 2, "row"),
        ("#ulc-dataset v1 1 2 2\n0.5,abc,0,1\n", 2, "x1"),
        ("#ulc-dataset v2 1 2 1\n0.5,0,0\n", 1, "version"),
        ("hello\n", 1, "header"),
        ("#ulc-dataset v1 2 2 1\n0.5,0,0\n", 2, "N"),
    ],
)
def test_load_parse_errors(tmp_path, text, line, field):
    with pytest.raises(ParseError) as info:
        ds.load(_write(tmp_path, text))
    assert info.value.line == line
    assert info.value.field == field


def test_load_without_meta_line(tmp_path):
    data = ds.load(_write(tmp_path, "#ulc-dataset v1 2 2 1\n0.5,0,1\n-1.0,1,1\n"))
    assert data.is_noisy.tolist() == [True, False]
    assert data.meta.kind == "none"


def test_load_rejects_invalid_utf8_with_line(tmp_path):
    path = tmp_path / "binary.txt"
    path.write_bytes(b"#ulc-dataset v1 2 2 1\n0.5,0,1\n\xff\xfe,1,1\n")
    with pytest.raises(ParseError) as info:
        ds.load(str(path))
    assert info.value.line == 3
    assert info.value.field == "encoding"
