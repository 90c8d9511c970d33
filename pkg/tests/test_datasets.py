import numpy as np
import pytest
from hypothesis import given, strategies as st
from sklearn.linear_model import LogisticRegression
from sklearn.neural_network import MLPClassifier

from fhetrain.datasets import (
    Dataset,
    DatasetError,
    load_breast_cancer,
    load_csv,
    load_dataset,
    make_synthetic,
    mortality_substitute,
    save_csv,
)


def test_breast_cancer_shape():
    ds = load_breast_cancer()
    assert (ds.n, ds.d) == (569, 30)
    assert ds.y.sum() == 212  # malignant


def test_csv_round_trip(tmp_path):
    ds = make_synthetic("gaussian-blobs", 50, 4, seed=1)
    path = tmp_path / "d.csv"
    save_csv(ds, path, "target")
    back = load_csv(path, "target")
    assert back.equals(ds) and back.rejected == {"missing": 0, "malformed": 0}


def test_breast_cancer_csv(tmp_path):
    path = tmp_path / "bc.csv"
    save_csv(load_breast_cancer(), path, "diagnosis")
    ds = load_dataset(str(path), "diagnosis")
    assert (ds.n, ds.d) == (569, 30)


def test_ingestion_is_idempotent(tmp_path):
    path = tmp_path / "d.csv"
    save_csv(make_synthetic("separable", 30, 3), path)
    assert load_csv(path, "label").equals(load_csv(path, "label"))
    assert load_csv(path, "label").digest() == load_csv(path, "label").digest()


def test_malformed_row_strict(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b,label\n1,2,0\n3,oops,1\n5,6,1\n")
    with pytest.raises(DatasetError, match="row 3"):
        load_csv(path, "label")
    ds = load_csv(path, "label", strict=False)
    assert ds.n == 2 and ds.rejected["malformed"] == 1


def test_missing_values_are_counted(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("a,b,label\n1,,0\n3,4,1\n?,6,1\n7,8,\n9,10,0\n")
    ds = load_csv(path, "label")
    assert ds.n == 2 and ds.rejected["missing"] == 3


def test_csv_errors(tmp_path):
    path = tmp_path / "e.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(DatasetError, match="no column"):
        load_csv(path, "label")
    path.write_text("a,label\n,0\n")
    with pytest.raises(DatasetError, match="zero usable rows"):
        load_csv(path, "label")
    path.write_text("a,label\n1,x\n2,y\n3,z\n")
    with pytest.raises(DatasetError, match="3 classes"):
        load_csv(path, "label")
    with pytest.raises(DatasetError):
        load_dataset(str(tmp_path / "nope.csv"), "label")


def test_label_mapping(tmp_path):
    path = tmp_path / "l.csv"
    path.write_text("a,dx\n1,M\n2,B\n3,M\n")
    assert load_csv(path, "dx", positive="M").y.tolist() == [1, 0, 1]
    assert load_csv(path, "dx").y.tolist() == [1, 0, 1]  # sorted: B=0, M=1


def test_separable_has_perfect_linear_fit():
    ds = make_synthetic("separable", 100, 2, seed=0)
    assert LogisticRegression(C=1e6, max_iter=5000).fit(ds.X, ds.y).score(ds.X, ds.y) == 1.0


def test_xor_is_not_linear():
    ds = make_synthetic("xor-like", 400, 2, seed=0)
    assert LogisticRegression().fit(ds.X, ds.y).score(ds.X, ds.y) <= 0.75
    mlp = MLPClassifier((16,), max_iter=3000, random_state=0).fit(ds.X, ds.y)
    assert mlp.score(ds.X, ds.y) >= 0.95


def test_two_rows():
    ds = make_synthetic("separable", 2, 3, seed=0)
    assert ds.n == 2 and sorted(ds.y.tolist()) == [0, 1]


@given(st.sampled_from(["separable", "xor-like", "gaussian-blobs"]), st.integers(2, 60), st.integers(2, 5), st.integers(0, 10**6))
def test_synthetic_properties(kind, n, d, seed):
    a = make_synthetic(kind, n, d, seed)
    assert a.equals(make_synthetic(kind, n, d, seed))
    assert a.n == n and a.d == d
    assert np.abs(a.X).max() <= 1.0
    assert abs(int(a.y.sum()) - n // 2) <= 1


def test_synthetic_errors():
    with pytest.raises(DatasetError):
        make_synthetic("separable", 1, 2)
    with pytest.raises(DatasetError):
        make_synthetic("separable", 10, 0)
    with pytest.raises(DatasetError):
        make_synthetic("spiral", 10, 2)


def test_mortality_substitute_is_about_90_percent_linear():
    ds = mortality_substitute()
    assert (ds.n, ds.d) == (2000, 10)
    acc = LogisticRegression().fit(ds.X, ds.y).score(ds.X, ds.y)
    assert 0.87 <= acc <= 0.93


def test_dataset_invariants():
    with pytest.raises(DatasetError):
        Dataset(np.zeros((3, 2)), np.zeros(2), ["a", "b"], "x")
    with pytest.raises(DatasetError):
        Dataset(np.array([[np.inf]]), np.zeros(1), ["a"], "x")
    with pytest.raises(DatasetError):
        Dataset(np.zeros((1, 1)), np.array([2]), ["a"], "x")


def test_named_synthetic_and_subsample():
    ds = load_dataset("synthetic:separable:40:3")
    assert (ds.n, ds.d) == (40, 3)
    sub = load_breast_cancer().stratified_subsample(100, seed=0)
    assert sub.n == 100 and abs(sub.y.mean() - 212 / 569) < 0.02
