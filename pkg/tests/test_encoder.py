import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from oracle_guided.dataset import (
    DATASET_COLUMNS,
    generate_mode_dataset,
    latent_csv,
    read_dataset,
    write_dataset,
)
from oracle_guided.encoder import LATENT_DIM, ModeEncoder, cluster_separation, window_features
from oracle_guided.exceptions import DegenerateInput, DimensionMismatch
from oracle_guided.oracle import ReferenceOracle


@pytest.fixture(scope="module")
def small_dataset():
    oracle = ReferenceOracle("prev").fit(horizon=20)
    return generate_mode_dataset(oracle, n_per_mode=40, horizon=20, seed=5)


@pytest.fixture(scope="module")
def fitted(small_dataset):
    return ModeEncoder(epochs=30, seed=1).fit(small_dataset.states)


def test_dataset_is_balanced_and_full_length(small_dataset):
    assert small_dataset.counts() == {"jump": 40, "leap": 40, "pace": 40}
    assert small_dataset.states.shape == (120, 21, 7)
    assert not small_dataset.states.flags.writeable
    again = generate_mode_dataset(ReferenceOracle("prev").fit(horizon=20), n_per_mode=40,
                                  horizon=20, seed=5)
    assert np.array_equal(again.states, small_dataset.states)


def test_split_is_stratified_and_disjoint(small_dataset):
    train, test = small_dataset.split(0.25, seed=0)
    assert len(set(train) & set(test)) == 0
    assert len(train) + len(test) == len(small_dataset)
    labels = np.asarray(small_dataset.labels)
    for m in ("pace", "jump", "leap"):
        assert np.count_nonzero(labels[test] == m) == 10


def test_dataset_csv_roundtrip(small_dataset, tmp_path):
    path = tmp_path / "data.csv"
    manifest = write_dataset(small_dataset, path)
    header = path.read_text().splitlines()[0]
    assert header == ",".join(DATASET_COLUMNS)
    back = read_dataset(path)
    assert np.array_equal(back.states, small_dataset.states)
    assert back.labels == small_dataset.labels
    assert manifest["counts"] == small_dataset.counts()


def test_window_features_ignore_absolute_position(small_dataset):
    w = np.array(small_dataset.states[:5])
    shifted = w.copy()
    shifted[..., 0] += 3.7
    shifted[..., 1] += 0.2
    assert np.allclose(window_features(w), window_features(shifted))
    assert window_features(w).shape == (5, 21 + 21 + 3 * 20)
    with pytest.raises(DimensionMismatch):
        window_features(np.zeros((3, 1, 7)))


def test_encoder_shapes_and_learning(fitted, small_dataset):
    z = fitted.transform(small_dataset.states)
    assert z.shape == (len(small_dataset), LATENT_DIM)
    assert fitted.loss_curve_[-1] < fitted.loss_curve_[0]
    assert fitted.reconstruction_rmse(small_dataset.states) < 1.0
    assert fitted.inverse_transform(z).shape == (len(small_dataset), fitted.n_features_in_)


def test_encoder_persistence(fitted, small_dataset):
    twin = ModeEncoder.from_arrays(fitted.arrays())
    assert np.array_equal(twin.transform(small_dataset.states), fitted.transform(small_dataset.states))
    assert twin.get_params() == fitted.get_params()


def test_encoder_estimator_contract(small_dataset):
    est = ModeEncoder(epochs=2, hidden=8)
    assert clone(est).get_params() == est.get_params()
    with pytest.raises(NotFittedError):
        est.transform(small_dataset.states)
    a = ModeEncoder(epochs=3, seed=4).fit_transform(small_dataset.states)
    b = ModeEncoder(epochs=3, seed=4).fit(small_dataset.states).transform(small_dataset.states)
    assert np.array_equal(a, b)
    with pytest.raises(DimensionMismatch):
        ModeEncoder(epochs=1).fit(small_dataset.states).transform(small_dataset.states[:, :10])


def test_cluster_separation_examples():
    pts = np.array([[0.0, 1.0], [0.0, -1.0], [10.0, 1.0], [10.0, -1.0]])
    assert cluster_separation(pts, ["a", "a", "b", "b"]) == pytest.approx(10.0)
    assert cluster_separation(pts[[0, 0, 2, 2]], ["a", "a", "b", "b"]) == math.inf
    assert cluster_separation(pts[[0, 1, 0, 1]], ["a", "a", "b", "b"]) == 0.0
    with pytest.raises(DegenerateInput):
        cluster_separation(pts, ["a"] * 4)
    with pytest.raises(DegenerateInput):
        cluster_separation(pts[:3], ["a", "a", "b"])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 100), st.floats(0, 2 * math.pi))
def test_cluster_separation_is_similarity_invariant(seed, scale, angle):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(30, 2)) + np.repeat(rng.normal(0, 3, size=(3, 2)), 10, axis=0)
    labels = np.repeat(["pace", "jump", "leap"], 10)
    rot = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
    moved = scale * pts @ rot.T + rng.normal(size=2)
    assert cluster_separation(moved, labels) == pytest.approx(cluster_separation(pts, labels), rel=1e-9)


def test_latent_csv():
    text = latent_csv(np.array([[0.5, -1.0]]), ["jump"])
    assert text.splitlines() == ["z1,z2,mode_label", "0.5,-1.0,jump"]
