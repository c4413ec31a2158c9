import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tephra_abc.distances import (
    DimensionMismatch,
    LearnedDistance,
    NotPSDError,
    check_psd,
    cholesky_factor,
    distance,
    load_distance,
    save_distance,
)
from tephra_abc.nn import init_network
from tephra_abc.seeding import make_rng

DIM = 6


def all_variants(dim=DIM, seed=0):
    rng = make_rng(seed, "variants")
    a = rng.normal(size=(dim, dim))
    return [
        LearnedDistance.euclidean(dim),
        LearnedDistance.mahalanobis(a.T @ a),
        LearnedDistance.embedding(init_network([dim, 5, 3], seed)),
        LearnedDistance.summary_stats(init_network([dim, 4, 2], seed + 1)),
    ]


@pytest.mark.parametrize("d", all_variants(), ids=lambda d: d.variant)
def test_identical_inputs_zero(d):
    x = make_rng(1).normal(size=DIM)
    assert distance(d, x, x) == 0.0


def test_pythagorean_case():
    x = np.zeros(72)
    y = np.zeros(72)
    y[:2] = [3.0, 4.0]
    assert distance(LearnedDistance.euclidean(72), x, y) == 5.0


def test_mahalanobis_identity_equals_euclidean():
    rng = make_rng(2)
    e, m = LearnedDistance.euclidean(), LearnedDistance.mahalanobis(np.eye(10))
    for _ in range(100):
        a, b = rng.normal(size=10), rng.normal(size=10)
        assert distance(m, a, b) == pytest.approx(distance(e, a, b), rel=1e-12)


def test_mahalanobis_diagonal_hand_value():
    m = np.eye(5)
    m[0, 0] = 4.0
    e1 = np.eye(5)[0]
    assert distance(LearnedDistance.mahalanobis(m), e1, np.zeros(5)) == 2.0


@pytest.mark.parametrize("d", all_variants(), ids=lambda d: d.variant)
def test_metric_axioms_random_triples(d):
    rng = make_rng(3, d.variant)
    xs = rng.normal(size=(300, 3, DIM)) * rng.uniform(0.1, 10, size=(300, 1, 1))
    for a, b, c in xs:
        ab, ba, ac, bc = d(a, b), d(b, a), d(a, c), d(b, c)
        assert ab >= 0 and ab == ba
        assert ac <= ab + bc + 1e-9


def test_cholesky_examples():
    np.testing.assert_allclose(cholesky_factor(np.eye(4)), np.eye(4), atol=1e-12)
    L = cholesky_factor(np.diag([4.0, 9.0]))
    np.testing.assert_allclose(L.T @ L, np.diag([4.0, 9.0]), rtol=1e-12)
    v = np.array([1.0, -2.0, 0.5])
    L = cholesky_factor(np.outer(v, v))
    np.testing.assert_allclose(L.T @ L, np.outer(v, v), atol=1e-8 * 4)


@given(st.integers(0, 10_000), st.integers(1, 8), st.integers(1, 8))
def test_mahalanobis_cholesky_equivalence(seed, dim, rank):
    rng = make_rng(seed)
    a = rng.normal(size=(min(rank, dim), dim))
    m = a.T @ a
    L = cholesky_factor(m)
    assert np.abs(L.T @ L - m).max() <= 1e-8 * max(np.abs(m).max(), 1e-300) + 1e-14
    x1, x2 = rng.normal(size=dim), rng.normal(size=dim)
    ref = np.linalg.norm(L @ (x1 - x2))
    assert distance(LearnedDistance.mahalanobis(m), x1, x2) == pytest.approx(ref, rel=1e-10, abs=1e-12)


def test_psd_checks():
    with pytest.raises(NotPSDError):
        check_psd(np.diag([1.0, -1.0]))
    with pytest.raises(NotPSDError):
        check_psd(np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(DimensionMismatch):
        check_psd(np.ones((2, 3)))
    # tiny negative eigenvalue within tolerance is accepted
    check_psd(np.diag([1.0, -1e-10]))
    with pytest.raises(NotPSDError):
        LearnedDistance.mahalanobis(np.diag([1.0, -1.0]))


def test_dimension_mismatch():
    d = LearnedDistance.mahalanobis(np.eye(3))
    with pytest.raises(DimensionMismatch):
        d(np.ones(3), np.ones(4))
    with pytest.raises(DimensionMismatch):
        LearnedDistance.euclidean(3)(np.ones(4), np.ones(4))
    with pytest.raises(DimensionMismatch):
        LearnedDistance.embedding(init_network([5, 2], 0))(np.ones(4), np.ones(4))


@pytest.mark.parametrize("d", all_variants(), ids=lambda d: d.variant)
def test_batch_helpers_agree_with_pairwise_calls(d):
    xs = make_rng(5).normal(size=(7, DIM))
    np.testing.assert_allclose(d.distances_to(xs[0], xs), [d(x, xs[0]) for x in xs], rtol=1e-12, atol=1e-12)
    full = d.pairwise(xs)
    np.testing.assert_allclose(full, full.T, atol=1e-12)
    np.testing.assert_allclose(full[2], [d(xs[2], x) for x in xs], rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("d", all_variants(), ids=lambda d: d.variant)
def test_json_round_trip(tmp_path, d):
    path = tmp_path / "d.json"
    save_distance(d, path)
    back = load_distance(path)
    x1, x2 = make_rng(6).normal(size=(2, DIM))
    assert back.variant == d.variant
    assert back(x1, x2) == pytest.approx(d(x1, x2), rel=1e-12)


def test_deserialization_clips_negative_eigenvalues():
    m = np.diag([1.0, 2.0, -1e-3])
    with pytest.warns(UserWarning):
        d = LearnedDistance.from_json({"variant": "mahalanobis", "matrix": m.tolist()})
    assert np.linalg.eigvalsh(d.matrix).min() >= 0


def test_artifact_schema_errors():
    for obj in ({"variant": "mahalanobis"}, {"variant": "embedding"}, {"variant": "wasserstein"}):
        with pytest.raises(ValueError):
            LearnedDistance.from_json(obj)
    assert json.loads(json.dumps(LearnedDistance.euclidean(3).to_json())) == {"variant": "euclidean", "dim": 3}
