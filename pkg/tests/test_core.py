import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dbmi.core import (
    Coupling,
    InfiniteKLError,
    PairBatch,
    StateSpace,
    TimeGrid,
    ValidationError,
    categorical_sample,
    kl_categorical,
    make_rng,
    one_hot,
    permute_coupling,
    random_derangement,
)


def probs(S):
    return st.lists(st.floats(0.0, 1.0), min_size=S, max_size=S).filter(lambda v: sum(v) > 1e-3).map(
        lambda v: np.asarray(v) / sum(v)
    )


def test_state_space_validation():
    with pytest.raises(ValidationError):
        StateSpace(1, 2)
    with pytest.raises(ValidationError):
        StateSpace(3, 0)
    space = StateSpace(3, 2)
    with pytest.raises(ValidationError):
        space.validate([[0, 3]])
    with pytest.raises(ValidationError):
        space.validate([0, 1, 2])
    assert space.n_states == 9


def test_encode_decode_roundtrip():
    space = StateSpace(4, 3)
    states = space.all_states()
    assert states.shape == (64, 3)
    np.testing.assert_array_equal(space.encode(states), np.arange(64))
    # dimension 0 is the most significant digit
    assert space.encode([1, 0, 0]) == 16


def test_time_grid():
    g = TimeGrid(3)
    assert g.n_points == 5 and g.n_steps == 4
    np.testing.assert_allclose(g.times(), [0, 0.25, 0.5, 0.75, 1.0])
    with pytest.raises(ValidationError):
        TimeGrid(0)


def test_pair_batch_shapes():
    with pytest.raises(ValidationError):
        PairBatch(np.zeros((3, 2)), np.zeros((2, 2)))
    with pytest.raises(ValidationError):
        PairBatch(np.zeros((2, 2)), np.full((2, 2), 5), space=StateSpace(3, 2))


def test_categorical_degenerate():
    rng = make_rng(0)
    assert all(categorical_sample([1.0, 0.0], rng) == 0 for _ in range(100))
    assert all(categorical_sample([0.0, 0.0, 1.0], rng) == 2 for _ in range(100))


def test_categorical_frequency():
    rng = make_rng(1)
    draws = categorical_sample(np.tile([0.5, 0.5], (100_000, 1)), rng)
    # 3 sigma of a binomial proportion at n=1e5 is ~0.005
    assert abs(np.mean(draws == 0) - 0.5) <= 0.01


def test_categorical_rejects_invalid():
    rng = make_rng(0)
    with pytest.raises(ValidationError):
        categorical_sample([0.5, 0.6], rng)
    with pytest.raises(ValidationError):
        categorical_sample([-0.1, 1.1], rng)


def test_categorical_draw_count():
    """One uniform per row: the stream position after sampling is predictable."""
    a, b = make_rng(5), make_rng(5)
    categorical_sample(np.full((7, 3), 1 / 3), a)
    b.random(7)
    assert a.random() == b.random()


def test_kl_examples():
    assert kl_categorical([0.3, 0.7], [0.3, 0.7]) == 0.0
    assert kl_categorical([1.0, 0.0], [0.5, 0.5]) == pytest.approx(np.log(2), abs=1e-15)
    with pytest.raises(InfiniteKLError):
        kl_categorical([0.5, 0.5], [1.0, 0.0])


@settings(max_examples=50, deadline=None)
@given(probs(3), probs(3), probs(3), probs(3))
def test_kl_factorized_equals_product(p1, p2, q1, q2):
    q1 = 0.9 * q1 + 0.1 / 3
    q2 = 0.9 * q2 + 0.1 / 3
    fact = kl_categorical(np.stack([p1, p2]), np.stack([q1, q2]))
    prod = kl_categorical(np.outer(p1, p2).ravel(), np.outer(q1, q2).ravel())
    assert fact == pytest.approx(prod, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(probs(4), probs(4))
def test_kl_nonnegative(p, q):
    q = 0.99 * q + 0.0025
    k = kl_categorical(p, q)
    assert k >= 0
    if np.max(np.abs(p - q)) > 1e-3:
        assert k > 0


def test_permute_coupling_k2():
    b = PairBatch([[0], [1]], [[3], [4]])
    out = permute_coupling(b, make_rng(0))
    np.testing.assert_array_equal(out.x1, [[4], [3]])
    assert out.coupling == Coupling.INDEPENDENT


def test_permute_coupling_k1_rejected():
    with pytest.raises(ValidationError):
        permute_coupling(PairBatch([[0]], [[1]]), make_rng(0))


def test_derangement_k3_uniform():
    rng = make_rng(2)
    counts = {}
    for _ in range(10_000):
        key = tuple(random_derangement(3, rng))
        counts[key] = counts.get(key, 0) + 1
    assert set(counts) == {(1, 2, 0), (2, 0, 1)}
    assert abs(counts[(1, 2, 0)] / 10_000 - 0.5) <= 0.02


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 40), st.integers(0, 2**32))
def test_derangement_properties(K, seed):
    rng = make_rng(seed)
    x1 = rng.integers(0, 5, size=(K, 2))
    out = permute_coupling(PairBatch(np.zeros((K, 2)), x1), rng)
    assert sorted(map(tuple, out.x1)) == sorted(map(tuple, x1))
    perm = random_derangement(K, make_rng(seed, 1))
    assert not np.any(perm == np.arange(K))
    assert sorted(perm) == list(range(K))


def test_make_rng_determinism_and_streams():
    a = make_rng(7, "train", 3).random(5)
    b = make_rng(7, "train", 3).random(5)
    c = make_rng(7, "train", 4).random(5)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    make_rng(2**64 - 1)
    with pytest.raises(ValidationError):
        make_rng(-1)


def test_one_hot():
    np.testing.assert_array_equal(one_hot([[0, 2]], 3), [[[1, 0, 0], [0, 0, 1]]])
