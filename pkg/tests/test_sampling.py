import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from specdraft.errors import DomainError
from specdraft.models.sampling import apply_temperature, draw, sample_categorical, sample_token, validate_dist


def test_greedy_picks_the_argmax():
    assert sample_token(np.array([0.1, 0.7, 0.2]), 0.0, np.random.default_rng(0)) == 1


def test_greedy_ties_break_to_the_lowest_index():
    assert sample_token(np.array([0.5, 0.5, 0.0]), 0.0, np.random.default_rng(0)) == 0


def test_sampling_frequency_matches_the_distribution():
    rng = np.random.default_rng(42)
    dist = np.array([0.25, 0.75])
    hits = sum(sample_token(dist, 1.0, rng) for _ in range(100_000))
    assert hits / 100_000 == pytest.approx(0.75, abs=0.01)


def test_one_uniform_per_draw():
    rng = np.random.default_rng(9)
    twin = np.random.default_rng(9)
    sample_categorical(np.array([0.2, 0.3, 0.5]), rng)
    twin.random()
    assert rng.random() == twin.random()


@pytest.mark.parametrize(
    "dist",
    [np.array([0.5, 0.6]), np.array([-0.1, 1.1]), np.array([np.nan, 1.0]), np.array([]), np.ones((2, 2)) / 4],
)
def test_invalid_distributions_are_rejected(dist):
    with pytest.raises(DomainError):
        validate_dist(dist)


def test_negative_temperature_is_rejected():
    with pytest.raises(DomainError):
        sample_token(np.array([0.5, 0.5]), -1.0, np.random.default_rng(0))


def test_temperature_zero_and_one_leave_the_distribution_alone():
    dist = np.array([0.1, 0.2, 0.7])
    assert apply_temperature(dist, 0.0) is dist
    assert apply_temperature(dist, 1.0) is dist


def test_draw_returns_the_distribution_it_sampled_from():
    dist = np.array([0.1, 0.2, 0.7])
    _, used = draw(dist, 0.5, np.random.default_rng(0))
    assert_allclose(used, apply_temperature(dist, 0.5))
    _, used = draw(dist, 0.0, np.random.default_rng(0))
    assert_array_equal(used, dist)


@settings(max_examples=40, deadline=None)
@given(
    raw=st.lists(st.floats(min_value=0.01, max_value=10.0), min_size=2, max_size=8),
    temperature=st.floats(min_value=0.05, max_value=5.0),
)
def test_tempered_distributions_stay_valid(raw, temperature):
    dist = np.asarray(raw) / np.sum(raw)
    tempered = apply_temperature(dist, temperature)
    validate_dist(tempered)
    # tempering never changes which token is most likely
    assert dist[np.argmax(tempered)] >= dist.max() - 1e-12
