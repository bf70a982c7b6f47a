import numpy as np
import pytest

from specdraft.autodiff.tensor import Tensor, no_grad
from specdraft.errors import ShapeError
from specdraft.training.discriminator import Discriminator, default_fc_layers, discriminate


def inputs(rng, rows=5, d_model=16, vocab=32):
    hidden = Tensor(rng.normal(size=(rows, d_model)).astype(np.float32))
    candidate = Tensor(rng.normal(size=(rows, vocab)).astype(np.float32))
    return hidden, candidate


@pytest.mark.parametrize("fc_layers", [1, 2, 3])
def test_fresh_discriminator_answers_one_half(rng, fc_layers):
    disc = Discriminator(16, 32, fc_layers, rng)
    with no_grad():
        out = disc.score(*inputs(rng))
    assert out.shape == (5, 1)
    assert np.all(out.data == 0.5)


def test_output_is_strictly_inside_the_unit_interval(rng):
    disc = Discriminator(16, 32, 2, rng)
    for layer in disc.fc:
        layer.weight.data = rng.normal(scale=0.1, size=layer.weight.shape).astype(np.float32)
    with no_grad():
        out = disc.score(*inputs(rng))
    assert np.all((out.data > 0) & (out.data < 1))


def test_candidate_and_reference_slots_are_not_interchangeable(rng):
    disc = Discriminator(16, 32, 1, rng)
    disc.fc[0].weight.data = rng.normal(scale=0.01, size=disc.fc[0].weight.shape).astype(np.float32)
    hidden, candidate = inputs(rng)
    reference = Tensor(rng.normal(size=candidate.shape).astype(np.float32))
    with no_grad():
        forward = disc.score(hidden, candidate, reference).data
        swapped = disc.score(hidden, reference, candidate).data
    assert not np.allclose(forward, swapped)


def test_width_mismatch(rng):
    disc = Discriminator(16, 32, 1, rng)
    with pytest.raises(ShapeError):
        discriminate(disc, Tensor(np.zeros((2, 32))), Tensor(np.zeros((2, 31))), Tensor(np.zeros((2, 32))))


def test_depth_follows_head_layers():
    assert [default_fc_layers(k) for k in (0, 1, 2, 3, 5)] == [1, 1, 2, 3, 3]
    with pytest.raises(ValueError):
        Discriminator(16, 32, 4)
