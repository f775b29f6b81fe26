import numpy as np
import pytest

from poseur.decoder import DecoderConfig, QueryDecoder, group_mask, refine_reference
from poseur.encoder import KeypointEncoder
from poseur.errors import ConfigurationError
from poseur.model import ModelConfig, PoseurModel
from poseur.nn import Linear
from poseur.tensor import Tensor


def test_zero_refinement_keeps_reference(rng):
    lin = Linear(8, 2, rng, zero=True)
    p = rng.uniform(0.01, 0.99, size=(2, 3, 2))
    np.testing.assert_allclose(refine_reference(Tensor(rng.normal(size=(2, 3, 8))), Tensor(p), lin).data, p, atol=1e-15)


def test_refinement_stays_in_unit_square(rng):
    lin = Linear(8, 2, rng)
    lin.weight.data *= 100
    out = refine_reference(Tensor(rng.normal(size=(2, 3, 8))), Tensor(rng.uniform(size=(2, 3, 2))), lin).data
    assert np.all((out >= 0) & (out <= 1))


def test_group_mask_blocks_cross_group():
    m = group_mask(np.array([False, False, True]))
    assert m[0, 1] == 0 and m[2, 2] == 0 and m[0, 2] < -1e29 and m[2, 0] < -1e29
    assert group_mask(np.zeros(3, dtype=bool)) is None


def test_decoder_config_validation():
    with pytest.raises(ConfigurationError):
        DecoderConfig(embed_dim=30, heads=4)
    with pytest.raises(ConfigurationError):
        DecoderConfig(num_layers=0)


def test_decoder_outputs_per_layer(rng):
    cfg = DecoderConfig(num_layers=3, heads=2, points=2, levels=2, embed_dim=8)
    dec = QueryDecoder(cfg, rng)
    qs = KeypointEncoder(4, 8, rng)(rng.uniform(size=(2, 4, 2)))
    levels = [rng.normal(size=(2, 8, 4, 4)), rng.normal(size=(2, 8, 2, 2))]
    out = dec(qs, levels)
    assert len(out.predictions) == len(out.layers) == 3
    mu, b = out.final.numpy()
    assert mu.shape == b.shape == (2, 4, 2)
    assert np.all((mu > 0) & (mu < 1) & (b > 0))
    with pytest.raises(ConfigurationError):
        dec(qs, levels[:1])


def test_noisy_group_does_not_leak_into_proposal_group(rng):
    cfg = ModelConfig(input_size=(16, 16), channels=[8, 8], strides=[4, 8], embed_dim=8, heads=2, points=2)
    model = PoseurModel(cfg, seed=3)
    images = rng.uniform(size=(2, 3, 16, 16))
    model.eval()
    alone = model(images).final.numpy()
    mixed = model(images, noisy_seed=9).final.numpy()
    for a, b in zip(alone, mixed):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)
