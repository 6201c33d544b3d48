import numpy as np
import pytest

from binderflow.denoiser.codec import ToyCodec, codec_roundtrip, geometry_code
from binderflow.denoiser.data import TaskSpec, gen_toy_binder_dataset
from binderflow.denoiser.train import TrainConfig, train_codec
from binderflow.flowcore import LENGTH_SCALE, BinderState, elbo_loss


@pytest.fixture(scope="module")
def toy():
    return gen_toy_binder_dataset(np.random.default_rng(0), TaskSpec(), 600)


def test_geometry_code_straight_line():
    coords = np.stack([np.arange(5) * 3.8, np.zeros(5), np.zeros(5)], axis=1)
    g = geometry_code(coords)
    np.testing.assert_allclose(g[:, 0], -1.0)
    np.testing.assert_allclose(g[:, 1], np.abs(np.arange(5) - 2) * 0.38)


def test_identity_codec_reconstructs(toy):
    codec = ToyCodec.identity(8)
    for i in range(20):
        state = BinderState(toy.coords[i], np.zeros((8, 8)))
        out, labels, report = codec_roundtrip(codec, state, toy.labels[i])
        assert np.array_equal(labels, toy.labels[i])
        assert report.label_accuracy == 1.0
        assert report.geom_rmse < 1e-12
        assert np.array_equal(out.coords, state.coords)


def test_identity_decodes_dataset_latents(toy):
    decoded = ToyCodec.identity(8).decode_labels(toy.coords, toy.latents)
    assert np.array_equal(decoded, toy.labels)


def test_kl_zero_for_standard_posterior(toy):
    codec = ToyCodec(8)
    p = codec.unpack()
    codec.params = codec.pack({k: np.zeros_like(v) for k, v in p.items()})
    _, terms, _ = elbo_loss(codec, (toy.coords[:4] / LENGTH_SCALE, toy.geom[:4], toy.labels[:4]))
    assert terms.kl == 0.0


def test_trained_codec_heldout_accuracy(toy):
    train, held = toy.subset(np.arange(500)), toy.subset(np.arange(500, 600))
    codec = ToyCodec.init(8, np.random.default_rng(1))
    trained, trace = train_codec(codec, train, TrainConfig(lr=1e-2, steps=800, batch=32, seed=2))
    assert trace.tail_mean() < trace.losses[0]
    accs = []
    for i in range(len(held)):
        state = BinderState(held.coords[i] / LENGTH_SCALE, np.zeros((8, 8)))
        _, _, report = codec_roundtrip(trained, state, held.labels[i], geom=held.geom[i])
        accs.append(report.label_accuracy)
    assert np.mean(accs) >= 0.95


def test_roundtrip_shape_checks(toy):
    codec = ToyCodec.identity(8)
    state = BinderState(toy.coords[0], np.zeros((8, 8)))
    with pytest.raises(ValueError):
        codec_roundtrip(codec, state, toy.labels[0][:3])


def test_identity_needs_room():
    with pytest.raises(ValueError):
        ToyCodec.identity(4)
