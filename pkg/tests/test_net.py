import numpy as np
import pytest
import torch

from flowaccel.flows import GaussianMixture, GMMField
from flowaccel.net import (MAGIC, ResidualFlowNet, TrainConfig, TrainingDiverged, _torch_mirror, sum_residuals,
                           train_toy_net)


def test_forward_decomposes_into_residuals(toy_net):
    x = np.random.default_rng(0).standard_normal((3, toy_net.d))
    v, res = toy_net.forward(x, 0.4, return_residuals=True)
    h = res["h0"]
    for b in range(toy_net.n_blocks):
        h = h + res["blocks"][b]
    np.testing.assert_array_equal(v, toy_net.output_projection(h))
    for b in range(toy_net.n_blocks):
        np.testing.assert_array_equal(res["blocks"][b], sum_residuals(res["ops"][b]))


def test_numpy_matches_torch_mirror(toy_net):
    x = np.random.default_rng(1).standard_normal((4, toy_net.d))
    _, fwd = _torch_mirror(toy_net)
    with torch.no_grad():
        ref = fwd(torch.tensor(x), torch.full((4,), 0.3, dtype=torch.float64)).numpy()
    np.testing.assert_allclose(toy_net(x, 0.3), ref, rtol=1e-12, atol=1e-12)


def test_single_and_batched_agree(toy_net):
    x = np.random.default_rng(2).standard_normal((3, toy_net.d))
    out = toy_net(x, 0.7)
    for i in range(3):
        np.testing.assert_allclose(toy_net(x[i], 0.7), out[i], rtol=1e-14, atol=1e-14)


def test_serialization_roundtrip(tmp_path, toy_net):
    p = tmp_path / "net.bin"
    toy_net.save(p)
    raw = p.read_bytes()
    assert raw[:8] == MAGIC
    loaded = ResidualFlowNet.load(p)
    assert (loaded.d, loaded.n_blocks, loaded.width, loaded.emb_dim) == (6, 3, 16, 8)
    for k, v in toy_net.params.items():
        np.testing.assert_array_equal(loaded.params[k], v)
    # little-endian f8 payload right after the 32-byte header
    first = np.frombuffer(raw, dtype="<f8", count=1, offset=32)[0]
    assert first == toy_net.params["time.w"].flat[0]


def test_load_rejects_corruption(tmp_path, toy_net):
    p = tmp_path / "net.bin"
    toy_net.save(p)
    raw = p.read_bytes()
    (tmp_path / "bad.bin").write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(ValueError):
        ResidualFlowNet.load(tmp_path / "bad.bin")
    (tmp_path / "short.bin").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        ResidualFlowNet.load(tmp_path / "short.bin")


def test_zero_iterations_returns_initial_net():
    gmm = GaussianMixture.standard(3)
    cfg = TrainConfig(iterations=0, seed=5, n_blocks=2, width=8, emb_dim=4)
    net = train_toy_net(gmm, config=cfg)
    init = ResidualFlowNet.init(3, 2, 8, 4, seed=5)
    for k in init.params:
        np.testing.assert_array_equal(net.params[k], init.params[k])


def test_training_is_deterministic():
    gmm = GaussianMixture.standard(2)
    cfg = TrainConfig(iterations=20, batch_size=32, seed=1, checkpoint_every=10, n_validation=64,
                      n_blocks=1, width=8, emb_dim=4)
    a, b = train_toy_net(gmm, config=cfg), train_toy_net(gmm, config=cfg)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    assert a.history == b.history


def test_training_approaches_analytic_field():
    gmm = GaussianMixture.standard(2)
    cfg = TrainConfig(iterations=600, batch_size=256, lr=1e-3, seed=0, checkpoint_every=100,
                      n_validation=512, n_blocks=2, width=32, emb_dim=8)
    net = train_toy_net(gmm, config=cfg)
    mse = [h["field_mse"] for h in net.history]
    assert len(mse) == 7
    # nonincreasing up to a noise floor of 2% of the initial deviation
    for prev, cur in zip(mse, mse[1:]):
        assert cur <= prev + 0.02 * mse[0]
    assert mse[-1] < 0.2 * mse[0]
    # the reported field deviation is measured against the closed-form field
    rng = np.random.default_rng(3)
    x = rng.standard_normal((200, 2))
    t = 0.5
    dev = np.mean(np.sum((net(x, t) - GMMField(gmm)(x, t)) ** 2, axis=1))
    assert dev < mse[0]


def test_training_divergence_detected():
    gmm = GaussianMixture([1.0], [[1e200, 0.0]], [[1.0, 1.0]])
    cfg = TrainConfig(iterations=5, batch_size=8, seed=0, n_validation=8, n_blocks=1, width=4, emb_dim=4)
    with pytest.raises(TrainingDiverged):
        train_toy_net(gmm, config=cfg)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(iterations=-1)
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
