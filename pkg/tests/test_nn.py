import numpy as np
import pytest

from dystab.config import TrainConfig
from dystab.dynamic import make_phi, make_psi
from dystab.nn import MAGIC, CheckpointError, ParamStore, SegNet
from dystab.optim import adam_step
from dystab.static import make_chi
from dystab.tensor import Tensor, mean


def test_default_networks_are_small():
    cfg = TrainConfig()
    for net in (make_phi(cfg), make_psi(cfg), make_chi(cfg)):
        assert net.params.num_parameters() < 500_000


def test_segnet_outputs_probabilities():
    net = SegNet(3, widths=(4, 8, 8, 8), seed=1)
    x = Tensor(np.random.default_rng(0).random((2, 3, 16, 16)).astype(np.float32))
    out = net(x)
    assert out.shape == (2, 2, 16, 16)
    np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-5)
    assert out.data.min() >= 0


def test_same_seed_same_weights():
    a = SegNet(2, widths=(4, 8, 8, 8), seed=3)
    b = SegNet(2, widths=(4, 8, 8, 8), seed=3)
    c = SegNet(2, widths=(4, 8, 8, 8), seed=4)
    assert a.params.equals(b.params)
    assert not a.params.equals(c.params)


def test_checkpoint_round_trip(tmp_path):
    net = SegNet(2, widths=(4, 8, 8, 8), seed=7)
    path = tmp_path / "phi.ckpt"
    net.params.save(path)
    assert path.read_bytes()[:8] == MAGIC == b"DYSTAB01"
    back = ParamStore.load(path)
    assert back.equals(net.params)
    assert back.to_bytes() == net.params.to_bytes()


def test_checkpoint_layout():
    p = ParamStore()
    p.add("w", np.arange(6, dtype=np.float32).reshape(2, 3))
    buf = p.to_bytes()
    expected = (b"DYSTAB01" + (1).to_bytes(4, "little") + b"w" + (2).to_bytes(4, "little")
                + (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
                + np.arange(6, dtype="<f4").tobytes())
    assert buf == expected


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(b"NOTMAGIC" + b"\0" * 16)
    with pytest.raises(CheckpointError):
        ParamStore.load(path)


def test_load_from_checks_names_and_shapes():
    a = SegNet(2, widths=(4, 8, 8, 8))
    with pytest.raises(CheckpointError):
        a.params.load_from(SegNet(3, widths=(4, 8, 8, 8)).params)
    with pytest.raises(CheckpointError):
        a.params.load_from(ParamStore())


def test_frozen_blocks_gradients():
    p = ParamStore()
    w = p.add("w", np.ones(3))
    with p.frozen():
        out = (w * 2.0).sum()
    assert not out.requires_grad
    assert w.requires_grad


def test_adam_first_step_moves_by_lr():
    # bias-corrected first step is lr * sign(g)
    p = ParamStore()
    w = p.add("w", np.array([1.0, -2.0, 0.5]))
    w.grad = np.array([0.3, -4.0, 1e-3], dtype=np.float32)
    adam_step(p, lr=0.01)
    np.testing.assert_allclose(w.data, [0.99, -1.99, 0.49], atol=1e-5)
    assert np.all(w.grad == 0)


def test_adam_minimizes_quadratic():
    p = ParamStore()
    w = p.add("w", np.array([3.0, -1.5]))
    for _ in range(400):
        mean((w - 0.5) * (w - 0.5)).backward()
        adam_step(p, lr=0.05)
    np.testing.assert_allclose(w.data, [0.5, 0.5], atol=1e-2)
