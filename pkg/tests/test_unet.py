import numpy as np
import pytest

from vitdae import tensor as T
from vitdae.gradcheck import check_gradients
from vitdae.nn import sinusoidal_embedding
from vitdae.tensor import Tensor
from vitdae.unet import AdaGN, UNet, UNetConfig, inject_condition, predict_noise


def tiny_cfg(**kw):
    base = dict(image_size=8, base_channels=8, channel_mults=(1, 2), num_res_blocks=1, time_dim=16,
                cond_dim=5, groups=4)
    base.update(kw)
    return UNetConfig(**base)


def randomize(module, seed, scale=0.3):
    rng = np.random.default_rng(seed)
    for p in module.parameters():
        p.data[...] = rng.standard_normal(p.shape) * scale


@pytest.mark.parametrize("B,H", [(1, 16), (4, 16), (1, 32), (4, 32)])
def test_output_shape_matches_input(B, H):
    cfg = UNetConfig(image_size=H, base_channels=8, num_res_blocks=1, time_dim=16, cond_dim=4)
    net = UNet(cfg, np.random.default_rng(0))
    x = np.random.default_rng(1).standard_normal((B, 3, H, H)).astype(np.float32)
    out = predict_noise(x, np.arange(1, B + 1), np.ones((B, 4), np.float32), net)
    assert out.shape == x.shape and np.all(np.isfinite(out))


def test_zero_parameters_give_zero_output():
    net = UNet(tiny_cfg(), np.random.default_rng(0))
    for p in net.parameters():
        p.data[...] = 0
    out = predict_noise(np.random.default_rng(2).standard_normal((2, 3, 8, 8)), [5, 9], None, net)
    assert np.all(out == 0)


def test_resolution_and_dim_errors():
    with pytest.raises(ValueError):
        UNetConfig(image_size=10, channel_mults=(1, 2, 2))
    net = UNet(tiny_cfg(), np.random.default_rng(0))
    with pytest.raises(ValueError):
        predict_noise(np.zeros((1, 3, 16, 16)), [1], None, net)
    with pytest.raises(ValueError):
        predict_noise(np.zeros((1, 3, 8, 8)), [1], np.zeros((1, 7)), net)


def test_condition_sensitivity():
    net = UNet(tiny_cfg(), np.random.default_rng(0), np.float64)
    randomize(net, 3)
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 3, 8, 8))
    z = rng.standard_normal((2, 5))
    u = rng.standard_normal(5)
    u /= np.linalg.norm(u)
    diff = predict_noise(x, [10, 20], z + u, net) - predict_noise(x, [10, 20], z, net)
    assert np.linalg.norm(diff) > 0


def test_time_embeddings_distinct():
    emb = sinusoidal_embedding(np.arange(1, 1001), 32, dtype=np.float64)
    rounded = {tuple(np.round(r, 12)) for r in emb}
    assert len(rounded) == 1000


def _heads(seed=0):
    return AdaGN(4, 6, 3, 2, np.random.default_rng(seed), np.float64)


def test_inject_condition_without_code_weights_is_time_groupnorm():
    heads = _heads()
    heads.z_scale.w.data[:] = 0
    heads.z_shift.w.data[:] = 0
    rng = np.random.default_rng(1)
    h, temb = Tensor(rng.standard_normal((2, 4, 3, 3))), Tensor(rng.standard_normal((2, 6)))
    a = inject_condition(h, temb, Tensor(rng.standard_normal((2, 3))), heads).data
    b = inject_condition(h, temb, Tensor(rng.standard_normal((2, 3))), heads).data
    assert np.allclose(a, b)
    s = temb.data @ heads.t_scale.w.data + heads.t_scale.b.data
    sh = temb.data @ heads.t_shift.w.data + heads.t_shift.b.data
    f = T.group_norm(h, 2).data
    assert np.allclose(a, s[:, :, None, None] * f + sh[:, :, None, None])


def test_inject_condition_is_scale_shift_of_unit_features():
    heads = _heads(2)
    rng = np.random.default_rng(3)
    h, temb, z = Tensor(rng.standard_normal((1, 4, 2, 2))), Tensor(rng.standard_normal((1, 6))), Tensor(
        rng.standard_normal((1, 3)))
    s = (temb.data @ heads.t_scale.w.data + heads.t_scale.b.data + z.data @ heads.z_scale.w.data)[0]
    b = (temb.data @ heads.t_shift.w.data + heads.t_shift.b.data + z.data @ heads.z_shift.w.data)[0]
    f = T.group_norm(h, 2).data[0]
    out = inject_condition(h, temb, z, heads).data[0]
    assert np.allclose(out, s[:, None, None] * f + b[:, None, None])


def test_gradient_wrt_code_matches_finite_differences():
    net = UNet(tiny_cfg(), np.random.default_rng(5), np.float64)
    randomize(net, 6, 0.2)
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 3, 8, 8))
    z = Tensor(rng.standard_normal((2, 5)), requires_grad=True)
    target = rng.standard_normal((2, 3, 8, 8))
    fn = lambda: T.square(net(x, np.array([3, 70]), z) - Tensor(target)).mean()
    assert check_gradients(fn, [z]) < 1e-4
    z.zero_grad()
    fn().backward()
    assert np.linalg.norm(z.grad) > 0


def test_full_network_gradients():
    net = UNet(tiny_cfg(attention_resolutions=(4,)), np.random.default_rng(8), np.float64)
    randomize(net, 9, 0.2)
    rng = np.random.default_rng(10)
    x = rng.standard_normal((2, 3, 8, 8))
    z = rng.standard_normal((2, 5))
    target = rng.standard_normal((2, 3, 8, 8))
    fn = lambda: T.abs_(net(x, np.array([3, 70]), z) - Tensor(target)).mean()
    assert check_gradients(fn, net.parameters(), max_entries=3) < 1e-4


def test_forward_deterministic():
    net = UNet(tiny_cfg(), np.random.default_rng(0))
    randomize(net, 1, 0.1)
    x = np.random.default_rng(2).standard_normal((3, 3, 8, 8)).astype(np.float32)
    a = predict_noise(x, [1, 2, 3], None, net)
    b = predict_noise(x.copy(), [1, 2, 3], None, net)
    assert a.tobytes() == b.tobytes()
