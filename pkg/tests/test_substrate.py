import math

import pytest
import torch

from geosynth import substrate


def test_square_gradient():
    x = torch.tensor([3.0], dtype=torch.float64, requires_grad=True)
    val, _, input_grads = substrate.evaluate_with_gradients(lambda t: (t * t).sum(), [x])
    assert val.item() == 9.0
    assert input_grads[0].item() == pytest.approx(6.0, abs=1e-12)


def test_softmax_symmetry_and_jacobian_rows():
    x = torch.zeros(2, dtype=torch.float64, requires_grad=True)
    y = torch.softmax(x, dim=0)
    assert torch.allclose(y, torch.tensor([0.5, 0.5], dtype=torch.float64))
    for i in range(2):
        g = torch.autograd.grad(y[i], x, retain_graph=True)[0]
        assert abs(g.sum().item()) < 1e-12


def test_softmax_normalization_property():
    gen = torch.Generator().manual_seed(0)
    for _ in range(50):
        x = torch.rand(7, generator=gen, dtype=torch.float64) * 2 - 1
        y = torch.softmax(x, dim=0)
        assert (y >= 0).all()
        assert abs(y.sum().item() - 1.0) < 1e-12


def test_non_scalar_loss_rejected():
    x = torch.zeros(3, dtype=torch.float64, requires_grad=True)
    with pytest.raises(substrate.SubstrateError):
        substrate.evaluate_with_gradients(lambda t: t * 2, [x])


def test_shape_mismatch_error_names_dimensions():
    a = torch.zeros(2, 3, dtype=torch.float64, requires_grad=True)
    b = torch.zeros(4, 5, dtype=torch.float64)
    with pytest.raises(RuntimeError, match=r"[0-9]"):
        substrate.evaluate_with_gradients(lambda t: (t @ b).sum(), [a])


def test_fd_square():
    g = substrate.finite_difference_gradient(lambda t: float(t**2), torch.tensor(3.0, dtype=torch.float64))
    assert abs(g.item() - 6.0) < 1e-9


def test_fd_sum_of_sin():
    x = torch.tensor([0.0, math.pi / 2], dtype=torch.float64)
    g = substrate.finite_difference_gradient(lambda t: float(torch.sin(t).sum()), x)
    assert abs(g[0].item() - 1.0) < 1e-8
    assert abs(g[1].item() - 0.0) < 1e-8


def test_fd_rejects_nonpositive_h():
    with pytest.raises(substrate.SubstrateError):
        substrate.finite_difference_gradient(lambda t: float(t.sum()), torch.zeros(1), h=0.0)


def test_fd_nonfinite_carries_coordinate():
    def f(t):
        return float(torch.sqrt(t).sum())

    with pytest.raises(substrate.NonFiniteError) as exc:
        substrate.finite_difference_gradient(f, torch.tensor([1.0, 0.0], dtype=torch.float64))
    assert exc.value.coord == 1


def test_mlp_gradients_match_finite_differences():
    # random 3-layer perceptron, derived oracle: central differences, h=1e-5
    torch.manual_seed(1)
    mlp = torch.nn.Sequential(
        torch.nn.Linear(4, 8), torch.nn.ELU(),
        torch.nn.Linear(8, 8), torch.nn.ELU(),
        torch.nn.Linear(8, 1),
    ).double()
    gen = torch.Generator().manual_seed(2)
    substrate.init_parameters(mlp, gen)
    # non-zero biases so their gradients are informative
    for m in mlp.modules():
        if isinstance(m, torch.nn.Linear):
            with torch.no_grad():
                m.bias.uniform_(-0.1, 0.1, generator=gen)
    x = (torch.rand(5, 4, generator=gen, dtype=torch.float64) * 2 - 1)

    report = substrate.gradcheck_parameters(lambda: (mlp(x) ** 2).mean(), mlp,
                                            coords_per_param=12, generator=gen)
    assert max(report.values()) < 1e-4


def test_primitive_gradients_match_finite_differences():
    gen = torch.Generator().manual_seed(3)

    def rand(*shape):
        return (torch.rand(*shape, generator=gen, dtype=torch.float64) * 2 - 1)

    cases = {
        "add": (lambda t: (t + rand(4, 4) * 0.0 + t).sum(), rand(4, 4)),
        "mul": (lambda t: (t * t).sum(), rand(4, 4)),
        "matmul": (lambda t: (t @ t.T).sum(), rand(3, 4)),
        "conv2d": (lambda t: torch.nn.functional.conv2d(t.reshape(1, 1, 6, 6), w2).sum(), rand(36)),
        "conv3d": (lambda t: torch.nn.functional.conv3d(t.reshape(1, 1, 4, 4, 4), w3).sum(), rand(64)),
        "tconv2d": (lambda t: torch.nn.functional.conv_transpose2d(t.reshape(1, 1, 4, 4), w2).sum(), rand(16)),
        "maxpool": (lambda t: torch.nn.functional.max_pool1d(t.reshape(1, 1, 8), 2).sum(), rand(8)),
        "softmax": (lambda t: (torch.softmax(t, 0) * probe).sum(), rand(6)),
        "softplus": (lambda t: torch.nn.functional.softplus(t).sum(), rand(6)),
        "exp": (lambda t: torch.exp(t).sum(), rand(6)),
        "meanvar": (lambda t: (t.mean() + t.var(unbiased=False)), rand(10)),
        "layernorm": (lambda t: (torch.nn.functional.layer_norm(t, (8,)) * probe8).sum(), rand(8)),
        "batchnorm": (lambda t: (torch.nn.functional.batch_norm(
            t.reshape(4, 2), None, None, training=True) * probe_bn).sum(), rand(8)),
        "relu": (lambda t: torch.relu(t).sum(), rand(6) + 0.2),
        "elu": (lambda t: torch.nn.functional.elu(t).sum(), rand(6) + 0.2),
        "bilinear": (lambda t: torch.nn.functional.grid_sample(
            t.reshape(1, 1, 5, 5), grid2, align_corners=True).sum(), rand(25)),
        "trilinear": (lambda t: torch.nn.functional.grid_sample(
            t.reshape(1, 1, 3, 4, 4), grid3, align_corners=True).sum(), rand(48)),
    }
    w2 = rand(1, 1, 3, 3)
    w3 = rand(1, 1, 3, 3, 3)
    probe = rand(6)
    probe8 = rand(8)
    probe_bn = rand(4, 2)
    grid2 = rand(1, 3, 3, 2) * 0.8
    grid3 = rand(1, 2, 2, 2, 3) * 0.8

    for name, (f, x) in cases.items():
        err = substrate.gradcheck_scalar_fn(f, x, n_coords=10, generator=gen)
        assert err < 1e-4, f"{name}: rel err {err:.3g}"


def test_forward_determinism():
    def build():
        torch.manual_seed(7)
        m = torch.nn.Conv2d(3, 4, 3)
        x = torch.randn(1, 3, 8, 8)
        return m(x)

    assert torch.equal(build(), build())


def test_checkpoint_roundtrip(tmp_path):
    state = {
        "a.weight": torch.arange(12, dtype=torch.float32).reshape(3, 4),
        "b.bias": torch.tensor([1.5, -2.5]),
        "scalar": torch.tensor(3.0),
    }
    path = tmp_path / "ck.bin"
    substrate.save_checkpoint(path, state)
    loaded = substrate.load_checkpoint(path)
    assert set(loaded) == set(state)
    for k in state:
        assert torch.equal(loaded[k], state[k])
        assert loaded[k].shape == state[k].shape

    raw = path.read_bytes()
    assert raw[:4] == b"GNRF"


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(substrate.SubstrateError):
        substrate.load_checkpoint(path)


def test_init_parameters_bounds():
    gen = torch.Generator().manual_seed(0)
    lin = torch.nn.Linear(16, 8)
    substrate.init_parameters(lin, gen)
    bound = 1.0 / math.sqrt(16)
    assert lin.weight.abs().max().item() <= bound
    assert lin.bias.abs().max().item() == 0.0
