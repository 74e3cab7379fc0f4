import math

import numpy as np
import pytest
import torch

from mentordrive.core import InvalidInputError, seed_all
from mentordrive.nets import (
    CheckpointError,
    DTYPE,
    GaussianPolicyHead,
    Mlp,
    ShapeError,
    deterministic_action,
    forward,
    grad,
    load_checkpoint,
    polyak_update,
    read_checkpoint,
    sample_action,
    save_checkpoint,
)


def zero_params(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


def test_forward_zero_net():
    net = Mlp([4, 8, 2], seed=1)
    zero_params(net)
    out = forward(net, np.ones(4))
    np.testing.assert_array_equal(out, np.zeros(2))


def test_forward_identity_linear():
    net = Mlp([3, 3], seed=0)  # single linear layer
    with torch.no_grad():
        net.net[0].weight.copy_(torch.eye(3, dtype=DTYPE))
        net.net[0].bias.zero_()
    x = np.array([0.3, -1.2, 2.0])
    np.testing.assert_allclose(forward(net, x), x, atol=0)


def test_forward_matches_matrix_oracle():
    net = Mlp([5, 7, 3], activation="relu", seed=3)
    x = np.linspace(-1, 1, 5)
    sd = {k: v.numpy() for k, v in net.state_dict().items()}
    h = np.maximum(sd["net.0.weight"] @ x + sd["net.0.bias"], 0.0)
    expected = sd["net.2.weight"] @ h + sd["net.2.bias"]
    np.testing.assert_allclose(forward(net, x), expected, rtol=0, atol=1e-15)


def test_forward_shape_mismatch():
    net = Mlp([4, 2], seed=0)
    with pytest.raises(ShapeError):
        forward(net, np.ones(5))


def test_tanh_activation_oracle():
    net = Mlp([2, 3, 1], activation="tanh", seed=9)
    x = np.array([0.5, -0.25])
    sd = {k: v.numpy() for k, v in net.state_dict().items()}
    h = np.tanh(sd["net.0.weight"] @ x + sd["net.0.bias"])
    expected = sd["net.2.weight"] @ h + sd["net.2.bias"]
    np.testing.assert_allclose(forward(net, x), expected, atol=1e-15)


def test_grad_quadratic():
    net = Mlp([2, 2], seed=5)

    def loss():
        return sum((p ** 2).sum() for p in net.parameters())

    gs = grad(loss, net.parameters())
    for g, p in zip(gs, net.parameters()):
        np.testing.assert_allclose(g.numpy(), 2 * p.detach().numpy(), atol=1e-14)


def test_grad_constant_loss_zero():
    net = Mlp([2, 2], seed=5)
    gs = grad(lambda: torch.tensor(3.0, dtype=DTYPE), net.parameters())
    for g in gs:
        assert float(g.abs().max()) == 0.0


def test_grad_rejects_nonscalar():
    net = Mlp([2, 2], seed=5)
    with pytest.raises(InvalidInputError):
        grad(lambda: torch.zeros(3, dtype=DTYPE), net.parameters())


def finite_difference(loss_fn, params, h=1e-5):
    out = []
    for p in params:
        g = torch.zeros_like(p)
        flat = p.data.view(-1)
        gflat = g.view(-1)
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + h
            up = float(loss_fn().detach())
            flat[i] = orig - h
            dn = float(loss_fn().detach())
            flat[i] = orig
            gflat[i] = (up - dn) / (2 * h)
        out.append(g)
    return out


def max_rel_err(analytic, numeric):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a.numpy()), np.abs(n.numpy())), 1e-6)
        worst = max(worst, float((np.abs(a.numpy() - n.numpy()) / denom).max()))
    return worst


def test_grad_matches_finite_differences():
    net = Mlp([3, 6, 1], seed=7)
    x = torch.linspace(-1, 1, 3, dtype=DTYPE)

    def loss():
        return (net(x) ** 2).sum() + 0.1 * net(x).sum()

    analytic = grad(loss, net.parameters())
    numeric = finite_difference(loss, list(net.parameters()))
    assert max_rel_err(analytic, numeric) < 1e-4


def test_polyak_extremes_and_oracle():
    a = Mlp([2, 3, 1], seed=1)
    b = Mlp([2, 3, 1], seed=2)
    snap = [p.detach().clone() for p in a.parameters()]
    polyak_update(a, b, tau=0.0)
    for p, s in zip(a.parameters(), snap):
        assert torch.equal(p, s)
    polyak_update(a, b, tau=1.0)
    for p, q in zip(a.parameters(), b.parameters()):
        assert torch.equal(p, q)
    a2 = Mlp([2, 3, 1], seed=3)
    snap2 = [p.detach().clone() for p in a2.parameters()]
    polyak_update(a2, b, tau=0.005)
    for p, s, q in zip(a2.parameters(), snap2, b.parameters()):
        np.testing.assert_allclose(
            p.detach().numpy(), (0.995 * s + 0.005 * q.detach()).numpy(), atol=1e-16
        )


def test_polyak_shape_mismatch():
    with pytest.raises(ShapeError):
        polyak_update(Mlp([2, 3, 1], seed=0), Mlp([2, 4, 1], seed=0))


def test_sample_action_bounds_and_degenerate_std():
    head = GaussianPolicyHead(4, [8], act_dim=2, seed=11)
    with torch.no_grad():
        head.log_std.weight.zero_()
        head.log_std.bias.fill_(-40.0)  # clamps to LOG_STD_MIN
    obs = np.ones(4)
    rng = seed_all(0).stream("act")
    a, lp = sample_action(head, obs, rng)
    det = deterministic_action(head, obs)
    assert a.steer == pytest.approx(det.steer, abs=1e-7)
    assert a.throttle == pytest.approx(det.throttle, abs=1e-7)
    assert -1 <= a.steer <= 1 and -1 <= a.throttle <= 1


def test_sample_action_symmetric_mean():
    head = GaussianPolicyHead(3, [8], act_dim=2, seed=13)
    zero_params(head)  # mean 0, log_std 0 -> std 1
    obs = torch.zeros(100_000, 3, dtype=DTYPE)
    noise = torch.as_tensor(seed_all(1).stream("mc").standard_normal((100_000, 2)), dtype=DTYPE)
    with torch.no_grad():
        acts, _ = head.sample(obs, noise=noise)
    assert abs(float(acts.mean())) < 0.02


def test_log_prob_matches_histogram_density():
    # 1-dim action head: empirical density of the squashed sample should
    # match exp(log_prob) at bin centres
    head = GaussianPolicyHead(2, [8], act_dim=1, seed=17)
    zero_params(head)
    n = 200_000
    obs = torch.zeros(n, 2, dtype=DTYPE)
    noise = torch.as_tensor(seed_all(2).stream("mc").standard_normal((n, 1)), dtype=DTYPE)
    with torch.no_grad():
        acts, _ = head.sample(obs, noise=noise)
    samples = acts.numpy().ravel()
    edges = np.linspace(-0.9, 0.9, 19)
    counts, _ = np.histogram(samples, bins=edges)
    # absolute density: normalise by the full sample count, not the in-range
    # count (numpy's density=True renormalises over the bin range)
    hist = counts / (len(samples) * np.diff(edges))
    centers = 0.5 * (edges[:-1] + edges[1:])
    with torch.no_grad():
        lp = head.log_prob_of(
            torch.zeros(len(centers), 2, dtype=DTYPE),
            torch.as_tensor(centers[:, None], dtype=DTYPE),
        )
    analytic = np.exp(lp.numpy())
    np.testing.assert_allclose(hist, analytic, rtol=0.08)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    net = Mlp([4, 8, 2], seed=21)
    head = GaussianPolicyHead(4, [8], seed=22)
    opt = torch.optim.Adam(list(net.parameters()) + list(head.parameters()), lr=1e-3)
    # take a couple of optimizer steps so moments are non-trivial
    for _ in range(3):
        loss = (net(torch.ones(4, dtype=DTYPE)) ** 2).sum() + head.sample(
            torch.ones(1, 4, dtype=DTYPE), noise=torch.zeros(1, 2, dtype=DTYPE)
        )[1].sum()
        opt.zero_grad()
        loss.backward()
        opt.step()
    path = tmp_path / "ck.bin"
    save_checkpoint(path, {"net": net, "head": head}, {"opt": opt}, meta={"step": 3})

    net2 = Mlp([4, 8, 2], seed=99)
    head2 = GaussianPolicyHead(4, [8], seed=98)
    opt2 = torch.optim.Adam(list(net2.parameters()) + list(head2.parameters()), lr=1e-3)
    meta = load_checkpoint(path, {"net": net2, "head": head2}, {"opt": opt2})
    assert meta == {"step": 3}
    for p, q in zip(net.parameters(), net2.parameters()):
        assert torch.equal(p, q)
    for p, q in zip(head.parameters(), head2.parameters()):
        assert torch.equal(p, q)
    s1, s2 = opt.state_dict()["state"], opt2.state_dict()["state"]
    for k in s1:
        for field in ("exp_avg", "exp_avg_sq"):
            assert torch.equal(s1[k][field], s2[k][field])

    # saving the reloaded state reproduces the same file contents
    path2 = tmp_path / "ck2.bin"
    save_checkpoint(path2, {"net": net2, "head": head2}, {"opt": opt2}, meta={"step": 3})
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_rejects_corruption(tmp_path):
    net = Mlp([2, 2], seed=0)
    path = tmp_path / "ck.bin"
    save_checkpoint(path, {"net": net})
    raw = bytearray(path.read_bytes())
    raw[0] = 0x00
    bad = tmp_path / "bad.bin"
    bad.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        read_checkpoint(bad)
    # no stray temp file left behind by atomic writes
    assert not (tmp_path / "ck.bin.tmp").exists()


def test_checkpoint_shape_mismatch(tmp_path):
    net = Mlp([2, 3, 1], seed=0)
    path = tmp_path / "ck.bin"
    save_checkpoint(path, {"net": net})
    other = Mlp([2, 4, 1], seed=0)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, {"net": other})


def test_mlp_architecture_validation():
    with pytest.raises(InvalidInputError):
        Mlp([4], seed=0)
    with pytest.raises(InvalidInputError):
        Mlp([4, 2], activation="gelu", seed=0)
