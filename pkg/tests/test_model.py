import numpy as np
import pytest

from catflow import autodiff as ad
from catflow.errors import (CorruptionError, DescriptorConflictError, DimensionError, DomainError,
                            FormatError, NumericError)
from catflow.model import (BackboneDescriptor, ModelDenoiser, forward, init_params,
                           load_checkpoint, loss_gradient, param_count, save_checkpoint)

SMALL = {
    "residual_mlp": BackboneDescriptor(hidden_dim=4, depth=1, time_embed_dim=2, vocab_size=3,
                                       context_len=2),
    "tiny_transformer": BackboneDescriptor(hidden_dim=4, depth=1, time_embed_dim=2, vocab_size=3,
                                           context_len=2, arch="tiny_transformer"),
}


def perturbed(desc, seed=0, dtype=np.float64):
    """Random parameters with open gates, so every block contributes."""
    p = init_params(desc, seed, dtype)
    p.flat[:] += 0.3 * np.random.default_rng(seed + 1).standard_normal(p.flat.size)
    return p


def inputs(desc, B=3, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((B, desc.context_len, desc.vocab_size))
    s = rng.uniform(0, 0.5, B)
    return x, s, s + rng.uniform(0, 0.5, B)


def fd_gradient(params, fn, idx, h=1e-6):
    out = []
    for i in idx:
        old = params.flat[i]
        params.flat[i] = old + h
        up = fn()
        params.flat[i] = old - h
        down = fn()
        params.flat[i] = old
        out.append((up - down) / (2 * h))
    return np.array(out)


@pytest.mark.parametrize("arch", sorted(SMALL))
def test_small_models_fit_the_budget(arch):
    assert param_count(SMALL[arch]) <= 500


@pytest.mark.parametrize("arch", sorted(SMALL))
def test_forward_contract(arch):
    desc = SMALL[arch]
    p = perturbed(desc)
    x, s, t = inputs(desc)
    logits, probs = forward(p, x, s, t)
    assert logits.shape == probs.shape == x.shape
    np.testing.assert_allclose(probs.sum(-1), 1, atol=1e-6)
    np.testing.assert_array_equal(forward(p, x, s, t)[0], logits)
    with pytest.raises(DomainError):
        forward(p, x, t, s)
    with pytest.raises(DimensionError):
        forward(p, x[:, :1], s, t)


@pytest.mark.parametrize("arch", sorted(SMALL))
def test_gradient_matches_finite_differences(arch):
    desc = SMALL[arch]
    p = perturbed(desc)
    x, s, t = inputs(desc)
    w = np.random.default_rng(5).standard_normal(x.shape)

    def loss(net):
        return (ad.softmax(net(x, s, t)) * w).sum()

    _, grad = loss_gradient(p, loss)
    fd = fd_gradient(p, lambda: float((forward(p, x, s, t)[1] * w).sum()), range(p.flat.size))
    err = np.abs(grad - fd).max() / np.abs(fd).max()
    assert err < 1e-4


def test_zero_dependence_gives_zero_gradient():
    p = perturbed(SMALL["residual_mlp"])
    value, grad = loss_gradient(p, lambda net: ad.Tensor(np.array(2.5)))
    assert value == 2.5 and not grad.any()


def test_stop_gradient_weight():
    desc = SMALL["residual_mlp"]
    p = perturbed(desc)
    x, s, t = inputs(desc)
    w_detached = forward(p, x, s, t)[1][..., 0] ** 2

    def weighted(net):
        z = net(x, s, t)
        w = ad.softmax(z).data[..., 0] ** 2     # plain array: no gradient
        return (w * (-ad.log_softmax(z)[..., 1])).sum()

    def manual(net):
        return (w_detached * (-ad.log_softmax(net(x, s, t))[..., 1])).sum()

    np.testing.assert_allclose(loss_gradient(p, weighted)[1], loss_gradient(p, manual)[1],
                               rtol=1e-12, atol=1e-14)


def test_non_finite_loss_raises():
    p = perturbed(SMALL["residual_mlp"])
    with pytest.raises(NumericError):
        loss_gradient(p, lambda net: ad.log(ad.Tensor(np.array(-1.0))))


def test_time_continuity_and_precision_agreement():
    desc = BackboneDescriptor(hidden_dim=32, depth=2, time_embed_dim=16, vocab_size=4,
                              context_len=3)
    x, s, t = inputs(desc, B=8)
    fresh = init_params(desc, 0, np.float64)
    moved = forward(fresh, x, s + 1e-6, t + 1e-6)[0]
    assert np.abs(moved - forward(fresh, x, s, t)[0]).max() <= 1e-3
    p64 = perturbed(desc, dtype=np.float64)
    base = forward(p64, x, s, t)[0]
    lo = forward(p64.astype(np.float32), x.astype(np.float32), s, t)[0]
    assert np.abs(lo - base).max() < 1e-3


def test_parameter_count_is_descriptor_function():
    d = BackboneDescriptor(hidden_dim=16, depth=3)
    assert param_count(d) == init_params(d, 0).flat.size == init_params(d, 7).flat.size


def test_denoiser_counts_calls():
    desc = SMALL["tiny_transformer"]
    den = ModelDenoiser(init_params(desc, 0))
    x, s, t = inputs(desc)
    den(x, s, t)
    den.logits(x, s, t)
    assert den.calls == 2


def test_checkpoint_round_trip(tmp_path):
    desc = SMALL["tiny_transformer"]
    p = init_params(desc, 3)
    p.version = 17
    save_checkpoint(p, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt", expected=desc)
    assert back.descriptor == desc and back.version == 17
    assert back.flat.tobytes() == p.flat.tobytes()


def test_checkpoint_errors(tmp_path):
    desc = SMALL["residual_mlp"]
    path = tmp_path / "m.ckpt"
    save_checkpoint(init_params(desc, 0), path)
    raw = path.read_bytes()
    (tmp_path / "magic.ckpt").write_bytes(b"NOTMAGIC" + raw[8:])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "magic.ckpt")
    (tmp_path / "short.ckpt").write_bytes(raw[:-5])
    with pytest.raises(CorruptionError):
        load_checkpoint(tmp_path / "short.ckpt")
    other = BackboneDescriptor(hidden_dim=8, depth=1, time_embed_dim=4, vocab_size=4,
                               context_len=2)
    with pytest.raises(DescriptorConflictError):
        load_checkpoint(path, expected=other)
