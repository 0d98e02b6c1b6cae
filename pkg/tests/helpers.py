"""Shared fixtures-as-functions for the loss and acceptance tests."""

import numpy as np

from catflow import autodiff as ad
from catflow.interpolant import make_interpolant_batch
from catflow.model import BackboneDescriptor, apply, init_params

SMALL = BackboneDescriptor(hidden_dim=4, depth=1, time_embed_dim=2, vocab_size=3, context_len=2)


def small_params(seed=0, desc=SMALL):
    """float64 parameters with open gates so every block contributes."""
    p = init_params(desc, seed, np.float64)
    p.flat[:] += 0.3 * np.random.default_rng(seed + 1).standard_normal(p.flat.size)
    return p


def value_net(params):
    P = {k: ad.Tensor(v) for k, v in params.views().items()}
    return lambda x, s, t: apply(params.descriptor, P, x, np.asarray(s, float), np.asarray(t, float))


def objective_value(params, fn):
    return float(fn(value_net(params)).data)


def fd_gradient(params, fn, h=1e-6):
    grad = np.zeros(params.flat.size)
    for i in range(params.flat.size):
        old = params.flat[i]
        params.flat[i] = old + h
        up = objective_value(params, fn)
        params.flat[i] = old - h
        down = objective_value(params, fn)
        params.flat[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


def rel_err(a, b):
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-12))


def toy_batch(schedule, B=4, seed=0, t=None, desc=SMALL, prefix_p=0.0):
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, desc.vocab_size, (B, desc.context_len))
    return make_interpolant_batch(tokens, desc.vocab_size, schedule, rng, t=t, prefix_p=prefix_p,
                                  prefix_d=1)
