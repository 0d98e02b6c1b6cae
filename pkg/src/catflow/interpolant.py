"""One-hot embedding, Gaussian prior and the stochastic interpolant.

States are plain float arrays of shape ``(L, V)`` or batched ``(B, L, V)``;
token sequences are integer arrays of shape ``(L,)`` or ``(B, L)``.
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DimensionError, DomainError
from .rng import as_generator
from .schedule import ScheduleSpec, alpha, sample_time_pretrain


def embed_onehot(tokens, V: int, dtype=np.float64) -> np.ndarray:
    ids = np.asarray(tokens)
    if not np.issubdtype(ids.dtype, np.integer):
        raise DomainError("token ids must be integers")
    if V < 2:
        raise DomainError("vocabulary needs at least two entries")
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise DomainError(f"token id out of range [0, {V})")
    out = np.zeros(ids.shape + (V,), dtype=dtype)
    np.put_along_axis(out, ids[..., None], 1.0, axis=-1)
    return out


def sample_prior(L: int, V: int, rng, batch=None, dtype=np.float64) -> np.ndarray:
    if L < 1 or V < 2:
        raise DomainError("prior needs L >= 1 and V >= 2")
    shape = (L, V) if batch is None else (batch, L, V)
    return as_generator(rng).standard_normal(shape).astype(dtype, copy=False)


def _check_shapes(x0, x1):
    if np.shape(x0) != np.shape(x1):
        raise DimensionError(f"shape mismatch {np.shape(x0)} vs {np.shape(x1)}")


def _level(a, ndim):
    a = np.asarray(a, dtype=np.float64)
    # per-batch levels broadcast over the (L, V) trailing axes
    return a.reshape(a.shape + (1,) * (ndim - a.ndim)) if a.ndim else a


def interpolate(x0, x1, alpha_t):
    """I_t = (1 - alpha_t) x0 + alpha_t x1."""
    _check_shapes(x0, x1)
    a = np.asarray(alpha_t, dtype=np.float64)
    if np.any(a < 0.0) or np.any(a > 1.0):
        raise DomainError("interpolation level must lie in [0, 1]")
    a = _level(a, np.ndim(x0))
    return (1.0 - a) * x0 + a * x1


def interpolant_velocity(x0, x1, alpha_dot):
    _check_shapes(x0, x1)
    return _level(alpha_dot, np.ndim(x0)) * (np.asarray(x1) - np.asarray(x0))


def sample_prefix_len(p: float, d: int, L: int, rng, size=None):
    """0 with probability 1 - p, else uniform on {1, ..., L/d}."""
    if not 0.0 <= p <= 1.0:
        raise ConfigError("prefix probability must lie in [0, 1]")
    if d < 1 or L < d or L % d != 0:
        raise ConfigError(f"prefix divisor d={d} must divide L={L}")
    rng = as_generator(rng)
    n = 1 if size is None else int(np.prod(size))
    hit = rng.random(n) < p
    length = rng.integers(1, L // d + 1, size=n)
    out = np.where(hit, length, 0)
    return int(out[0]) if size is None else out.reshape(size)


@dataclass
class InterpolantSample:
    """A batch of interpolant draws.  Leading axis ``B`` on every field."""

    t: np.ndarray           # (B,)
    x_t: np.ndarray         # (B, L, V)
    x0: np.ndarray          # (B, L, V)
    x1_ids: np.ndarray      # (B, L)
    prefix_len: np.ndarray  # (B,)
    loss_mask: np.ndarray   # (B, L) bool


def prefix_mask(prefix_len, L: int) -> np.ndarray:
    """Boolean (B, L) array, True on positions ``< prefix_len``."""
    return np.arange(L)[None, :] < np.asarray(prefix_len).reshape(-1, 1)


def clamp_prefix(x, x1_ids, prefix_len):
    """Overwrite prefix rows of a batched state with clean one-hots."""
    V = x.shape[-1]
    clamped = prefix_mask(prefix_len, x.shape[-2])
    if not clamped.any():
        return x
    out = x.copy()
    out[clamped] = embed_onehot(np.asarray(x1_ids)[clamped], V, dtype=x.dtype)
    return out


def apply_prefix_unmask(sample: InterpolantSample) -> InterpolantSample:
    L = sample.x_t.shape[-2]
    clamped = prefix_mask(sample.prefix_len, L)
    return replace(sample,
                   x_t=clamp_prefix(sample.x_t, sample.x1_ids, sample.prefix_len),
                   loss_mask=~clamped)


def make_interpolant_batch(tokens, V: int, schedule: ScheduleSpec, rng, t=None,
                           prefix_p: float = 0.0, prefix_d: int = 1,
                           dtype=np.float64) -> InterpolantSample:
    """Draw x0 and t, build I_t for a batch of token sequences, then unmask prefixes."""
    rng = as_generator(rng)
    tokens = np.asarray(tokens)
    B, L = tokens.shape
    if t is None:
        t = sample_time_pretrain(rng, B)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,)).copy()
    x0 = sample_prior(L, V, rng, batch=B, dtype=dtype)
    x1 = embed_onehot(tokens, V, dtype=dtype)
    a, _ = alpha(schedule, t)
    x_t = interpolate(x0, x1, a).astype(dtype, copy=False)
    if prefix_p > 0.0:
        plen = sample_prefix_len(prefix_p, prefix_d, L, rng, size=B)
    else:
        plen = np.zeros(B, dtype=np.int64)
    sample = InterpolantSample(t=t, x_t=x_t, x0=x0, x1_ids=tokens,
                               prefix_len=plen, loss_mask=np.ones((B, L), dtype=bool))
    return apply_prefix_unmask(sample)
