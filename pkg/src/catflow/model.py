"""Two-time conditioned denoiser ``pi_{s,t}(x)`` at desk scale.

Two backbones share the same conditioning scheme: sinusoidal features of
``s`` and ``t`` go through a small MLP into a conditioning vector ``c``, and
every block is modulated by (shift, scale, gate) projected from ``c``.  The
modulation projections start at zero, so every residual block starts closed.

* ``residual_mlp`` flattens the L x V state into one vector.
* ``tiny_transformer`` embeds each position and mixes them with single-head
  attention.

Parameters live in one flat vector; ``layout`` fixes the declaration order
that both the gradient and the checkpoint format follow.
"""

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import (ConfigError, CorruptionError, DescriptorConflictError, DimensionError,
                     DomainError, FormatError, NumericError)

ARCHS = ("residual_mlp", "tiny_transformer")
MAX_FREQ = 200.0


@dataclass(frozen=True)
class BackboneDescriptor:
    hidden_dim: int = 64
    depth: int = 2
    time_embed_dim: int = 32
    vocab_size: int = 4
    context_len: int = 1
    arch: str = "residual_mlp"

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown backbone {self.arch!r}")
        if min(self.hidden_dim, self.depth, self.time_embed_dim, self.context_len) < 1:
            raise ConfigError("backbone dimensions must be >= 1")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.time_embed_dim % 2:
            raise ConfigError("time_embed_dim must be even")


def layout(desc: BackboneDescriptor):
    """Ordered ``(name, shape, init)`` triples; init is 'normal', 'zero' or 'out'."""
    H, E, V, L = desc.hidden_dim, desc.time_embed_dim, desc.vocab_size, desc.context_len
    items = [("time.w1", (2 * E, H), "normal"), ("time.b1", (H,), "zero"),
             ("time.w2", (H, H), "normal"), ("time.b2", (H,), "zero")]
    if desc.arch == "residual_mlp":
        items += [("in.w", (L * V, H), "normal"), ("in.b", (H,), "zero")]
        for i in range(desc.depth):
            p = f"blk{i}."
            items += [(p + "mod.w", (H, 3 * H), "zero"), (p + "mod.b", (3 * H,), "zero"),
                      (p + "fc1.w", (H, 2 * H), "normal"), (p + "fc1.b", (2 * H,), "zero"),
                      (p + "fc2.w", (2 * H, H), "normal"), (p + "fc2.b", (H,), "zero")]
        out_dim = L * V
    else:
        items += [("in.w", (V, H), "normal"), ("in.b", (H,), "zero"), ("pos", (L, H), "out")]
        for i in range(desc.depth):
            p = f"blk{i}."
            items += [(p + "mod.w", (H, 6 * H), "zero"), (p + "mod.b", (6 * H,), "zero"),
                      (p + "attn.q", (H, H), "normal"), (p + "attn.k", (H, H), "normal"),
                      (p + "attn.v", (H, H), "normal"), (p + "attn.o", (H, H), "normal"),
                      (p + "fc1.w", (H, 2 * H), "normal"), (p + "fc1.b", (2 * H,), "zero"),
                      (p + "fc2.w", (2 * H, H), "normal"), (p + "fc2.b", (H,), "zero")]
        out_dim = V
    items += [("final.mod.w", (H, 2 * H), "zero"), ("final.mod.b", (2 * H,), "zero"),
              ("out.w", (H, out_dim), "out"), ("out.b", (out_dim,), "zero")]
    return items


def param_count(desc: BackboneDescriptor) -> int:
    return sum(int(np.prod(shape)) for _, shape, _ in layout(desc))


@dataclass
class ModelParams:
    flat: np.ndarray
    descriptor: BackboneDescriptor
    version: int = 0

    def __post_init__(self):
        if self.flat.ndim != 1 or self.flat.size != param_count(self.descriptor):
            raise DimensionError(
                f"parameter vector has {self.flat.size} entries, descriptor implies "
                f"{param_count(self.descriptor)}")

    def views(self):
        out, off = {}, 0
        for name, shape, _ in layout(self.descriptor):
            n = int(np.prod(shape))
            out[name] = self.flat[off:off + n].reshape(shape)
            off += n
        return out

    def astype(self, dtype):
        return replace(self, flat=self.flat.astype(dtype))

    def copy(self):
        return replace(self, flat=self.flat.copy())


def init_params(desc: BackboneDescriptor, seed=0, dtype=np.float32) -> ModelParams:
    """Fan-in scaled Gaussian hidden weights, 0.02-std output/position weights, zero gates."""
    rng = np.random.default_rng(seed)
    chunks = []
    for _, shape, kind in layout(desc):
        if kind == "zero":
            chunks.append(np.zeros(shape))
        elif kind == "out":
            chunks.append(0.02 * rng.standard_normal(shape))
        else:
            chunks.append(rng.standard_normal(shape) / math.sqrt(shape[0]))
    flat = np.concatenate([c.ravel() for c in chunks]).astype(dtype)
    return ModelParams(flat, desc, 0)


def time_features(s, t, dim: int, dtype) -> np.ndarray:
    """Concatenated sinusoidal features of s and t, shape (B, 2 * dim)."""
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, math.log(MAX_FREQ), half)) if half > 1 else np.ones(1)
    feats = []
    for v in (s, t):
        arg = np.asarray(v, dtype=np.float64)[:, None] * freqs[None, :]
        feats += [np.sin(arg), np.cos(arg)]
    return np.concatenate(feats, axis=1).astype(dtype)


def _modulate(h, shift, scale):
    return ad.layer_norm(h) * (1.0 + scale) + shift


def apply(desc: BackboneDescriptor, P: dict, x, s, t):
    """Logits of ``pi_{s,t}(x)`` as a Tensor, shape (B, L, V).

    ``P`` maps parameter names to Tensors (or arrays); ``x`` is (B, L, V),
    ``s`` and ``t`` are (B,).
    """
    B, L, V = x.shape
    H = desc.hidden_dim
    dtype = P["out.w"].data.dtype if isinstance(P["out.w"], ad.Tensor) else P["out.w"].dtype
    emb = time_features(s, t, desc.time_embed_dim, dtype)
    c = ad.silu(emb @ P["time.w1"] + P["time.b1"])
    c = ad.silu(c @ P["time.w2"] + P["time.b2"])
    x = np.asarray(x, dtype=dtype)

    if desc.arch == "residual_mlp":
        h = x.reshape(B, L * V) @ P["in.w"] + P["in.b"]
        for i in range(desc.depth):
            p = f"blk{i}."
            mod = c @ P[p + "mod.w"] + P[p + "mod.b"]
            hn = _modulate(h, mod[:, :H], mod[:, H:2 * H])
            u = ad.silu(hn @ P[p + "fc1.w"] + P[p + "fc1.b"]) @ P[p + "fc2.w"] + P[p + "fc2.b"]
            h = h + mod[:, 2 * H:] * u
        fm = c @ P["final.mod.w"] + P["final.mod.b"]
        out = _modulate(h, fm[:, :H], fm[:, H:]) @ P["out.w"] + P["out.b"]
        return out.reshape(B, L, V)

    h = x @ P["in.w"] + P["in.b"] + P["pos"]
    scale_qk = 1.0 / math.sqrt(H)
    for i in range(desc.depth):
        p = f"blk{i}."
        mod = (c @ P[p + "mod.w"] + P[p + "mod.b"]).reshape(B, 1, 6 * H)
        sh1, sc1, g1, sh2, sc2, g2 = (mod[:, :, k * H:(k + 1) * H] for k in range(6))
        hn = _modulate(h, sh1, sc1)
        q, k, v = hn @ P[p + "attn.q"], hn @ P[p + "attn.k"], hn @ P[p + "attn.v"]
        att = ad.softmax((q @ ad.transpose(k, (0, 2, 1))) * scale_qk, axis=-1)
        h = h + g1 * ((att @ v) @ P[p + "attn.o"])
        hn = _modulate(h, sh2, sc2)
        u = ad.silu(hn @ P[p + "fc1.w"] + P[p + "fc1.b"]) @ P[p + "fc2.w"] + P[p + "fc2.b"]
        h = h + g2 * u
    fm = (c @ P["final.mod.w"] + P["final.mod.b"]).reshape(B, 1, 2 * H)
    return _modulate(h, fm[:, :, :H], fm[:, :, H:]) @ P["out.w"] + P["out.b"]


def _check_inputs(desc, x, s, t):
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[1:] != (desc.context_len, desc.vocab_size):
        raise DimensionError(
            f"state shape {x.shape[1:] if x.ndim == 3 else x.shape} does not match "
            f"({desc.context_len}, {desc.vocab_size})")
    B = x.shape[0]
    s = np.broadcast_to(np.asarray(s, dtype=np.float64), (B,))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
    if np.any(s > t) or np.any(s < 0) or np.any(t > 1):
        raise DomainError("model needs 0 <= s <= t <= 1")
    return s, t


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(params: ModelParams, x, s, t):
    """Return ``(logits, probs)`` as numpy arrays, both (B, L, V)."""
    s, t = _check_inputs(params.descriptor, x, s, t)
    logits = apply(params.descriptor, params.views(), x, s, t).data
    return logits, _softmax(logits)


class ModelDenoiser:
    """Wrap parameters as a ``(x, s, t) -> probs`` callable; counts evaluations."""

    def __init__(self, params: ModelParams):
        self.params = params
        self.calls = 0

    @property
    def V(self):
        return self.params.descriptor.vocab_size

    def logits(self, x, s, t):
        self.calls += 1
        return forward(self.params, x, s, t)[0]

    def __call__(self, x, s, t):
        return _softmax(self.logits(x, s, t))


def loss_gradient(params: ModelParams, loss_fn):
    """Exact reverse-mode gradient of ``loss_fn(net)``.

    ``net(x, s, t)`` returns logit Tensors that depend on the parameters;
    anything ``loss_fn`` computes from plain arrays is treated as constant.
    """
    desc = params.descriptor
    P = {k: ad.Tensor(v, requires_grad=True) for k, v in params.views().items()}

    def net(x, s, t):
        s, t = _check_inputs(desc, x, s, t)
        return apply(desc, P, x, s, t)

    loss = loss_fn(net)
    if not isinstance(loss, ad.Tensor):
        loss = ad.Tensor(loss)
    value = float(loss.data)
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss {value}")
    if loss.requires_grad:
        loss.backward()
    grad = np.concatenate([
        (P[name].grad if P[name].grad is not None else np.zeros(shape, dtype=params.flat.dtype)).ravel()
        for name, shape, _ in layout(desc)])
    if not np.all(np.isfinite(grad)):
        bad = [name for name, _, _ in layout(desc)
               if P[name].grad is not None and not np.all(np.isfinite(P[name].grad))]
        raise NumericError(f"non-finite gradient in {bad}")
    return value, grad


# -- checkpoints ----------------------------------------------------------

MAGIC = b"CATFLOW\x00"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sI6qqq")


def save_checkpoint(params: ModelParams, path):
    d = params.descriptor
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, d.hidden_dim, d.depth, d.time_embed_dim,
                          d.vocab_size, d.context_len, ARCHS.index(d.arch),
                          params.version, params.flat.size)
    body = np.ascontiguousarray(params.flat, dtype="<f4").tobytes()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(body)
    tmp.replace(path)


def load_checkpoint(path, expected: BackboneDescriptor | None = None) -> ModelParams:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        if raw[:8] != MAGIC[:len(raw[:8])]:
            raise FormatError(f"{path}: not a checkpoint (bad magic)")
        raise CorruptionError(f"{path}: truncated header")
    magic, fmt, H, depth, E, V, L, arch, version, n = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    if fmt != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {fmt}")
    if not 0 <= arch < len(ARCHS):
        raise CorruptionError(f"{path}: invalid architecture code {arch}")
    desc = BackboneDescriptor(H, depth, E, V, L, ARCHS[arch])
    if n != param_count(desc):
        raise CorruptionError(f"{path}: parameter count {n} inconsistent with descriptor")
    body = raw[_HEADER.size:]
    if len(body) != 4 * n:
        raise CorruptionError(f"{path}: expected {4 * n} parameter bytes, found {len(body)}")
    if expected is not None and expected != desc:
        raise DescriptorConflictError(f"checkpoint backbone {desc} != configured {expected}")
    flat = np.frombuffer(body, dtype="<f4").astype(np.float32)
    return ModelParams(flat, desc, version)
