"""Training objectives.

* diagonal cross-entropy (the flow / tangent term) with optional adaptive weight
* progressive self-distillation (PSD) against a two-step composition
* Eulerian-logit self-distillation (ESD) against a finite-difference teacher

Teacher quantities and adaptive weights are computed from plain numpy
forward passes, so they never carry gradient.  Every loss can also be given
those quantities precomputed (``frozen``), which is how finite-difference
gradient checks hold the stop-gradient branches fixed.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DomainError, EmptyLossError, NumericError, TeacherDomainError
from .interpolant import InterpolantSample, clamp_prefix, embed_onehot
from .model import ModelDenoiser, ModelParams, loss_gradient
from .schedule import ScheduleSpec, alpha

DIVERGENCES = ("KL", "RKL", "JSD")
LOG_FLOOR = -69.0  # log(1e-30)


@dataclass(frozen=True)
class LossConfig:
    adaptive_c: float = 1e-2
    adaptive_r: float = 0.5
    divergence: str = "KL"
    psd_u_rule: str = "midpoint"
    psd_alpha: float | None = None
    esd_fd_step: float = 1e-3
    esd_material: bool = True
    sd_adaptive: bool = False
    diag_weight: float = 1.0
    sd_weight: float = 1.0

    def __post_init__(self):
        if self.adaptive_c <= 0 or self.adaptive_r < 0:
            raise ConfigError("adaptive weight needs c > 0 and r >= 0")
        if self.divergence not in DIVERGENCES:
            raise ConfigError(f"unknown divergence {self.divergence!r}")
        if self.psd_u_rule not in ("midpoint", "uniform"):
            raise ConfigError(f"unknown u rule {self.psd_u_rule!r}")
        if self.psd_alpha is not None and not 0.0 <= self.psd_alpha <= 1.0:
            raise ConfigError("constant PSD mixture weight must lie in [0, 1]")
        if not 0 < self.esd_fd_step < 1:
            raise ConfigError("ESD finite-difference step must lie in (0, 1)")


@dataclass
class LossReport:
    total: float
    terms: dict
    grad: np.ndarray
    counters: dict = field(default_factory=dict)


# -- elementary pieces ----------------------------------------------------

def adaptive_weight(p, q, c: float = 1e-2, r: float = 0.5):
    """(||p - q||^2 + c)^(-r) along the last axis; a plain array, i.e. no gradient."""
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    if r == 0:
        return np.ones(np.broadcast_shapes(p.shape, q.shape)[:-1])
    delta = ((p - q) ** 2).sum(axis=-1)
    return (delta + c) ** (-r)


def _kl(p, q):
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return terms.sum(axis=-1)


def divergence(kind: str, p, q):
    """D(p, q) along the last axis with ``p`` the target and ``q`` the model.

    KL is KL(p || q), RKL is KL(q || p), JSD uses the midpoint (p + q) / 2.
    A support violation yields ``inf`` rather than raising.
    """
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    if kind == "KL":
        out = _kl(p, q)
    elif kind == "RKL":
        out = _kl(q, p)
    elif kind == "JSD":
        m = 0.5 * (p + q)
        out = 0.5 * _kl(p, m) + 0.5 * _kl(q, m)
    else:
        raise ConfigError(f"unknown divergence {kind!r}")
    return np.maximum(out, 0.0)


def tv_distance(p, q):
    return 0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum(axis=-1)


def _divergence_tensor(kind, target, logits):
    """Per-position divergence with a constant target and Tensor logits."""
    logq = ad.log_softmax(logits)
    with np.errstate(divide="ignore"):
        logp = np.maximum(np.log(target), LOG_FLOOR)
    if kind == "KL":
        return (target * (logp - logq)).sum(axis=-1)
    q = ad.exp(logq)
    if kind == "RKL":
        return (q * (logq - logp)).sum(axis=-1)
    logm = ad.log(0.5 * (q + target))
    return 0.5 * (q * (logq - logm)).sum(axis=-1) + 0.5 * (target * (logp - logm)).sum(axis=-1)


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _masked_mean(per_pos, mask):
    n = float(mask.sum())
    if n == 0:
        raise EmptyLossError("every position is masked")
    return (per_pos * mask.astype(per_pos.data.dtype if isinstance(per_pos, ad.Tensor)
                                  else np.float64)).sum() * (1.0 / n)


def _levels(schedule, t):
    a, _ = alpha(schedule, np.asarray(t, dtype=np.float64))
    return np.asarray(a, dtype=np.float64)


def _col(a):
    return np.asarray(a, dtype=np.float64)[:, None, None]


# -- diagonal flow loss ---------------------------------------------------

def diag_ce_objective(net, batch: InterpolantSample, cfg: LossConfig, weights=None):
    """Tensor loss and detached stats for the diagonal cross-entropy.

    Mean over unmasked positions of ``-sum_k e_{x1}^k log pi_{t,t}(I_t)^k``,
    each position scaled by the adaptive weight when ``adaptive_r > 0``.
    """
    z = net(batch.x_t, batch.t, batch.t)
    target = embed_onehot(batch.x1_ids, z.shape[-1], dtype=z.data.dtype)
    ce = -(ad.log_softmax(z) * target).sum(axis=-1)
    if weights is None:
        weights = adaptive_weight(target, _softmax(z.data), cfg.adaptive_c, cfg.adaptive_r)
    weights = np.asarray(weights, dtype=z.data.dtype)
    mask = batch.loss_mask
    loss = _masked_mean(ce * weights, mask)
    return loss, {"weights": weights, "ce": float(ce.data[mask].mean()),
                  "weight_mean": float(weights[mask].mean())}


def diag_ce_loss(params: ModelParams, batch: InterpolantSample, cfg: LossConfig) -> LossReport:
    stats = {}

    def fn(net):
        loss, st = diag_ce_objective(net, batch, cfg)
        stats.update(st)
        return loss
    total, grad = loss_gradient(params, fn)
    return LossReport(total, {"diag": total, "ce": stats["ce"], "weight_mean": stats["weight_mean"]},
                      grad)


# -- progressive self-distillation ----------------------------------------

def psd_mixture_weight(s, u, t):
    """(u - s)(1 - t) / ((t - s)(1 - u)): makes X_{u,t} o X_{s,u} a single partial-denoiser step."""
    s, u, t = (np.asarray(v, dtype=np.float64) for v in (s, u, t))
    if np.any(~((0 <= s) & (s < u) & (u < t) & (t <= 1))):
        raise DomainError("mixture weight needs 0 <= s < u < t <= 1")
    out = (u - s) * (1 - t) / ((t - s) * (1 - u))
    return float(out) if out.ndim == 0 else out


def flow_step(x, pi, a_from, a_to):
    """x + (a_to - a_from) / (1 - a_from) (pi - x), levels per batch element."""
    a_from, a_to = _col(a_from), _col(a_to)
    return x + (a_to - a_from) / (1.0 - a_from) * (pi - x)


def pick_u(s, t, cfg: LossConfig, rng=None):
    if cfg.psd_u_rule == "midpoint":
        return 0.5 * (s + t)
    if rng is None:
        raise ConfigError("uniform u rule needs an rng")
    return s + (t - s) * (0.05 + 0.9 * rng.random(np.shape(s)))


def psd_target(denoiser, batch: InterpolantSample, t_end, u, schedule: ScheduleSpec,
               cfg: LossConfig):
    """Mixture of the two-step teacher legs; ``batch.t`` holds the start times s."""
    s = batch.t
    a_s, a_u, a_t = _levels(schedule, s), _levels(schedule, u), _levels(schedule, t_end)
    pi_su = denoiser(batch.x_t, s, u)
    y = flow_step(batch.x_t, pi_su, a_s, a_u)
    y = clamp_prefix(y.astype(batch.x_t.dtype), batch.x1_ids, batch.prefix_len)
    pi_ut = denoiser(y, u, t_end)
    if cfg.psd_alpha is not None:
        w = np.full_like(a_s, cfg.psd_alpha)
    else:
        w = psd_mixture_weight(a_s, a_u, a_t)
    w = _col(w)
    target = w * pi_su + (1 - w) * pi_ut
    if not np.all(np.isfinite(target)):
        bad = np.where(~np.all(np.isfinite(target), axis=(1, 2)))[0]
        raise NumericError(f"non-finite PSD target for batch rows {bad.tolist()} "
                           f"(s={s[bad].tolist()}, t={np.asarray(t_end)[bad].tolist()})")
    return target


def sd_objective(net, batch: InterpolantSample, t_end, target, cfg: LossConfig,
                 sample_mask=None, weights=None):
    """Divergence between a fixed target and the student pi_{s,t}(I_s)."""
    z = net(batch.x_t, batch.t, t_end)
    per_pos = _divergence_tensor(cfg.divergence, target.astype(z.data.dtype), z)
    if weights is None:
        if cfg.sd_adaptive:
            weights = adaptive_weight(target, _softmax(z.data), cfg.adaptive_c, cfg.adaptive_r)
        else:
            weights = np.ones(per_pos.shape)
    weights = np.asarray(weights, dtype=z.data.dtype)
    mask = batch.loss_mask if sample_mask is None else batch.loss_mask & sample_mask[:, None]
    if not mask.any():
        return ad.Tensor(np.zeros((), dtype=z.data.dtype)), {"weights": weights, "div": 0.0}
    loss = _masked_mean(per_pos * weights, mask)
    return loss, {"weights": weights, "div": float(per_pos.data[mask].mean())}


def _combined(params, diag_batch, sd_fn, cfg):
    stats = {}

    def fn(net):
        sd, st = sd_fn(net)
        stats["sd"] = float(sd.data)
        stats.update({k: v for k, v in st.items() if k != "weights"})
        total = cfg.sd_weight * sd
        if diag_batch is not None and cfg.diag_weight > 0:
            dl, dst = diag_ce_objective(net, diag_batch, cfg)
            stats["diag"] = float(dl.data)
            stats["weight_mean"] = dst["weight_mean"]
            total = total + cfg.diag_weight * dl
        return total
    total, grad = loss_gradient(params, fn)
    return total, grad, stats


def psd_loss(params: ModelParams, batch: InterpolantSample, t_end, schedule: ScheduleSpec,
             cfg: LossConfig, diag_batch: InterpolantSample | None = None, rng=None) -> LossReport:
    """PSD term (plus the diagonal term on ``diag_batch`` when given).

    ``batch`` carries I_s with ``batch.t = s``; ``t_end`` holds t per row.
    """
    t_end = np.asarray(t_end, dtype=np.float64)
    if np.any(t_end <= batch.t):
        raise DomainError("PSD pairs need s < t")
    u = pick_u(batch.t, t_end, cfg, rng)
    target = psd_target(ModelDenoiser(params), batch, t_end, u, schedule, cfg)
    total, grad, stats = _combined(
        params, diag_batch, lambda net: sd_objective(net, batch, t_end, target, cfg), cfg)
    return LossReport(total, stats, grad)


# -- Eulerian-logit self-distillation ------------------------------------

def esd_teacher(logits_fn, x, s, t, h: float, schedule: ScheduleSpec, material: bool = True,
                check_mask=None, x1_ids=None, prefix_len=None):
    """Finite-difference ESD teacher.

    Returns ``(T, valid)`` where ``valid[b]`` is False when the log argument
    ``(1 - t) - (1 - s)(t - s) delta`` is nonpositive anywhere in row b.  Time
    arguments are interpolation levels of the raw times; the derivative is
    taken per unit level, along the diagonal flow when ``material`` is set.
    """
    x = np.asarray(x)
    s = np.asarray(s, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if np.any(s >= t):
        raise DomainError("ESD teacher needs s < t")
    h = np.minimum(h, 0.5 * (t - s))
    a_s, a_t = _levels(schedule, s), _levels(schedule, t)
    z_st = logits_fn(x, s, t).astype(np.float64)
    z_ss = logits_fn(x, s, s).astype(np.float64)
    pi_st, pi_ss = _softmax(z_st), _softmax(z_ss)
    s2 = s + h
    a_s2 = _levels(schedule, s2)
    da = a_s2 - a_s
    x2 = flow_step(x, pi_ss, a_s, a_s2) if material else x
    if x1_ids is not None and prefix_len is not None:
        x2 = clamp_prefix(x2, x1_ids, prefix_len)
    z2 = logits_fn(x2.astype(x.dtype), s2, t).astype(np.float64)
    dz = (z2 - z_st) / _col(da)
    delta = dz - (pi_st * dz).sum(axis=-1, keepdims=True)
    arg = (1 - _col(a_t)) - (1 - _col(a_s)) * (_col(a_t) - _col(a_s)) * delta
    ok_pos = np.all(arg > 0, axis=-1)
    if check_mask is not None:
        ok_pos = ok_pos | ~check_mask
    valid = np.all(ok_pos, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        teacher = _softmax(np.where(arg > 0, z_ss - np.log(np.where(arg > 0, arg, 1.0)), z_ss))
    return teacher, valid


def esd_loss(params: ModelParams, batch: InterpolantSample, t_end, schedule: ScheduleSpec,
             cfg: LossConfig, diag_batch: InterpolantSample | None = None,
             strict: bool = False) -> LossReport:
    """ESD term; samples with an invalid teacher are skipped and counted."""
    t_end = np.asarray(t_end, dtype=np.float64)
    den = ModelDenoiser(params)
    teacher, valid = esd_teacher(den.logits, batch.x_t, batch.t, t_end, cfg.esd_fd_step,
                                 schedule, cfg.esd_material, check_mask=batch.loss_mask,
                                 x1_ids=batch.x1_ids, prefix_len=batch.prefix_len)
    skipped = int((~valid).sum())
    if strict and skipped:
        raise TeacherDomainError(f"{skipped} of {valid.size} ESD teachers left the log domain")
    total, grad, stats = _combined(
        params, diag_batch,
        lambda net: sd_objective(net, batch, t_end, teacher, cfg, sample_mask=valid), cfg)
    return LossReport(total, stats, grad,
                      counters={"teacher_domain_errors": skipped, "teacher_total": int(valid.size)})


# -- flow-map diagnostics -------------------------------------------------

class DenoiserFlowMap:
    """Flow map X_{s,t}(x) = x + (a_t - a_s) / (1 - a_s) (pi_{s,t}(x) - x) of a two-time denoiser."""

    def __init__(self, denoiser, schedule: ScheduleSpec):
        self.denoiser = denoiser
        self.schedule = schedule

    def flow_map(self, x, s, t):
        B = x.shape[0]
        s = np.broadcast_to(np.asarray(s, dtype=np.float64), (B,))
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
        pi = np.asarray(self.denoiser(x, s, t), dtype=np.float64)
        return flow_step(np.asarray(x, dtype=np.float64), pi, _levels(self.schedule, s),
                         _levels(self.schedule, t))

    def velocity(self, x, t):
        B = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
        a, adot = alpha(self.schedule, t)
        pi = np.asarray(self.denoiser(x, t, t), dtype=np.float64)
        return _col(adot) / (1.0 - _col(a)) * (pi - np.asarray(x, dtype=np.float64))


def make_probes(oracle, schedule: ScheduleSpec, n: int, rng, s_min: float = 0.05,
                t_max: float = 0.9):
    """Probe triples (x, s, t) with s_min <= s < t <= t_max and x = I_s from oracle data."""
    s = s_min + (t_max - s_min - 0.05) * rng.random(n)
    t = s + 0.05 + (t_max - s - 0.05) * rng.random(n)
    tokens = oracle.sample(n, rng)
    x1 = embed_onehot(tokens, oracle.V)
    x0 = rng.standard_normal(x1.shape)
    a = _col(_levels(schedule, s))
    return {"x": (1 - a) * x0 + a * x1, "s": s, "t": t}


def flowmap_residuals(flow, probes: dict, eta: float = 1e-3, drift=None) -> dict:
    """Mean-squared residuals of the flow-map identities at the probe points.

    ``flow`` exposes ``flow_map(x, s, t)`` and ``velocity(x, t)``.  Time
    derivatives are central differences with step ``eta`` (one-sided, second
    order, for the tangent check at t = s).  ``drift(x, t)`` is the reference
    velocity for the tangent check; it defaults to ``flow.velocity``.
    """
    x, s, t = (np.asarray(probes[k], dtype=np.float64) for k in ("x", "s", "t"))
    drift = flow.velocity if drift is None else drift
    X = flow.flow_map(x, s, t)

    dX_dt = (flow.flow_map(x, s, t + eta) - flow.flow_map(x, s, t - eta)) / (2 * eta)
    lagrangian = dX_dt - flow.velocity(X, t)

    u = 0.5 * (s + t)
    semigroup = flow.flow_map(flow.flow_map(x, s, u), u, t) - X

    dX_ds = (flow.flow_map(x, s + eta, t) - flow.flow_map(x, s - eta, t)) / (2 * eta)
    v = flow.velocity(x, s)
    transport = (flow.flow_map(x + eta * v, s, t) - flow.flow_map(x - eta * v, s, t)) / (2 * eta)
    eulerian = dX_ds + transport

    tangent_fd = (-3 * x + 4 * flow.flow_map(x, s, s + eta)
                  - flow.flow_map(x, s, s + 2 * eta)) / (2 * eta)
    tangent = tangent_fd - drift(x, s)

    diagonal = flow.flow_map(x, s, s) - x
    return {name: float(np.mean(r ** 2)) for name, r in
            (("lagrangian", lagrangian), ("semigroup", semigroup), ("eulerian", eulerian),
             ("tangent", tangent), ("diagonal", diagonal))}
