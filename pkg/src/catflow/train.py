"""Optimiser and the pretraining / distillation loops."""

import json
import math
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError
from .interpolant import make_interpolant_batch
from .losses import (DenoiserFlowMap, LossConfig, diag_ce_loss, esd_loss, flowmap_residuals,
                     psd_loss)
from .model import ModelDenoiser, ModelParams, save_checkpoint
from .oracle import OracleSpec
from .rng import stream
from .schedule import ScheduleSpec, TimePairDist, sample_time_pair

MAX_BAD_STEPS = 10
DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 200


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.0
    steps: int = 1000
    batch: int = 128
    grad_clip: float = 1.0
    decay: str = "cosine"

    def __post_init__(self):
        if self.lr <= 0 or self.steps < 0 or self.batch < 1:
            raise ConfigError("need lr > 0, steps >= 0 and batch >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.weight_decay < 0 or self.grad_clip < 0:
            raise ConfigError("weight_decay and grad_clip must be nonnegative")
        if self.decay not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr decay {self.decay!r}")

    def lr_at(self, step: int) -> float:
        if self.decay == "constant" or self.steps <= 1:
            return self.lr
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * step / self.steps))


class AdamW:
    """Adam moments with decoupled weight decay; state kept in float64."""

    def __init__(self, n: int, cfg: OptimConfig):
        self.cfg = cfg
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params: ModelParams, grad: np.ndarray, lr: float) -> float:
        cfg = self.cfg
        g = grad.astype(np.float64)
        norm = float(np.sqrt(g @ g))
        if cfg.grad_clip > 0 and norm > cfg.grad_clip:
            g *= cfg.grad_clip / norm
        self.t += 1
        self.m = cfg.beta1 * self.m + (1 - cfg.beta1) * g
        self.v = cfg.beta2 * self.v + (1 - cfg.beta2) * g * g
        m_hat = self.m / (1 - cfg.beta1 ** self.t)
        v_hat = self.v / (1 - cfg.beta2 ** self.t)
        theta = params.flat.astype(np.float64)
        theta -= lr * (m_hat / (np.sqrt(v_hat) + 1e-8) + cfg.weight_decay * theta)
        params.flat[:] = theta.astype(params.flat.dtype)
        params.version += 1
        return norm


class MetricsWriter:
    """Append-only JSONL sink; ``wall_ms`` is 0 unless wall-clock logging is on."""

    def __init__(self, path=None, wall_clock: bool = False):
        self.path = path
        self.wall_clock = wall_clock
        self.records = []
        self._t0 = time.perf_counter()
        if path is not None:
            open(path, "a").close()

    def log(self, step: int, **scalars):
        wall = int((time.perf_counter() - self._t0) * 1000) if self.wall_clock else 0
        rec = {"step": int(step), "wall_ms": wall}
        rec.update({k: (float(v) if isinstance(v, (float, np.floating)) else v)
                    for k, v in scalars.items()})
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


@dataclass
class RunResult:
    params: ModelParams
    status: str = "ok"
    steps_done: int = 0
    counters: dict = field(default_factory=dict)
    residuals: list = field(default_factory=list)


def _checkpoint(params, path, step, every):
    if path is not None and every > 0 and step > 0 and step % every == 0:
        save_checkpoint(params, path)


def train(params: ModelParams, corpus: OracleSpec, schedule: ScheduleSpec, loss_cfg: LossConfig,
          opt_cfg: OptimConfig, seed: int, prefix_p: float = 0.0, prefix_d: int = 1,
          metrics: MetricsWriter | None = None, checkpoint_path=None,
          checkpoint_every: int = 0) -> RunResult:
    """Diagonal cross-entropy pretraining; aborts after 10 non-finite steps in a row."""
    metrics = metrics or MetricsWriter()
    opt = AdamW(params.flat.size, opt_cfg)
    bad = 0
    for step in range(opt_cfg.steps):
        rng = stream(seed, "train", step)
        tokens = corpus.sample(opt_cfg.batch, rng)
        batch = make_interpolant_batch(tokens, corpus.V, schedule, rng, prefix_p=prefix_p,
                                       prefix_d=prefix_d, dtype=params.flat.dtype)
        try:
            report = diag_ce_loss(params, batch, loss_cfg)
        except NumericError as exc:
            bad += 1
            metrics.log(step, status="nonfinite", error=str(exc))
            if bad >= MAX_BAD_STEPS:
                raise NumericError(f"{bad} consecutive non-finite steps, last at step {step}: "
                                   f"{exc}") from None
            continue
        bad = 0
        lr = opt_cfg.lr_at(step)
        gnorm = opt.step(params, report.grad, lr)
        metrics.log(step, loss=report.total, diag=report.terms["diag"],
                    weight_mean=report.terms["weight_mean"], grad_norm=gnorm, lr=lr)
        _checkpoint(params, checkpoint_path, step + 1, checkpoint_every)
    if checkpoint_path is not None:
        save_checkpoint(params, checkpoint_path)
    return RunResult(params, "ok", opt_cfg.steps)


def distill(params: ModelParams, corpus: OracleSpec, schedule: ScheduleSpec,
            loss_cfg: LossConfig, opt_cfg: OptimConfig, pair_dist: TimePairDist, method: str,
            seed: int, prefix_p: float = 0.0, prefix_d: int = 1,
            metrics: MetricsWriter | None = None, checkpoint_path=None,
            checkpoint_every: int = 0, probes: dict | None = None,
            residual_every: int = 0) -> RunResult:
    """PSD or ESD self-distillation with a diagonal term on an independent time draw.

    Halts with status ``diverged`` when the loss stays above ten times its
    trailing median for 200 consecutive steps, restoring the parameters from
    just before that run began.
    """
    if method not in ("psd", "esd"):
        raise ConfigError(f"unknown distillation method {method!r}")
    metrics = metrics or MetricsWriter()
    opt = AdamW(params.flat.size, opt_cfg)
    history = deque(maxlen=DIVERGENCE_PATIENCE)
    streak, last_good = 0, params.copy()
    counters = {"teacher_domain_errors": 0, "teacher_total": 0}
    residuals = []
    status = "ok"
    step = 0

    def record_residuals(at):
        if probes is not None and residual_every > 0 and at % residual_every == 0:
            res = flowmap_residuals(DenoiserFlowMap(ModelDenoiser(params), schedule), probes)
            residuals.append({"step": at, **res})
            metrics.log(at, **{"residual_" + k: v for k, v in res.items()})

    record_residuals(0)
    for step in range(opt_cfg.steps):
        rng = stream(seed, "distill", step)
        tokens = corpus.sample(opt_cfg.batch, rng)
        s, t = sample_time_pair(pair_dist, step, rng, size=opt_cfg.batch)
        sd_batch = make_interpolant_batch(tokens, corpus.V, schedule, rng, t=s,
                                          prefix_p=prefix_p, prefix_d=prefix_d,
                                          dtype=params.flat.dtype)
        diag_batch = make_interpolant_batch(tokens, corpus.V, schedule, rng, prefix_p=prefix_p,
                                            prefix_d=prefix_d, dtype=params.flat.dtype)
        if method == "psd":
            report = psd_loss(params, sd_batch, t, schedule, loss_cfg, diag_batch, rng=rng)
        else:
            report = esd_loss(params, sd_batch, t, schedule, loss_cfg, diag_batch)
            for k in counters:
                counters[k] += report.counters[k]
        lr = opt_cfg.lr_at(step)

        median = float(np.median(history)) if len(history) >= 10 else math.inf
        if report.total > DIVERGENCE_FACTOR * median:
            streak += 1
        else:
            streak = 0
            last_good = params.copy()
        if streak >= DIVERGENCE_PATIENCE:
            status = "diverged"
            params.flat[:] = last_good.flat
            params.version = last_good.version
            metrics.log(step, status=status, loss=report.total, trailing_median=median)
            break
        history.append(report.total)

        gnorm = opt.step(params, report.grad, lr)
        extra = {k: v for k, v in report.counters.items()}
        metrics.log(step, loss=report.total, grad_norm=gnorm, lr=lr,
                    **{k: v for k, v in report.terms.items() if isinstance(v, float)}, **extra)
        _checkpoint(params if status == "ok" else last_good, checkpoint_path, step + 1,
                    checkpoint_every)
        record_residuals(step + 1)
    if checkpoint_path is not None:
        save_checkpoint(params, checkpoint_path)
    return RunResult(params, status, step + 1 if status == "ok" else step, counters, residuals)
