"""Metrics against synthetic corpora whose likelihood is known exactly."""

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError
from .oracle import OracleSpec
from .rng import as_generator, stream
from .sampler import SamplerConfig, euler_sample

CorpusSpec = OracleSpec

PENALTY_NATS = 10.0
PARETO_COLUMNS = ("model", "nfe", "mode", "oracle_ppl", "token_entropy", "empirical_kl",
                  "delta_ppl", "capped_tokens")


def gen_corpus(spec: CorpusSpec, n: int, rng) -> np.ndarray:
    if n < 1:
        raise ConfigError("n must be >= 1")
    return spec.sample(n, as_generator(rng))


def token_entropy(samples, V: int) -> float:
    """Entropy (nats) of the pooled unigram distribution of the samples."""
    samples = np.asarray(samples)
    if samples.size == 0:
        raise DomainError("no samples")
    p = np.bincount(samples.ravel(), minlength=V) / samples.size
    p = p[p > 0]
    return float(-(p * np.log(p)).sum()) + 0.0


@dataclass
class NllStats:
    nll_per_token: float
    std_err: float
    capped_tokens: int
    n_tokens: int

    @property
    def ppl(self):
        return math.exp(self.nll_per_token)


def scored_nll(samples, spec: CorpusSpec, start: int = 0) -> NllStats:
    """Per-token NLL of positions ``>= start`` under the exact process.

    Zero-probability tokens cost ``log V + 10`` nats each and are counted.
    """
    samples = np.asarray(samples)
    if samples.ndim != 2 or samples.shape[1] != spec.L:
        raise DomainError(f"samples must have shape (n, {spec.L})")
    lp = spec.token_logprobs(samples)[:, start:]
    bad = ~np.isfinite(lp)
    nll = np.where(bad, math.log(spec.V) + PENALTY_NATS, -lp)
    per_seq = nll.mean(axis=1)
    se = float(per_seq.std(ddof=1) / math.sqrt(len(per_seq))) if len(per_seq) > 1 else 0.0
    return NllStats(float(nll.mean()), se, int(bad.sum()), int(nll.size))


def oracle_ppl(samples, spec: CorpusSpec) -> float:
    return scored_nll(samples, spec).ppl


def empirical_kl(samples, spec: CorpusSpec) -> float:
    """KL(smoothed empirical joint || exact joint).

    The empirical side gets ``eps = 1 / (10 n)`` added to every cell the
    process supports, then is renormalised.  Samples outside the support
    make the divergence infinite.
    """
    samples = np.asarray(samples)
    n = samples.shape[0]
    if n < 1:
        raise DomainError("no samples")
    joint = spec.joint()
    counts = np.bincount(spec.state_index(samples), minlength=joint.size).astype(np.float64)
    support = joint > 0
    if np.any(counts[~support] > 0):
        return math.inf
    emp = counts / n + np.where(support, 1.0 / (10 * n), 0.0)
    emp /= emp.sum()
    m = emp > 0
    return max(float((emp[m] * (np.log(emp[m]) - np.log(joint[m]))).sum()), 0.0)


def _split_prefix(L: int, prefix_fraction: float) -> int:
    if not 0.0 < prefix_fraction < 1.0:
        raise ConfigError("prefix_fraction must lie in (0, 1)")
    if L < 2:
        raise DomainError("conditional completion needs L >= 2")
    return min(max(int(round(prefix_fraction * L)), 1), L - 1)


def delta_ppl(model, spec: CorpusSpec, prefix_fraction: float, config: SamplerConfig, n: int,
              rng) -> NllStats:
    """Completion perplexity: prompts from the process, completions from the sampler."""
    rng = as_generator(rng)
    k = _split_prefix(spec.L, prefix_fraction)
    prompts = spec.sample(n, rng)[:, :k]
    tokens, _ = euler_sample(model, config, rng, n=n, L=spec.L, V=spec.V, prompts=prompts)
    return scored_nll(tokens, spec, start=k)


def pareto_report(models: dict, nfe_grid, spec: CorpusSpec, config: SamplerConfig, n: int = 10_000,
                  seed: int = 0, prefix_fraction: float = 0.5, path=None):
    """One row per (model, nfe) with the exact-likelihood metrics; optional CSV."""
    rows = []
    for mi, (name, model) in enumerate(models.items()):
        for nfe in nfe_grid:
            cfg = SamplerConfig(nfe=nfe, mode=config.mode, schedule=config.schedule,
                                epsilon=config.epsilon)
            tokens, _ = euler_sample(model, cfg, stream(seed, "pareto", mi, nfe), n=n,
                                     L=spec.L, V=spec.V)
            gen = scored_nll(tokens, spec)
            row = {"model": name, "nfe": nfe, "mode": cfg.mode, "oracle_ppl": gen.ppl,
                   "token_entropy": token_entropy(tokens, spec.V),
                   "empirical_kl": empirical_kl(tokens, spec), "delta_ppl": math.nan,
                   "capped_tokens": gen.capped_tokens}
            if spec.L >= 2:
                cond = delta_ppl(model, spec, prefix_fraction, cfg, n,
                                 stream(seed, "pareto-cond", mi, nfe))
                row["delta_ppl"] = cond.ppl
                row["capped_tokens"] += cond.capped_tokens
            rows.append(row)
    if path is not None:
        write_csv(rows, path)
    return rows


def write_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=PARETO_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
