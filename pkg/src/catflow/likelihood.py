"""Monte Carlo estimates of the semi-discrete likelihood bound and MCQA ranking.

The bound on ``-log p(tokens)`` has two parts:

    diffusion       E_t [ 2 a'_t a_t / (1 - a_t)^3 * CE(e_x, pi_{t,t}(I_t)) ],  t ~ U[0, 1]
    reconstruction  CE(e_x, pi_{1,1}(e_x))

The time integral is truncated at ``t_max`` and estimated with stratified
uniform times, one prior draw per replicate shared by every position.
"""

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, DomainError
from .interpolant import clamp_prefix, embed_onehot
from .rng import as_generator
from .schedule import ScheduleSpec, alpha

LOG_FLOOR = 1e-300


@dataclass
class ElboEstimate:
    value: float
    std_err: float
    n_mc: int
    t_max: float
    diffusion: float
    reconstruction: float

    @property
    def terms(self):
        return {"diffusion": self.diffusion, "reconstruction": self.reconstruction}


def elbo_weight(spec: ScheduleSpec, t):
    """2 a'_t a_t / (1 - a_t)^3."""
    a, adot = alpha(spec, t)
    a, adot = np.asarray(a), np.asarray(adot)
    with np.errstate(divide="ignore", invalid="ignore"):
        return 2.0 * adot * a / (1.0 - a) ** 3


def _ce(probs, tokens, score):
    picked = np.take_along_axis(probs, tokens[..., None], axis=-1)[..., 0]
    return -(np.log(np.maximum(picked, LOG_FLOOR)) * score).sum(axis=-1)


def elbo(model, tokens, spec: ScheduleSpec, n_mc: int = 256, t_max: float = 1 - 1e-3,
         rng=0, prompt_len: int = 0, V: int | None = None, chunk: int = 4096) -> ElboEstimate:
    """Estimate the bound for one sequence; prompt rows stay clean and are not scored."""
    if n_mc < 16:
        raise ConfigError("n_mc must be at least 16")
    if not 0.0 < t_max < 1.0:
        raise ConfigError("t_max must lie in (0, 1)")
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    L = tokens.size
    V = V or getattr(model, "V", None)
    if V is None:
        raise ConfigError("vocabulary size unknown; pass V")
    if not 0 <= prompt_len < L:
        raise DomainError("prompt must leave at least one scored position")
    rng = as_generator(rng)
    w_end = elbo_weight(spec, t_max)
    if not np.isfinite(w_end):
        raise DomainError(f"t_max={t_max} gives a non-finite weight")

    t = t_max * (np.arange(n_mc) + rng.random(n_mc)) / n_mc
    x0 = rng.standard_normal((n_mc, L, V))
    x1 = embed_onehot(tokens, V)
    score = (np.arange(L) >= prompt_len).astype(np.float64)
    ids = np.broadcast_to(tokens, (n_mc, L))
    plen = np.full(n_mc, prompt_len)
    a, _ = alpha(spec, t)
    weights = elbo_weight(spec, t)

    contrib = np.empty(n_mc)
    for lo in range(0, n_mc, chunk):
        hi = min(lo + chunk, n_mc)
        a_col = a[lo:hi, None, None]
        x_t = (1.0 - a_col) * x0[lo:hi] + a_col * x1
        x_t = clamp_prefix(x_t, ids[lo:hi], plen[lo:hi])
        probs = np.asarray(model(x_t, t[lo:hi], t[lo:hi]), dtype=np.float64)
        contrib[lo:hi] = t_max * weights[lo:hi] * _ce(probs, ids[lo:hi], score)
    if not np.all(np.isfinite(contrib)):
        raise DomainError("non-finite diffusion integrand; lower t_max")

    clean = x1[None]
    recon_probs = np.asarray(model(clean, np.ones(1), np.ones(1)), dtype=np.float64)
    recon = float(_ce(recon_probs, tokens[None], score)[0]) + 0.0
    diffusion = float(contrib.mean())
    se = float(contrib.std(ddof=1) / math.sqrt(n_mc))
    return ElboEstimate(value=diffusion + recon, std_err=se, n_mc=n_mc, t_max=t_max,
                        diffusion=diffusion, reconstruction=recon)


def mcqa_score(model, prompt, options, spec: ScheduleSpec, n_mc: int = 256, rng=0,
               t_max: float = 1 - 1e-3, V: int | None = None):
    """Rank options by their bound, lowest first; ties keep listing order.

    Every option is scored with the same seed (common random numbers), so the
    score of an option does not depend on where it appears in the list.
    Returns ``(order, scores)``.
    """
    if len(options) < 2:
        raise ConfigError("need at least two options")
    prompt = [int(v) for v in prompt]
    seed = rng if isinstance(rng, (int, np.integer)) else int(as_generator(rng).integers(2**63))
    scores = []
    for opt in options:
        if len(opt) == 0:
            raise ConfigError("empty option")
        seq = np.array(prompt + [int(v) for v in opt], dtype=np.int64)
        est = elbo(model, seq, spec, n_mc, t_max, np.random.default_rng(seed),
                   prompt_len=len(prompt), V=V)
        scores.append(est.value)
    order = sorted(range(len(options)), key=lambda i: (scores[i], i))
    return order, scores


def elbo_record(tokens, est: ElboEstimate) -> str:
    rec = {"tokens": [int(v) for v in tokens]}
    rec.update({k: v for k, v in asdict(est).items()})
    return json.dumps(rec, sort_keys=True)
