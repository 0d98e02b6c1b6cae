"""Exact ground truth for small factorized categorical data.

Data are one-hot sequences drawn from either an iid categorical (every
position has the same probabilities) or a first-order Markov chain.  Under
the Gaussian prior the interpolant I_t = (1 - a) x0 + a e_x has a closed-form
endpoint posterior, which gives the exact drift, the exact flow and, by
integration, the exact two-time flow map.
"""

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import CapacityError, ConfigError, DomainError, FormatError, SingularTimeError
from .rng import as_generator
from .schedule import ScheduleSpec, alpha

MAX_ENUMERATION = 2 ** 20


def _check_probs(p, what):
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or np.any(~np.isfinite(p)):
        raise ConfigError(f"{what} has negative or non-finite entries")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-12):
        raise ConfigError(f"{what} rows must sum to 1 within 1e-12")
    return p


def _safe_log(p):
    with np.errstate(divide="ignore"):
        return np.log(p)


@dataclass(frozen=True, eq=False)
class OracleSpec:
    """Known data distribution over V^L.

    ``kind='iid'`` uses ``probs`` for every position; ``kind='markov'`` draws
    the first token from ``init`` and the rest through ``trans[prev, next]``.
    """

    kind: str
    L: int
    V: int
    probs: np.ndarray | None = None
    init: np.ndarray | None = None
    trans: np.ndarray | None = None
    _states: np.ndarray | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.L < 1 or self.V < 2:
            raise ConfigError("oracle needs L >= 1 and V >= 2")
        if self.kind == "iid":
            p = _check_probs(self.probs, "probs")
            if p.shape != (self.V,):
                raise ConfigError("iid probs must have length V")
            object.__setattr__(self, "probs", p)
        elif self.kind == "markov":
            init = _check_probs(self.init, "init")
            trans = _check_probs(self.trans, "transition matrix")
            if init.shape != (self.V,) or trans.shape != (self.V, self.V):
                raise ConfigError("markov spec needs init (V,) and trans (V, V)")
            object.__setattr__(self, "init", init)
            object.__setattr__(self, "trans", trans)
        else:
            raise ConfigError(f"unknown oracle kind {self.kind!r}")

    @classmethod
    def iid(cls, probs, L=1):
        probs = np.asarray(probs, dtype=np.float64)
        return cls("iid", L, probs.size, probs=probs)

    @classmethod
    def markov(cls, init, trans, L):
        init = np.asarray(init, dtype=np.float64)
        return cls("markov", L, init.size, init=init, trans=np.asarray(trans, dtype=np.float64))

    # -- likelihoods -----------------------------------------------------

    def token_logprobs(self, tokens) -> np.ndarray:
        """Per-position conditional log-probabilities, shape like ``tokens``."""
        tok = np.asarray(tokens)
        if tok.size and (tok.min() < 0 or tok.max() >= self.V):
            raise DomainError("token id out of range")
        if self.kind == "iid":
            return _safe_log(self.probs[tok])
        out = np.empty(tok.shape, dtype=np.float64)
        out[..., 0] = _safe_log(self.init[tok[..., 0]])
        if tok.shape[-1] > 1:
            out[..., 1:] = _safe_log(self.trans[tok[..., :-1], tok[..., 1:]])
        return out

    def log_prob(self, tokens):
        return self.token_logprobs(tokens).sum(axis=-1)

    def marginals(self) -> np.ndarray:
        """(L, V) per-position marginal distributions."""
        if self.kind == "iid":
            return np.tile(self.probs, (self.L, 1))
        out = np.empty((self.L, self.V))
        out[0] = self.init
        for i in range(1, self.L):
            out[i] = out[i - 1] @ self.trans
        return out

    def entropy_per_token(self) -> float:
        """Exact joint entropy H(X_1..X_L) divided by L."""
        def h(p):
            p = p[p > 0]
            return float(-(p * np.log(p)).sum())
        if self.kind == "iid":
            return h(self.probs)
        marg = self.marginals()
        total = h(self.init)
        row_h = np.array([h(r) for r in self.trans])
        for i in range(1, self.L):
            total += float(marg[i - 1] @ row_h)
        return total / self.L

    # -- enumeration -----------------------------------------------------

    @property
    def n_states(self) -> int:
        return self.V ** self.L

    def states(self) -> np.ndarray:
        """All V^L sequences in lexicographic (base-V) order, shape (V^L, L)."""
        if self.n_states > MAX_ENUMERATION:
            raise CapacityError(f"V^L = {self.n_states} exceeds {MAX_ENUMERATION}")
        if self._states is None:
            st = np.array(list(itertools.product(range(self.V), repeat=self.L)), dtype=np.int64)
            object.__setattr__(self, "_states", st)
        return self._states

    def joint(self) -> np.ndarray:
        return np.exp(self.log_prob(self.states()))

    def state_index(self, tokens) -> np.ndarray:
        tok = np.asarray(tokens)
        weights = self.V ** np.arange(self.L - 1, -1, -1)
        return tok @ weights

    def sample(self, n: int, rng) -> np.ndarray:
        rng = as_generator(rng)
        if self.kind == "iid":
            return rng.choice(self.V, size=(n, self.L), p=self.probs)
        out = np.empty((n, self.L), dtype=np.int64)
        out[:, 0] = rng.choice(self.V, size=n, p=self.init)
        cdf = np.cumsum(self.trans, axis=1)
        cdf[:, -1] = 1.0
        for i in range(1, self.L):
            u = rng.random(n)
            out[:, i] = (u[:, None] > cdf[out[:, i - 1]]).sum(axis=1)
        return out

    # -- posterior -------------------------------------------------------

    def posterior(self, x, level, observed=None) -> np.ndarray:
        """E[x1 | I = x] at interpolation level ``level`` for batched x (B, L, V).

        ``observed`` (B, L) marks rows that hold a known clean token (a clamped
        prompt) rather than a noisy interpolant; the posterior conditions on them.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            obs = None if observed is None else np.asarray(observed)[None]
            return self.posterior(x[None], level, obs)[0]
        B = x.shape[0]
        a = np.broadcast_to(np.asarray(level, dtype=np.float64), (B,))
        if np.any(a < 0) or np.any(a > 1):
            raise DomainError("interpolation level must lie in [0, 1]")
        if self.kind == "iid":
            out = np.empty_like(x)
            inner = a < 1.0
            if inner.any():
                out[inner] = exact_posterior(x[inner], a[inner, None, None], self.probs)
            if (~inner).any():
                out[~inner] = _argmax_limit(x[~inner], self.probs)
            if observed is not None:
                out = np.where(np.asarray(observed)[..., None], x, out)
            return out
        return self._joint_posterior(x, a, observed)

    def _joint_posterior(self, x, a, observed=None):
        st = self.states()
        logp = np.broadcast_to(self.log_prob(st), (x.shape[0], len(st)))
        if observed is not None:
            # states disagreeing with an observed token get zero weight
            obs = np.asarray(observed, dtype=bool)
            seen = x.argmax(-1)
            clash = (obs[:, None, :] & (st[None] != seen[:, None, :])).any(-1)
            logp = np.where(clash, -np.inf, logp)
        # gathered[b, n, i] = x[b, i, st[n, i]]
        gathered = x[:, np.arange(self.L)[None, :], st]
        lin = gathered.sum(axis=2)
        out = np.zeros_like(x)
        inner = a < 1.0
        if inner.any():
            ai = a[inner][:, None]
            scores = logp[inner] + (ai * lin[inner] - self.L * ai ** 2 / 2) / (1 - ai) ** 2
            w = np.exp(scores - logsumexp(scores, axis=1, keepdims=True))
            out[inner] = self._scatter(w, st)
        if (~inner).any():
            sc = np.where(np.isfinite(logp[~inner]), lin[~inner], -np.inf)
            top = sc.max(axis=1, keepdims=True)
            w = (sc >= top - 1e-12).astype(np.float64)
            w /= w.sum(axis=1, keepdims=True)
            out[~inner] = self._scatter(w, st)
        return out

    def _scatter(self, w, st):
        onehots = np.eye(self.V)[st]           # (N, L, V)
        return np.einsum("bn,nlv->blv", w, onehots)

    # -- text serialisation ---------------------------------------------

    def to_text(self) -> str:
        lines = [f"kind = {self.kind}", f"L = {self.L}", f"V = {self.V}"]
        fmt = lambda row: " ".join(repr(float(v)) for v in row)
        if self.kind == "iid":
            lines.append(f"probs = {fmt(self.probs)}")
        else:
            lines.append(f"init = {fmt(self.init)}")
            lines.extend(f"trans = {fmt(row)}" for row in self.trans)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str):
        fields, trans = {}, []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"line {lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key == "trans":
                trans.append([float(v) for v in val.split()])
            else:
                fields[key] = val
        try:
            kind, L = fields["kind"], int(fields["L"])
            if kind == "iid":
                return cls.iid([float(v) for v in fields["probs"].split()], L)
            return cls.markov([float(v) for v in fields["init"].split()], trans, L)
        except KeyError as exc:
            raise FormatError(f"oracle block missing field {exc}") from None


def exact_posterior(x, alpha_level, p) -> np.ndarray:
    """softmax_k[log p_k + (a x_k - a^2 / 2) / (1 - a)^2] along the last axis."""
    a = np.asarray(alpha_level, dtype=np.float64)
    if np.any(a >= 1.0):
        raise SingularTimeError("posterior is singular at alpha = 1")
    if np.any(a < 0.0):
        raise DomainError("alpha must be nonnegative")
    x = np.asarray(x, dtype=np.float64)
    logits = _safe_log(np.asarray(p, dtype=np.float64)) + (a * x - a * a / 2) / (1 - a) ** 2
    logits = logits - logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=-1, keepdims=True)


def _argmax_limit(x, p):
    sc = np.where(np.asarray(p)[None, None, :] > 0, x, -np.inf)
    w = (sc >= sc.max(axis=-1, keepdims=True) - 1e-12).astype(np.float64)
    return w / w.sum(axis=-1, keepdims=True)


def exact_drift(x, t, spec: ScheduleSpec, oracle: OracleSpec):
    """Raw-time drift a'(t) (E[x1 | I_t = x] - x) / (1 - a_t)."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr >= 1.0):
        raise SingularTimeError("drift is singular at t = 1")
    a, adot = alpha(spec, t_arr)
    x = np.asarray(x, dtype=np.float64)
    post = oracle.posterior(x, a)
    a = np.asarray(a).reshape(np.shape(a) + (1,) * (x.ndim - np.ndim(a)))
    adot = np.asarray(adot).reshape(a.shape)
    return adot * (post - x) / (1.0 - a)


class OracleDenoiser:
    """Exact denoiser exposed through the model interface ``(x, s, t) -> probs``.

    The two-time arguments are collapsed onto ``s``: the oracle is the exact
    flow (``pi_{s,s}``), not a flow map.  Rows sitting exactly on a simplex
    vertex are read as clamped prompt tokens and conditioned on; a noisy
    interpolant row lands on a vertex with probability zero.
    """

    def __init__(self, oracle: OracleSpec, schedule: ScheduleSpec):
        self.oracle = oracle
        self.schedule = schedule
        self.calls = 0

    def __call__(self, x, s, t):
        self.calls += 1
        B = x.shape[0]
        a, _ = alpha(self.schedule, np.broadcast_to(np.asarray(s, dtype=np.float64), (B,)))
        x = np.asarray(x, dtype=np.float64)
        vertex = np.all((x == 0.0) | (x == 1.0), axis=-1) & (x.sum(axis=-1) == 1.0)
        return self.oracle.posterior(x, a, vertex if vertex.any() else None)

    def logits(self, x, s, t):
        return _safe_log(self(x, s, t))


def _level_of(schedule, t, B):
    a, _ = alpha(schedule, np.broadcast_to(np.asarray(t, dtype=np.float64), (B,)))
    return np.asarray(a, dtype=np.float64)


def integrate_levels(x, a_start, a_end, oracle: OracleSpec, n_steps: int, method="rk4"):
    """Integrate dx/da = (pi(x, a) - x) / (1 - a) from per-sample a_start to a_end < 1.

    Uses a fixed number of equal steps per sample, so the result is smooth in
    the endpoints (important for finite-difference derivatives).
    """
    x = np.array(x, dtype=np.float64)
    a0 = np.asarray(a_start, dtype=np.float64).reshape(-1, 1, 1)
    a1 = np.asarray(a_end, dtype=np.float64).reshape(-1, 1, 1)
    if np.any(a1 >= 1.0):
        raise SingularTimeError("integration must stop short of level 1")
    h = (a1 - a0) / n_steps

    def f(y, a):
        return (oracle.posterior(y, a.reshape(-1)) - y) / (1.0 - a)

    a = a0.copy()
    for _ in range(n_steps):
        if method == "euler":
            x = x + h / (1.0 - a) * (oracle.posterior(x, a.reshape(-1)) - x)
        elif method == "rk4":
            k1 = f(x, a)
            k2 = f(x + 0.5 * h * k1, a + 0.5 * h)
            k3 = f(x + 0.5 * h * k2, a + 0.5 * h)
            k4 = f(x + h * k3, a + h)
            x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        else:
            raise ConfigError(f"unknown integrator {method!r}")
        a = a + h
    return x


def reference_flow(x0, spec: ScheduleSpec, oracle: OracleSpec, n_steps: int,
                   eps: float = 1e-3, method: str = "euler"):
    """Push prior draws to the data endpoint along the exact flow.

    Uniform raw-time grid on [0, 1 - eps]; the step acts on interpolation
    levels (``x += (a' - a) / (1 - a) (pi - x)`` for Euler, classical RK4 on
    ``dx/da`` otherwise), and the last move jumps onto the denoiser output.
    """
    if n_steps < 1:
        raise ConfigError("n_steps must be >= 1")
    x = np.array(x0, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    B = x.shape[0]
    times = np.linspace(0.0, 1.0 - eps, n_steps + 1)
    levels, _ = alpha(spec, times)
    for i in range(n_steps):
        x = integrate_levels(x, np.full(B, levels[i]), np.full(B, levels[i + 1]),
                             oracle, 1, method=method)
    x = oracle.posterior(x, np.full(B, levels[-1]))
    return x[0] if squeeze else x


class OracleFlowMap:
    """Exact two-time flow map X*_{s,t} by fixed-step RK4 in level space."""

    def __init__(self, oracle: OracleSpec, schedule: ScheduleSpec, n_steps: int = 256,
                 eps: float = 1e-3):
        self.oracle = oracle
        self.schedule = schedule
        self.n_steps = n_steps
        self.eps = eps
        self.calls = 0

    def flow_map(self, x, s, t):
        x = np.asarray(x, dtype=np.float64)
        B = x.shape[0]
        return self._map_levels(x, _level_of(self.schedule, s, B), _level_of(self.schedule, t, B))

    def velocity(self, x, t):
        return exact_drift(x, np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],)),
                           self.schedule, self.oracle)

    def _map_levels(self, x, a_s, a_t):
        if np.any(a_t < a_s):
            raise DomainError("flow map needs s <= t")
        end = np.maximum(np.minimum(a_t, 1.0 - self.eps), a_s)
        y = integrate_levels(x, a_s, end, self.oracle, self.n_steps)
        done = a_t >= 1.0 - self.eps
        if done.any():
            y[done] = self.oracle.posterior(y[done], end[done])
        return y

    def __call__(self, x, s, t):
        """Exact partial denoiser pi*_{s,t}; reduces to the posterior at s = t."""
        self.calls += 1
        x = np.asarray(x, dtype=np.float64)
        B = x.shape[0]
        a_s, a_t = _level_of(self.schedule, s, B), _level_of(self.schedule, t, B)
        out = np.empty_like(x)
        diag = a_t - a_s < 1e-12
        if diag.any():
            out[diag] = self.oracle.posterior(x[diag], a_s[diag])
        off = ~diag
        if off.any():
            xs, bs, bt = x[off], a_s[off], a_t[off]
            y = self._map_levels(xs, bs, bt)
            bs, bt = bs[:, None, None], bt[:, None, None]
            out[off] = ((1 - bs) * y - (1 - bt) * xs) / (bt - bs)
        out = np.clip(out, 0.0, None)
        return out / out.sum(axis=-1, keepdims=True)

    def logits(self, x, s, t):
        return np.log(np.maximum(self(x, s, t), 1e-300))


def enumerate_likelihood(oracle: OracleSpec, tokens) -> float:
    """Exact log p_data(tokens); -inf for a zero-probability sequence."""
    tok = np.asarray(tokens)
    if tok.ndim != 1 or tok.size != oracle.L:
        raise DomainError(f"expected a length-{oracle.L} token sequence")
    return float(oracle.log_prob(tok))


def mc_model_likelihood(flow, category, n_samples: int, rng, V: int | None = None):
    """Monte Carlo estimate of p(category) under argmax decoding of a flow.

    ``flow`` maps a batch of prior draws (n, L, V) to endpoints.  Returns the
    match proportion and its binomial standard error.
    """
    if n_samples < 1000:
        raise ConfigError("n_samples must be at least 1e3")
    cat = np.asarray(category)
    if V is None:
        V = getattr(flow, "V", None)
    if V is None:
        raise ConfigError("vocabulary size unknown; pass V")
    rng = as_generator(rng)
    x0 = rng.standard_normal((n_samples, cat.size, V))
    end = flow(x0)
    hits = np.all(np.argmax(end, axis=-1) == cat[None, :], axis=-1)
    est = float(hits.mean())
    return est, math.sqrt(est * (1.0 - est) / n_samples)
