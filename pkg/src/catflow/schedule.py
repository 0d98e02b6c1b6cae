"""Interpolation schedules and time samplers.

A schedule maps raw time ``t`` to an interpolation level ``alpha_t`` with
``alpha_0 = 0`` and ``alpha_1 = 1``.  Three kinds are supported:

* ``linear``          alpha_t = t
* ``error_decoding``  alpha_t = gamma_t, where gamma makes the argmax decode
                      error of the interpolant fall linearly in t
* ``mixture``         alpha_t = (1 - lam) t + lam gamma_t
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import isotonic_regression

from .errors import ConfigError, DomainError, FormatError
from .rng import as_generator

KINDS = ("linear", "error_decoding", "mixture")


@dataclass(frozen=True, eq=False)
class GammaTable:
    """Table of (t, gamma_t) pairs, read back as a monotone cubic Hermite curve.

    Node slopes are central differences of the table; the Hermite curve through
    them makes ``derivative`` the exact derivative of ``value``.
    """

    t: np.ndarray
    gamma: np.ndarray
    slope: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        t = np.array(self.t, dtype=np.float64)
        g = np.array(self.gamma, dtype=np.float64)
        if t.ndim != 1 or t.shape != g.shape or t.size < 2:
            raise ConfigError("gamma table needs two matching 1-d columns")
        if np.any(np.diff(t) <= 0) or t[0] != 0.0 or t[-1] != 1.0:
            raise ConfigError("gamma table t-grid must increase from 0 to 1")
        if np.any(np.diff(g) < 0) or g.min() < 0.0 or g.max() > 1.0:
            raise ConfigError("gamma values must be nondecreasing and within [0, 1]")
        if g[0] != 0.0 or g[-1] != 1.0:
            raise ConfigError("gamma table must satisfy gamma_0 = 0 and gamma_1 = 1")
        # central differences at interior nodes, one-sided at the ends
        slope = np.gradient(g, t)
        secant = np.diff(g) / np.diff(t)
        # Fritsch-Carlson cap keeps the Hermite curve monotone
        cap = 3.0 * np.minimum(np.r_[secant, np.inf], np.r_[np.inf, secant])
        slope = np.minimum(slope, cap)
        for arr in (t, g, slope):
            arr.flags.writeable = False
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "slope", slope)

    def _hermite(self, t):
        t = np.asarray(t, dtype=np.float64)
        i = np.clip(np.searchsorted(self.t, t, side="right") - 1, 0, self.t.size - 2)
        h = self.t[i + 1] - self.t[i]
        u = (t - self.t[i]) / h
        return i, h, u

    def value(self, t):
        i, h, u = self._hermite(t)
        g0, g1 = self.gamma[i], self.gamma[i + 1]
        m0, m1 = self.slope[i] * h, self.slope[i + 1] * h
        u2, u3 = u * u, u * u * u
        out = ((2 * u3 - 3 * u2 + 1) * g0 + (u3 - 2 * u2 + u) * m0
               + (-2 * u3 + 3 * u2) * g1 + (u3 - u2) * m1)
        return np.clip(out, 0.0, 1.0)

    def derivative(self, t):
        i, h, u = self._hermite(t)
        g0, g1 = self.gamma[i], self.gamma[i + 1]
        m0, m1 = self.slope[i] * h, self.slope[i + 1] * h
        u2 = u * u
        out = ((6 * u2 - 6 * u) * g0 + (3 * u2 - 4 * u + 1) * m0
               + (-6 * u2 + 6 * u) * g1 + (3 * u2 - 2 * u) * m1)
        return out / h

    def save(self, path):
        with open(path, "w") as fh:
            for ti, gi in zip(self.t, self.gamma):
                fh.write(f"{float(ti)!r} {float(gi)!r}\n")

    @classmethod
    def load(cls, path):
        rows = []
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise FormatError(f"{path}:{lineno}: expected two columns")
            try:
                rows.append((float(parts[0]), float(parts[1])))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
        if not rows:
            raise FormatError(f"{path}: empty gamma table")
        t, g = zip(*rows)
        return cls(np.array(t), np.array(g))

    def __eq__(self, other):
        return (isinstance(other, GammaTable)
                and np.array_equal(self.t, other.t)
                and np.array_equal(self.gamma, other.gamma))

    __hash__ = None


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str = "linear"
    lam: float = 0.0
    gamma_table: GammaTable | None = None
    vocab_size: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"mixture weight must lie in [0, 1], got {self.lam}")

    @property
    def weight(self) -> float:
        """Effective weight on the gamma table."""
        return {"linear": 0.0, "error_decoding": 1.0, "mixture": self.lam}[self.kind]

    def __call__(self, t):
        return alpha(self, t)


def alpha(spec: ScheduleSpec, t):
    """Return ``(alpha_t, d alpha_t / dt)``; works on scalars and arrays."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(~np.isfinite(t_arr)) or np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
        raise DomainError("schedule time must lie in [0, 1]")
    lam = spec.weight
    if lam == 0.0:
        value, deriv = t_arr.copy(), np.ones_like(t_arr)
    else:
        if spec.gamma_table is None:
            raise ConfigError(f"schedule kind {spec.kind!r} requires a gamma table")
        g = spec.gamma_table
        value = (1.0 - lam) * t_arr + lam * g.value(t_arr)
        deriv = (1.0 - lam) + lam * g.derivative(t_arr)
        # pin endpoints exactly
        value = np.where(t_arr == 0.0, 0.0, np.where(t_arr == 1.0, 1.0, value))
    if np.ndim(t) == 0:
        return float(value), float(deriv)
    return value, deriv


def alpha_inverse(spec: ScheduleSpec, level):
    """Raw time whose interpolation level equals ``level`` (bisection-free, via a dense grid)."""
    level = np.asarray(level, dtype=np.float64)
    if spec.weight == 0.0:
        return level
    grid = np.linspace(0.0, 1.0, 8193)
    if spec.gamma_table is not None:
        grid = np.union1d(grid, spec.gamma_table.t)
    vals, _ = alpha(spec, grid)
    return np.interp(level, vals, grid)


def decode_error_curve(diff_max: np.ndarray, a_grid: np.ndarray) -> np.ndarray:
    """Error probability on ``a_grid`` given ``max_{j != k} x0_j - x0_k`` samples.

    ``argmax((1-a) x0 + a e_k) != k`` iff ``max_{j!=k} x0_j - x0_k > a / (1-a)``.
    """
    err = np.empty_like(a_grid)
    for i, a in enumerate(a_grid):
        if a >= 1.0:
            err[i] = 0.0
        else:
            err[i] = np.mean(diff_max > a / (1.0 - a))
    return err


def margin_samples(vocab_size: int, n: int, rng) -> np.ndarray:
    rng = as_generator(rng)
    x0 = rng.standard_normal((n, vocab_size))
    k = rng.integers(0, vocab_size, size=n)
    rows = np.arange(n)
    xk = x0[rows, k]
    x0[rows, k] = -np.inf
    return x0.max(axis=1) - xk


def tabulate_error_decoding(vocab_size: int, grid_points: int = 64,
                            mc_samples: int = 100_000, rng=0) -> GammaTable:
    """Monte Carlo tabulation of the error-decoding schedule gamma.

    Estimates e(a) = P(argmax((1-a) x0 + a e_k) != k) on a uniform grid of
    levels, forces it monotone with isotonic regression and inverts
    ``gamma_t = e^{-1}((1 - t) e(0))`` on a uniform t-grid.
    """
    if vocab_size < 2:
        raise DomainError("error-decoding schedule is degenerate for fewer than 2 categories")
    if grid_points < 8:
        raise ConfigError("grid_points must be at least 8")
    if mc_samples < 10_000:
        raise ConfigError("mc_samples must be at least 1e4")
    a_grid = np.linspace(0.0, 1.0, grid_points)
    diffs = margin_samples(vocab_size, mc_samples, rng)
    err = decode_error_curve(diffs, a_grid)
    err = isotonic_regression(err, increasing=False).x
    # tiny ramp keeps the curve strictly decreasing so the inverse is single-valued
    err = err + 1e-12 * (1.0 - a_grid)
    err[-1] = 0.0
    t_grid = np.linspace(0.0, 1.0, grid_points)
    targets = (1.0 - t_grid) * err[0]
    gamma = np.interp(targets, err[::-1], a_grid[::-1])
    gamma[0], gamma[-1] = 0.0, 1.0
    gamma = np.maximum.accumulate(gamma)
    return GammaTable(t_grid, gamma)


def make_schedule(kind: str = "linear", lam: float = 0.0, vocab_size: int | None = None,
                  grid_points: int = 64, mc_samples: int = 100_000, seed: int = 0,
                  gamma_path=None) -> ScheduleSpec:
    """Build a schedule, tabulating (or loading) gamma when the kind needs it."""
    table = None
    needs_gamma = kind == "error_decoding" or (kind == "mixture" and lam > 0.0)
    if needs_gamma:
        if gamma_path:
            table = GammaTable.load(gamma_path)
        else:
            if vocab_size is None:
                raise ConfigError("vocab_size is required to tabulate gamma")
            table = tabulate_error_decoding(vocab_size, grid_points, mc_samples, seed)
    return ScheduleSpec(kind=kind, lam=lam, gamma_table=table, vocab_size=vocab_size)


def sample_time_pretrain(rng, size=None):
    """Diagonal-loss time, Uniform[0, 1)."""
    return as_generator(rng).random(size)


@dataclass(frozen=True)
class TimePairDist:
    kind: str = "gap_uniform_doubling"
    gap_start: float = 1e-2
    doubling_period: int = 500
    logit_mu: float = 0.0
    logit_sigma: float = 1.0

    def __post_init__(self):
        if self.kind not in ("gap_uniform_doubling", "gap_logit_normal"):
            raise ConfigError(f"unknown time-pair distribution {self.kind!r}")
        if not 0.0 < self.gap_start <= 1.0 or self.doubling_period < 1:
            raise ConfigError("gap_start must be in (0, 1] and doubling_period >= 1")

    def cap(self, step: int) -> float:
        return min(1.0, self.gap_start * 2.0 ** min(step // self.doubling_period, 64))


def sample_time_pair(dist: TimePairDist, step: int, rng, size=None):
    """Draw ``(s, t)`` with ``0 <= s < t <= 1``."""
    if step < 0:
        raise DomainError("step must be nonnegative")
    rng = as_generator(rng)
    n = 1 if size is None else int(np.prod(size))
    if dist.kind == "gap_uniform_doubling":
        # 1 - U lies in (0, 1], so the gap is never zero
        gap = dist.cap(step) * (1.0 - rng.random(n))
    else:
        z = rng.standard_normal(n)
        gap = 1.0 / (1.0 + np.exp(-(dist.logit_mu + dist.logit_sigma * z)))
        gap = np.clip(gap, 1e-6, 1.0 - 1e-6)
    s = rng.random(n) * (1.0 - gap)
    t = np.minimum(s + gap, 1.0)
    # guard against s + gap rounding back onto s
    bad = t <= s
    if np.any(bad):
        s[bad] = np.nextafter(t[bad], -np.inf)
    if size is None:
        return float(s[0]), float(t[0])
    return s.reshape(size), t.reshape(size)
