"""Euler sampling on the simplex embedding, in flow or flow-map mode."""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, FormatError, NumericError
from .interpolant import clamp_prefix, sample_prior
from .rng import as_generator
from .schedule import ScheduleSpec, alpha

MODES = ("flow", "flowmap")


@dataclass(frozen=True)
class SamplerConfig:
    nfe: int = 1
    mode: str = "flowmap"
    schedule: ScheduleSpec = ScheduleSpec()
    epsilon: float = 1e-3
    prompt: tuple | None = None

    def __post_init__(self):
        if int(self.nfe) != self.nfe or self.nfe < 1:
            raise ConfigError("nfe must be a positive integer")
        if self.mode not in MODES:
            raise ConfigError(f"unknown sampler mode {self.mode!r}")
        if not 0.0 < self.epsilon < 0.1:
            raise ConfigError("epsilon must lie in (0, 0.1)")
        if self.prompt is not None:
            object.__setattr__(self, "prompt", tuple(int(v) for v in self.prompt))


def step_grid(nfe: int, spec: ScheduleSpec | None = None, epsilon: float = 1e-3):
    """Raw times ``i / nfe`` and the interpolation levels the updates act on.

    Levels before the last are capped at ``1 - epsilon``; the last level is
    exactly 1 so the final update is a jump onto the denoiser output.
    """
    if nfe < 1:
        raise ConfigError("nfe must be >= 1")
    times = np.arange(nfe + 1, dtype=np.float64) / nfe
    if spec is None:
        levels = times.copy()
    else:
        levels, _ = alpha(spec, times)
        levels = np.asarray(levels, dtype=np.float64)
    levels[:-1] = np.minimum(levels[:-1], 1.0 - epsilon)
    levels[-1] = 1.0
    return times, levels


def euler_sample(model, config: SamplerConfig, rng, n: int = 1, L: int | None = None,
                 V: int | None = None, x0=None, prompts=None):
    """Run the Euler update from prior draws; returns ``(tokens, final_state)``.

    ``model(x, s, t)`` returns per-position probabilities.  Flow mode calls it
    with ``(t_i, t_i)``, flow-map mode with ``(t_i, t_{i+1})``.  Each step is
    ``x += (a_{i+1} - a_i) / (1 - a_i) (pi - x)`` on levels ``a``.
    ``prompts`` (n, k) overrides ``config.prompt`` with one prompt per row.
    """
    rng = as_generator(rng)
    if x0 is None:
        if L is None or V is None:
            raise ConfigError("pass L and V, or explicit prior draws")
        x = sample_prior(L, V, rng, batch=n)
    else:
        x = np.array(x0, dtype=np.float64)
        n, L, V = x.shape
    prompt_len = np.zeros(n, dtype=np.int64)
    prompt_ids = np.zeros((n, L), dtype=np.int64)
    if prompts is None and config.prompt:
        prompts = np.broadcast_to(np.array(config.prompt, dtype=np.int64), (n, len(config.prompt)))
    clamped = prompts is not None and np.shape(prompts)[1] > 0
    if clamped:
        prompts = np.asarray(prompts, dtype=np.int64)
        k = prompts.shape[1]
        if k > L or prompts.shape[0] != n:
            raise DimensionError(f"prompts of shape {prompts.shape} do not fit ({n}, {L})")
        if prompts.max() >= V or prompts.min() < 0:
            raise DimensionError("prompt token out of vocabulary")
        prompt_len[:] = k
        prompt_ids[:, :k] = prompts
        x = clamp_prefix(x, prompt_ids, prompt_len)

    times, levels = step_grid(config.nfe, config.schedule, config.epsilon)
    for i in range(config.nfe):
        s = np.full(n, times[i])
        t = np.full(n, times[i] if config.mode == "flow" else times[i + 1])
        pi = np.asarray(model(x, s, t), dtype=np.float64)
        if levels[i + 1] == 1.0:
            x = pi.copy()  # coefficient 1: the jump lands on the denoiser output
        else:
            x = x + (levels[i + 1] - levels[i]) / (1.0 - levels[i]) * (pi - x)
        if clamped:
            x = clamp_prefix(x, prompt_ids, prompt_len)
        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite sampler state after step {i}")
    return np.argmax(x, axis=-1), x


class SamplerFlow:
    """Adapter exposing a sampler run as ``flow(x0) -> endpoint`` for likelihood estimates."""

    def __init__(self, model, config: SamplerConfig):
        self.model = model
        self.config = config
        self.V = getattr(model, "V", None)

    def __call__(self, x0):
        return euler_sample(self.model, self.config, rng=0, x0=x0)[1]


def write_samples(tokens, path, alphabet: str | None = None):
    """One comma-separated token row per line; optional text file via ``alphabet``."""
    tokens = np.asarray(tokens)
    with open(path, "w") as fh:
        for row in tokens:
            fh.write(",".join(str(int(v)) for v in row) + "\n")
    if alphabet:
        with open(str(path) + ".txt", "w") as fh:
            for row in tokens:
                fh.write("".join(alphabet[int(v)] for v in row) + "\n")


def read_samples(path):
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append([int(v) for v in line.split(",")])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: expected comma-separated integers") from None
    if rows and len({len(r) for r in rows}) != 1:
        raise FormatError(f"{path}: rows have unequal lengths")
    return np.array(rows, dtype=np.int64)
