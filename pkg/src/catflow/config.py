"""Run configuration: flat ``section.key = value`` text.

Grammar, one entry per line::

    # comment
    section.key = value

Blank lines and ``#`` comments are ignored.  Every key must appear in
``DEFAULTS``; its default fixes the value type.  Lists (probabilities, NFE
grids) are whitespace-separated; matrix rows are separated by ``;``.
``render`` writes the fully resolved configuration back in the same grammar,
and parsing that text reproduces the configuration exactly.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError
from .losses import LossConfig
from .model import BackboneDescriptor
from .oracle import OracleSpec
from .sampler import SamplerConfig
from .schedule import TimePairDist, make_schedule
from .train import OptimConfig

DEFAULTS = {
    "seed": 0,
    "corpus.kind": "iid",
    "corpus.L": 1,
    "corpus.probs": "0.25 0.25 0.25 0.25",
    "corpus.init": "",
    "corpus.trans": "",
    "backbone.hidden_dim": 64,
    "backbone.depth": 2,
    "backbone.time_embed_dim": 32,
    "backbone.arch": "residual_mlp",
    "schedule.kind": "linear",
    "schedule.lam": 0.0,
    "schedule.grid_points": 64,
    "schedule.mc_samples": 100_000,
    "schedule.gamma_path": "",
    "loss.adaptive_c": 1e-2,
    "loss.adaptive_r": 0.5,
    "loss.divergence": "KL",
    "loss.psd_u_rule": "midpoint",
    "loss.psd_alpha": "",
    "loss.esd_fd_step": 1e-3,
    "loss.esd_material": True,
    "loss.sd_adaptive": False,
    "loss.diag_weight": 1.0,
    "loss.sd_weight": 1.0,
    "optimizer.lr": 1e-3,
    "optimizer.beta1": 0.9,
    "optimizer.beta2": 0.95,
    "optimizer.weight_decay": 0.0,
    "optimizer.steps": 1000,
    "optimizer.batch": 128,
    "optimizer.grad_clip": 1.0,
    "optimizer.decay": "cosine",
    "distill.method": "psd",
    "distill.lr": 3e-4,
    "distill.steps": 1000,
    "distill.batch": 128,
    "distill.residual_every": 0,
    "distill.residual_probes": 64,
    "pairs.kind": "gap_uniform_doubling",
    "pairs.gap_start": 1e-2,
    "pairs.doubling_period": 100,
    "pairs.logit_mu": 0.0,
    "pairs.logit_sigma": 1.0,
    "prefix.p": 0.0,
    "prefix.d": 1,
    "sampler.nfe": 4,
    "sampler.mode": "flowmap",
    "sampler.epsilon": 1e-3,
    "sampler.n": 1000,
    "sampler.prompt": "",
    "sampler.alphabet": "",
    "eval.nfe_grid": "1 2 4 8",
    "eval.n": 10_000,
    "eval.prefix_fraction": 0.5,
    "elbo.n_mc": 256,
    "elbo.t_max": 0.999,
    "paths.checkpoint": "model.ckpt",
    "paths.metrics": "metrics.jsonl",
    "paths.samples": "samples.csv",
    "log.wall_clock": False,
    "log.checkpoint_every": 0,
}


def _convert(key, raw: str):
    kind = type(DEFAULTS[key])
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"not a boolean: {raw!r}")
            return low in ("true", "1", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def parse_config(text: str, source: str = "<config>") -> dict:
    values = dict(DEFAULTS)
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _convert(key, raw)
    return values


def apply_overrides(values: dict, overrides) -> dict:
    out = dict(values)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = (part.strip() for part in item.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key {key!r}")
        out[key] = _convert(key, raw)
    return out


def load_config(path=None, overrides=None) -> dict:
    text = ""
    if path is not None:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise FormatError(f"cannot read config {path}: {exc}") from None
    return apply_overrides(parse_config(text, str(path)), overrides)


def render(values: dict) -> str:
    lines = []
    for key in DEFAULTS:
        v = values[key]
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


def _floats(text, key):
    try:
        return [float(v) for v in text.split()]
    except ValueError:
        raise ConfigError(f"{key}: expected whitespace-separated numbers") from None


@dataclass(frozen=True)
class RunConfig:
    """Typed view of a parsed configuration."""

    values: dict

    def __getitem__(self, key):
        return self.values[key]

    @property
    def seed(self) -> int:
        return self.values["seed"]

    def corpus(self) -> OracleSpec:
        v = self.values
        if v["corpus.kind"] == "iid":
            return OracleSpec.iid(_floats(v["corpus.probs"], "corpus.probs"), v["corpus.L"])
        if v["corpus.kind"] == "markov":
            init = _floats(v["corpus.init"], "corpus.init")
            rows = [_floats(r, "corpus.trans") for r in v["corpus.trans"].split(";") if r.strip()]
            try:
                trans = np.array(rows, dtype=np.float64)
            except ValueError:
                raise ConfigError("corpus.trans rows have unequal lengths") from None
            return OracleSpec.markov(init, trans, v["corpus.L"])
        raise ConfigError(f"unknown corpus kind {v['corpus.kind']!r}")

    def backbone(self) -> BackboneDescriptor:
        v, c = self.values, self.corpus()
        return BackboneDescriptor(hidden_dim=v["backbone.hidden_dim"], depth=v["backbone.depth"],
                                  time_embed_dim=v["backbone.time_embed_dim"],
                                  vocab_size=c.V, context_len=c.L, arch=v["backbone.arch"])

    def schedule(self):
        v = self.values
        return make_schedule(v["schedule.kind"], v["schedule.lam"], vocab_size=self.corpus().V,
                             grid_points=v["schedule.grid_points"],
                             mc_samples=v["schedule.mc_samples"], seed=self.seed,
                             gamma_path=v["schedule.gamma_path"] or None)

    def loss(self) -> LossConfig:
        v = self.values
        psd_alpha = v["loss.psd_alpha"].strip()
        return LossConfig(adaptive_c=v["loss.adaptive_c"], adaptive_r=v["loss.adaptive_r"],
                          divergence=v["loss.divergence"], psd_u_rule=v["loss.psd_u_rule"],
                          psd_alpha=float(psd_alpha) if psd_alpha else None,
                          esd_fd_step=v["loss.esd_fd_step"], esd_material=v["loss.esd_material"],
                          sd_adaptive=v["loss.sd_adaptive"], diag_weight=v["loss.diag_weight"],
                          sd_weight=v["loss.sd_weight"])

    def optimizer(self, phase: str = "train") -> OptimConfig:
        v = self.values
        lr, steps, batch = v["optimizer.lr"], v["optimizer.steps"], v["optimizer.batch"]
        if phase == "distill":
            lr, steps, batch = v["distill.lr"], v["distill.steps"], v["distill.batch"]
        return OptimConfig(lr=lr, beta1=v["optimizer.beta1"], beta2=v["optimizer.beta2"],
                           weight_decay=v["optimizer.weight_decay"], steps=steps, batch=batch,
                           grad_clip=v["optimizer.grad_clip"], decay=v["optimizer.decay"])

    def pairs(self) -> TimePairDist:
        v = self.values
        return TimePairDist(kind=v["pairs.kind"], gap_start=v["pairs.gap_start"],
                            doubling_period=v["pairs.doubling_period"],
                            logit_mu=v["pairs.logit_mu"], logit_sigma=v["pairs.logit_sigma"])

    def sampler(self, schedule=None, nfe=None, mode=None, prompt=None) -> SamplerConfig:
        v = self.values
        return SamplerConfig(nfe=nfe or v["sampler.nfe"], mode=mode or v["sampler.mode"],
                             schedule=schedule if schedule is not None else self.schedule(),
                             epsilon=v["sampler.epsilon"], prompt=prompt)

    def nfe_grid(self):
        try:
            grid = [int(x) for x in self.values["eval.nfe_grid"].replace(",", " ").split()]
        except ValueError:
            raise ConfigError("eval.nfe_grid: expected integers") from None
        if not grid:
            raise ConfigError("eval.nfe_grid is empty")
        return grid

    def validate(self):
        """Build every component once so invalid settings fail before any work."""
        self.corpus(), self.backbone(), self.loss(), self.optimizer(), self.optimizer("distill")
        self.pairs(), self.nfe_grid()
        if not 0.0 <= self.values["prefix.p"] <= 1.0 or self.values["prefix.d"] < 1:
            raise ConfigError("prefix.p must lie in [0, 1] and prefix.d >= 1")
        return self
