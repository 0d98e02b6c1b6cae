"""Command-line entry point: ``catflow {train,distill,sample,eval,elbo}``.

Every command writes ``config.echo`` (the resolved configuration) into the
output directory.  Exit codes: 0 success, 2 configuration error, 3 numeric
failure or divergence, 4 I/O or format error.
"""

import argparse
import json
import sys
from pathlib import Path

from . import evalharness as ev
from .config import RunConfig, load_config, render
from .errors import (CapacityError, CatflowError, ConfigError, DescriptorConflictError,
                     DomainError, EmptyLossError, FormatError, NumericError)
from .likelihood import elbo, elbo_record, mcqa_score
from .losses import make_probes
from .model import ModelDenoiser, init_params, load_checkpoint
from .oracle import OracleDenoiser
from .rng import stream
from .sampler import euler_sample, write_samples
from .train import MetricsWriter, distill, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class Diverged(NumericError):
    pass


def _prepare(args):
    values = load_config(args.config, args.set)
    if args.seed is not None:
        values["seed"] = args.seed
    cfg = RunConfig(values).validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.echo").write_text(render(values))
    return cfg, out


def _metrics(cfg, out):
    path = out / cfg["paths.metrics"]
    path.write_text("")  # a fresh stream per invocation
    return MetricsWriter(path, cfg["log.wall_clock"])


def _load_model(cfg, ref, schedule):
    """A checkpoint path, or ``oracle`` for the exact denoiser of the corpus."""
    if ref == "oracle":
        den = OracleDenoiser(cfg.corpus(), schedule)
        den.V = cfg.corpus().V
        return den
    return ModelDenoiser(load_checkpoint(ref, expected=cfg.backbone()))


def cmd_train(args):
    cfg, out = _prepare(args)
    params = init_params(cfg.backbone(), seed=cfg.seed)
    ckpt = out / cfg["paths.checkpoint"]
    train(params, cfg.corpus(), cfg.schedule(), cfg.loss(), cfg.optimizer(), cfg.seed,
          prefix_p=cfg["prefix.p"], prefix_d=cfg["prefix.d"], metrics=_metrics(cfg, out),
          checkpoint_path=ckpt, checkpoint_every=cfg["log.checkpoint_every"])
    print(ckpt)


def cmd_distill(args):
    cfg, out = _prepare(args)
    params = load_checkpoint(args.base, expected=cfg.backbone())
    method = args.method or cfg["distill.method"]
    schedule = cfg.schedule()
    probes = None
    if cfg["distill.residual_every"] > 0:
        probes = make_probes(cfg.corpus(), schedule, cfg["distill.residual_probes"],
                             stream(cfg.seed, "probes"))
    ckpt = out / cfg["paths.checkpoint"]
    result = distill(params, cfg.corpus(), schedule, cfg.loss(), cfg.optimizer("distill"),
                     cfg.pairs(), method, cfg.seed, prefix_p=cfg["prefix.p"],
                     prefix_d=cfg["prefix.d"], metrics=_metrics(cfg, out),
                     checkpoint_path=ckpt, checkpoint_every=cfg["log.checkpoint_every"],
                     probes=probes, residual_every=cfg["distill.residual_every"])
    (out / "distill_status.json").write_text(json.dumps(
        {"status": result.status, "steps": result.steps_done, **result.counters},
        sort_keys=True) + "\n")
    if result.status != "ok":
        raise Diverged(f"distillation {result.status} at step {result.steps_done}")
    print(ckpt)


def _parse_prompt(text):
    if not text:
        return None
    if not text.startswith("ids:"):
        raise ConfigError("prompt must look like 'ids:0,3'")
    try:
        return tuple(int(v) for v in text[4:].split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"bad prompt {text!r}") from None


def cmd_sample(args):
    cfg, out = _prepare(args)
    schedule = cfg.schedule()
    model = _load_model(cfg, args.checkpoint, schedule)
    prompt = _parse_prompt(args.prompt if args.prompt is not None else cfg["sampler.prompt"])
    scfg = cfg.sampler(schedule, nfe=args.nfe, mode=args.mode, prompt=prompt)
    n = args.n or cfg["sampler.n"]
    corpus = cfg.corpus()
    tokens, _ = euler_sample(model, scfg, stream(cfg.seed, "sample"), n=n, L=corpus.L,
                             V=corpus.V)
    path = out / cfg["paths.samples"]
    write_samples(tokens, path, cfg["sampler.alphabet"] or None)
    (out / "sample_stats.json").write_text(json.dumps(
        {"n": n, "nfe": scfg.nfe, "mode": scfg.mode, "model_calls": getattr(model, "calls", None)},
        sort_keys=True) + "\n")
    print(path)


def cmd_eval(args):
    cfg, out = _prepare(args)
    schedule = cfg.schedule()
    models = {}
    for ref in args.checkpoint:
        models[ref] = _load_model(cfg, ref, schedule)
    grid = [int(v) for v in args.nfe.split(",")] if args.nfe else cfg.nfe_grid()
    path = out / "pareto.csv"
    ev.pareto_report(models, grid, cfg.corpus(), cfg.sampler(schedule, mode=args.mode),
                     n=cfg["eval.n"], seed=cfg.seed, prefix_fraction=cfg["eval.prefix_fraction"],
                     path=path)
    print(path)


def _parse_ids(text, where):
    try:
        ids = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise FormatError(f"{where}: expected comma-separated token ids") from None
    if not ids:
        raise FormatError(f"{where}: empty token list")
    return ids


def cmd_elbo(args):
    """Lines are ``0,1,2`` (one sequence) or ``prompt | option | option ...`` (MCQA)."""
    cfg, out = _prepare(args)
    schedule = cfg.schedule()
    model = _load_model(cfg, args.checkpoint, schedule)
    V = cfg.corpus().V
    try:
        lines = Path(args.input).read_text().splitlines()
    except OSError as exc:
        raise FormatError(f"cannot read {args.input}: {exc}") from None
    records = []
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        where = f"{args.input}:{lineno}"
        rng = stream(cfg.seed, "elbo", lineno)
        if "|" in line:
            parts = [p.strip() for p in line.split("|")]
            prompt = _parse_ids(parts[0], where) if parts[0] else []
            options = [_parse_ids(p, where) for p in parts[1:]]
            try:
                order, scores = mcqa_score(model, prompt, options, schedule, cfg["elbo.n_mc"],
                                           int(rng.integers(2**63)), cfg["elbo.t_max"], V=V)
            except (DomainError, ConfigError) as exc:
                raise FormatError(f"{where}: {exc}") from None
            records.append(json.dumps({"line": lineno, "prompt": prompt, "options": options,
                                       "scores": scores, "ranking": order}, sort_keys=True))
        else:
            tokens = _parse_ids(line, where)
            if max(tokens) >= V or len(tokens) != cfg.corpus().L:
                raise FormatError(f"{where}: sequence does not fit L={cfg.corpus().L}, V={V}")
            est = elbo(model, tokens, schedule, cfg["elbo.n_mc"], cfg["elbo.t_max"], rng, V=V)
            records.append(elbo_record(tokens, est))
    path = out / "elbo.jsonl"
    path.write_text("".join(r + "\n" for r in records))
    print(path)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value configuration file")
    common.add_argument("--seed", type=int, help="override the root seed")
    common.add_argument("--out", default="run", help="output directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a configuration entry (repeatable)")

    parser = argparse.ArgumentParser(prog="catflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="diagonal-loss pretraining")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("distill", parents=[common], help="PSD or ESD self-distillation")
    p.add_argument("--base", required=True, help="pretrained checkpoint")
    p.add_argument("--method", choices=("psd", "esd"))
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("sample", parents=[common], help="Euler sampling")
    p.add_argument("--checkpoint", required=True, help="checkpoint path or 'oracle'")
    p.add_argument("--nfe", type=int)
    p.add_argument("--mode", choices=("flow", "flowmap"))
    p.add_argument("--prompt", help="clamped prefix, e.g. ids:0,3")
    p.add_argument("--n", type=int, help="number of samples")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", parents=[common], help="NFE Pareto report")
    p.add_argument("--checkpoint", required=True, action="append",
                   help="checkpoint path or 'oracle' (repeatable)")
    p.add_argument("--nfe", help="comma-separated NFE grid")
    p.add_argument("--mode", choices=("flow", "flowmap"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("elbo", parents=[common], help="likelihood bound and MCQA ranking")
    p.add_argument("--checkpoint", required=True, help="checkpoint path or 'oracle'")
    p.add_argument("--input", required=True, help="token or MCQA file")
    p.set_defaults(func=cmd_elbo)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ConfigError, DomainError, EmptyLossError, CapacityError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, DescriptorConflictError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except CatflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
