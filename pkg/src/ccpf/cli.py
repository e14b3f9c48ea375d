"""
Command-line interface.

    ccpf train     --data FILE --out DIR [--config FILE] [--set key=value ...]
    ccpf evaluate  --data FILE --checkpoint FILE --out DIR
    ccpf simulate  --out DIR
    ccpf diagnose  --data FILE --out DIR
    ccpf verify    --out DIR

Settings come from a flat ``key = value`` file and ``--set`` overrides.  Exit
codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .data import DEFAULT_SPLIT, TEST, load_covariates, load_dataset, write_covariates, write_dataset
from .diagnostics import hetero_pipeline
from .edm import EdmFamily
from .errors import CCPFError, DataError, ParameterDomainError, SupportError, UnsupportedCombinationError
from .evaluation import evaluate, hetero_bins_tsv, verify_theorem2
from .linkage import Linkage
from .simulate import SimConfig, simulate
from .svi import Trainer, TrainerConfig

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage().strip()}\n{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# configuration


@dataclasses.dataclass
class RunConfig:
    """Run settings outside the trainer; remaining keys go to :class:`TrainerConfig`."""

    data: str | None = None
    covariates: str | None = None
    model_kind: str = "gaussian_element"
    family: str = "gaussian"
    link: str = "exponential"
    c: float = 0.0
    mean_link: str = "ignorable"
    mean_c: float = 0.0
    axis: str = "rows"
    split: tuple[float, float, float] = DEFAULT_SPLIT
    seed: int = 0


VERIFY_DEFAULTS = {
    "family": "gaussian",
    "theta": 0.5,
    "kappa": 1.0,
    "link": "exponential",
    "c": 0.3,
    "lambda_grid": (1.0, 0.1, 0.01),
    "n_samples": 100_000,
    "seed": 0,
}


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


_PATH_KEYS = {"data", "covariates"}


def _coerce(key: str, text: str, default):
    low = text.strip().lower()
    if low in ("none", "null", ""):
        return None
    try:
        if isinstance(default, bool):
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if default is None:
            if key in _PATH_KEYS:
                return text
            try:
                return int(text)
            except ValueError:
                return float(text) if _looks_numeric(text) else text
        if isinstance(default, tuple):
            return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"invalid value {text!r} for {key}") from None
    return text


def _looks_numeric(text: str) -> bool:
    try:
        float(text)
        return True
    except ValueError:
        return False


def _fill(cls_defaults: dict, values: dict[str, str], consumed: set) -> dict:
    out = {}
    for key, default in cls_defaults.items():
        if key in values:
            out[key] = _coerce(key, values[key], default)
            consumed.add(key)
    return out


def _defaults(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        out[f.name] = f.default if f.default is not dataclasses.MISSING else f.default_factory()
    return out


def gather_settings(args) -> dict[str, str]:
    values = read_config_file(args.config) if args.config else {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    for flag in ("data", "covariates", "seed"):
        v = getattr(args, flag, None)
        if v is not None:
            values[flag] = str(v)
    return values


def build_run_config(values: dict[str, str]) -> tuple[RunConfig, TrainerConfig]:
    consumed: set = set()
    run = RunConfig(**_fill(_defaults(RunConfig), values, consumed))
    tdefaults = _defaults(TrainerConfig)
    tvals = _fill({k: v for k, v in tdefaults.items() if k not in ("kappa_prior", "c_prior")}, values, consumed)
    for name in ("kappa_prior", "c_prior"):
        if name in values:
            tvals[name] = _coerce(name, values[name], tdefaults[name])
            consumed.add(name)
    tvals["seed"] = run.seed
    _reject_unknown(values, consumed)
    try:
        return run, TrainerConfig(**tvals)
    except (TypeError, ParameterDomainError) as exc:
        raise UsageError(str(exc)) from None


def _reject_unknown(values, consumed):
    unknown = sorted(set(values) - consumed)
    if unknown:
        raise UsageError(f"unknown setting {unknown[0]!r}")


def _links(run: RunConfig) -> tuple[Linkage, Linkage]:
    try:
        return Linkage(run.link, run.c), Linkage(run.mean_link, run.mean_c)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _load_data(run: RunConfig):
    if not run.data:
        raise UsageError("no data file given (use --data or data = ... in the config)")
    ds = load_dataset(run.data, run.split, run.seed)
    cov = load_covariates(run.covariates, ds.col_ids) if run.covariates else None
    if run.model_kind == "hier_linreg" and cov is None:
        raise UsageError("hier_linreg needs a covariates file")
    return ds, cov


def _out_dir(args) -> Path:
    if not args.out:
        raise UsageError("no output directory given (use --out)")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str):
    path.write_text(text, encoding="utf-8", newline="\n")


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    values = gather_settings(args)
    run, tcfg = build_run_config(values)
    out = _out_dir(args)
    ds, cov = _load_data(run)
    link, mean_link = _links(run)
    print("iter\tval_ll\tkappa\tc", flush=True)

    def progress(it, val, kappa, c):
        print(f"{it}\t{val!r}\t{kappa!r}\t{c!r}", flush=True)

    if args.resume:
        meta, arrays = ckpt.load_checkpoint(args.resume)
        trainer = Trainer.from_checkpoint(ds, meta["trainer"], arrays, cov)
    else:
        trainer = Trainer(ds, run.model_kind, link, tcfg, run.family, mean_link, cov, run.axis)
    report = trainer.run(args.iters, progress=progress)

    meta, arrays = trainer.checkpoint()
    ckpt.save_checkpoint(out / "checkpoint.ccpf", {"trainer": meta, "run": dataclasses.asdict(run)}, arrays)
    _write(out / "trace.tsv", "iter\tval_ll\n" + "".join(f"{t}\t{v!r}\n" for t, v in report.trace))
    _write(
        out / "report.tsv",
        "iterations\tkappa\tc\tconverged\n" + f"{report.iterations}\t{report.kappa!r}\t{report.c!r}\t{int(report.converged)}\n",
    )
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if not args.checkpoint:
        raise UsageError("evaluate needs --checkpoint")
    meta, arrays = ckpt.load_checkpoint(args.checkpoint)
    values = {k: str(v) if not isinstance(v, list) else ",".join(map(str, v)) for k, v in meta["run"].items() if v is not None}
    values.update(gather_settings(args))
    run, _ = build_run_config(values)
    out = _out_dir(args)
    ds, cov = _load_data(run)
    trainer = Trainer.from_checkpoint(ds, meta["trainer"], arrays, cov)
    report = evaluate(trainer.hpf, trainer.dm, trainer.link, ds.part(TEST), trainer.config.n_tr, trainer.mean_link)
    _write(out / "eval.tsv", report.to_tsv())
    return EXIT_OK


def cmd_simulate(args) -> int:
    values = gather_settings(args)
    consumed: set = set()
    kwargs = _fill(_defaults(SimConfig), values, consumed)
    _reject_unknown(values, consumed)
    try:
        cfg = SimConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    out = _out_dir(args)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        ds, truth, meta = simulate(cfg)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    write_dataset(ds, out / "data.tsv")
    if "covariates" in truth:
        write_covariates(truth["covariates"], ds.col_ids, out / "covariates.tsv")
    ckpt.save_checkpoint(out / "truth.ccpf", meta, truth)
    _write(out / "truth.json", json.dumps(meta, sort_keys=True, indent=2) + "\n")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    values = gather_settings(args)
    values.setdefault("model_kind", "pmf")
    values.setdefault("link", "ignorable")
    run, tcfg = build_run_config(values)
    out = _out_dir(args)
    ds, cov = _load_data(run)
    bins, rho = hetero_pipeline(ds, tcfg, run.model_kind, run.family, cov)
    _write(out / "bins.tsv", hetero_bins_tsv(bins))
    _write(out / "plot.tsv", "bin_rank\tnormalized_residual_variance\n" + "".join(f"{b.quantile_rank}\t{b.residual_variance!r}\n" for b in bins))
    _write(out / "summary.tsv", f"spearman\tn_entries\n{rho!r}\t{sum(b.count for b in bins)}\n")
    return EXIT_OK


def cmd_verify(args) -> int:
    values = gather_settings(args)
    values.pop("data", None)
    consumed: set = set()
    kw = _fill(VERIFY_DEFAULTS, values, consumed)
    _reject_unknown(values, consumed)
    s = {**VERIFY_DEFAULTS, **kw}
    try:
        link = Linkage(s["link"], s["c"])
        family = EdmFamily(s["family"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _out_dir(args)
    rows = verify_theorem2(family, s["theta"], s["kappa"], link, s["lambda_grid"], int(s["n_samples"]), np.random.default_rng(int(s["seed"])))
    _write(out / "ks_table.tsv", "lambda\tks_distance\n" + "".join(f"{lam!r}\t{ks!r}\n" for lam, ks in rows))
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "simulate": cmd_simulate,
    "diagnose": cmd_diagnose,
    "verify": cmd_verify,
}


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ccpf", description="Coupled compound Poisson factorization")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value settings file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        if name in ("train", "evaluate", "diagnose"):
            p.add_argument("--data", help="row<TAB>col<TAB>value file")
            p.add_argument("--covariates", help="col<TAB>x_1..x_K file")
        if name == "train":
            p.add_argument("--resume", help="checkpoint to continue from")
            p.add_argument("--iters", type=int, help="run this many more iterations")
        if name == "evaluate":
            p.add_argument("--checkpoint", help="checkpoint written by train")
    return parser


def run(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip() + "\nccpf: error: missing subcommand")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except (UnsupportedCombinationError, ParameterDomainError) as exc:
        print(f"ccpf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, SupportError, OSError) as exc:
        print(f"ccpf: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ArithmeticError, FloatingPointError, CCPFError) as exc:
        print(f"ccpf: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
