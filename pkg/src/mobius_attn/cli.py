"""``mobius-attn`` command line tool.

Exit codes: 0 success, 2 configuration or parse error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import cmath
import math
import re
import sys
from pathlib import Path

from . import analysis, gradcheck
from . import autodiff as ad
from . import mobius as mb
from .config import (ModelConfig, TrainConfig, apply_overrides, build_configs, load_config,
                     parse_config_text)
from .errors import (ConfigError, DivergenceDetected, IndeterminateForm, InvalidMobius,
                     InvertibilityViolation, MobiusAttnError, NoMobiusLayers)
from .model import Model, count_parameters, load_checkpoint
from .trainer import synth_batch, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

# grad-check builds a small model unless the config says otherwise
TINY_DEFAULTS = {"model.n_layers": 3, "attention.d_model": 32, "model.max_seq_len": 8}

COMPLEX_HELP = """\
complex literals: R, Ri, R+Si, R-Si, i, -i, and e^{T i} (unit modulus, angle T
radians; T may use pi, e.g. e^{pi/8 i}).  Alternatively --polar NAME=MAG,ANGLE
sets coefficient NAME to MAG * e^{ANGLE i}.  Negative values need the
--a=-1 form so they are not read as flags."""

_NUM = r"[0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?"
_REAL_RE = re.compile(rf"^[-+]?{_NUM}$")
_IMAG_RE = re.compile(rf"^([-+]?)({_NUM})?\*?i$")
_SUM_RE = re.compile(rf"^([-+]?{_NUM})([-+])({_NUM})?\*?i$")
_EXP_RE = re.compile(r"^e\^\{\s*(.+?)\s*\*?\s*i\s*\}$")
_ANGLE_RE = re.compile(rf"^([-+]?)({_NUM})?\s*\*?\s*(pi)?\s*(?:/\s*({_NUM}))?$")


class CliError(Exception):
    """User-input problem reported with exit code 2."""


def parse_angle(text: str) -> float:
    m = _ANGLE_RE.match(text.strip())
    if not m or not (m.group(2) or m.group(3)):
        raise CliError(f"malformed angle {text!r}")
    sign, num, pi, den = m.groups()
    val = float(num) if num else 1.0
    if pi:
        val *= math.pi
    if den:
        val /= float(den)
    return -val if sign == "-" else val


def parse_complex(text: str) -> complex:
    """Parse a command-line complex literal (see ``COMPLEX_HELP``)."""
    s = text.strip().replace(" ", "") if not text.strip().startswith("e^") else text.strip()
    if _REAL_RE.match(s):
        z = complex(float(s), 0.0)
    elif m := _IMAG_RE.match(s):
        mag = float(m.group(2)) if m.group(2) else 1.0
        z = complex(0.0, -mag if m.group(1) == "-" else mag)
    elif m := _SUM_RE.match(s):
        mag = float(m.group(3)) if m.group(3) else 1.0
        z = complex(float(m.group(1)), -mag if m.group(2) == "-" else mag)
    elif m := _EXP_RE.match(s):
        z = cmath.exp(1j * parse_angle(m.group(1)))
    else:
        raise CliError(f"malformed complex literal {text!r}")
    if not (math.isfinite(z.real) and math.isfinite(z.imag)):
        raise CliError(f"complex literal {text!r} is not finite")
    return z


def _mobius_from_args(args) -> mb.MobiusParams:
    coef = {k: parse_complex(getattr(args, k)) for k in "abcd"}
    for spec in args.polar or ():
        name, _, rest = spec.partition("=")
        if name not in coef or rest.count(",") != 1:
            raise CliError(f"malformed --polar {spec!r}; expected NAME=MAG,ANGLE with NAME in a,b,c,d")
        mag, ang = rest.split(",")
        try:
            coef[name] = float(mag) * cmath.exp(1j * parse_angle(ang))
        except ValueError:
            raise CliError(f"malformed --polar {spec!r}") from None
    return mb.MobiusParams(coef["a"], coef["b"], coef["c"], coef["d"])


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

def _configs(args, defaults: dict | None = None, extra: dict | None = None) -> tuple[ModelConfig, TrainConfig]:
    """``defaults`` < config file < ``extra`` < ``--set`` < ``--seed``."""
    values: dict[str, dict] = {}
    if args.config:
        path = Path(args.config)
        if path.suffix == ".json":
            mcfg, tcfg = load_config(path)
            file_vals = {"model": {k: v for k, v in mcfg.to_dict().items() if k != "attention"},
                         "attention": dict(mcfg.attention.__dict__), "train": tcfg.to_dict()}
        else:
            file_vals = parse_config_text(path.read_text(), str(path))
    else:
        file_vals = {}
    sets = []
    for item in getattr(args, "set", None) or ():
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set {item!r}: expected key=value")
        sets.append((key.strip(), raw))
    after = list((extra or {}).items()) + sets
    if args.seed is not None:
        after.append(("seed", str(args.seed)))
    for key, raw in (defaults or {}).items():
        apply_overrides(values, key, str(raw))
    for section, fields in file_vals.items():
        values.setdefault(section, {}).update(fields)
    for key, raw in after:
        try:
            apply_overrides(values, key, str(raw))
        except KeyError:
            raise ConfigError(f"unknown field {key!r}") from None
        except ValueError as exc:
            raise ConfigError(f"field {key!r}: {exc}") from None
    return build_configs(values)


def _out_dir(args) -> Path | None:
    if args.out_dir is None:
        return None
    p = Path(args.out_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _emit(text: str, args, filename: str):
    out = _out_dir(args)
    if out is None:
        sys.stdout.write(text)
    else:
        (out / filename).write_text(text)
        print(f"wrote {out / filename}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_classify(args) -> int:
    m = _mobius_from_args(args)
    print(mb.classify(m, args.tol).value)
    return EXIT_OK


def cmd_flow(args) -> int:
    m = _mobius_from_args(args)
    z0 = parse_complex(args.z0)
    summary = analysis.map_summary(m, args.tol)
    rows = analysis.flow_rows(m, z0, args.steps)
    _emit(analysis.write_csv(rows, analysis.FLOW_FIELDS, [f"{k}={v}" for k, v in summary.items()]),
          args, "flow.csv")
    if args.out_dir is not None:
        for k, v in summary.items():
            print(f"{k}: {v}")
    return EXIT_OK


def cmd_census(args) -> int:
    model = load_checkpoint(args.checkpoint)
    rows = analysis.geometry_census(model, args.tol)
    _emit(analysis.format_census(rows, args.tol), args, "census.csv")
    _emit(analysis.format_counts(rows), args, "census_counts.csv")
    return EXIT_OK


def cmd_sparsity(args) -> int:
    model = load_checkpoint(args.checkpoint)
    tcfg = TrainConfig(task=args.task, vocab_size=model.cfg.vocab_size,
                       seq_len=args.seq_len or model.cfg.max_seq_len)
    batch_seed = 0 if args.seed is None else args.seed
    ids, _ = synth_batch(args.task, tcfg, [batch_seed, 99], args.batch)
    report = analysis.sparsity_report(model, ids, args.threshold)
    header = [f"task={args.task}", f"batch={args.batch}", f"seq_len={tcfg.seq_len}",
              f"seed={batch_seed}", f"threshold={args.threshold!r}"]
    out = _out_dir(args)
    if out is None:
        sys.stdout.write(analysis.write_csv([h.row() for h in report], analysis.SPARSITY_FIELDS, header))
    else:
        print(f"wrote {analysis.write_sparsity(report, out, header)}")
    mob, van = analysis.compare_sparsity(report)
    print(f"mean zero_frac in Mobius layers: mobius={mob!r} vanilla={van!r}", file=sys.stderr)
    return EXIT_OK


def cmd_grad_check(args) -> int:
    mcfg, _ = _configs(args, defaults=TINY_DEFAULTS, extra={"attention.dropout": "0"})
    mcfg = ModelConfig.from_dict({**mcfg.to_dict(), "max_seq_len": max(mcfg.max_seq_len, args.n)})
    seed = 0 if args.seed is None else args.seed

    def run():
        return gradcheck.model_grad_check(mcfg, n=args.n, seed=seed, h=args.h, tol=args.tol,
                                          floor_frac=args.floor_frac)

    if args.corrupt_adjoint:
        with ad.corrupted_adjoint(args.corrupt_adjoint):
            report = run()
    else:
        report = run()
    print("group,max_rel_err")
    for g, err in gradcheck.group_errors(report).items():
        print(f"{g},{err!r}")
    status = "PASS" if report.passed else "FAIL"
    print(f"{status}: max relative error {report.max_rel_err:.3e} "
          f"({report.offending}) over {report.n_checked} entries, tol {args.tol:g}")
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_train(args) -> int:
    extra = {}
    if args.task:
        extra["train.task"] = args.task
    if args.steps is not None:
        extra["train.steps"] = str(args.steps)
    mcfg, tcfg = _configs(args, extra=extra)
    model = Model(mcfg)
    train(model, tcfg, _out_dir(args))
    return EXIT_OK


def cmd_count_params(args) -> int:
    mcfg, _ = _configs(args)
    counts = count_parameters(Model(mcfg))
    print("module,parameters")
    for k, v in counts.items():
        print(f"{k},{v}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _global_flags(p: argparse.ArgumentParser, suppress: bool):
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--seed", type=int, default=default, help="random seed")
    p.add_argument("--config", default=default, help="key = value config file (or .json)")
    p.add_argument("--out-dir", default=default, help="write outputs here instead of stdout")


def _mobius_flags(p: argparse.ArgumentParser):
    for k, v in zip("abcd", ("1", "0", "0", "1")):
        p.add_argument(f"--{k}", default=v, help=f"coefficient {k} (default {v})")
    p.add_argument("--polar", action="append", metavar="NAME=MAG,ANGLE",
                   help="set a coefficient in polar form; repeatable")
    p.add_argument("--tol", type=float, default=mb.DEFAULT_TOL, help="classification tolerance")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mobius-attn", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_, epilog=None):
        p = sub.add_parser(name, help=help_, description=help_, epilog=epilog,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        _global_flags(p, suppress=True)
        p.set_defaults(func=func)
        return p

    p = add("geometry-census", cmd_census, "classify every learned Mobius query map in a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--tol", type=float, default=mb.CENSUS_TOL)

    p = add("sparsity", cmd_sparsity, "near-zero attention fraction and entropy per head")
    p.add_argument("checkpoint")
    p.add_argument("--task", default="reverse", choices=("reverse", "copy", "mlm_synthetic"))
    p.add_argument("--batch", type=int, default=64, help="evaluation sequences")
    p.add_argument("--seq-len", type=int, default=None)
    p.add_argument("--threshold", type=float, default=1e-3)

    p = add("flow", cmd_flow, "orbit of z0 under repeated application, with sphere coordinates",
            COMPLEX_HELP)
    _mobius_flags(p)
    p.add_argument("--z0", default="0")
    p.add_argument("--steps", type=int, default=32)

    p = add("grad-check", cmd_grad_check, "finite-difference check of a tiny configured model")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override; repeatable")
    p.add_argument("--n", type=int, default=8, help="sequence length")
    p.add_argument("--h", type=float, default=1e-6)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--floor-frac", type=float, default=gradcheck.FLOOR_FRAC,
                   help="error denominator floor as a fraction of max|grad|; 0 uses max(|g|, 1e-8)")
    p.add_argument("--corrupt-adjoint", default=None, help=argparse.SUPPRESS)

    p = add("train", cmd_train, "train on a synthetic task; metrics CSV on stdout")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override; repeatable")
    p.add_argument("--task", default=None, choices=("reverse", "copy", "mlm_synthetic"))
    p.add_argument("--steps", type=int, default=None)

    p = add("classify", cmd_classify, "geometry class of one Mobius map", COMPLEX_HELP)
    _mobius_flags(p)

    p = add("count-params", cmd_count_params, "parameter counts per module (complex entries count twice)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override; repeatable")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigError, InvalidMobius, NoMobiusLayers, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceDetected, InvertibilityViolation, IndeterminateForm, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except MobiusAttnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
