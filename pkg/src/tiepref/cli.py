"""Command-line entry point: ``tiepref {gen-data,fit,eval,bias-table,bias-curve}``.

Every flag has a default shown by ``--help``.  ``--config FILE`` reads flat
``key = value`` lines (keys spelled like the long flags, with or without the
leading dashes) and applies them below anything given on the command line.
Artifacts are written to a temporary file and moved into place, so a nonzero
exit never leaves a half-written output behind.
"""

from __future__ import annotations

import argparse
import os
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from .dataset import break_ties, generate_synthetic, read_records, relabel_by_reward, write_records
from .errors import InvalidDatasetError, TieprefError
from .experiments import (
    DEFAULT_CURVE_RANGE,
    GenConfig,
    default_bias_gap_train_config,
    draw_eval_pairs,
    emit_bias_curves,
    eval_accuracy,
    eval_mean_abs_bias,
    format_bias_gap_csv,
    format_curve_csv,
    run_bias_gap,
)
from .prefcore import TieModelParams
from .reward import (
    N_LEVELS,
    LinearReward,
    MlpReward,
    PolicyLogRatioReward,
    TabularReward,
    load_checkpoint,
    random_ground_truth,
    save_checkpoint,
)
from .rng import substream
from .train import CORRECTIONS, LR_SCHEDULES, LossKind, TrainConfig, check_compatible, train

PROG = "tiepref"


class UsageError(Exception):
    """Invalid flag combination; reported as one line with exit status 2."""


# --- helpers ------------------------------------------------------------------

def _theta(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid theta {text!r}") from None
    return value


def _theta_list(text: str) -> list[float]:
    try:
        values = [float(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid theta list {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty theta list")
    return values


def _check_theta(theta: float) -> TieModelParams:
    try:
        return TieModelParams(theta)
    except TieprefError as exc:
        raise UsageError(str(exc)) from None


def _atomic_write(path: str, write) -> None:
    """Call ``write(tmp_path)`` and move the result to ``path`` only if it succeeds."""
    target = Path(path)
    parent = target.parent if str(target.parent) else Path(".")
    fd, tmp = tempfile.mkstemp(prefix=f".{target.name}.", dir=parent)
    os.close(fd)
    try:
        write(tmp)
        os.replace(tmp, target)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_text(path: str, text: str) -> None:
    if path == "-":
        sys.stdout.write(text)
        return

    def write(tmp):
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)

    _atomic_write(path, write)


def _untied_path(out: str) -> str:
    p = Path(out)
    return str(p.with_name(p.stem + "_untied" + (p.suffix or ".jsonl")))


# --- subcommands ------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    params = _check_theta(args.theta)
    truth = random_ground_truth(args.truth_kind, args.dim, args.prompts, args.seed)
    data = generate_synthetic(args.prompts, args.pairs, args.dim, truth, params, args.seed)
    _atomic_write(args.out, lambda tmp: write_records(data, tmp))
    print(f"wrote {args.out}: records={len(data)} ties={data.n_ties} decided={data.n_decided}")
    if args.break_ties:
        untied_out = args.untied_out or _untied_path(args.out)
        untied = break_ties(data, substream(args.seed, "ties"))
        _atomic_write(untied_out, lambda tmp: write_records(untied, tmp))
        print(f"wrote {untied_out}: records={len(untied)} ties={untied.n_ties} decided={untied.n_decided}")
    if args.truth_out:
        if isinstance(truth, TabularReward) and truth.lazy:
            raise UsageError("--truth-out needs a dense ground truth; lower --dim or --prompts")
        _atomic_write(args.truth_out, lambda tmp: save_checkpoint(truth, tmp))
        print(f"wrote {args.truth_out}: ground-truth {truth.kind} checkpoint")
    return 0


def _build_model(args, n_prompts: int, dimension: int):
    if args.model == "tabular":
        return TabularReward(n_prompts, dimension)
    if args.model == "linear":
        return LinearReward(n_prompts, dimension)
    if args.model == "mlp":
        return MlpReward(n_prompts, dimension, hidden=args.hidden, n_hash=args.n_hash, seed=args.seed)
    if args.model == "policy":
        uniform = np.full((n_prompts, N_LEVELS ** dimension), -dimension * np.log(N_LEVELS))
        return PolicyLogRatioReward(args.beta, uniform, uniform)
    raise UsageError(f"unknown model {args.model!r}")


def cmd_fit(args) -> int:
    data = read_records(args.data)
    if len(data) == 0:
        raise UsageError(f"{args.data} holds no records")
    kind = LossKind(args.loss)
    theta = args.theta
    if theta is None and kind is not LossKind.BT:
        if data.theta is None:
            raise UsageError(f"--loss {kind.value} needs --theta (the data file does not record one)")
        theta = data.theta
    params = _check_theta(1.0 if theta is None else theta)
    try:
        check_compatible(kind, data.labels, params)
    except InvalidDatasetError as exc:
        raise UsageError(f"--loss {kind.value} conflicts with {args.data}: {exc}") from None
    config = TrainConfig(
        loss_kind=kind, theta=None if kind is LossKind.BT else params.theta,
        learning_rate=args.lr, batch_size=args.batch_size, rmsprop_decay=args.rmsprop_decay,
        rmsprop_epsilon=args.rmsprop_epsilon, max_epochs=args.epochs, convergence=args.convergence,
        seed=args.seed, detach_offset=not args.no_detach_offset, correction=args.correction,
        lr_schedule=args.lr_schedule,
    )
    n_prompts = args.n_prompts or int(data.prompt_ids.max()) + 1
    model = _build_model(args, n_prompts, data.dimension)
    model, report = train(model, data, config)
    _atomic_write(args.checkpoint, lambda tmp: save_checkpoint(model, tmp))
    _write_text(args.report, report.to_csv())
    print(f"fit {kind.value} on {args.data}: records={len(data)} ties={data.n_ties} model={args.model}")
    print(report.format_table())
    print(f"initial loss {report.initial_loss:.8f} -> final loss {report.final_loss:.8f}")
    print(f"wrote {args.checkpoint} and {args.report}")
    return 0


def cmd_eval(args) -> int:
    if not args.data and not args.truth:
        raise UsageError("eval needs --data, --truth, or both")
    model = load_checkpoint(args.model)
    truth = load_checkpoint(args.truth) if args.truth else None
    rows = [("metric", "value")]
    if args.data:
        data = read_records(args.data)
        if args.relabel:
            if truth is None:
                raise UsageError("--relabel needs --truth")
            data = relabel_by_reward(data, truth)
        acc, n_filtered = eval_accuracy(model, data)
        rows += [("accuracy", repr(acc)), ("n_scored", str(len(data) - n_filtered)),
                 ("n_ties_filtered", str(n_filtered))]
    if truth is not None:
        if (truth.n_prompts, truth.dimension) != (model.n_prompts, model.dimension):
            raise UsageError("model and truth checkpoints cover different prompt/response grids")
        pairs = draw_eval_pairs(args.eval_pairs, model.n_prompts, model.dimension, args.seed)
        rows += [("mean_abs_bias", repr(eval_mean_abs_bias(model, truth, pairs))),
                 ("n_eval_pairs", str(args.eval_pairs))]
    text = "".join(f"{k},{v}\n" for k, v in rows)
    _write_text(args.out, text)
    if args.out != "-":
        for k, v in rows[1:]:
            print(f"{k:>16} {v}")
    return 0


def cmd_bias_table(args) -> int:
    for t in args.thetas:
        if not _check_theta(t).has_ties:
            raise UsageError("every --thetas entry must exceed 1 so that ties occur")
    gen = GenConfig(n_prompts=args.prompts, pairs_per_prompt=args.pairs, dimension=args.dim,
                    n_eval_pairs=args.eval_pairs, hidden=args.hidden)
    cfg = replace(default_bias_gap_train_config(args.seed), learning_rate=args.lr, max_epochs=args.epochs,
                  batch_size=args.batch_size)
    results = run_bias_gap(args.thetas, gen, cfg, seed=args.seed)
    _write_text(args.out, format_bias_gap_csv(results))
    if args.out != "-":
        print(f"{'theta':>6} {'bias BT':>10} {'bias BTT':>10} {'gap':>10}")
        for r in results:
            print(f"{r.theta:>6g} {r.mean_abs_bias_bt:>10.4f} {r.mean_abs_bias_btt:>10.4f} {r.gap:>10.4f}")
    return 0


def cmd_bias_curve(args) -> int:
    for t in args.thetas:
        _check_theta(t)
    rows = emit_bias_curves(args.thetas, args.lo, args.hi, args.points)
    _write_text(args.out, format_curve_csv(rows))
    if args.out != "-":
        print(f"wrote {args.out}: {len(rows)} rows for theta in {args.thetas}")
    return 0


# --- parser -------------------------------------------------------------------

def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog=PROG, description=__doc__.splitlines()[0], formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    subs = {}

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=fmt)
        p.add_argument("--config", default=None,
                       help="flat key=value file; command-line flags take precedence")
        p.add_argument("--seed", type=int, default=0, help="root seed for every random substream")
        p.set_defaults(func=func)
        subs[name] = p
        return p

    p = add("gen-data", cmd_gen_data, "sample a BTT-labeled synthetic dataset from a random ground truth")
    p.add_argument("--out", default="data.jsonl", help="dataset output path (ties kept)")
    p.add_argument("--theta", type=_theta, default=2.0, help="tie propensity (>= 1)")
    p.add_argument("--dim", type=int, default=4, help="response vector length; entries in 0..3")
    p.add_argument("--prompts", type=int, default=100, help="number of prompts")
    p.add_argument("--pairs", type=int, default=10, help="comparisons per prompt")
    p.add_argument("--truth-kind", choices=("tabular", "linear"), default="tabular",
                   help="ground-truth reward family")
    p.add_argument("--break-ties", action="store_true",
                   help="also write a copy with every tie resolved by a fair coin")
    p.add_argument("--untied-out", default=None,
                   help="path for the tie-broken copy; None means OUT with an _untied suffix")
    p.add_argument("--truth-out", default=None, help="also save the ground truth as a checkpoint here")

    p = add("fit", cmd_fit, "train a reward model with the BT, BTT, or bias-corrected loss")
    p.add_argument("--data", default="data.jsonl", help="dataset to fit")
    p.add_argument("--loss", choices=[k.value for k in LossKind], default="bt", help="training loss")
    p.add_argument("--theta", type=_theta, default=None,
                   help="tie propensity for btt/corrected; None takes the value recorded in the data file")
    p.add_argument("--model", choices=("tabular", "linear", "mlp", "policy"), default="mlp",
                   help="reward parameterization")
    p.add_argument("--hidden", type=int, default=64, help="hidden width of the mlp model")
    p.add_argument("--n-hash", type=int, default=None,
                   help="fold prompt ids modulo this many one-hot slots in the mlp; None means no folding")
    p.add_argument("--beta", type=float, default=1.0, help="scale of the policy log-ratio reward")
    p.add_argument("--n-prompts", type=int, default=None,
                   help="prompt count of the model; None means largest prompt id in the data + 1")
    p.add_argument("--lr", type=float, default=1e-3, help="RMSprop learning rate")
    p.add_argument("--lr-schedule", choices=LR_SCHEDULES, default="constant",
                   help="per-epoch learning-rate schedule")
    p.add_argument("--batch-size", type=int, default=64, help="minibatch size")
    p.add_argument("--epochs", type=int, default=100, help="maximum number of epochs")
    p.add_argument("--convergence", type=float, default=1e-6,
                   help="stop when the relative change of the full-data loss falls to this value")
    p.add_argument("--rmsprop-decay", type=float, default=0.9, help="RMSprop squared-gradient decay")
    p.add_argument("--rmsprop-epsilon", type=float, default=1e-8, help="RMSprop denominator epsilon")
    p.add_argument("--correction", choices=CORRECTIONS, default="forward",
                   help="corrected loss: apply the bias map to the model strength (forward) "
                        "or its inverse (inverse)")
    p.add_argument("--no-detach-offset", action="store_true",
                   help="differentiate through the bias offset instead of treating it as a constant")
    p.add_argument("--checkpoint", default="model.ckpt", help="checkpoint output path")
    p.add_argument("--report", default="report.csv", help="per-epoch loss report path ('-' for stdout)")

    p = add("eval", cmd_eval, "score a checkpoint: accuracy on data and/or strength bias against a truth")
    p.add_argument("--model", default="model.ckpt", help="checkpoint to evaluate")
    p.add_argument("--truth", default=None, help="ground-truth checkpoint for the bias metric")
    p.add_argument("--data", default=None, help="dataset for the accuracy metric")
    p.add_argument("--relabel", action="store_true",
                   help="relabel the data by the truth's preferred response before scoring")
    p.add_argument("--eval-pairs", type=int, default=4000, help="random pairs for the bias metric")
    p.add_argument("--out", default="-", help="metrics CSV path ('-' for stdout)")

    d = GenConfig()
    t = default_bias_gap_train_config()
    p = add("bias-table", cmd_bias_table, "mean |strength bias| of BT vs BTT fits for several thetas")
    p.add_argument("--thetas", type=_theta_list, default="2,5,10", help="comma-separated thetas (> 1)")
    p.add_argument("--prompts", type=int, default=d.n_prompts, help="number of prompts")
    p.add_argument("--pairs", type=int, default=d.pairs_per_prompt, help="comparisons per prompt")
    p.add_argument("--dim", type=int, default=d.dimension, help="response vector length")
    p.add_argument("--eval-pairs", type=int, default=d.n_eval_pairs, help="random pairs for the bias metric")
    p.add_argument("--hidden", type=int, default=d.hidden, help="hidden width of the fitted networks")
    p.add_argument("--lr", type=float, default=t.learning_rate, help="initial RMSprop learning rate")
    p.add_argument("--epochs", type=int, default=t.max_epochs, help="training epochs")
    p.add_argument("--batch-size", type=int, default=t.batch_size, help="minibatch size")
    p.add_argument("--out", default="-", help="CSV output path ('-' for stdout)")

    p = add("bias-curve", cmd_bias_curve, "tabulate the bias term and bias ratio over a strength grid")
    p.add_argument("--thetas", "--theta", dest="thetas", type=_theta_list, default="2,5,10",
                   help="comma-separated thetas (>= 1)")
    p.add_argument("--lo", type=float, default=DEFAULT_CURVE_RANGE[0], help="grid start")
    p.add_argument("--hi", type=float, default=DEFAULT_CURVE_RANGE[1], help="grid end")
    p.add_argument("--points", type=int, default=200, help="grid points (zero is added when in range)")
    p.add_argument("--out", default="-", help="CSV output path ('-' for stdout)")
    return parser, subs


def read_config(path: str) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.lstrip("-").replace("-", "_")] = value
    return out


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _apply_config(sub: argparse.ArgumentParser, path: str) -> None:
    values = read_config(path)
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config", "func")}
    defaults = {}
    for key, raw in values.items():
        if key not in actions:
            raise UsageError(f"{path}: unknown key {key!r}")
        action = actions[key]
        if isinstance(action, argparse._StoreTrueAction):
            if raw.lower() not in _TRUE | _FALSE:
                raise UsageError(f"{path}: {key} must be true or false")
            defaults[key] = raw.lower() in _TRUE
        else:
            defaults[key] = raw  # argparse converts string defaults with the flag's type
    sub.set_defaults(**defaults)


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    command = args.command
    try:
        if args.config:
            _apply_config(subs[command], args.config)
            args = parser.parse_args(argv)
        if args.seed < 0:
            raise UsageError("--seed must be non-negative")
        return args.func(args)
    except UsageError as exc:
        print(f"{PROG} {command}: error: {exc}", file=sys.stderr)
        return 2
    except (TieprefError, ValueError, OSError) as exc:
        print(f"{PROG} {command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
