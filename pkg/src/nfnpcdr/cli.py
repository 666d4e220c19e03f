"""Command-line entry point: ``nfnpcdr <subcommand> ...``.

Exit codes: 0 success, 2 input or config error, 3 numeric failure during
training, 4 checkpoint error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import checkpoint, commonpref, data, synthdata, training
from .flows import FlowNumericError
from .model import ModelConfig
from .npencoder import UnknownIdError
from .numkernel import no_grad
from .training import TrainConfig, TrainingNumericError

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_CHECKPOINT = 0, 2, 3, 4

VARIANTS = {
    "full": {},
    "no_flow": {"no_flow": True},
    "no_pool": {"no_pool": True},
    "no_film": {"no_film": True},
    "none_of_three": {"no_flow": True, "no_pool": True, "no_film": True},
}


class CliError(Exception):
    def __init__(self, message, code):
        self.code = code
        super().__init__(message)


# -- parser ----------------------------------------------------------------------------


def _formatter(prog):
    return argparse.ArgumentDefaultsHelpFormatter(prog, max_help_position=32)


def _model_flags(p):
    g = p.add_argument_group("model")
    g.add_argument("--flow", choices=["planar", "radial", "coupling", "none"], default="planar",
                   help="flow family")
    g.add_argument("--flow-steps", type=int, default=6, help="number of flow steps K")
    g.add_argument("--pool-size", type=int, default=10, help="preference pool size N")
    g.add_argument("--d1", type=int, default=10, help="embedding width")
    g.add_argument("--d2", type=int, default=64, help="latent width")
    g.add_argument("--d3", type=int, default=64, help="preference width")
    g.add_argument("--hidden", type=int, default=64, help="hidden width of every MLP")
    g.add_argument("--layers", type=int, default=3, help="layers per encoder MLP")
    g.add_argument("--decoder-layers", type=int, default=3, help="FiLM-modulated decoder layers")
    g.add_argument("--alpha-dof", type=float, default=1.0,
                   help="Student's-t degrees of freedom of the soft assignment")
    g.add_argument("--rating-scale", type=float, default=1.0,
                   help="factor applied to the rating feature of the encoders (0.2 maps 1..5 to 0.2..1)")
    g.add_argument("--no-flow", action="store_true", default=False, help="drop the flow")
    g.add_argument("--no-pool", action="store_true", default=False,
                   help="drop the preference pool and clustering loss")
    g.add_argument("--no-film", action="store_true", default=False,
                   help="replace FiLM with eta=1, delta=0")


def _train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--lambda", dest="lam", type=float, default=0.3, help="clustering loss weight")
    g.add_argument("--support-len", type=int, default=20, help="support set length")
    g.add_argument("--epochs", type=int, default=100, help="maximum epochs")
    g.add_argument("--batch-size", type=int, default=128, help="tasks per minibatch")
    g.add_argument("--lr", type=float, default=0.01, help="Adam learning rate")
    g.add_argument("--patience", type=int, default=10, help="early-stopping patience (epochs)")
    g.add_argument("--min-epochs", type=int, default=0,
                   help="epochs before early stopping may trigger")
    g.add_argument("--val-fraction", type=float, default=0.1,
                   help="fraction of training tasks held out for early stopping")


def build_parser():
    parser = argparse.ArgumentParser(prog="nfnpcdr", formatter_class=_formatter,
                                     description="Cold-start cross-domain rating prediction.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", formatter_class=_formatter,
                       help="filter two rating logs and split overlapping users")
    p.add_argument("--source", required=True, help="source-domain ratings file")
    p.add_argument("--target", required=True, help="target-domain ratings file")
    p.add_argument("--alpha", type=float, default=0.2, help="fraction of overlap held out as cold-start")
    p.add_argument("--seed", type=int, default=0, help="split seed")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--min-interactions", type=int, default=5, help="per-user/per-item minimum")
    p.add_argument("--source-rating-floor", type=int, default=4, help="lowest kept source rating")
    p.add_argument("--delimiter", default=",", help="field delimiter of the input files")
    p.add_argument("--config", help="JSON file of flag values (flags win)")

    p = sub.add_parser("gen-synth", formatter_class=_formatter, help="write a synthetic dataset")
    p.add_argument("--config", help="JSON synthetic config (keys mirror the flags below; flags win)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-interests", type=int, default=3, help="interest count G")
    p.add_argument("--n-users", type=int, default=500, help="users")
    p.add_argument("--n-items", type=int, default=300, help="items per domain")
    p.add_argument("--overlap", type=float, default=0.8, help="fraction of users in both domains")
    p.add_argument("--n-interactions", type=int, default=20, help="ratings per user per domain")
    p.add_argument("--noise", type=float, default=0.3, help="rating noise standard deviation")
    p.add_argument("--concentration", type=float, default=0.5, help="Dirichlet concentration")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--alpha", type=float, default=0.2, help="split fraction used for the oracle baseline")

    p = sub.add_parser("train", formatter_class=_formatter, help="train a model")
    p.add_argument("--data", required=True, help="preprocessed directory")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="training log path (default: <out>.log.jsonl)")
    p.add_argument("--seed", type=int, default=0, help="initialisation and shuffling seed")
    p.add_argument("--config", help="JSON file of flag values (flags win)")
    _model_flags(p)
    _train_flags(p)

    p = sub.add_parser("eval", formatter_class=_formatter, help="evaluate on cold-start users")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="preprocessed directory")
    p.add_argument("--samples", type=int, default=1, help="prior samples averaged per task")
    p.add_argument("--entropy-samples", type=int, default=100,
                   help="Monte Carlo samples per task for the entropy pair")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")
    p.add_argument("--config", help="JSON file of flag values (flags win)")

    p = sub.add_parser("ablate", formatter_class=_formatter,
                       help="train and evaluate the five ablation variants per seed")
    p.add_argument("--data", required=True, help="preprocessed directory")
    p.add_argument("--seeds", type=int, nargs="+", default=[0], help="seeds")
    p.add_argument("--out", help="CSV path (default: standard output)")
    p.add_argument("--jobs", type=int, default=1, help="parallel cells")
    p.add_argument("--variants", nargs="+", choices=list(VARIANTS), default=list(VARIANTS),
                   help="variants to run")
    p.add_argument("--config", help="JSON file of flag values (flags win)")
    _model_flags(p)
    _train_flags(p)

    p = sub.add_parser("inspect", formatter_class=_formatter, help="export assignments or entropies")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="preprocessed directory")
    p.add_argument("--what", choices=["assignments", "entropy"], required=True, help="export kind")
    p.add_argument("--split", choices=["test", "train"], default="test", help="which users' tasks")
    p.add_argument("--n-tasks", type=int, default=0, help="seeded sample of this many tasks (0: all)")
    p.add_argument("--samples", type=int, default=1000, help="Monte Carlo samples per task (entropy)")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")
    p.add_argument("--out", help="output path (default: standard output)")
    p.add_argument("--config", help="JSON file of flag values (flags win)")
    return parser


def _subparser(parser, command):
    for action in parser._subparsers._group_actions:
        if command in action.choices:
            return action.choices[command]
    raise KeyError(command)


def parse_args(argv=None):
    """Parse ``argv``; values from ``--config`` replace defaults, explicit flags win."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = _subparser(parser, args.command)
        overrides = _read_json(args.config)
        dests = {a.dest for a in sub._actions} - {"help", "config"}
        aliases = {"lambda": "lam"}
        mapped = {}
        for key, value in overrides.items():
            dest = aliases.get(key, key.replace("-", "_"))
            if dest not in dests:
                raise CliError(f"{args.config}: unknown config key {key!r}", EXIT_INPUT)
            mapped[dest] = value
        sub.set_defaults(**mapped)
        args = parser.parse_args(argv)
    return args


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise CliError(f"{path}: {exc.strerror}", EXIT_INPUT) from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: line {exc.lineno}: {exc.msg}", EXIT_INPUT) from exc
    if not isinstance(obj, dict):
        raise CliError(f"{path}: expected a JSON object", EXIT_INPUT)
    return obj


# -- config assembly ----------------------------------------------------------------------


def model_config(args, **flags):
    return ModelConfig(d1=args.d1, d2=args.d2, d3=args.d3, hidden=args.hidden,
                       mlp_layers=args.layers, decoder_layers=args.decoder_layers, flow=args.flow,
                       flow_steps=args.flow_steps, pool_size=args.pool_size,
                       alpha_dof=args.alpha_dof, rating_scale=args.rating_scale,
                       no_flow=flags.get("no_flow", args.no_flow),
                       no_pool=flags.get("no_pool", args.no_pool),
                       no_film=flags.get("no_film", args.no_film))


def train_config(args, seed=None):
    return TrainConfig(lam=args.lam, batch_size=args.batch_size, lr=args.lr, epochs=args.epochs,
                       patience=args.patience, min_epochs=args.min_epochs,
                       val_fraction=args.val_fraction,
                       support_length=args.support_len, seed=args.seed if seed is None else seed)


def _load_data(path):
    if not os.path.isdir(path):
        raise CliError(f"{path}: not a directory", EXIT_INPUT)
    return data.load_preprocessed(path)


def _load_ckpt(path):
    return checkpoint.load_checkpoint(path)


def _emit(text, out):
    if out:
        with open(out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# -- subcommands ----------------------------------------------------------------------------


def cmd_preprocess(args):
    src = data.read_ratings(args.source, args.delimiter)
    tgt = data.read_ratings(args.target, args.delimiter)
    pre = data.preprocess(src, tgt, args.alpha, args.seed, args.min_interactions,
                          args.source_rating_floor)
    data.write_preprocessed(args.out, pre)
    c = pre.counts()
    print(f"{'domain':<8}{'users':>8}{'items':>8}{'ratings':>10}")
    for dom in ("source", "target"):
        print(f"{dom:<8}{c[dom]['users']:>8}{c[dom]['items']:>8}{c[dom]['ratings']:>10}")
    print(f"overlap {c['overlap']} (train {c['train_users']}, test {c['test_users']})")
    return EXIT_OK


def _synth_config(args):
    return synthdata.SynthConfig(
        n_interests=args.n_interests, n_users=args.n_users, n_items=args.n_items,
        overlap=args.overlap, n_interactions=args.n_interactions, noise=args.noise,
        seed=args.seed, concentration=args.concentration)


def _tree_digest(root):
    h = hashlib.sha256()
    for name in sorted(os.listdir(root)):
        with open(os.path.join(root, name), "rb") as fh:
            h.update(name.encode() + b"\0" + fh.read())
    return h.hexdigest()


def cmd_gen_synth(args):
    cfg = _synth_config(args)
    synth = synthdata.generate(cfg)
    synthdata.write_synth(args.out, synth)
    print(f"wrote {len(synth.source)} source and {len(synth.target)} target ratings to {args.out}")
    print(f"interests {cfg.n_interests}; rating counts "
          + " ".join(f"{r}:{n}" for r, n in zip(*np.unique([x.rating for x in synth.target],
                                                            return_counts=True))))
    try:
        oracle = f"{synthdata.oracle_mae(cfg, alpha=args.alpha, data=synth):.6f}"
    except data.DataError as exc:
        oracle = f"unavailable ({exc})"
    print(f"global-mean oracle MAE (alpha={args.alpha}): {oracle}")
    print(f"digest {_tree_digest(args.out)}")
    return EXIT_OK


def cmd_train(args):
    pre = _load_data(args.data)
    mc, tc = model_config(args), train_config(args)
    log_path = args.log or args.out + ".log.jsonl"
    with open(log_path, "w", encoding="utf-8", newline="\n") as fh:
        def log(line):
            fh.write(line + "\n")
            fh.flush()
        model, result = training.fit(pre, mc, tc, log)
    checkpoint.save_checkpoint(model, tc, args.out)
    print(json.dumps({"checkpoint": args.out, "log": log_path, "epochs": len(result.history),
                      "best_epoch": result.best_epoch, "best_val_mae": result.best_val_mae}))
    return EXIT_OK


def cmd_eval(args):
    model, tc = _load_ckpt(args.ckpt)
    pre = _load_data(args.data)
    tasks = _tasks(model, pre, "test", tc.support_length)
    report = training.evaluate(model, tasks, args.samples, args.seed,
                               entropy_samples=args.entropy_samples)
    print(json.dumps(report.to_json(), indent=1))
    return EXIT_OK


def _tasks(model, pre, split, support_length):
    users = pre.test if split == "test" else pre.train
    tasks = training.build_tasks(pre, users, support_length)
    try:
        model.prepare(tasks)
    except UnknownIdError as exc:
        raise CliError(f"data does not match the checkpoint: {exc}", EXIT_CHECKPOINT) from exc
    return tasks


def _ablate_cell(data_dir, mc, tc, variant):
    pre = data.load_preprocessed(data_dir)
    try:
        model, _ = training.fit(pre, mc, tc)
        report = training.evaluate(model, training.build_tasks(pre, pre.test, tc.support_length),
                                   seed=tc.seed)
        return {"seed": tc.seed, "variant": variant, "mae": report.mae, "rmse": report.rmse,
                "error": ""}
    except (ArithmeticError, ValueError) as exc:
        return {"seed": tc.seed, "variant": variant, "mae": "", "rmse": "",
                "error": f"{type(exc).__name__}: {exc}"}


def cmd_ablate(args):
    _load_data(args.data)
    cells = [(args.data, model_config(args, **VARIANTS[v]), train_config(args, seed), v)
             for seed in args.seeds for v in args.variants]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_ablate_cell, *zip(*cells)))
    else:
        rows = [_ablate_cell(*cell) for cell in cells]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, ["seed", "variant", "mae", "rmse", "error"], lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    _emit(buf.getvalue(), args.out)
    return EXIT_OK


def cmd_inspect(args):
    model, tc = _load_ckpt(args.ckpt)
    pre = _load_data(args.data)
    tasks = _tasks(model, pre, args.split, tc.support_length)
    if args.n_tasks:
        pick = np.random.default_rng(args.seed).choice(len(tasks), min(args.n_tasks, len(tasks)),
                                                       replace=False)
        tasks = [tasks[k] for k in sorted(pick)]
    if args.what == "assignments":
        if model.pool is None:
            raise CliError("checkpoint has no preference pool", EXIT_INPUT)
        with no_grad():
            _, c, _ = model.common_preference(model.batch(tasks))
        _emit(commonpref.assignments_csv([t.user_id for t in tasks], c.data), args.out)
    else:
        h0, hk = training.estimate_entropy(model, tasks, args.samples, seed=args.seed)
        _emit(json.dumps({"entropy_z0": h0, "entropy_zK": hk, "n_samples": args.samples}) + "\n",
              args.out)
    return EXIT_OK


COMMANDS = {"preprocess": cmd_preprocess, "gen-synth": cmd_gen_synth, "train": cmd_train,
            "eval": cmd_eval, "ablate": cmd_ablate, "inspect": cmd_inspect}


def main(argv=None):
    try:
        args = parse_args(argv)
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except checkpoint.CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (TrainingNumericError, FlowNumericError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except data.DataError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FileNotFoundError as exc:
        print(f"input error: {exc.filename}: {exc.strerror}", file=sys.stderr)
        return EXIT_INPUT
    except (ValueError, UnicodeDecodeError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
