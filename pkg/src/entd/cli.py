"""Command-line front end: fit, eval, predict, and synth subcommands.

Exit codes: 0 success, 1 validation failure, 2 numerical abort.  The
ENTD_SEED environment variable is the fallback when --seed is not given.
"""

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import metrics, models, tensordata, trainer
from .kernels import CholeskyError


def _default_seed():
    return int(os.environ.get("ENTD_SEED", "0"))


def _add_train_flags(p):
    p.add_argument("--model", choices=trainer.MODELS, default="ented")
    p.add_argument("--likelihood", choices=["bernoulli", "negbin"], default=None,
                   help="default: bernoulli for binary data, negbin for count")
    p.add_argument("--rank", type=int, default=3)
    p.add_argument("--inducing-u", type=int, default=50)
    p.add_argument("--inducing-v", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--ng-rate", type=float, default=0.3)
    p.add_argument("--zeta", type=float, default=20.0)
    p.add_argument("--bandwidth", type=float, default=1.0)
    p.add_argument("--learn-bandwidth", action="store_true")
    p.add_argument("--no-early-stop", dest="early_stop", action="store_false",
                   help="run the full epoch budget")
    p.add_argument("--seed", type=int, default=None)


def build_parser():
    parser = argparse.ArgumentParser(prog="entd")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="train a model and write a checkpoint")
    p_fit.add_argument("--meta", required=True)
    p_fit.add_argument("--data", required=True)
    p_fit.add_argument("--checkpoint", required=True)
    p_fit.add_argument("--log", default=None, help="JSON-lines training log path")
    _add_train_flags(p_fit)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p_eval.add_argument("--meta", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--metrics", default=None,
                        help="comma list; default auc,nll (binary) or rmse,mape,nll (count)")
    p_eval.add_argument("--draws", type=int, default=32)
    p_eval.add_argument("--plugin", action="store_true",
                        help="plug-in link of the posterior mean instead of MC draws")
    p_eval.add_argument("--seed", type=int, default=None)

    p_pred = sub.add_parser("predict", help="predict values for an index file")
    p_pred.add_argument("--checkpoint", required=True)
    p_pred.add_argument("--indices", required=True,
                        help="TSV of zero-based index tuples, one per line")
    p_pred.add_argument("--output", required=True)
    p_pred.add_argument("--draws", type=int, default=32)
    p_pred.add_argument("--plugin", action="store_true")
    p_pred.add_argument("--seed", type=int, default=None)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset")
    p_synth.add_argument("--kind", choices=["binary", "count"], required=True)
    p_synth.add_argument("--shape", required=True, help="comma list, e.g. 20,20,20")
    p_synth.add_argument("--rank", type=int, default=3)
    p_synth.add_argument("--zeta", type=float, default=20.0)
    p_synth.add_argument("--meta-out", required=True)
    p_synth.add_argument("--data-out", required=True)
    p_synth.add_argument("--seed", type=int, default=None)
    return parser


def _seed_of(args):
    return _default_seed() if args.seed is None else args.seed


def _load(args):
    return tensordata.load_coo(args.meta, args.data)


def cmd_fit(args):
    tensor = _load(args)
    likelihood = args.likelihood
    if likelihood is None:
        likelihood = "bernoulli" if tensor.kind == "binary" else "negbin"
    config = trainer.TrainConfig(
        model=args.model,
        likelihood=likelihood,
        rank=args.rank,
        inducing_u=args.inducing_u,
        inducing_v=args.inducing_v,
        batch_size=args.batch_size,
        epochs=args.epochs,
        lr=args.lr,
        ng_rate=args.ng_rate,
        zeta=args.zeta,
        bandwidth=args.bandwidth,
        learn_bandwidth=args.learn_bandwidth,
        early_stop=args.early_stop,
        seed=_seed_of(args),
    )
    log_stream = open(args.log, "w") if args.log else None
    try:
        report = trainer.fit(config, tensor, log_stream=log_stream)
    finally:
        if log_stream:
            log_stream.close()
    trainer.save_checkpoint(report.state, report.factors, config, args.checkpoint)
    print(json.dumps({"epochs": len(report.records), "checkpoint": args.checkpoint}))
    return 0


def _checkpoint_inputs(state, factors, indices):
    shape = factors.shape
    if indices.shape[1] != len(shape):
        raise ValueError(f"index tuples have {indices.shape[1]} modes, model has {len(shape)}")
    if (indices < 0).any() or (indices >= np.asarray(shape)).any():
        raise ValueError("index out of range for the trained factors")
    return models.assemble_inputs(factors, indices)


def cmd_eval(args):
    state, factors, _ = trainer.load_checkpoint(args.checkpoint)
    tensor = _load(args)
    like = state.likelihood
    if tensor.kind != like.data_kind:
        raise ValueError(f"{tensor.kind} data does not match likelihood {like.kind!r}")
    allowed = ["auc", "nll"] if tensor.kind == "binary" else ["rmse", "mape", "nll"]
    wanted = args.metrics.split(",") if args.metrics else allowed
    for m in wanted:
        if m not in allowed:
            raise ValueError(f"metric {m!r} not available for {tensor.kind} data")
    inputs = _checkpoint_inputs(state, factors, tensor.indices)
    rng = np.random.default_rng(_seed_of(args))
    x = tensor.values.astype(np.float64)
    out = {"n": tensor.nnz}
    if args.plugin:
        draws = models._link_prob(state, models.posterior_f(state, inputs)[0].numpy())
    else:
        draws = models.prob_draws(state, inputs, rng, args.draws)
    point = draws if draws.ndim == 1 else draws.mean(axis=0)
    for m in wanted:
        if m == "auc":
            out[m] = metrics.auc(point, tensor.values)
        elif m == "nll":
            out[m] = metrics.nll(draws, x, like.kind, zeta=like.zeta)
        elif m == "rmse":
            out[m] = metrics.rmse_rel(x, models.predict(state, inputs, "negbin"))
        elif m == "mape":
            out[m] = metrics.mape(x, models.predict(state, inputs, "negbin"))
    print(json.dumps(out, sort_keys=True))
    return 0


def cmd_predict(args):
    state, factors, _ = trainer.load_checkpoint(args.checkpoint)
    rows = []
    with open(args.indices) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append([int(p) for p in line.split("\t")])
            except ValueError as exc:
                raise ValueError(f"{args.indices}:{lineno}: {exc}") from exc
    indices = np.asarray(rows, dtype=np.int64).reshape(len(rows), -1)
    inputs = _checkpoint_inputs(state, factors, indices)
    rng = np.random.default_rng(_seed_of(args))
    mode = state.likelihood.kind
    if mode == "bernoulli":
        pred = models.predict(state, inputs, mode, rng=rng,
                              n_draws=args.draws, plugin=args.plugin)
    else:
        pred = models.predict(state, inputs, mode)
    with open(args.output, "w", newline="\n") as fh:
        for row, value in zip(rows, pred):
            fh.write("\t".join(str(c) for c in row) + f"\t{float(value)!r}\n")
    return 0


def cmd_synth(args):
    shape = tuple(int(s) for s in args.shape.split(","))
    seed = _seed_of(args)
    if args.kind == "binary":
        tensor, _ = tensordata.synth_binary(shape, args.rank, seed)
    else:
        tensor, _ = tensordata.synth_count(shape, args.rank, args.zeta, seed)
    tensordata.save_coo(tensor, args.meta_out, args.data_out)
    print(json.dumps({"n": tensor.nnz, "meta": args.meta_out, "data": args.data_out}))
    return 0


HANDLERS = {"fit": cmd_fit, "eval": cmd_eval, "predict": cmd_predict, "synth": cmd_synth}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if not exc.code else 1
    try:
        return HANDLERS[args.command](args)
    except (tensordata.DataFormatError, trainer.CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (trainer.TrainingError, CholeskyError) as exc:
        record = {"error": str(exc)}
        if isinstance(exc, trainer.TrainingError):
            record["diagnostics"] = exc.diagnostics
        print(json.dumps(record), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
