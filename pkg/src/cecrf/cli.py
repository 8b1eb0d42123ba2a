"""Command-line entry point: ``cecrf <verb> [flags]``.

Every verb prints its effective configuration (defaults resolved) as one
``config {...}`` JSON line before doing any work.
"""

import argparse
import dataclasses
import json
import sys

import numpy as np

from . import baselines
from .data import SynthConfig, generate_synthetic, load_dataset, save_dataset, split
from .errors import CecrfError
from .evaluation import (DECODE_MODES, class_embedding, evaluate, export_embeddings,
                         nearest_neighbors, predict)
from .model import CrfParams, load_model, save_model
from .objectives import OBJECTIVES, finite_diff_check, gradcheck_instance
from .training import (OBJECTIVE_NAMES, TrainConfig, apply_feature_stats, sgd_train,
                       standardize_features, write_history)

GRADCHECK_TOLERANCE = 1e-4
BASELINES = ("unary", "stats", "mixture")
WEIGHT_SPLIT = 0.8


class _Parser(argparse.ArgumentParser):
    """Every flag with a default shows it in ``--help``."""

    def add_argument(self, *args, **kwargs):
        default = kwargs.get("default")
        if default is None or default is argparse.SUPPRESS:
            pass
        elif kwargs.get("help"):
            kwargs["help"] += " (default: %(default)s)"
        else:
            kwargs["help"] = "(default: %(default)s)"
        return super().add_argument(*args, **kwargs)


def _weight_grid(text):
    try:
        grid = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad weight grid {text!r}") from None
    if not grid or min(grid) < 0:
        raise argparse.ArgumentTypeError("weight grid needs non-negative values")
    return grid


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser():
    p = _Parser(prog="cecrf", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="sample a synthetic shelf dataset")
    g.add_argument("--config", help="JSON file with generator fields; flags override it")
    for f in dataclasses.fields(SynthConfig):
        g.add_argument("--" + f.name.replace("_", "-"), type=type(f.default), default=None,
                       help=f"(default: {f.default})")
    g.add_argument("--out", required=True)
    g.add_argument("--threads", type=_positive_int, default=1)

    defaults = TrainConfig()
    t = sub.add_parser("train", help="fit a CRF or a baseline")
    t.add_argument("--data", required=True)
    t.add_argument("--model-out", required=True)
    t.add_argument("--objective", choices=OBJECTIVE_NAMES, default=defaults.objective)
    t.add_argument("--embed-dim", type=int, default=defaults.embed_dim)
    t.add_argument("--batch-size", type=int, default=defaults.batch_size)
    t.add_argument("--lr", type=float, default=defaults.lr)
    t.add_argument("--momentum", type=float, default=defaults.momentum)
    t.add_argument("--l2", type=float, default=defaults.l2)
    t.add_argument("--epochs", type=int, default=defaults.epochs)
    t.add_argument("--seed", type=int, default=defaults.seed)
    t.add_argument("--init-scale", type=float, default=defaults.init_scale)
    t.add_argument("--no-bn", action="store_true",
                   help="drop batch normalization (memm_bn -> memm, global_folded -> global)")
    t.add_argument("--loglinear", action="store_true", help="full m x m pairwise matrix (R = I)")
    t.add_argument("--baseline", choices=BASELINES, default=None)
    t.add_argument("--k", type=_positive_int, default=8, help="mixture components")
    t.add_argument("--weight-grid", type=_weight_grid, default=baselines.DEFAULT_WEIGHT_GRID,
                   help="comma-separated pairwise weights to cross-validate")
    t.add_argument("--smoothing", type=float, default=1.0, help="transition pseudo-count")
    t.add_argument("--em-iterations", type=int, default=50)
    t.add_argument("--threads", type=_positive_int, default=1)

    i = sub.add_parser("infer", help="decode a dataset")
    i.add_argument("--model", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--mode", choices=DECODE_MODES, default="viterbi")
    i.add_argument("--out", required=True)
    i.add_argument("--threads", type=_positive_int, default=1)

    e = sub.add_parser("eval", help="error rate and recall at a calibrated precision")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--precision-target", type=float, default=91.0)
    e.add_argument("--mode", choices=DECODE_MODES, default="viterbi")
    e.add_argument("--threads", type=_positive_int, default=1)

    c = sub.add_parser("gradcheck", help="finite-difference check of one objective")
    c.add_argument("--objective", choices=sorted(OBJECTIVES), required=True)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--step", type=float, default=1e-5)
    c.add_argument("--threads", type=_positive_int, default=1)

    a = sub.add_parser("analyze", help="class-embedding neighbors or export")
    a.add_argument("--model", required=True)
    a.add_argument("--class", dest="cls", type=int, default=None)
    a.add_argument("--top-k", type=_positive_int, default=5)
    a.add_argument("--embedding", choices=("R", "R_bn", "Q"), default="R")
    a.add_argument("--export", default=None)
    a.add_argument("--threads", type=_positive_int, default=1)
    return p


def _print_config(verb, cfg):
    print("config " + json.dumps({"verb": verb, **cfg}, sort_keys=True, default=list))


# -- verbs --------------------------------------------------------------------

def _generate(args):
    fields = {}
    if args.config:
        with open(args.config) as fh:
            fields = json.load(fh)
        unknown = set(fields) - {f.name for f in dataclasses.fields(SynthConfig)}
        if unknown:
            raise ValueError(f"unknown generator fields: {sorted(unknown)}")
    for f in dataclasses.fields(SynthConfig):
        value = getattr(args, f.name)
        if value is not None:
            fields[f.name] = value
    cfg = SynthConfig(**fields)
    _print_config("generate", {**dataclasses.asdict(cfg), "out": args.out})
    data = generate_synthetic(cfg)
    save_dataset(data, args.out)
    print(f"wrote {len(data)} sequences, {data.num_objects} objects")


def _train_config(args):
    objective = args.objective
    if args.no_bn:
        objective = {"memm_bn": "memm", "global_folded": "global"}.get(objective, objective)
    return TrainConfig(objective=objective, lr=args.lr, momentum=args.momentum,
                       batch_size=args.batch_size, l2=args.l2, embed_dim=args.embed_dim,
                       epochs=args.epochs, seed=args.seed, init_scale=args.init_scale,
                       loglinear=args.loglinear)


def _fit_baseline(args, cfg, data):
    unary = baselines.train_unary(data, cfg)
    if args.baseline == "unary":
        return unary, None
    fit, held = split(data, WEIGHT_SPLIT, args.seed)
    # the weight is chosen with a unary model that never saw the held-out part
    fit_unary = baselines.train_unary(fit, cfg)
    held = [(fit_unary.log_probs(seq.features), seq.labels) for seq in held.sequences]
    if args.baseline == "stats":
        stats = baselines.transition_stats(fit.label_sequences(), data.m, args.smoothing)
        errors = baselines.validation_errors(
            lambda lp, w: baselines.stats_crf_decode(lp, stats, w), held, args.weight_grid)
        weight = baselines.pick_weight(errors)
        full = baselines.transition_stats(data.label_sequences(), data.m, args.smoothing)
        return baselines.StatsCrf(unary, full, weight), errors
    mix, _ = baselines.em_mixture_markov(fit.label_sequences(), data.m, args.k,
                                         args.em_iterations, args.seed, args.smoothing)
    errors = baselines.validation_errors(
        lambda lp, w: baselines.mixture_decode(mix, lp, w), held, args.weight_grid)
    weight = baselines.pick_weight(errors)
    full, _ = baselines.em_mixture_markov(data.label_sequences(), data.m, args.k,
                                          args.em_iterations, args.seed, args.smoothing)
    return baselines.MixtureCrf(unary, full, weight), errors


def _train(args):
    cfg = _train_config(args)
    cfg.validate()
    shown = cfg.as_dict()
    shown.update(data=args.data, model_out=args.model_out, threads=args.threads,
                 baseline=args.baseline)
    if args.baseline in ("stats", "mixture"):
        shown.update(weight_grid=list(args.weight_grid), smoothing=args.smoothing)
    if args.baseline == "mixture":
        shown.update(k=args.k, em_iterations=args.em_iterations)
    _print_config("train", shown)

    _, data = standardize_features(load_dataset(args.data))
    if args.baseline:
        model, errors = _fit_baseline(args, cfg, data)
        if errors:
            for w in sorted(errors):
                print(f"weight {w!r}\tvalidation_error {100 * errors[w]:.4f}")
            print(f"chosen weight {model.weight!r}")
        save_model(model, args.model_out)
        return
    result = sgd_train(cfg, data, threads=args.threads,
                       log=lambda r: print(f"epoch {r.epoch}\tobjective {r.loss:.6f}"))
    save_model(result.params, args.model_out)
    write_history(result.history, args.model_out + ".history.tsv")


def _infer(args):
    _print_config("infer", vars(args))
    model = load_model(args.model)
    data = load_dataset(args.data)
    results = predict(model, data, args.mode, args.threads)
    with open(args.out, "w") as fh:
        for labels, conf in results:
            line = " ".join(str(int(y)) for y in labels)
            if args.mode == "marginal":
                line += "\t" + " ".join(repr(float(c)) for c in conf)
            fh.write(line + "\n")
    print(f"decoded {len(results)} sequences")


def _eval(args):
    _print_config("eval", vars(args))
    report = evaluate(load_model(args.model), load_dataset(args.data), args.precision_target,
                      args.mode, args.threads)
    print(report.to_text())
    print("\t".join(report.KEYS))
    print(report.to_tsv())


def _gradcheck(args):
    _print_config("gradcheck", vars(args))
    params, data = gradcheck_instance(args.objective, args.seed)
    worst = finite_diff_check(args.objective, params, data, args.step)
    ok = worst <= GRADCHECK_TOLERANCE
    print(f"max_relative_error {worst:.3e}")
    print("PASS" if ok else f"FAIL (tolerance {GRADCHECK_TOLERANCE:g})")
    return 0 if ok else 1


def _analyze(args):
    _print_config("analyze", vars(args))
    if (args.cls is None) == (args.export is None):
        raise ValueError("give exactly one of --class or --export")
    model = load_model(args.model)
    if not isinstance(model, CrfParams):
        raise ValueError("analyze needs an unfolded class-embedding model")
    if args.export is not None:
        export_embeddings(model, args.export)
        print(f"wrote {model.dims.m} class embeddings")
        return
    E = class_embedding(model, args.embedding)
    for rank, (j, cos) in enumerate(nearest_neighbors(E, args.cls, args.top_k), start=1):
        print(f"{rank}\t{j}\t{cos:.6f}")


VERBS = {"generate": _generate, "train": _train, "infer": _infer, "eval": _eval,
         "gradcheck": _gradcheck, "analyze": _analyze}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    np.seterr(over="ignore", under="ignore")
    try:
        code = VERBS[args.verb](args)
    except (CecrfError, ValueError, OSError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
