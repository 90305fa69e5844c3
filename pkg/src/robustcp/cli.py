"""Command-line front end: robustcp <command> [options].

Exit codes are 0 on success, 2 for invalid configuration or input and 3 for
runtime or numeric failures (divergence, non-finite values).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__, conformal
from .attacks import AttackBudget, perturb
from .conformal import LossWeights, SizeStrata
from .data import DEFAULT_BOX, DataError, Dataset, SplitSpec, gen_blobs, load_csv, split, write_csv
from .io import atomic_write_json, atomic_write_text
from .models import ModelFormatError, forward_logits, load_params, save_params
from .seeding import derive_seed
from .training import DivergenceError, TrainConfig, train_opsa_at, train_pgd_at, train_standard

log = logging.getLogger("robustcp")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
DEFAULT_R = 8 / 255
DEFAULT_ETA = 2 / 255
# CE descent uses a mean loss, OPSA-AT a summed one, hence the different scales.
DEFAULT_LR = {"standard": 0.05, "pgd-at": 0.05, "opsa-at": 1e-3}
DEFAULT_OPTIMIZER = {"standard": "sgd", "pgd-at": "sgd", "opsa-at": "adam"}

# Keys that never enter the config fingerprint.
_UNHASHED = {"config", "func", "command", "verbose", "out"}


class ConfigError(ValueError):
    pass


# -- helpers ------------------------------------------------------------------

def _positive(kind):
    def parse(text):
        v = kind(text)
        if not v > 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return v
    return parse


def _nonneg_float(text):
    v = float(text)
    if not (v >= 0 and math.isfinite(v)):
        raise argparse.ArgumentTypeError(f"must be a nonnegative finite number, got {text}")
    return v


def _alpha(text):
    v = float(text)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError(f"alpha must lie in (0, 1), got {text}")
    return v


def fingerprint(args: argparse.Namespace) -> str:
    doc = {k: v for k, v in sorted(vars(args).items()) if k not in _UNHASHED}
    blob = json.dumps(doc, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _config_echo(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in {"func", "config"}}


def _load(path, box_flag) -> Dataset:
    if path is None:
        raise ConfigError("a data file is required")
    if not Path(path).exists():
        raise ConfigError(f"no such file: {path}")
    box = None if box_flag is False else "sidecar"
    ds = load_csv(path, box=box)
    if box_flag is True and ds.box is None:
        ds = Dataset(ds.X, ds.y, ds.num_classes, DEFAULT_BOX, ds.classes, ds.feature_names, ds.provenance)
    return ds


def _load_model(path):
    if path is None:
        raise ConfigError("--model is required")
    if not Path(path).exists():
        raise ConfigError(f"no such model file: {path}")
    return load_params(path)


def _check_compatible(params, *datasets: Dataset) -> None:
    for ds in datasets:
        if ds.num_classes != params.config.num_classes or ds.dim != params.config.input_dim:
            raise ConfigError(f"data has K={ds.num_classes}, d={ds.dim} but the model expects "
                              f"K={params.config.num_classes}, d={params.config.input_dim}")


def _budget(args, ds: Dataset) -> AttackBudget:
    return AttackBudget(args.r, args.norm, ds.box)


def _row_keys(ds: Dataset) -> np.ndarray:
    return ds.indices if ds.indices is not None else np.arange(len(ds))


def _attack(ds: Dataset, params, args, method: str, seed: int, T1: float | None = None):
    """Perturb every row of ``ds``; returns the perturbed dataset and the outcomes."""
    budget = _budget(args, ds)
    kw = {}
    if method == "pgd":
        kw = dict(steps=args.steps, step_size=args.eta, seed=seed, indices=_row_keys(ds))
    elif method == "opsa":
        kw = dict(steps=args.steps, eta=args.eta, seed=seed, indices=_row_keys(ds),
                  T1=args.t1 if T1 is None else T1)
    X_adv, outcomes = perturb(method, ds.X, ds.y, params, budget, **kw)
    if ds.box is not None:
        # x + (hi - x) can land one ulp outside the box.
        X_adv = np.clip(X_adv, *ds.box)
    return ds.with_features(X_adv, attack=method, attack_seed=int(seed)), outcomes


# -- commands -----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    box = None if args.box is False else DEFAULT_BOX
    ds = gen_blobs(args.classes, args.dim, args.n_per_class, args.spread, box=box, seed=args.seed)
    write_csv(ds, args.out)
    print(f"wrote {len(ds)} rows (K={ds.num_classes}, d={ds.dim}) to {args.out}")
    return EXIT_OK


def cmd_split(args) -> int:
    ds = _load(args.data, args.box)
    parts = split(ds, SplitSpec(*args.fractions, seed=args.seed))
    out = Path(args.out)
    for part, name in zip(parts, ("train", "cal", "test")):
        write_csv(part, out / f"{name}.csv")
    print("split sizes " + " ".join(str(len(p)) for p in parts) + f" written to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    mode = args.mode
    lr = args.lr if args.lr is not None else DEFAULT_LR[mode]
    optimizer = args.optimizer or DEFAULT_OPTIMIZER[mode]
    pretrain = args.pretrain_epochs
    if pretrain is None:
        pretrain = 5 if mode == "opsa-at" and args.init_model is None else 0
    if mode == "opsa-at" and args.init_model is None and pretrain == 0:
        raise ConfigError("opsa-at needs --init-model or --pretrain-epochs > 0")
    if args.out is None:
        raise ConfigError("--out is required")

    ds = _load(args.data, args.box)
    monitor = _load(args.monitor, args.box) if args.monitor else None
    config = TrainConfig(
        epochs=args.epochs, batch_size=args.batch, cal_fraction=args.cal_frac, alpha=args.alpha,
        loss_weights=LossWeights(args.lam, args.t2), budget=_budget(args, ds), T1=args.t1,
        attack_steps=args.steps, attack_eta=args.eta, optimizer=optimizer, lr=lr,
        hidden=tuple(args.hidden), seed=args.seed, attack_calibration=args.attack_calibration)

    init = _load_model(args.init_model) if args.init_model else None
    if init is not None:
        _check_compatible(init, ds)
    pre_report = None
    if pretrain:
        pre_cfg = TrainConfig(epochs=pretrain, batch_size=args.batch, lr=DEFAULT_LR["standard"],
                              optimizer="sgd", hidden=tuple(args.hidden), seed=args.seed)
        init, pre_report = train_standard(ds, pre_cfg, init, monitor)

    if mode == "standard":
        params, report = train_standard(ds, config, init, monitor)
    elif mode == "pgd-at":
        params, report = train_pgd_at(ds, config, init, monitor)
    else:
        params, report = train_opsa_at(ds, config, init, monitor)

    save_params(params, args.out)
    doc = report.to_dict()
    doc.update(seed=args.seed, fingerprint=fingerprint(args), train_config=config.to_dict(),
               pretrain=pre_report.to_dict() if pre_report else None, run_config=_config_echo(args))
    report_path = Path(str(args.out) + ".report.json")
    atomic_write_json(report_path, doc)
    last = report.epochs[-1].mean_loss if report.epochs else float("nan")
    print(f"{mode}: {len(report.epochs)} epochs, final loss {last:.6g}; model {args.out}, report {report_path}")
    return EXIT_OK


def cmd_attack(args) -> int:
    ds = _load(args.data, args.box)
    params = _load_model(args.model)
    _check_compatible(params, ds)
    if args.out is None:
        raise ConfigError("--out is required")
    adv, outcomes = _attack(ds, params, args, args.method, args.seed)
    write_csv(adv, args.out)
    log_doc = {
        "method": args.method, "seed": args.seed, "fingerprint": fingerprint(args),
        "run_config": _config_echo(args),
        "samples": [{"row": i, "label": int(y), "epsilon_linf": float(np.max(np.abs(o.epsilon_star), initial=0.0)),
                     "objective_trace": o.objective_trace, "converged": o.converged,
                     "iterations": o.iterations, "zero_gradient": o.zero_gradient}
                    for i, (o, y) in enumerate(zip(outcomes, ds.y))],
    }
    atomic_write_json(Path(str(args.out) + ".log.json"), log_doc)
    print(f"{args.method}: perturbed {len(adv)} rows into {args.out}")
    return EXIT_OK


def _evaluate_once(params, cal: Dataset, test: Dataset, alpha: float):
    if len(cal) == 0:
        raise ConfigError("calibration set is empty")
    if len(test) == 0:
        raise ConfigError("test set is empty")
    scores = conformal.true_class_scores(forward_logits(params, cal.X), cal.y)
    calib = conformal.thr_quantile(scores, alpha)
    logits = forward_logits(params, test.X)
    mask = conformal.prediction_mask(logits, calib.tau)
    strata = SizeStrata.default(test.num_classes)
    metrics = {"coverage": conformal.coverage(mask, test.y), "size": conformal.avg_size(mask),
               "sscv": conformal.sscv(mask, test.y, alpha, strata)}
    return calib, mask, metrics


def _aggregate(runs: list[dict]) -> dict:
    out = {}
    for key in ("coverage", "size", "sscv"):
        vals = np.array([r[key] for r in runs])
        se = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
        out[key] = {"mean": float(vals.mean()), "stderr": se}
    return out


def _run_evaluation(args, params, cal, test, attack: str, T1: float | None = None):
    runs, rows = [], []
    for rep in range(args.repeats):
        seed = args.seed if rep == 0 else derive_seed(args.seed, "repeat", rep)
        c, t = cal, test
        if attack != "none":
            c, _ = _attack(cal, params, args, attack, derive_seed(seed, "attack-cal"), T1)
            t, _ = _attack(test, params, args, attack, derive_seed(seed, "attack-test"), T1)
        calib, mask, metrics = _evaluate_once(params, c, t, args.alpha)
        runs.append({"repeat": rep, "seed": int(seed), "tau": calib.tau if calib.tau != conformal.NEG_INFINITY else None,
                     "predicts_all": calib.predicts_all, "rank": calib.k, "n_cal": calib.n_cal, **metrics})
        for i in range(len(t)):
            members = np.flatnonzero(mask[i])
            rows.append((rep, i, int(t.y[i]), " ".join(str(k) for k in members), len(members), int(mask[i, t.y[i]])))
    return runs, rows


def _samples_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["repeat", "id", "label", "set", "size", "covered"])
    writer.writerows(rows)
    return buf.getvalue()


def cmd_evaluate(args) -> int:
    params = _load_model(args.model)
    cal, test = _load(args.cal, args.box), _load(args.test, args.box)
    _check_compatible(params, cal, test)
    if args.out is None:
        raise ConfigError("--out is required")
    runs, rows = _run_evaluation(args, params, cal, test, args.attack)
    out = Path(args.out)
    summary = {"alpha": args.alpha, "seed": args.seed, "fingerprint": fingerprint(args),
               "attack": args.attack, "num_classes": test.num_classes, "repeats": runs,
               "aggregate": _aggregate(runs), "run_config": _config_echo(args)}
    atomic_write_text(out / "samples.csv", _samples_csv(rows))
    atomic_write_json(out / "summary.json", summary)
    agg = summary["aggregate"]
    print(f"alpha={args.alpha} coverage={agg['coverage']['mean']:.4f} size={agg['size']['mean']:.4f} "
          f"sscv={agg['sscv']['mean']:.4f}")
    return EXIT_OK


def cmd_sweep_t1(args) -> int:
    values = list(args.t1_values or [])
    if not values:
        raise ConfigError("the T1 list is empty")
    if any(not (v > 0 and math.isfinite(v)) for v in values):
        raise ConfigError(f"T1 values must be positive and finite, got {values}")
    unique = list(dict.fromkeys(values))
    if len(unique) < len(values):
        warnings.warn(f"duplicate T1 values removed: {values} -> {unique}", stacklevel=2)
    params = _load_model(args.model)
    cal, test = _load(args.cal, args.box), _load(args.test, args.box)
    _check_compatible(params, cal, test)
    if args.out is None:
        raise ConfigError("--out is required")

    table = []
    for T1 in unique:
        runs, _ = _run_evaluation(args, params, cal, test, "opsa", T1)
        agg = _aggregate(runs)
        table.append({"T1": T1, **{k: agg[k]["mean"] for k in ("coverage", "size", "sscv")},
                      **{f"{k}_stderr": agg[k]["stderr"] for k in ("coverage", "size", "sscv")}})

    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(table[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(table)
    out = Path(args.out)
    atomic_write_text(out / "sweep.csv", buf.getvalue())
    atomic_write_json(out / "sweep.json", {"alpha": args.alpha, "seed": args.seed,
                                           "fingerprint": fingerprint(args), "rows": table,
                                           "run_config": _config_echo(args)})
    for row in table:
        print(f"T1={row['T1']:g} coverage={row['coverage']:.4f} size={row['size']:.4f} sscv={row['sscv']:.4f}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def _common(p, *groups):
    p.add_argument("--config", help="JSON file of option values; command-line flags override it")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--box", action=argparse.BooleanOptionalAction, default=None,
                   help="enforce the [lo, hi] input box (default: as recorded with the data)")
    if "attack" in groups:
        p.add_argument("--r", type=_nonneg_float, default=DEFAULT_R, help="perturbation radius")
        p.add_argument("--norm", choices=("linf", "l2"), default="linf")
        p.add_argument("--steps", type=_positive(int), default=10)
        p.add_argument("--eta", type=_positive(float), default=DEFAULT_ETA)
        p.add_argument("--t1", type=_positive(float), default=1.0)
    if "eval" in groups:
        p.add_argument("--model")
        p.add_argument("--cal", help="calibration CSV")
        p.add_argument("--test", help="test CSV")
        p.add_argument("--alpha", type=_alpha, default=0.1)
        p.add_argument("--repeats", type=_positive(int), default=1,
                       help="independent attack seeds; aggregates report mean and stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robustcp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic Gaussian blobs")
    _common(p)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--n-per-class", type=int, default=100)
    p.add_argument("--spread", type=float, default=0.1)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("split", help="cut a dataset into train/cal/test files")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--fractions", type=float, nargs=3, default=(0.5, 0.25, 0.25),
                   metavar=("TRAIN", "CAL", "TEST"))
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a classifier")
    _common(p, "attack")
    p.add_argument("--data")
    p.add_argument("--mode", choices=("standard", "pgd-at", "opsa-at"), default="standard")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--lr", type=_positive(float), default=None)
    p.add_argument("--optimizer", choices=("sgd", "adam"), default=None)
    p.add_argument("--hidden", type=int, nargs="*", default=[])
    p.add_argument("--alpha", type=_alpha, default=0.1)
    p.add_argument("--t2", type=_positive(float), default=1.0)
    p.add_argument("--lambda", dest="lam", type=_nonneg_float, default=0.5)
    p.add_argument("--cal-frac", type=float, default=0.5)
    p.add_argument("--attack-calibration", action="store_true",
                   help="opsa-at: calibrate on attacked rather than clean batch rows")
    p.add_argument("--init-model")
    p.add_argument("--pretrain-epochs", type=int, default=None,
                   help="clean epochs before training (opsa-at default: 5 without --init-model)")
    p.add_argument("--monitor", help="held-out CSV for per-epoch coverage and size")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="perturb a dataset")
    _common(p, "attack")
    p.add_argument("--data")
    p.add_argument("--model")
    p.add_argument("--method", choices=("fgsm", "pgd", "opsa"), default="opsa")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("evaluate", help="calibrate THR and report coverage, size and SSCV")
    _common(p, "attack", "eval")
    p.add_argument("--attack", choices=("none", "fgsm", "pgd", "opsa"), default="none",
                   help="perturb both calibration and test rows before evaluating")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep-t1", help="evaluate under OPSA for several T1 values")
    _common(p, "attack", "eval")
    p.add_argument("--t1-values", type=float, nargs="*", default=[0.001, 0.1, 1.0, 10.0, 1000.0])
    p.set_defaults(func=cmd_sweep_t1)
    return parser


def _apply_config_file(parser, argv, args):
    """Re-parse with defaults taken from the JSON config so explicit flags still win."""
    path = Path(args.config)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"no such config file: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    subparser = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest: a for a in subparser._actions if a.dest not in ("help", "config")}
    doc = {k.replace("-", "_"): v for k, v in doc.items()}
    doc = {("lam" if k == "lambda" else k): v for k, v in doc.items()}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {unknown}")
    for key, value in doc.items():
        action = known[key]
        if action.type is not None and value is not None:
            try:
                value = [action.type(str(v)) for v in value] if isinstance(value, list) else action.type(str(value))
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise ConfigError(f"{path}: bad value for {key!r}: {exc}") from None
        if action.choices is not None and value not in action.choices:
            raise ConfigError(f"{path}: {key!r} must be one of {sorted(action.choices)}")
        subparser.set_defaults(**{key: value})
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config:
            args = _apply_config_file(parser, argv, args)
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            warnings.showwarning = _warn_to_stderr
            return args.func(args)
    except (DivergenceError, FloatingPointError, ArithmeticError) as exc:
        print(f"robustcp: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ConfigError, DataError, ModelFormatError, ValueError, IndexError) as exc:
        print(f"robustcp: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"robustcp: I/O failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def _warn_to_stderr(message, category, filename, lineno, file=None, line=None):
    print(f"robustcp: warning: {message}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
