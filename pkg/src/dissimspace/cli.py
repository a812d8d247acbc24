"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .data import DatasetSpec, SyntheticSpec, split_by_class
from .errors import DataError, DissimError, NumericalError
from .evaluator import SCORERS, ablate_datasize, pca_project_2d, projection_points, recall_at_k
from .numeric import make_rng
from .pairspace import count_pairs
from .trainer import MODES, TrainConfig, train, write_loss_log

log = logging.getLogger("dissimspace")

DEFAULT_SCORER = {
    "end2end": "dissim_svm",
    "frozen_backbone": "dissim_svm",
    "euclid_baseline": "euclid",
    "mahalanobis_baseline": "mahalanobis",
}


class UsageError(DissimError):
    exit_code = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _int_list(text):
    return [int(t) for t in text.split(",") if t]


def _float_list(text):
    return [float(t) for t in text.split(",") if t]


def _add_common(p):
    p.add_argument("--seed", type=int, help="default 0, or the config file's seed")
    p.add_argument("--out-dir", default="runs")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_data(p):
    g = p.add_argument_group("data")
    g.add_argument("--csv", dest="csv_path", help="CSV with a header row and a label column")
    g.add_argument("--label-column", default="label")
    g.add_argument("--classes", type=int, default=30)
    g.add_argument("--per-class", type=int, default=20)
    g.add_argument("--dim", type=int, default=32)
    g.add_argument("--within-std", type=float, default=1.0)
    g.add_argument("--between-sep", type=float, default=4.0)
    g.add_argument("--data-seed", type=int, help="defaults to --seed")
    g.add_argument("--holdout", type=float, default=1.0 / 3.0,
                   help="fraction of classes held out for the open-set test")


_CONFIG_FLAGS = {
    "mode": dict(choices=MODES), "epochs": dict(type=int), "lr": dict(type=float),
    "momentum": dict(type=float), "weight_decay": dict(type=float), "P": dict(type=int),
    "K": dict(type=int), "pairs_per_batch": dict(type=int), "margin": dict(type=float),
    "C": dict(type=float), "norm_regime": dict(choices=("soft_l2", "fixed_norm")),
    "tau": dict(type=float), "lambda_ce": dict(type=float), "lambda_tri": dict(type=float),
    "lambda_hinge": dict(type=float), "hidden_dims": dict(type=_int_list),
    "d_embed": dict(type=int), "d_adapt": dict(type=int),
    "metric_losses_on": dict(choices=("phi", "psi")),
    "classifier_dropout": dict(type=float), "steps_per_epoch": dict(type=int),
}


def _add_train_config(p):
    p.add_argument("--config", help="JSON file with flat TrainConfig keys (and optional 'dataset')")
    g = p.add_argument_group("training")
    for name, kw in _CONFIG_FLAGS.items():
        g.add_argument("--" + name.replace("_", "-"), dest=name, default=None, **kw)
    g.add_argument("--classifier-bn", dest="classifier_bn", action="store_const", const=True,
                   default=None)


def _read_config(args) -> tuple:
    raw = {}
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise DataError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config} is not valid JSON: {exc}") from exc
    dataset = raw.pop("dataset", None)
    for f in fields(TrainConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            raw[f.name] = v
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        cfg = TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    args.seed = cfg.seed
    return cfg, dataset


def _dataset_spec(args, override=None) -> DatasetSpec:
    if override:
        return DatasetSpec.from_dict(override)
    data_seed = args.seed if args.data_seed is None else args.data_seed
    return DatasetSpec(
        source="csv" if args.csv_path else "synthetic",
        synthetic=SyntheticSpec(args.classes, args.per_class, args.dim, args.within_std,
                                args.between_sep, data_seed),
        csv_path=args.csv_path, label_column=args.label_column,
        holdout_fraction=args.holdout, split_seed=data_seed)


def _split(spec: DatasetSpec):
    data = spec.load()
    return split_by_class(data, spec.holdout_fraction, make_rng(spec.split_seed))


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, seed: int, artifacts: dict, config=None,
                    dataset=None, extra=None) -> Path:
    manifest = {
        "tool": "dissimspace", "version": __version__, "command": command, "seed": seed,
        "config": config, "dataset": dataset, "artifacts": artifacts,
        "euclid_ranking": "ascending L2 distance",
    }
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# -- subcommands ------------------------------------------------------------------

def cmd_train(args):
    cfg, ds_override = _read_config(args)
    spec = _dataset_spec(args, ds_override)
    train_set, _ = _split(spec)
    init = load_checkpoint(args.init) if args.init else None
    if cfg.mode == "frozen_backbone" and init is None:
        log.warning("frozen_backbone without --init freezes a randomly initialised backbone")
    out = _out_dir(args)
    meta = {"dataset": spec.to_dict()}
    try:
        ckpt, rows = train(train_set, cfg, init=init, meta=meta)
    except NumericalError as exc:
        if exc.last_good is not None:
            save_checkpoint(exc.last_good, out / "last_good.dsmm")
        raise
    save_checkpoint(ckpt, out / "checkpoint.dsmm")
    write_loss_log(rows, out / "loss_log.csv")
    _write_manifest(out, "train", cfg.seed,
                    {"checkpoint": "checkpoint.dsmm", "loss_log": "loss_log.csv"},
                    cfg.to_dict(), spec.to_dict(), {"init": args.init})
    print(json.dumps({"checkpoint": str(out / "checkpoint.dsmm"), "epochs": cfg.epochs,
                      "final": list(rows[-1][1:]) if rows else None}))


def cmd_eval(args):
    ckpt = load_checkpoint(args.checkpoint)
    spec = DatasetSpec.from_dict(ckpt.meta["dataset"])
    _, test_set = _split(spec)
    model = ckpt.build_model()
    scorer = args.scorer or DEFAULT_SCORER[model.config.mode]
    res = recall_at_k(test_set, args.ks, scorer, model)
    out = _out_dir(args)
    stem = f"retrieval_{scorer}"
    payload = res.to_dict()
    payload.update(seed=model.config.seed, checkpoint=args.checkpoint, manifest="manifest.json",
                   euclid_ranking="ascending L2 distance")
    (out / f"{stem}.json").write_text(json.dumps(payload, indent=2) + "\n")
    with open(out / f"{stem}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "recall"])
        for k, v in sorted(res.recall_at.items()):
            w.writerow([k, repr(v)])
    _write_manifest(out, "eval", model.config.seed,
                    {"result_json": f"{stem}.json", "result_csv": f"{stem}.csv"},
                    ckpt.config, spec.to_dict(), {"checkpoint": args.checkpoint})
    print(json.dumps({"scorer": scorer, "recall_at": payload["recall_at"],
                      "skipped_queries": res.skipped}))


def cmd_ablate(args):
    cfg, ds_override = _read_config(args)
    spec = _dataset_spec(args, ds_override)
    train_set, test_set = _split(spec)
    rows = ablate_datasize(train_set, test_set, cfg, args.fractions, args.seeds)
    out = _out_dir(args)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fraction", "scorer", "median_r1", "delta", "per_seed"])
        for r in rows:
            w.writerow([r.fraction, r.scorer, repr(r.median_r1), repr(r.delta),
                        ";".join(repr(v) for v in r.per_seed)])
    _write_manifest(out, "ablate", cfg.seed, {"table": "ablation.csv"}, cfg.to_dict(),
                    spec.to_dict(), {"fractions": args.fractions, "seeds": args.seeds})
    for r in rows:
        print(f"{r.fraction:>5}  {r.scorer:<10}  R@1={r.median_r1:.3f}  delta={r.delta:+.3f}")


def cmd_pairs(args):
    try:
        pc = count_pairs(args.classes, args.refs)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print(json.dumps(pc.as_dict(), separators=(",", ":")))


def cmd_gradcheck(args):
    from .gradsuite import run_suite

    report = run_suite(seed=args.seed or 0, trials=args.trials)
    ok = True
    for name, r in report.items():
        status = "PASS" if r["passed"] else "FAIL"
        ok &= r["passed"]
        print(f"{status}  {name:<18} max_rel_err={r['max_error']:.3e}  tol={r['tolerance']:.0e}")
    if not ok:
        raise NumericalError("gradient check failed")


def cmd_project(args):
    args.seed = args.seed or 0
    out = _out_dir(args)
    ckpt = load_checkpoint(args.checkpoint)
    _, test_set = _split(DatasetSpec.from_dict(ckpt.meta["dataset"]))
    model = ckpt.build_model()
    jobs = [("fig_a_embeddings.csv", model, "embedding"), ("fig_b_dissim.csv", model, "dissim")]
    if args.e2e_checkpoint:
        e2e = load_checkpoint(args.e2e_checkpoint)
        jobs.append(("fig_c_dissim_e2e.csv", e2e.build_model(), "dissim"))
    written = {}
    for name, m, space in jobs:
        pts, kinds, labels = projection_points(m, test_set, args.max_pairs, args.seed, space)
        proj = pca_project_2d(pts, kinds, labels, seed=args.seed)
        proj.write_csv(out / name)
        written[name] = {"degenerate": proj.degenerate,
                         "eigenvalues": [float(e) for e in proj.eigenvalues]}
        print(f"wrote {out / name} ({len(pts)} points)")
    _write_manifest(out, "project", args.seed, written, ckpt.config, ckpt.meta.get("dataset"),
                    {"checkpoint": args.checkpoint, "e2e_checkpoint": args.e2e_checkpoint})


def build_parser():
    parser = _Parser(prog="dissimspace", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _add_common(p)
    _add_data(p)
    _add_train_config(p)
    p.add_argument("--init", help="checkpoint to start from (frozen_backbone mode)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Recall@K on the held-out classes")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scorer", choices=SCORERS)
    p.add_argument("--ks", type=_int_list, default=[1, 2, 4, 8])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="training-set size ablation")
    _add_common(p)
    _add_data(p)
    _add_train_config(p)
    p.add_argument("--fractions", type=_float_list, default=[1.0, 0.5, 0.25])
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2, 3, 4])
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("pairs", help="count within/between-class pairs")
    _add_common(p)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--refs", type=int, required=True)
    p.set_defaults(func=cmd_pairs)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    _add_common(p)
    p.add_argument("--trials", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("project", help="2-D PCA exports of embeddings and dissimilarity vectors")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="model for panels (a) and (b)")
    p.add_argument("--e2e-checkpoint", help="end-to-end model for panel (c)")
    p.add_argument("--max-pairs", type=int, default=2000)
    p.set_defaults(func=cmd_project)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except DissimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ArithmeticError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
