"""Command-line entry point: ``cdr-refine {prepare,train,eval,predict,gradcheck,sweep}``.

Exit codes: 0 success, 1 usage error, 2 data or validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from . import gradcheck, plotting
from .data import LOOPS, DataError, parse_jsonl, preprocess, split, write_jsonl
from .evaluation import TABLE1_H3, evaluate, load_baselines, write_report
from .model import MODES, run_refinement
from .training import CheckpointError, NumericalError, TrainConfig, fit, frozen, load_checkpoint, read_key_values

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
SEED_ENV = "CDR_REFINE_SEED"
LOG_COLUMNS = ("epoch", "train_total", "train_l_seq", "train_l_struct", "val_total", "val_l_seq", "val_l_struct")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def resolve_seed(flag=None, config_values=None):
    """--seed, then the config file, then $CDR_REFINE_SEED, then 0."""
    if flag is not None:
        return int(flag)
    if config_values and "seed" in config_values:
        return int(config_values["seed"])
    env = os.environ.get(SEED_ENV, "").strip()
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return 0


def _announce(config, seed):
    print(f"seed: {seed}")
    print("config: " + json.dumps(config, sort_keys=True))


def _train_config(args, **fixed):
    values = read_key_values(args.config) if getattr(args, "config", None) else {}
    seed = resolve_seed(args.seed, values)
    values["seed"] = seed
    for key in ("epochs", "lr", "z", "q", "mode", "patience", "mpn_layers", "hidden", "attention", "k_neighbors"):
        value = getattr(args, key, None)
        if value is not None:
            values[key] = value
    if getattr(args, "desk_scale", False):
        values["desk_scale"] = True
    values.update(fixed)
    try:
        return TrainConfig.from_mapping(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def _load(path):
    return parse_jsonl(path, strict=True)


# -- subcommands -------------------------------------------------------------


def cmd_prepare(args):
    seed = resolve_seed(args.seed)
    _announce({"in": args.inp, "out": args.out, "max_res": args.max_res, "identity": args.identity,
               "exclude": args.exclude, "split": args.split}, seed)
    if not 0 < args.split < 1:
        raise UsageError(f"--split must lie in (0, 1), got {args.split}")
    records = _load(args.inp)
    exclude = [r.heavy_seq for r in _load(args.exclude)] if args.exclude else ()
    kept = preprocess(records, args.max_res, args.identity, exclude)
    train, val = split(kept, args.split, seed)
    out = Path(args.out)
    stem = out.with_suffix("") if out.suffix == ".jsonl" else out
    stem.parent.mkdir(parents=True, exist_ok=True)
    train_path, val_path = Path(f"{stem}.train.jsonl"), Path(f"{stem}.val.jsonl")
    write_jsonl(train, train_path)
    write_jsonl(val, val_path)
    print(f"records: {len(records)}  kept: {len(kept)}  train: {len(train)}  val: {len(val)}")
    print(f"wrote {train_path} {val_path}")
    return EXIT_OK


def cmd_train(args):
    out = Path(args.out)
    config = _train_config(args, checkpoint_dir=str(out))
    _announce(config.to_dict(), config.seed)
    train = _load(args.data)
    val = _load(args.val) if args.val else []
    if not train:
        raise DataError(f"no training records in {args.data}")
    out.mkdir(parents=True, exist_ok=True)

    def progress(row):
        print(f"epoch {row['epoch']:4d}  train {row['train_total']:.6f}  val {row['val_total']:.6f}", flush=True)

    best, history = fit(train, val, config, on_epoch=progress)
    log_path = out / "loss_log.csv"
    with open(log_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for row in history:
            writer.writerow([row["epoch"]] + [repr(row[k]) for k in LOG_COLUMNS[1:]])
    if history:
        plotting.plot_loss_curve(history, out / "loss_curve.png")
    print(f"best epoch: {best.epoch}  val_total: {best.val_metric}")
    print(f"wrote {out / 'best.json'} {log_path}")
    return EXIT_OK


def cmd_eval(args):
    ckpt = load_checkpoint(args.ckpt)
    config = ckpt.train_config()
    _announce({**config.to_dict(), "alignment": args.alignment}, config.seed)
    baselines = load_baselines(args.baselines) if args.baselines else TABLE1_H3
    report = evaluate(_load(args.data), ckpt.params(), config, args.alignment, baselines)
    csv_path, json_path = write_report(report, args.out)
    out = Path(args.out)
    if report.lengths:
        plotting.plot_length_table(report.lengths, out / "h3_by_length.png")
    plotting.plot_loop_means(report.means, out / "loop_means.png")
    for loop, value in report.means.items():
        print(f"{loop}\t{value:.4f}")
    print(f"wrote {csv_path} {json_path}")
    return EXIT_OK


def _prediction_record(rec, result):
    """The input record with its loop coordinates (and, if generated, residues) replaced."""
    doc = rec.to_json()
    length = len(rec.heavy_seq)
    coords = {a: [None] * length for a in ("N", "CA", "C")}
    seq = list(rec.heavy_seq)
    offset = 0
    for start, end in rec.loop_spans:
        for i in range(start, end + 1):
            for atom, arr in (("N", result.n), ("CA", result.ca), ("C", result.c)):
                coords[atom][i] = [float(v) for v in arr[offset]]
            seq[i] = result.sequence[offset]
            offset += 1
    doc["heavy_seq"] = "".join(seq)
    doc["coords"] = coords
    return doc


def cmd_predict(args):
    ckpt = load_checkpoint(args.ckpt)
    config = ckpt.train_config()
    _announce({**config.to_dict(), "predict_mode": args.mode}, config.seed)
    records = _load(args.record)
    if not records:
        raise DataError(f"no records in {args.record}")
    params = ckpt.params()
    mcfg = config.model_config()
    lines = []
    with frozen(params):
        for rec in records:
            result = run_refinement(rec, params, mcfg, args.mode)
            lines.append(json.dumps(_prediction_record(rec, result)))
            print(f"{rec.pdb_id}\t{result.sequence}")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_gradcheck(args):
    seed = resolve_seed(args.seed)
    _announce({"eps": gradcheck.EPS, "tolerance": gradcheck.TOLERANCE, "end_to_end": not args.skip_end_to_end}, seed)
    results = gradcheck.run_suite(seed, end_to_end=not args.skip_end_to_end)
    for name, err, ok in results:
        print(f"{'PASS' if ok else 'FAIL'}\t{name}\t{err:.3e}")
    failed = [name for name, _, ok in results if not ok]
    if failed:
        print(f"{len(failed)} of {len(results)} checks failed", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def parse_range(text, step=1):
    """``"a..b"`` inclusive, stepping by ``step``; an empty range is a usage error."""
    try:
        lo, hi = (int(part) for part in text.split(".."))
    except ValueError:
        raise UsageError(f"--range must look like a..b, got {text!r}") from None
    if step < 1:
        raise UsageError(f"--step must be positive, got {step}")
    values = list(range(lo, hi + 1, step))
    if not values:
        raise UsageError(f"--range {text!r} is empty")
    return values


def cmd_sweep(args):
    values = parse_range(args.range, args.step)
    base = _train_config(args, desk_scale=True)
    for v in values:
        try:
            base.replace(**{args.param: v})
        except ValueError as exc:
            raise UsageError(f"sweep value out of range: {exc}") from None
    _announce({**base.to_dict(), "param": args.param, "values": values}, base.seed)
    train = _load(args.data)
    val = _load(args.val) if args.val else train
    if not train:
        raise DataError(f"no training records in {args.data}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    columns = (args.param, "train_total", "val_total") + tuple(f"{loop}_rmsd" for loop in LOOPS)
    rows = []
    for v in values:
        config = base.replace(**{args.param: v})
        best, history = fit(train, [] if val is train else val, config)
        report = evaluate(val, best.params(), config)
        row = {
            args.param: v,
            "train_total": history[-1]["train_total"] if history else float("nan"),
            "val_total": best.val_metric,
            **{f"{loop}_rmsd": report.means[loop] for loop in LOOPS},
        }
        rows.append(row)
        print("\t".join(f"{k}={row[k]}" for k in columns), flush=True)
    csv_path = out / "sweep.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)
    plotting.plot_sweep(rows, args.param, out / "sweep.png")
    print(f"wrote {csv_path}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def _add_overrides(p):
    p.add_argument("--config", help="flat key=value file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--mpn-layers", dest="mpn_layers", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--k-neighbors", dest="k_neighbors", type=int)
    p.add_argument("--attention", choices=("loop", "none", "replace"))


def build_parser():
    parser = _Parser(prog="cdr-refine", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", help="filter, deduplicate and split a JSONL dataset")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True, help="output stem, e.g. clean.jsonl")
    p.add_argument("--max-res", dest="max_res", type=float, default=4.0)
    p.add_argument("--identity", type=float, default=99.0)
    p.add_argument("--exclude", help="JSONL of test records to keep out of training")
    p.add_argument("--split", type=float, default=0.8)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="fit a model and write checkpoints")
    p.add_argument("--data", required=True)
    p.add_argument("--val")
    p.add_argument("--out", required=True)
    p.add_argument("--desk-scale", dest="desk_scale", action="store_true")
    p.add_argument("--z", type=int)
    p.add_argument("--q", type=int)
    _add_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-loop RMSD report for a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alignment", choices=("loop", "bundle"), default="loop")
    p.add_argument("--baselines", help="key=value file of baseline H3 RMSDs")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict loop coordinates for records")
    p.add_argument("--record", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=MODES, default="teacher_forced")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of all primitives and the loss")
    p.add_argument("--seed", type=int)
    p.add_argument("--skip-end-to-end", dest="skip_end_to_end", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="train and evaluate across kernel sizes or conv depths")
    p.add_argument("--param", choices=("z", "q"), required=True)
    p.add_argument("--range", required=True, help="inclusive a..b")
    p.add_argument("--step", type=int, default=1)
    p.add_argument("--data", required=True)
    p.add_argument("--val")
    p.add_argument("--out", required=True)
    _add_overrides(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
