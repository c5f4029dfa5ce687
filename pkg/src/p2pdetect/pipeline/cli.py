"""Command line: extract, rank, train, eval, detect.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime or I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..brann import (
    ModelFileError,
    MissingFeatureError,
    TrainingConfig,
    TrainingError,
    load_model,
    model_id,
    predict_scores,
    save_model,
    train,
)
from ..dataset import (
    CLASS_NAMES,
    Dataset,
    DatasetError,
    EqualFrequencyDiscretizer,
    MDLDiscretizer,
    parse_label,
    rank_features,
    read_csv,
    split,
    write_arff,
    write_csv,
)
from ..flow_meter import IDENTIFIER_FEATURES, MeterConfig, MeterSummary, PacketError, meter_pcap
from ..flow_meter.pcapio import PcapError
from ..stats_eval import StatsError, emit_report, evaluate
from .capture import AfPacketSource, CaptureOpenError, PcapFileSource
from .detect import EARLY_TIMEOUT_US, DetectConfig, run_detect

log = logging.getLogger("p2pdetect")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _hidden_range(text: str) -> tuple[int, int]:
    try:
        lo, _, hi = text.partition(":")
        lo, hi = int(lo), int(hi or lo)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO:HI, got {text!r}") from None
    if lo < 1 or hi < lo:
        raise argparse.ArgumentTypeError(f"bad hidden range {text!r}")
    return lo, hi


def _input_spec(text: str) -> tuple[str, int | None]:
    path, sep, label = text.rpartition(":")
    if sep and label and not label.startswith(("/", "\\")):
        try:
            return path, parse_label(label)
        except (DatasetError, ValueError):
            pass
    return text, None


def _meter_config(args, active_timeout=None) -> MeterConfig:
    try:
        return MeterConfig(activity_threshold_us=args.activity_threshold_us,
                           idle_timeout_us=args.idle_timeout_us,
                           active_timeout_us=active_timeout)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="p2pdetect", description="P2P botnet flow detection with a Bayesian-regularized network.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def meter_flags(sp):
        sp.add_argument("--activity-threshold-us", type=int, default=1_000_000)
        sp.add_argument("--idle-timeout-us", type=int, default=600_000_000)

    sp = sub.add_parser("extract", help="meter pcaps into a labeled flow dataset")
    sp.add_argument("--input", action="append", required=True, metavar="PATH:LABEL",
                    help="pcap with its label (nonmalicious or malicious); repeatable")
    sp.add_argument("--out", help="CSV path (default OUT_DIR/flows.csv)")
    sp.add_argument("--arff", help="also write an ARFF file here")
    sp.add_argument("--out-dir", default=".")
    meter_flags(sp)

    sp = sub.add_parser("rank", help="rank features by information gain")
    sp.add_argument("--input", required=True, help="labeled flow CSV")
    sp.add_argument("--top-k", type=int, default=15)
    sp.add_argument("--discretizer", choices=("equal-frequency", "mdl"), default="equal-frequency")
    sp.add_argument("--bins", type=int, default=10)
    sp.add_argument("--keep-identifiers", action="store_true",
                    help="also rank address and port columns")
    sp.add_argument("--out-dir", default=".")

    sp = sub.add_parser("train", help="rank, split, sweep hidden sizes, train and evaluate")
    sp.add_argument("--input", required=True, help="labeled flow CSV")
    sp.add_argument("--top-k", type=int, default=15)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--hidden-range", type=_hidden_range, default=(2, 20))
    sp.add_argument("--max-epochs", type=int, default=300)
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--out-dir", default=".")

    sp = sub.add_parser("eval", help="score a labeled CSV with a saved model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--input", required=True, help="labeled flow CSV")
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--out-dir", default=".")

    sp = sub.add_parser("detect", help="capture, classify flows and keep malicious packets")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help="pcap to replay")
    src.add_argument("--interface", help="network interface for live capture")
    sp.add_argument("--model", required=True)
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--chunk-bytes", type=int, default=200_000_000)
    sp.add_argument("--early-timeout-us", type=int, default=EARLY_TIMEOUT_US,
                    help="classify flows still open after this long (0 disables)")
    sp.add_argument("--queue-size", type=int, default=4096)
    sp.add_argument("--max-packets", type=int, help="stop a live capture after this many packets")
    sp.add_argument("--duration", type=float, help="stop a live capture after this many seconds")
    sp.add_argument("--out-dir", default=".")
    meter_flags(sp)
    return p


# --- commands -----------------------------------------------------------------------


def cmd_extract(args) -> int:
    cfg = _meter_config(args)
    specs = [_input_spec(s) for s in args.input]
    for path, label in specs:
        if label is None:
            raise UsageError(f"--input {path!r} needs a label suffix :nonmalicious or :malicious")
    summary = MeterSummary()
    vectors = []
    for path, label in specs:
        if not Path(path).is_file():
            raise OSError(f"cannot read {path}")
        vectors.extend(meter_pcap(path, cfg, label, summary))
    if not vectors:
        raise DataError("no flows extracted")
    ds = Dataset.from_vectors(vectors)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = Path(args.out) if args.out else out_dir / "flows.csv"
    write_csv(ds, csv_path)
    if args.arff:
        write_arff(ds, args.arff)
    counts = np.bincount(ds.y, minlength=2)
    print(f"files\t{summary.files}")
    print(f"packets\t{summary.frames}")
    print(f"admitted\t{summary.admitted}")
    print(f"skipped\t{summary.skipped}")
    print(f"malformed\t{summary.errors}")
    print(f"flows\t{len(ds)}")
    for cls, name in enumerate(CLASS_NAMES):
        print(f"{name}\t{counts[cls]}")
    if summary.truncated:
        print("warning\ttruncated capture; kept complete records")
    print(f"csv\t{csv_path}")
    return EXIT_OK


def _labeled(path) -> Dataset:
    ds = read_csv(path)
    if not ds.labeled:
        raise DataError(f"{path} has no class column")
    return ds


def _discretizer(args):
    if args.discretizer == "mdl":
        return MDLDiscretizer()
    return EqualFrequencyDiscretizer(args.bins)


def cmd_rank(args) -> int:
    ds = _labeled(args.input)
    if not args.keep_identifiers:
        ds = ds.drop([n for n in ds.feature_names if n in IDENTIFIER_FEATURES])
    ranked = rank_features(ds, args.top_k, _discretizer(args))
    table = ranked.format_table()
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ranking.tsv").write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    return EXIT_OK


def cmd_train(args) -> int:
    ds = _labeled(args.input)
    if len(set(ds.y.tolist())) < 2:
        raise DataError("training needs both classes")
    try:
        cfg = TrainingConfig(hidden_range=args.hidden_range, seed=args.seed,
                             max_epochs=args.max_epochs, workers=args.workers)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    candidates = ds.drop([n for n in ds.feature_names if n in IDENTIFIER_FEATURES])
    ranked = rank_features(candidates, args.top_k)
    train_ds, test_ds = split(ds, cfg.train_fraction, cfg.seed)
    model, report = train(train_ds, ranked.names, cfg, holdout=test_ds)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_model(model, out_dir / "model.brann")
    (out_dir / "ranking.tsv").write_text(ranked.format_table(), encoding="utf-8")
    train_scores = predict_scores(model, train_ds.select(ranked.names).X)
    test_scores = predict_scores(model, test_ds.select(ranked.names).X)
    train_eval = evaluate(train_scores, train_ds.y, args.threshold)
    test_eval = evaluate(test_scores, test_ds.y, args.threshold)
    emit_report(test_eval, out_dir / "eval")
    info = report.to_dict() | {
        "model_id": model_id(model),
        "seed": cfg.seed,
        "features": list(ranked.names),
        "train_accuracy": train_eval.accuracy,
        "test_accuracy": test_eval.accuracy,
        "test_rows": len(test_ds),
    }
    (out_dir / "training_report.json").write_text(json.dumps(info, indent=1, sort_keys=True) + "\n")
    print(f"model\t{out_dir / 'model.brann'}\t{model_id(model)}")
    print(f"hidden\t{model.n_hidden}")
    print(f"stop\t{report.stop_reason}")
    print(f"gamma\t{report.gamma:.4f}\tof\t{model.k}")
    print(f"train_accuracy\t{train_eval.accuracy:.6f}")
    print(f"test_accuracy\t{test_eval.accuracy:.6f}")
    print(f"test_pearson_r\t{test_eval.pearson_r if test_eval.pearson_r is None else f'{test_eval.pearson_r:.6f}'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_model(args.model)
    ds = _labeled(args.input)
    scores = predict_scores(model, ds.select(model.feature_names).X)
    report = evaluate(scores, ds.y, args.threshold)
    emit_report(report, args.out_dir)
    print(f"instances\t{report.n}")
    print(f"accuracy\t{report.accuracy:.6f}")
    print(f"precision\t{report.precision:.6f}")
    print(f"recall\t{report.recall:.6f}")
    print(f"pearson_r\t{'NA' if report.pearson_r is None else f'{report.pearson_r:.6f}'}")
    return EXIT_OK


def cmd_detect(args) -> int:
    model = load_model(args.model)
    if args.chunk_bytes <= 24 or args.queue_size < 0 or args.early_timeout_us < 0:
        raise UsageError("--chunk-bytes must exceed 24; --queue-size and --early-timeout-us must be >= 0")
    meter = _meter_config(args, args.early_timeout_us or None)
    cfg = DetectConfig(threshold=args.threshold, chunk_bytes=args.chunk_bytes,
                       meter=meter, queue_size=args.queue_size)
    if args.input:
        source = PcapFileSource(args.input)
    else:
        source = AfPacketSource(args.interface, max_packets=args.max_packets, duration_s=args.duration)
    summary = run_detect(source, model, args.out_dir, cfg)
    for k in ("packets_read", "admitted", "skipped", "errors", "dropped", "flows", "alerts",
              "malicious_packets"):
        print(f"{k}\t{getattr(summary, k)}")
    print(f"chunks\t{len(summary.chunks)}")
    return EXIT_OK


COMMANDS = {"extract": cmd_extract, "rank": cmd_rank, "train": cmd_train, "eval": cmd_eval,
            "detect": cmd_detect}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"p2pdetect: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DatasetError, StatsError, PacketError, PcapError, ModelFileError,
            MissingFeatureError) as exc:
        print(f"p2pdetect: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, CaptureOpenError, TrainingError, np.linalg.LinAlgError) as exc:
        print(f"p2pdetect: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
