"""``scf`` command-line interface.

Exit codes: 0 success, 2 usage, 3 I/O or file format, 4 numeric failure.
Every subcommand accepts ``--config FILE`` holding ``key = value`` lines;
keys are flag names (dashes or underscores) and explicit flags win.
``SCF_THREADS`` caps BLAS worker threads (default 1).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import zlib
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .bench import BENCH_COLUMNS, BENCH_VARIANTS, pair_count_audit, time_loss
from .data import DatasetConfig, DatasetFormatError, build_dataset, dumps_dataset, load_dataset
from .estimator import LOSS_CHOICES, TrainingDivergedError
from .losses import LossConfig
from .model import CheckpointFormatError, ModelConfig
from .numkit import make_rng, pca_2d
from .trainer import (TrainConfig, as_estimator, csv_text, evaluate, history_csv, mismatch_csv,
                      mismatch_eval, train)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
BENCH_STREAM = 20

logger = logging.getLogger("scf")


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


# -- argument types -----------------------------------------------------------

def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {s}")
    return v


def _payload(s):
    v = float(s)
    if not 0.0 < v <= 1.0:
        raise argparse.ArgumentTypeError(f"must be in (0, 1], got {s}")
    return v


def _positive_float(s):
    v = float(s)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {s}")
    return v


def _nonneg_float(s):
    v = float(s)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {s}")
    return v


def _even_batch(s):
    v = int(s)
    if v < 4 or v % 2:
        raise argparse.ArgumentTypeError(f"must be even and >= 4, got {s}")
    return v


def _bench_variants(s):
    names = [v.strip() for v in s.split(",") if v.strip()]
    bad = [v for v in names if v not in BENCH_VARIANTS]
    if not names or bad:
        raise argparse.ArgumentTypeError(f"choose from {','.join(BENCH_VARIANTS)}, got {s}")
    return names


def _bool(s):
    low = str(s).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s}")


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scf", description="Contrastive steganalysis toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", type=Path, help="file of key = value defaults")
        return sp

    g = add("gen-data", "generate a synthetic cover/stego dataset")
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--pairs", type=_positive_int, default=2000)
    g.add_argument("--size", type=_positive_int, default=16)
    g.add_argument("--payload", type=_payload, default=0.4)
    g.add_argument("--blur", type=int, default=2)
    g.add_argument("--seed", type=int, default=1)

    t = add("train", "train a classifier and write checkpoint + history")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--history", type=Path, help="history CSV (default: <out>.history.csv)")
    t.add_argument("--loss", choices=sorted(LOSS_CHOICES), default="ce+stegcl")
    t.add_argument("--tau", type=_positive_float, default=0.1)
    t.add_argument("--lambda", dest="lam", type=_nonneg_float, default=1.0)
    t.add_argument("--epochs", type=_positive_int, default=30)
    t.add_argument("--batch", type=_even_batch, default=32)
    t.add_argument("--lr", type=_positive_float, default=1e-3)
    t.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    t.add_argument("--seed", type=int, default=1)
    t.add_argument("--normalize", type=_bool, default=True, help="L2-normalize features for the contrastive loss")
    t.add_argument("--include-positive", type=_bool, default=False,
                   help="stegcl: add the positive to the denominator")
    t.add_argument("--trainable-preprocessing", type=_bool, default=False)
    t.add_argument("--record-time", type=_bool, default=False,
                   help="write wall-clock seconds to the history (breaks byte reproducibility)")

    e = add("eval", "evaluate a checkpoint on a dataset split")
    e.add_argument("--ckpt", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--split", choices=("train", "val", "test"), default="test")

    m = add("mismatch", "P_E table across training and testing payloads")
    m.add_argument("--ckpt", nargs="+", required=True, metavar="PAYLOAD=PATH",
                   help="checkpoints tagged with their training payload")
    m.add_argument("--data-list", nargs="+", type=Path, required=True)
    m.add_argument("--out", type=Path, required=True)

    b = add("bench", "time contrastive losses")
    b.add_argument("--variants", type=_bench_variants, default=["supcl", "stegcl"])
    b.add_argument("--batch", type=_even_batch, default=256)
    b.add_argument("--dim", type=_positive_int, default=128)
    b.add_argument("--repeats", type=int, default=20)
    b.add_argument("--seed", type=int, default=1)
    b.add_argument("--out", type=Path, required=True)

    x = add("export-features", "2-D PCA projection of the feature vectors")
    x.add_argument("--ckpt", type=Path, required=True)
    x.add_argument("--data", type=Path, required=True)
    x.add_argument("--split", choices=("train", "val", "test"), default="test")
    x.add_argument("--out", type=Path, required=True)

    # required flags may come from --config, so the check runs after merging
    for sp in sub.choices.values():
        for a in sp._actions:
            if a.required:
                a.required = False
                a.default = None
                a.deferred_required = True
    return p


def _subparser(parser, command):
    for action in parser._subparsers._group_actions:
        return action.choices[command]


def read_config(path: Path) -> dict[str, str]:
    try:
        text = path.read_text()
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc.strerror}") from None
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def apply_config(sp: argparse.ArgumentParser, args: argparse.Namespace, argv: list[str]) -> argparse.Namespace:
    """Merge config-file values under explicitly given flags."""
    values = {} if args.config is None else read_config(args.config)
    by_key = {}
    for a in sp._actions:
        for opt in a.option_strings:
            if opt.startswith("--"):
                by_key[opt[2:].replace("-", "_")] = a
    explicit = {a.dest for a in sp._actions
                if any(tok == o or tok.startswith(o + "=") for tok in argv for o in a.option_strings)}
    for k, v in values.items():
        a = by_key.get(k)
        if a is None or a.dest in ("config", "help"):
            raise UsageError(f"unknown config key {k!r} in {args.config}")
        if a.dest in explicit:
            continue
        try:
            if a.nargs == "+":
                val = [a.type(t) if a.type else t for t in v.split()]
            else:
                val = a.type(v) if a.type else v
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise UsageError(f"config key {k}: {exc}") from None
        if a.choices is not None and val not in a.choices:
            raise UsageError(f"config key {k}: {v!r} not in {sorted(a.choices)}")
        setattr(args, a.dest, val)
    missing = [a.option_strings[0] for a in sp._actions
               if getattr(a, "deferred_required", False) and getattr(args, a.dest) is None]
    if missing:
        raise UsageError(f"missing required {', '.join(missing)}")
    return args


# -- helpers ------------------------------------------------------------------

def _need_file(path: Path, flag: str):
    if not path.is_file():
        raise InputError(f"{flag}: no such file: {path}")


def _need_out_dir(path: Path, flag: str):
    parent = path.parent if str(path.parent) else Path(".")
    if not parent.is_dir():
        raise InputError(f"{flag}: directory does not exist: {parent}")


def _write_text(path: Path, text: str):
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _load_ckpt(path: Path):
    return as_estimator(Path(path).read_bytes())


# -- commands -----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    _need_out_dir(args.out, "--out")
    try:
        cfg = DatasetConfig(n_pairs=args.pairs, image_size=args.size, payload=args.payload,
                            blur_radius=args.blur, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    buf = dumps_dataset(build_dataset(cfg))
    args.out.write_bytes(buf)
    print(f"count={2 * cfg.n_pairs}")
    print(f"payload={cfg.payload}")
    print(f"checksum={zlib.crc32(buf[:-4]):08x}")
    return EXIT_OK


def cmd_train(args) -> int:
    _need_file(args.data, "--data")
    _need_out_dir(args.out, "--out")
    history = args.history or args.out.with_name(args.out.name + ".history.csv")
    _need_out_dir(history, "--history")
    ds = load_dataset(args.data)
    loss = LossConfig(tau=args.tau, lam=args.lam, normalize_features=args.normalize,
                      variant=LOSS_CHOICES[args.loss], include_positive_in_denominator=args.include_positive)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch, learning_rate=args.lr,
                      optimizer=args.optimizer, loss=loss, seed=args.seed,
                      model=ModelConfig(image_size=ds.image_size,
                                        trainable_preprocessing=args.trainable_preprocessing),
                      checkpoint_path=str(args.out), record_time=args.record_time)
    est, hist = train(cfg, ds)
    _write_text(history, history_csv(hist))
    best = hist[est.best_epoch_ - 1]
    print(f"best_epoch={est.best_epoch_}")
    print(f"val_pe={best['val_pe']}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _need_file(args.ckpt, "--ckpt")
    _need_file(args.data, "--data")
    report = evaluate(_load_ckpt(args.ckpt), load_dataset(args.data), args.split)
    print("\n".join(report.as_lines()))
    return EXIT_OK


def cmd_mismatch(args) -> int:
    tagged = []
    for item in args.ckpt:
        payload, sep, path = item.partition("=")
        try:
            payload = _payload(payload)
        except (argparse.ArgumentTypeError, ValueError):
            sep = ""
        if not sep:
            raise UsageError(f"--ckpt: expected PAYLOAD=PATH, got {item!r}")
        _need_file(Path(path), "--ckpt")
        tagged.append((payload, Path(path)))
    for path in args.data_list:
        _need_file(path, "--data-list")
    _need_out_dir(args.out, "--out")
    ckpts = [(p, _load_ckpt(path)) for p, path in tagged]
    datasets = []
    for path in args.data_list:
        ds = load_dataset(path)
        datasets.append((ds.payload, ds))
    rows = mismatch_eval(ckpts, datasets)
    _write_text(args.out, mismatch_csv(rows))
    for a, b, pe in rows:
        print(f"train={a} test={b} pe={pe}")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.repeats < 5:
        raise UsageError(f"--repeats must be >= 5, got {args.repeats}")
    _need_out_dir(args.out, "--out")
    rows = []
    for i, variant in enumerate(args.variants):
        res = time_loss(variant, args.batch, args.dim, args.repeats, make_rng(args.seed, BENCH_STREAM, i))
        sup, steg, _ = pair_count_audit(np.tile([0, 1], args.batch // 2))
        expected = {"supcl": sup, "stegcl": steg, "selfcl": args.batch}[variant]
        if res.term_count != expected:
            raise FloatingPointError(f"{variant}: term count {res.term_count} != {expected}")
        rows.append(res.row())
        print(f"{variant} median_ns={res.median_ns} terms={res.term_count}")
    _write_text(args.out, csv_text(BENCH_COLUMNS, rows))
    return EXIT_OK


def cmd_export_features(args) -> int:
    _need_file(args.ckpt, "--ckpt")
    _need_file(args.data, "--data")
    _need_out_dir(args.out, "--out")
    est = _load_ckpt(args.ckpt)
    X, y, _ = load_dataset(args.data).split(args.split)
    if X.shape[0] < 2:
        raise UsageError(f"split {args.split!r} has fewer than 2 images")
    P = pca_2d(est.transform(X))
    rows = [(repr(float(a)), repr(float(b)), int(c)) for (a, b), c in zip(P, y)]
    _write_text(args.out, csv_text(("x", "y", "label"), rows))
    print(f"rows={len(rows)}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "mismatch": cmd_mismatch,
    "bench": cmd_bench,
    "export-features": cmd_export_features,
}


def _threads() -> int:
    raw = os.environ.get("SCF_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise UsageError(f"SCF_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = apply_config(_subparser(parser, args.command), args, argv)
        with threadpool_limits(limits=_threads()):
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"scf {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InputError, DatasetFormatError, CheckpointFormatError, OSError) as exc:
        print(f"scf {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TrainingDivergedError, FloatingPointError) as exc:
        print(f"scf {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
