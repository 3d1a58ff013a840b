"""Command-line entry point: ``beatvec <subcommand> ...``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 training divergence.
Every artifact embeds (or sits next to) the fully resolved run config;
wall-clock details go to a ``.run.log`` sidecar so artifacts stay
byte-reproducible.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io as _io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, io
from .dataset import dedup, ingest, read_dataset, write_dataset
from .errors import DataError
from .evalstats import (
    ProbeHParams,
    boxplot_stats,
    eval_classifier,
    levene_test,
    pairwise_comparisons,
    run_ranking,
    summarize_ranks,
)
from .lstm import LstmConfig, LstmHParams, LstmStack, predict, record_index, record_key, train_lstm, windows
from .models import MODEL_KINDS, EmbeddingModel, HParams, ModelConfig, Trainer, task_for
from .nn import DivergedTraining

log = logging.getLogger("beatvec")

EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 2, 3, 4


def default_seed() -> int:
    return int(os.environ.get("BEATVEC_SEED", "0"))


def run_config(args) -> dict:
    """Resolved flags minus execution-only knobs (threads, verbosity)."""
    skip = {"func", "threads", "verbose"}
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in skip:
            continue
        out[k] = [str(x) for x in v] if isinstance(v, list) else (str(v) if isinstance(v, Path) else v)
    return out


def _sidecar_log(path, args, started: float) -> None:
    entry = {
        "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "seconds": round(time.time() - started, 3),
        "threads": args.threads,
        "version": __version__,
    }
    Path(str(path) + ".run.log").write_text(json.dumps(entry) + "\n", encoding="utf-8")


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_ingest(args) -> None:
    cfg = run_config(args)
    root = args.root if args.root is not None else Path(args.manifest).parent
    ds = ingest(args.manifest, root, args.stride, not args.no_augment, {"run": cfg}, workers=args.threads)
    if not ds.records:
        raise DataError("no usable songs in the manifest")
    write_dataset(ds, args.out)
    counts = ds.counts()
    print(f"wrote {args.out}: {len(ds.songs)} songs, {counts['total_units']} units ({counts['unique_units']} unique)")


def cmd_toy(args) -> None:
    from .toy import write_toy_midi

    manifest = write_toy_midi(args.out, args.seed, songs_per_composer=args.songs, units_per_song=args.units)
    print(f"wrote toy corpus manifest {manifest}")


def cmd_train(args) -> None:
    ds = read_dataset(args.data)
    hp = HParams(lr=args.lr, epochs=args.epochs, batch=args.batch, lam=args.lam, clip=args.clip)
    config = ModelConfig(args.model, n_composers=ds.n_composers, seed=args.seed)
    model = EmbeddingModel(config)
    data = task_for(ds, args.model)
    result = Trainer(model, hp).fit(data, progress=lambda e, l: log.info("epoch %d loss %.6f", e, l))
    extra = {
        "run": run_config(args),
        "hparams": hp.to_dict(),
        "initial_loss": result.initial_loss,
        "epoch_losses": result.epoch_losses,
        "epoch_parts": result.epoch_parts,
        "n_examples": len(data),
    }
    model.save(args.out, extra)
    parts = sorted({k for p in result.epoch_parts for k in p})
    rows = [[0, repr(result.initial_loss)] + [""] * len(parts)]
    for e, (loss, p) in enumerate(zip(result.epoch_losses, result.epoch_parts), 1):
        rows.append([e, repr(loss)] + [repr(p.get(k, "")) for k in parts])
    _write_csv(str(args.out) + ".losses.csv", ["epoch", "loss"] + parts, rows)
    print(f"trained {args.model}: loss {result.initial_loss:.6f} -> {result.epoch_losses[-1] if result.epoch_losses else result.initial_loss:.6f}")


def cmd_embed(args) -> None:
    model, _ = EmbeddingModel.load(args.ckpt)
    ds = read_dataset(args.data)
    split = None if args.split == "all" else args.split
    keep = [i for i, r in enumerate(ds.records) if split is None or ds.song_split()[r.song_id] == split]
    vectors = model.embed_units([ds.records[i].unit for i in keep])
    io.write_embeddings(args.out, keep, vectors)
    _write_json(str(args.out) + ".config.json", {"format": "BVE1", "model_kind": model.kind, "run": run_config(args)})
    print(f"wrote {len(keep)} embeddings to {args.out}")


def _embedding_matrix(path, n_records: int) -> tuple[np.ndarray, np.ndarray]:
    idx, vec = io.read_embeddings(path)
    full = np.zeros((n_records, io.EMBED_DIM))
    full[idx] = vec
    have = np.zeros(n_records, dtype=bool)
    have[idx] = True
    return full, have


def _data_path_from(sidecar_source, explicit):
    if explicit is not None:
        return explicit
    side = Path(str(sidecar_source) + ".config.json")
    if side.exists():
        return json.loads(side.read_text())["run"]["data"]
    raise DataError(f"no --data given and no sidecar config next to {sidecar_source}")


def cmd_train_lstm(args) -> None:
    ds = read_dataset(args.data)
    emb, have = _embedding_matrix(args.embeddings, len(ds.records))
    win = windows(ds, "train", record_index(ds))
    win = win[have[win].all(axis=1)] if len(win) else win
    stack = LstmStack(LstmConfig(hidden=args.hidden, layers=args.layers, seed=args.seed))
    hp = LstmHParams(lr=args.lr, epochs=args.epochs, batch=args.batch, clip=args.clip)
    result = train_lstm(stack, emb, win, hp, progress=lambda e, l: log.info("epoch %d loss %.6f", e, l))
    extra = {
        "run": run_config(args),
        "hparams": vars(hp),
        "initial_loss": result.initial_loss,
        "epoch_losses": result.epoch_losses,
        "n_windows": int(len(win)),
    }
    stack.save(args.out, extra)
    rows = [[0, repr(result.initial_loss)]] + [[e, repr(l)] for e, l in enumerate(result.epoch_losses, 1)]
    _write_csv(str(args.out) + ".losses.csv", ["epoch", "loss"], rows)
    print(f"trained LSTM on {len(win)} windows: loss {result.initial_loss:.6f} -> {result.epoch_losses[-1]:.6f}")


def rank_report(ds, emb, stack, trials: int, pool_size: int, seed: int, split: str = "test") -> dict:
    idx_of = record_index(ds)
    win = windows(ds, split, idx_of)
    pool_records = dedup(ds.split_records(split))
    if len(pool_records) < pool_size:
        raise DataError(f"{split} split has {len(pool_records)} unique units, fewer than pool size {pool_size}")
    if len(win) == 0:
        raise DataError(f"no 8-unit sequences in the {split} split")
    key_to_pool = {r.unit.key(): i for i, r in enumerate(pool_records)}
    pool = emb[[idx_of[record_key(r)] for r in pool_records]]
    trial_ids = np.arange(len(win))
    if trials < len(win):
        trial_ids = np.sort(np.random.default_rng([seed, 0x7A1]).choice(len(win), size=trials, replace=False))
    win = win[trial_ids]
    pred = predict(stack, emb, win)
    targets = emb[win[:, -1]]
    target_pool = [key_to_pool[ds.records[i].unit.key()] for i in win[:, -1]]
    outcomes = run_ranking(pred, targets, target_pool, pool, pool_size - 1, seed, trial_ids)
    summary = summarize_ranks(outcomes)
    return {
        "pool": {"split": split, "unique_units": len(pool_records), "pool_size": pool_size, "tie_rule": "ties count against target"},
        "n_trials": len(outcomes),
        "trial_ids": [int(o.trial) for o in outcomes],
        "ranks": [o.rank for o in outcomes],
        "summary": summary.to_dict(),
        "median_rank": summary.median,
    }


def cmd_eval_rank(args) -> None:
    stack, lcfg = LstmStack.load(args.lstm)
    data = args.data or lcfg["run"]["data"]
    ds = read_dataset(data)
    emb, _ = _embedding_matrix(args.embeddings, len(ds.records))
    report = rank_report(ds, emb, stack, args.trials, args.pool_size, args.seed, args.split)
    side = Path(str(args.embeddings) + ".config.json")
    name = args.name or (json.loads(side.read_text())["model_kind"] if side.exists() else Path(args.embeddings).stem)
    report = {"name": name, "run": run_config(args) | {"data": str(data)}} | report
    _write_json(args.out, report)
    s = report["summary"]
    print(f"{name}: median rank {s['median']} (IQR {s['spread']}, skew {s['skew']:.3f}) over {report['n_trials']} trials")


def classify_report(ds, train_emb, test_emb, seed: int, hp: ProbeHParams) -> dict:
    idx_of = record_index(ds)
    tr = dedup(ds.split_records("train"))
    te = dedup(ds.split_records("test"))
    if not tr or not te:
        raise DataError("both train and test splits need units")
    trx = train_emb[[idx_of[record_key(r)] for r in tr]]
    tex = test_emb[[idx_of[record_key(r)] for r in te]]
    trl = np.array([r.composer_id for r in tr])
    tel = np.array([r.composer_id for r in te])
    _, rep, history = eval_classifier(trx, trl, tex, tel, ds.n_composers, seed, hp)
    return {
        "micro_f1": rep.micro_f1,
        "macro_f1": rep.macro_f1,
        "weighted_f1": rep.weighted_f1,
        "naming_note": "macro_f1 is the unweighted class mean; weighted_f1 is the support-weighted mean",
        "per_class_f1": rep.per_class,
        "support": rep.support,
        "composers": ds.composers,
        "n_train": len(tr),
        "n_test": len(te),
        "probe_final_loss": history[-1] if history else None,
    }


def cmd_eval_classify(args) -> None:
    data = _data_path_from(args.embeddings[0], args.data)
    ds = read_dataset(data)
    train_emb, _ = _embedding_matrix(args.embeddings[0], len(ds.records))
    test_emb = train_emb
    if len(args.embeddings) > 1:
        test_emb, _ = _embedding_matrix(args.embeddings[1], len(ds.records))
    hp = ProbeHParams(hidden=args.hidden, lr=args.lr, epochs=args.epochs, batch=args.batch)
    report = {"run": run_config(args) | {"data": str(data)}} | classify_report(ds, train_emb, test_emb, args.seed, hp)
    _write_json(args.out, report)
    print(f"micro-F1 {report['micro_f1']:.4f}  macro-F1 {report['macro_f1']:.4f}  weighted-F1 {report['weighted_f1']:.4f}")


def cmd_stats(args) -> None:
    samples = {}
    for path in args.reports:
        rep = json.loads(Path(path).read_text())
        name = rep.get("name", Path(path).stem)
        if name in samples:
            name = f"{name}:{Path(path).stem}"
        samples[name] = rep["ranks"]
    if len(samples) < 2:
        raise DataError("need at least two reports to compare")
    rows = pairwise_comparisons(samples, args.alpha, args.m)
    w, p = levene_test(list(samples.values()), center=args.center)
    tests = _io.StringIO()
    wr = csv.writer(tests, lineterminator="\n")
    wr.writerow(["test", "a", "b", "statistic", "p", "alpha", "m", "threshold", "significant"])
    for r in rows:
        wr.writerow(["welch_t", r["a"], r["b"], repr(r["t"]), repr(r["p"]), r["alpha"], r["m"], repr(r["threshold"]), r["significant"]])
    wr.writerow([f"levene_{args.center}", "*", "*", repr(w), repr(p), "", "", "", ""])
    box_rows = []
    for name, ranks in samples.items():
        b = boxplot_stats(ranks)
        s = summarize_ranks(ranks)
        box_rows.append(
            [name, b["q1"], b["median"], b["q3"], b["whisker_low"], b["whisker_high"], " ".join(repr(v) for v in b["outliers"]), s.spread, s.std, repr(s.skew)]
        )
    header = ["model", "q1", "median", "q3", "whisker_low", "whisker_high", "outliers", "iqr", "std", "skew"]
    if args.out:
        Path(str(args.out) + ".tests.csv").write_text(tests.getvalue(), encoding="utf-8")
        _write_csv(str(args.out) + ".boxplot.csv", header, box_rows)
    sys.stdout.write(tests.getvalue())
    if not args.out:
        w2 = csv.writer(sys.stdout, lineterminator="\n")
        w2.writerow(header)
        w2.writerows(box_rows)


def cmd_inspect(args) -> None:
    info = io.sniff(args.file)
    for k, v in info.items():
        if isinstance(v, (dict, list)):
            v = json.dumps(v, sort_keys=True)
        print(f"{k}: {v}")


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="beatvec", description="Four-beat piano-roll embeddings: ingest, train, embed, evaluate.")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="cap on worker threads (default: all cores); results do not depend on it")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    seed = dict(type=int, default=default_seed(), help="master seed (env BEATVEC_SEED)")

    s = sub.add_parser("ingest", help="MIDI files + manifest CSV -> BVD1 dataset")
    s.add_argument("--in", dest="root", type=Path, default=None, help="directory the manifest paths are relative to")
    s.add_argument("--manifest", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--stride", type=int, default=4, help="extraction stride in beats")
    s.add_argument("--no-augment", action="store_true", help="skip the 12-key transposition")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("toy", help="write the synthetic 3-composer corpus as MIDI + manifest")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--seed", **seed)
    s.add_argument("--songs", type=int, default=6, help="songs per composer")
    s.add_argument("--units", type=int, default=10, help="four-beat units per song")
    s.set_defaults(func=cmd_toy)

    s = sub.add_parser("train", help="train one of the seven embedding models")
    s.add_argument("--model", choices=MODEL_KINDS, required=True)
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--seed", **seed)
    s.add_argument("--lr", type=float, default=0.01)
    s.add_argument("--epochs", type=int, default=10)
    s.add_argument("--batch", type=int, default=100)
    s.add_argument("--lambda", dest="lam", type=float, default=1.0, help="auxiliary composer-loss weight")
    s.add_argument("--clip", type=float, default=5.0, help="gradient-norm clip")
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("embed", help="encode dataset units with a trained model -> BVE1")
    s.add_argument("--ckpt", type=Path, required=True)
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--split", choices=("all", "train", "test"), default="all")
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("train-lstm", help="train the forward-prediction LSTM on embeddings")
    s.add_argument("--embeddings", type=Path, required=True)
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--hidden", type=int, default=64)
    s.add_argument("--layers", type=int, default=3)
    s.add_argument("--seed", **seed)
    s.add_argument("--lr", type=float, default=0.5)
    s.add_argument("--epochs", type=int, default=30)
    s.add_argument("--batch", type=int, default=100)
    s.add_argument("--clip", type=float, default=5.0)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_train_lstm)

    s = sub.add_parser("eval-rank", help="rank true continuations among pool candidates")
    s.add_argument("--lstm", type=Path, required=True)
    s.add_argument("--embeddings", type=Path, required=True)
    s.add_argument("--data", type=Path, default=None, help="dataset (default: the one the LSTM was trained on)")
    s.add_argument("--trials", type=int, default=1000)
    s.add_argument("--pool-size", type=int, default=1000)
    s.add_argument("--split", choices=("train", "test"), default="test")
    s.add_argument("--name", default=None, help="label for this model in stats tables")
    s.add_argument("--seed", **seed)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_eval_rank)

    s = sub.add_parser("eval-classify", help="composer probe on frozen embeddings")
    s.add_argument("--embeddings", type=Path, nargs="+", required=True, help="one file, or train then test files")
    s.add_argument("--data", type=Path, default=None)
    s.add_argument("--seed", **seed)
    s.add_argument("--hidden", type=int, default=50)
    s.add_argument("--lr", type=float, default=0.1)
    s.add_argument("--epochs", type=int, default=100)
    s.add_argument("--batch", type=int, default=100)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_eval_classify)

    s = sub.add_parser("stats", help="significance tests across rank reports")
    stats_sub = s.add_subparsers(dest="stats_command", required=True, parser_class=_Parser)
    c = stats_sub.add_parser("compare", help="Welch t-tests, Bonferroni flags, Levene W, boxplot data")
    c.add_argument("--reports", type=Path, nargs="+", required=True)
    c.add_argument("--alpha", type=float, default=0.05)
    c.add_argument("--m", type=int, default=None, help="comparison count for Bonferroni (default: number of pairs)")
    c.add_argument("--center", choices=("mean", "median"), default="mean")
    c.add_argument("--out", type=Path, default=None, help="prefix for .tests.csv and .boxplot.csv")
    c.set_defaults(func=cmd_stats)

    s = sub.add_parser("inspect", help="print the header of a BVD1/BVM1/BVE1 file")
    s.add_argument("file", type=Path)
    s.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        parser.error("--threads must be at least 1")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        # multi-threaded BLAS changes floating-point summation order with the
        # thread count, so numeric kernels always run on one thread
        with threadpool_limits(limits=1, user_api="blas"):
            args.func(args)
    except DivergedTraining as exc:
        print(f"beatvec: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, FileNotFoundError, ValueError, KeyError, UnicodeDecodeError) as exc:
        print(f"beatvec: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    out = getattr(args, "out", None)
    if out is not None and args.command not in ("toy", "stats"):
        _sidecar_log(out, args, started)
    return 0


if __name__ == "__main__":
    sys.exit(main())
