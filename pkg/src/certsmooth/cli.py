"""Command-line entry point: corpus generation, training, evaluation,
certification sweeps, attacks, score maps and timing benchmarks."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__, classifiers, dataset
from .attacks import ATTACKS, SCHEMES, GaConfig, make_predictor, rows_to_jsonl, run_attack, summarize, summary_table
from .certify import AttackKind, clean_accuracy_from_tallies, sweep, sweep_csv
from .classifiers import InputMode, TrainConfig
from .errors import CertSmoothError, ConfigError
from .smoothing import chunk_score_map, score_map_csv, tally_chunks

logger = logging.getLogger("certsmooth")

DEFAULT_P_FRACTIONS = (0.01, 0.05, 0.10, 0.30, 0.50)
SPLITS = ("train", "val", "test")


@dataclass
class RunConfig:
    """Validated view of the parsed arguments."""

    command: str
    corpus: Path | None = None
    manifest: Path | None = None
    model: Path | None = None
    out: Path | None = None
    z: int | None = None
    scheme: str = "chunk"
    attacks: list[str] = field(default_factory=list)
    p_fractions: list[float] = field(default_factory=list)
    seed: int = 0
    threads: int = 1

    def validate(self) -> None:
        if self.z is not None and self.z <= 0:
            raise ConfigError(f"--z must be positive, got {self.z}")
        if self.threads < 1:
            raise ConfigError("--threads must be at least 1")
        if self.seed < 0:
            raise ConfigError("--seed must be non-negative")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}")
        for frac in self.p_fractions:
            if not 0 < frac <= 1:
                raise ConfigError(f"--p-fraction must lie in (0, 1], got {frac}")
        if self.command == "certify" and self.scheme != "chunk":
            raise ConfigError("certify requires --scheme chunk")
        for a in self.attacks:
            if a not in ATTACKS:
                raise ConfigError(f"unknown attack {a!r}")


def _config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig(
        command=args.command,
        corpus=getattr(args, "corpus", None),
        manifest=getattr(args, "manifest", None),
        model=getattr(args, "model", None),
        out=getattr(args, "out", None),
        z=getattr(args, "z", None),
        scheme=getattr(args, "scheme", None) or "chunk",
        attacks=list(getattr(args, "attack", None) or []),
        p_fractions=list(getattr(args, "p_fraction", None) or []),
        seed=args.seed,
        threads=args.threads,
    )
    cfg.validate()
    return cfg


# -- shared helpers ------------------------------------------------------------

def _load_corpus(args) -> dataset.Dataset:
    root = Path(args.corpus)
    manifest = Path(args.manifest) if args.manifest else root / "manifest.jsonl"
    return dataset.ingest(root, manifest, strict=not args.lenient)


def _split(ds: dataset.Dataset, args, name: str) -> dataset.Dataset:
    parts = dict(zip(SPLITS, dataset.split_by_time(ds, args.train_frac, args.val_frac)))
    return parts[name]


def _load_model(path, scheme: str) -> classifiers.TrainedModel:
    model = classifiers.load_file(path)
    want = InputMode.CHUNK if scheme == "chunk" else InputMode.PREFIX
    if model.mode is not want:
        raise ConfigError(f"scheme {scheme!r} needs a {want.value}-mode model, {path} is {model.mode.value}-mode")
    return model


def _write(path: Path | None, text: str) -> None:
    if path is None:
        sys.stdout.write(text)
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    logger.info("wrote %s", path)


def _pmap(fn: Callable, items: Sequence, threads: int) -> list:
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Rank statistic (Mann-Whitney U / n_pos n_neg), ties count one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n_pos, n_neg = int(y.sum()), int((1 - y).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    order = np.argsort(s, kind="stable")
    ranks = np.empty(s.size, dtype=np.float64)
    sorted_s = s[order]
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def svg_heatmap(scores: Sequence[float], z: int, cell: int = 12, per_row: int = 64) -> str:
    """One rect per chunk; blue is benign (0), red is malicious (1)."""
    n = len(scores)
    cols = max(1, min(n, per_row))
    rows = -(-n // cols)
    w, h = cols * cell, rows * cell
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">']
    for i, s in enumerate(scores):
        s = min(max(float(s), 0.0), 1.0)
        r, b = round(255 * s), round(255 * (1 - s))
        x, y = (i % cols) * cell, (i // cols) * cell
        out.append(f'<rect class="chunk" x="{x}" y="{y}" width="{cell}" height="{cell}" '
                   f'fill="rgb({r},0,{b})"><title>chunk {i} offset {i * z} score {s:.4f}</title></rect>')
    out.append("</svg>\n")
    return "\n".join(out)


# -- subcommands ------------------------------------------------------------------

def cmd_gen(args) -> int:
    spec = dataset.CorpusSpec(
        n_benign=args.n_benign, n_malicious=args.n_malicious,
        size_range=(args.min_size, args.max_size), overlay_prob=args.overlay_prob,
        pe32plus_prob=args.pe32plus_prob, seed=args.seed,
    )
    entries = dataset.generate_corpus(spec, args.out)
    print(f"generated {len(entries)} files in {args.out}")
    return 0


def cmd_train(args) -> int:
    train_split = _split(_load_corpus(args), args, "train")
    mode = InputMode.CHUNK if args.scheme == "chunk" else InputMode.PREFIX
    config = TrainConfig(z=args.z, max_epochs=args.epochs, learning_rate=args.lr, seed=args.seed)
    model = classifiers.train(train_split.samples(), config, args.kind, mode)
    classifiers.save_file(model, args.out)
    last = model.history[-2] if len(model.history) > 1 else {}
    print(f"trained {args.kind}/{mode.value} on {len(train_split)} files, "
          f"final loss {last.get('loss', float('nan')):.4f}; saved {args.out}")
    return 0


def _scorer(scheme: str, model, z: int, seed: int) -> Callable[[bytes], float]:
    return make_predictor(scheme, model, z, seed=seed).score


def cmd_eval(args) -> int:
    ds = _load_corpus(args)
    model = _load_model(args.model, args.scheme)
    z = args.z or model.z
    score = _scorer(args.scheme, model, z, args.seed)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scheme", "split", "n_files", "accuracy", "roc_auc"])
    for name in args.split:
        part = _split(ds, args, name)
        samples = list(part.samples())
        scores = _pmap(lambda s: score(s[0]), samples, args.threads)
        labels = [y for _, y in samples]
        acc = float(np.mean([(s >= 0.5) == y for s, y in zip(scores, labels)])) if samples else 0.0
        w.writerow([args.scheme, name, len(samples), f"{acc:.6f}", f"{roc_auc(scores, labels):.6f}"])
    _write(args.out, buf.getvalue())
    return 0


def cmd_certify(args) -> int:
    part = _split(_load_corpus(args), args, args.split)
    model = _load_model(args.model, "chunk")
    z = args.z or model.z
    samples = list(part.samples())
    tallies = _pmap(lambda s: (tally_chunks(model, s[0], z), len(s[0]), s[1]), samples, args.threads)
    kinds = args.kind or [k.value for k in AttackKind]
    rows = sweep(tallies, kinds, args.p_fraction or DEFAULT_P_FRACTIONS)
    _write(args.out, sweep_csv(rows))
    logger.info("clean accuracy %.4f on %d files", clean_accuracy_from_tallies(tallies), len(tallies))
    return 0


def cmd_attack(args) -> int:
    ds = _load_corpus(args)
    model = _load_model(args.model, args.scheme)
    z = args.z or model.z
    targets = [d for d, y in _split(ds, args, args.split).samples() if y == 1]
    if args.limit:
        targets = targets[: args.limit]
    benign_train = [d for d, y in _split(ds, args, "train").samples() if y == 0]
    pool = b"".join(benign_train[: args.pool_files])
    predictor = make_predictor(args.scheme, model, z, seed=args.seed)
    ga = GaConfig(population=args.population, max_steps=args.steps, seed=args.seed)
    params = {k: v for k, v in (("pad_bytes", args.pad_bytes), ("amount", args.shift),
                                ("count", args.sections), ("per_gap", args.per_gap)) if v is not None}
    rows = []
    for attack in args.attack:
        keep = {k: v for k, v in params.items() if k in _ATTACK_KEYS[attack]}
        rows += run_attack(targets, attack, predictor, ga, keep, pool, threads=args.threads)
    table = summary_table(summarize(rows))
    if args.out is None:
        sys.stdout.write(rows_to_jsonl(rows))
    else:
        _write(args.out, rows_to_jsonl(rows))
        _write(Path(str(args.out) + ".summary.txt"), table)
    sys.stdout.write(table)
    return 0


_ATTACK_KEYS = {
    "padding": {"pad_bytes"}, "padding_slack": {"pad_bytes"}, "shift": {"amount"},
    "inject": {"count"}, "caves": {"per_gap"}, "combined": set(),
}


def cmd_scoremap(args) -> int:
    model = _load_model(args.model, "chunk")
    z = args.z or model.z
    data = Path(args.file).read_bytes()
    smap = chunk_score_map(model, data, z)
    out = Path(args.out) if args.out else Path(args.file).with_suffix("")
    _write(out.with_suffix(".csv"), score_map_csv(smap, z))
    _write(out.with_suffix(".svg"), svg_heatmap([s for _, s in smap], z))
    print(f"{len(smap)} chunks; wrote {out.with_suffix('.csv')} and {out.with_suffix('.svg')}")
    return 0


def bench_rows(chunk_model, prefix_model, sizes: Sequence[int], repeats: int, seed: int,
               votes: int = 20) -> list[tuple[str, int, int, float]]:
    """(scheme, file_bytes, n_chunks, seconds per example) per scheme and size."""
    rng = np.random.default_rng(seed)
    rows = []
    for size in sizes:
        spec = dataset.CorpusSpec(size_range=(size, size), seed=seed)
        files = [dataset.synth_file(spec, "malicious", rng, dataset.BASE_TIMESTAMP)[0] for _ in range(repeats)]
        n_chunks = tally_chunks(chunk_model, files[0], chunk_model.z).n
        for scheme in SCHEMES:
            model = chunk_model if scheme == "chunk" else prefix_model
            score = make_predictor(scheme, model, seed=seed, votes=votes).score
            score(files[0])  # warm-up
            t0 = time.perf_counter()
            for f in files:
                score(f)
            rows.append((scheme, len(files[0]), n_chunks, (time.perf_counter() - t0) / len(files)))
    return rows


def cmd_bench(args) -> int:
    chunk_model = _load_model(args.model, "chunk")
    prefix_model = _load_model(args.baseline_model, "ns-baseline")
    rows = bench_rows(chunk_model, prefix_model, args.sizes, args.repeats, args.seed)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scheme", "file_bytes", "n_chunks", "seconds_per_example"])
    for scheme, size, n, sec in rows:
        w.writerow([scheme, size, n, f"{sec:.6g}"])
    _write(args.out, buf.getvalue())
    return 0


# -- argument parsing ------------------------------------------------------------

def _corpus_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--corpus", required=True, type=Path, help="corpus directory")
    p.add_argument("--manifest", type=Path, help="manifest JSONL (default: <corpus>/manifest.jsonl)")
    p.add_argument("--lenient", action="store_true", help="skip bad manifest entries instead of failing")
    p.add_argument("--train-frac", type=float, default=0.6)
    p.add_argument("--val-frac", type=float, default=0.2)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="certsmooth", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic PE corpus")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--n-benign", type=int, default=100)
    p.add_argument("--n-malicious", type=int, default=100)
    p.add_argument("--min-size", type=int, default=16384)
    p.add_argument("--max-size", type=int, default=32768)
    p.add_argument("--overlay-prob", type=float, default=0.3)
    p.add_argument("--pe32plus-prob", type=float, default=0.0)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", parents=[common], help="train a chunk or whole-file model")
    _corpus_args(p)
    p.add_argument("--out", required=True, type=Path, help="model file")
    p.add_argument("--z", type=int, default=512)
    p.add_argument("--scheme", choices=SCHEMES, default="chunk",
                   help="chunk trains on ablated windows; the others train the prefix baseline")
    p.add_argument("--kind", choices=[k.value for k in classifiers.ClassifierKind], default="histogram")
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=0.0, help="0 picks the per-kind default")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="accuracy and ROC-AUC CSV")
    _corpus_args(p)
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--scheme", choices=SCHEMES, default="chunk")
    p.add_argument("--z", type=int)
    p.add_argument("--split", choices=SPLITS, action="append")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("certify", parents=[common], help="certified accuracy sweep CSV")
    _corpus_args(p)
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--scheme", choices=SCHEMES, default="chunk")
    p.add_argument("--z", type=int)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--kind", choices=[k.value for k in AttackKind], action="append")
    p.add_argument("--p-fraction", type=float, action="append")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("attack", parents=[common], help="GA attacks on malicious files, JSONL plus summary")
    _corpus_args(p)
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--scheme", choices=SCHEMES, default="chunk")
    p.add_argument("--attack", choices=ATTACKS, action="append", required=True)
    p.add_argument("--z", type=int)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--limit", type=int, default=0, help="attack at most this many files (0: all)")
    p.add_argument("--pool-files", type=int, default=40, help="benign training files used as GA content")
    p.add_argument("--population", type=int, default=10)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--pad-bytes", type=int)
    p.add_argument("--shift", type=int)
    p.add_argument("--sections", type=int)
    p.add_argument("--per-gap", type=int)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("scoremap", parents=[common], help="per-chunk scores as CSV and SVG")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--file", required=True, type=Path)
    p.add_argument("--z", type=int)
    p.add_argument("--out", type=Path, help="output stem; .csv and .svg are appended")
    p.set_defaults(func=cmd_scoremap)

    p = sub.add_parser("bench", parents=[common], help="inference seconds per example per scheme")
    p.add_argument("--model", required=True, type=Path, help="chunk-mode model")
    p.add_argument("--baseline-model", required=True, type=Path, help="prefix-mode model")
    p.add_argument("--sizes", type=int, nargs="+", default=[8192, 16384, 32768, 65536])
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_bench)
    return parser


def _setup_logging() -> None:
    level = os.environ.get("CERTSMOOTH_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _config(args)
        if getattr(args, "split", "x") is None:
            args.split = ["test"]
        return args.func(args)
    except CertSmoothError as exc:
        print(f"certsmooth: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, OSError) as exc:
        print(f"certsmooth: error: {exc}", file=sys.stderr)
        return ConfigError.exit_code if isinstance(exc, ValueError) else 1


if __name__ == "__main__":
    sys.exit(main())
