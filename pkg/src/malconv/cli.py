"""``malconv`` command line: gen-corpus, train, eval, score, explain, diagnose.

Exit codes: 0 ok, 2 usage, 3 I/O, 4 numeric failure, 5 format error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from collections import Counter
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import corpus, diagnostics, explain
from .checkpoint import load_checkpoint, save_checkpoint
from .exceptions import FormatError, InputError, NumericalError
from .metrics import evaluate
from .model import DESK_CONFIG, FULL_CONFIG, ModelConfig, init_params
from .training import TrainConfig, predict_batched, tokens_from_bytes, train, triage_rank

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_FORMAT = 0, 2, 3, 4, 5

logger = logging.getLogger("malconv")

_CORPUS_KEYS = {"n_benign": int, "n_malicious": int, "file_size_min": int,
                "file_size_max": int, "motif": str, "motif_length": int,
                "motif_policy": str, "background": str}
_SHARED_KEYS = {"seed": int, "workers": int, "precision": str, "preset": str}


def _key_types():
    types = dict(_CORPUS_KEYS)
    types.update(_SHARED_KEYS)
    for cls in (ModelConfig, TrainConfig):
        for f in fields(cls):
            if f.name in ("vocab", "classes"):
                continue
            types[f.name] = {"int": int, "float": float, "bool": bool}.get(f.type, f.type)
    return types


KEY_TYPES = _key_types()


class UsageError(Exception):
    pass


def _coerce(key, raw):
    kind = KEY_TYPES[key]
    if kind is bool:
        lowered = raw.strip().lower()
        if lowered not in ("true", "false", "1", "0", "yes", "no"):
            raise UsageError(f"{key}: expected a boolean, got {raw!r}")
        return lowered in ("true", "1", "yes")
    try:
        return kind(raw.strip())
    except ValueError:
        raise UsageError(f"{key}: cannot parse {raw!r}") from None


def read_config_file(path):
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        if key not in KEY_TYPES:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def merged_settings(args):
    """Config-file values overridden by any flag that was given."""
    settings = read_config_file(args.config) if args.config else {}
    for key, value in vars(args).items():
        if key in KEY_TYPES and value is not None:
            settings[key] = value
    return settings


def _model_config(settings):
    presets = {"desk": DESK_CONFIG, "full": FULL_CONFIG}
    if settings.get("preset", "desk") not in presets:
        raise UsageError(f"preset must be one of {sorted(presets)}")
    base = presets[settings.get("preset", "desk")]
    overrides = {f.name: settings[f.name] for f in fields(ModelConfig) if f.name in settings}
    return ModelConfig(**{**asdict(base), **overrides})


def _train_config(settings):
    return TrainConfig(**{f.name: settings[f.name] for f in fields(TrainConfig) if f.name in settings})


def _dtype(settings):
    precision = settings.get("precision", "f32")
    if precision not in ("f32", "f64"):
        raise UsageError("--precision must be f32 or f64")
    return np.float64 if precision == "f64" else np.float32


def _write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(x):
    return repr(float(x))


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_gen_corpus(args):
    s = merged_settings(args)
    seed = s.get("seed", 0)
    motif = (bytes.fromhex(s["motif"]) if s.get("motif")
             else corpus.default_motif(seed, s.get("motif_length", 24)))
    spec = corpus.CorpusSpec(
        n_benign=s.get("n_benign", 10), n_malicious=s.get("n_malicious", 10),
        file_size_range=(s.get("file_size_min", 16384), s.get("file_size_max", 16384)),
        motif=motif, motif_policy=s.get("motif_policy", corpus.RANDOM_OFFSET),
        background=s.get("background", corpus.REPEATED_BLOCK), seed=seed,
        window=s.get("window", DESK_CONFIG.window))
    manifest = corpus.generate(spec, args.out, workers=s.get("workers", 1))
    labels = manifest.labels
    print(f"manifest: {Path(args.out) / corpus.MANIFEST_NAME}")
    print(f"files: {len(manifest)} (benign {int((labels == 0).sum())}, "
          f"malicious {int((labels == 1).sum())})")
    return EXIT_OK


def cmd_train(args):
    s = merged_settings(args)
    config = _model_config(s)
    train_config = _train_config(s)
    manifest = corpus.load_manifest(args.manifest)
    params = init_params(config, train_config.seed, _dtype(s))
    result = train(params, config, manifest, train_config, workers=s.get("workers", 1))
    save_checkpoint(result.params, result.config, args.out)
    if args.log:
        _write_csv(args.log, ["epoch", "loss", "val_balanced_acc", "lr"],
                   [(r.epoch, _fmt(r.loss), _fmt(r.val_balanced_acc), _fmt(r.lr))
                    for r in result.log])
    if result.skipped:
        print(f"skipped {result.skipped} unreadable files")
    final = result.log[-1].val_balanced_acc if result.log else float("nan")
    print(f"checkpoint: {args.out}")
    print(f"final validation balanced accuracy: {final:.4f}")
    return EXIT_OK


def cmd_eval(args):
    s = merged_settings(args)
    params, config = load_checkpoint(args.checkpoint)
    manifest = corpus.load_manifest(args.manifest)
    items, skipped = corpus.read_samples(manifest, s.get("workers", 1))
    tokens, _ = tokens_from_bytes([d for _, _, d in items], config.max_len)
    scores = predict_batched(params, config, tokens)
    report = evaluate(scores, [label for _, label, _ in items], args.threshold)
    print(f"balanced accuracy: {report.balanced_accuracy:.4f}")
    print(f"AUC: {report.auc:.4f}")
    print(f"benign {report.n_benign}, malicious {report.n_malicious}, skipped {skipped}")
    if args.out:
        row = report.to_dict()
        _write_csv(args.out, list(row), [[_fmt(v) if isinstance(v, float) else v
                                          for v in row.values()]])
    return EXIT_OK


def cmd_score(args):
    s = merged_settings(args)
    params, config = load_checkpoint(args.checkpoint)
    manifest = corpus.load_manifest(args.manifest)
    ranked = triage_rank(params, config, manifest, s.get("workers", 1))
    rows = [(e.path, _fmt(e.score)) for e in ranked]
    if args.out:
        _write_csv(args.out, ["path", "score"], rows)
    else:
        writer = csv.writer(sys.stdout, lineterminator="\n")
        writer.writerow(["path", "score"])
        writer.writerows(rows)
    return EXIT_OK


def cmd_explain(args):
    params, config = load_checkpoint(args.checkpoint)
    if bool(args.file) == bool(args.manifest):
        raise UsageError("give exactly one of --file or --manifest")
    totals = Counter()
    if args.file:
        csv_text, summary, _, counts = explain.explain_report(params, config, args.file)
        totals.update(counts)
        if args.out:
            Path(args.out).parent.mkdir(parents=True, exist_ok=True)
            Path(args.out).write_text(csv_text, encoding="utf-8")
        else:
            sys.stdout.write(csv_text)
        print(summary, file=sys.stderr)
    else:
        manifest = corpus.load_manifest(args.manifest)
        rows = []
        for path in manifest.paths:
            _, _, regions, counts = explain.explain_report(params, config, manifest.resolve(path))
            totals.update(counts)
            rows.extend([path, r.filter_index, r.start_offset, r.width, _fmt(r.contribution),
                         r.leaning, r.section] for r in regions)
        if args.out:
            _write_csv(args.out, ["path"] + explain.REPORT_HEADER, rows)
    if args.table:
        explain.write_section_table(totals, args.table)
    for section, mal, ben in explain.section_table_rows(totals):
        print(f"{section:12s} malicious {mal:6d}  benign {ben:6d}")
    return EXIT_OK


def cmd_diagnose(args):
    s = merged_settings(args)
    params, config = load_checkpoint(args.checkpoint)
    manifest = corpus.load_manifest(args.manifest)
    samples = diagnostics.collect_preactivations(
        params, config, manifest, n_files=args.n_files, sample_cap=args.cap,
        branch=args.branch, seed=s.get("seed", 0), workers=s.get("workers", 1))
    standardized = diagnostics.standardize(samples)
    grid = np.linspace(args.grid_min, args.grid_max, args.grid_points)
    curve = diagnostics.kde(standardized, grid, args.bandwidth)
    diagnostics.emit_kde_csv(curve, args.out)
    if args.reference_out:
        diagnostics.emit_kde_csv(diagnostics.gaussian_reference(grid), args.reference_out)
    print(f"{curve.n_samples} samples, bandwidth {curve.bandwidth:.5f}, written to {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def build_parser():
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="flat key = value settings file")
    shared.add_argument("--seed", type=int)
    shared.add_argument("--workers", type=int)
    shared.add_argument("--precision", choices=["f32", "f64"])
    shared.add_argument("-v", "--verbose", action="store_true")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--preset", choices=["desk", "full"])
    model.add_argument("--embed-dim", dest="embed_dim", type=int)
    model.add_argument("--filters", type=int)
    model.add_argument("--window", type=int)
    model.add_argument("--stride", type=int)
    model.add_argument("--dilation", type=int)
    model.add_argument("--fc-hidden", dest="fc_hidden", type=int)
    model.add_argument("--max-len", dest="max_len", type=int)
    model.add_argument("--batchnorm", dest="use_batchnorm", action="store_const", const=True)

    parser = argparse.ArgumentParser(prog="malconv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", parents=[shared], help="write a synthetic PE corpus")
    p.add_argument("--benign", dest="n_benign", type=int)
    p.add_argument("--malicious", dest="n_malicious", type=int)
    p.add_argument("--min-size", dest="file_size_min", type=int)
    p.add_argument("--max-size", dest="file_size_max", type=int)
    p.add_argument("--motif", help="motif bytes as hex (default: derived from --seed)")
    p.add_argument("--motif-length", dest="motif_length", type=int)
    p.add_argument("--motif-policy", dest="motif_policy",
                   choices=[corpus.RANDOM_OFFSET, corpus.WINDOW_ALIGNED])
    p.add_argument("--background", choices=[corpus.UNIFORM_RANDOM, corpus.REPEATED_BLOCK])
    p.add_argument("--window", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", parents=[shared, model], help="train and write a checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="per-epoch CSV log path")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--decay", dest="decay_factor", type=float)
    p.add_argument("--decov-lambda", dest="decov_lambda", type=float)
    p.add_argument("--validation-fraction", dest="validation_fraction", type=float)
    p.add_argument("--no-shuffle", dest="shuffle", action="store_const", const=False)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[shared], help="balanced accuracy and AUC")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", help="CSV report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score", parents=[shared], help="triage ranking CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("explain", parents=[shared], help="sparse-CAM regions per file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--file")
    p.add_argument("--manifest")
    p.add_argument("--out", help="region CSV path")
    p.add_argument("--table", help="aggregate section,malicious,benign CSV path")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("diagnose", parents=[shared], help="KDE of conv pre-activations")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--branch", choices=["linear", "gate", "both"], default="linear")
    p.add_argument("--n-files", dest="n_files", type=int)
    p.add_argument("--cap", type=int, default=10**6)
    p.add_argument("--bandwidth", type=float)
    p.add_argument("--grid-min", dest="grid_min", type=float, default=diagnostics.GRID_MIN)
    p.add_argument("--grid-max", dest="grid_max", type=float, default=diagnostics.GRID_MAX)
    p.add_argument("--grid-points", dest="grid_points", type=int,
                   default=diagnostics.GRID_POINTS)
    p.add_argument("--out", required=True, help="x,pdf CSV path")
    p.add_argument("--reference-out", dest="reference_out",
                   help="also write the N(0,1) reference curve here")
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, InputError) as exc:
        print(f"malconv {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as exc:
        print(f"malconv {args.command}: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except NumericalError as exc:
        print(f"malconv {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"malconv {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
