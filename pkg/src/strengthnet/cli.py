"""Command-line entry point: ``strengthnet <subcommand> ...``.

Exit codes: 0 success, 1 input/validation error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import datasets
from .datasets import TRAINED_EMOTIONS, load_manifest, save_manifest, split_manifest
from .errors import NumericalError, StrengthNetError
from .features import NormalizationStats, apply_normalization, load_audio, mel_spectrogram

log = logging.getLogger("strengthnet")


class UsageError(StrengthNetError):
    pass


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=None, help="random seed (overrides config)")
    parser.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    parser.add_argument("--force", action="store_true", help="recompute existing outputs")
    parser.add_argument("--out", type=Path, default=None, help="output file or directory")
    parser.add_argument("-v", "--verbose", action="store_true")


def _train_overrides(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--max-epochs", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--batch-size", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="strengthnet", description="Emotion strength assessment toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write a synthetic emotional corpus")
    _common(p)
    p.add_argument("--profile", default="synthA", choices=sorted(datasets.PROFILES))
    p.add_argument("--dataset-id", default=None, help="rename the corpus (default: profile name)")
    p.add_argument("--n-per-emotion", type=int, default=80)
    p.add_argument("--n-neutral", type=int, default=80)
    p.add_argument("--no-split", action="store_true", help="leave every row unassigned")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("extract-features", help="mel + functional feature cache")
    _common(p)
    p.add_argument("manifest", type=Path, nargs="+")
    p.add_argument("--stats-from", default="train", help="split used for normalization stats ('all' for every row)")
    p.set_defaults(func=cmd_extract_features)

    p = sub.add_parser("train-ranker", help="fit per-(dataset, emotion) rankers and write labels")
    _common(p)
    p.add_argument("manifest", type=Path, nargs="+")
    p.add_argument("--features", type=Path, required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--emotion", choices=TRAINED_EMOTIONS)
    group.add_argument("--all-emotions", action="store_true")
    p.add_argument("--c-ordered", type=float, default=1.0)
    p.add_argument("--c-similar", type=float, default=1.0)
    p.add_argument("--max-pairs", type=int, default=2000)
    p.add_argument("--pair-split", default="train", help="split whose rows form the pairs ('all' for every row)")
    p.set_defaults(func=cmd_train_ranker)

    p = sub.add_parser("train", help="train StrengthNet from a run config")
    _common(p)
    p.add_argument("config", type=Path)
    p.add_argument("--ablate", choices=["no-cat", "no-frame"], action="append", default=[])
    _train_overrides(p)
    p.add_argument("--corpora", nargs="+")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="strength and emotion for audio files")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("wavs", type=Path, nargs="*")
    p.add_argument("--manifest", type=Path)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="MAE / SER accuracy on a labelled subset")
    _common(p)
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--manifest", type=Path, nargs="+", required=True)
    p.add_argument("--split", default="test")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--predictions", type=Path, help="JSON-lines output of `predict`")
    p.add_argument("--features", type=Path, help="feature cache (with --checkpoint)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="Table-1 style cross-corpus comparison")
    _common(p)
    p.add_argument("config", type=Path)
    p.add_argument("--pools", nargs="+", required=True, help="corpus pools such as A A+B")
    p.add_argument("--seeds", type=int, nargs="+")
    _train_overrides(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("ablate", help="full model vs w/o L_cat vs w/o L_f_str")
    _common(p)
    p.add_argument("config", type=Path)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--corpora", nargs="+")
    _train_overrides(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def _out(args, default: Path) -> Path:
    return args.out if args.out is not None else default


# -- subcommands -------------------------------------------------------------


def cmd_gen_synth(args) -> int:
    out = _out(args, Path("synth") / args.profile)
    profile = datasets.PROFILES[args.profile]
    if args.dataset_id:
        profile = replace(profile, dataset_id=args.dataset_id)
    seed = 0 if args.seed is None else args.seed
    specs = datasets.synthetic_corpus_specs(profile, args.n_per_emotion, args.n_neutral, rng_seed=seed)
    manifest, _ = datasets.generate_synthetic_corpus(specs, out)
    if not args.no_split:
        manifest = split_manifest(manifest, rng_seed=seed)
        save_manifest(manifest, out / "manifest.csv")
    print(f"wrote {len(manifest)} utterances to {out}")
    return 0


def _load_manifests(paths):
    m = datasets.CorpusManifest()
    for p in paths:
        m = m + load_manifest(p)
    return m


def cmd_extract_features(args) -> int:
    from .pipeline import extract_features

    manifest = _load_manifests(args.manifest)
    out = _out(args, Path("features"))
    summary = extract_features(manifest, out, stats_from=None if args.stats_from == "all" else args.stats_from, jobs=args.jobs, force=args.force)
    print(f"{summary.extracted} extracted, {summary.skipped} skipped, {len(summary.errors)} failed")
    for uid, err in summary.errors:
        print(f"error: {uid}: {err}", file=sys.stderr)
    return 1 if summary.errors else 0


def cmd_train_ranker(args) -> int:
    from .pipeline import FeatureCache, train_rankers

    manifest = _load_manifests(args.manifest)
    emotions = TRAINED_EMOTIONS if args.all_emotions else (args.emotion,)
    out = _out(args, Path("ranking"))
    models, labels, caught = train_rankers(
        manifest, FeatureCache(args.features), emotions, out,
        c_ordered=args.c_ordered, c_similar=args.c_similar, max_pairs_per_set=args.max_pairs,
        rng_seed=0 if args.seed is None else args.seed,
        pair_split=None if args.pair_split == "all" else args.pair_split)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    print(f"wrote {len(models)} ranking models and {len(labels)} labels to {out}")
    return 0


def _run_config(args):
    from .pipeline import load_run_config

    cfg = load_run_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["rng_seed"] = args.seed
        cfg.seeds = [args.seed]
    for flag, key in (("max_epochs", "max_epochs"), ("lr", "learning_rate"), ("batch_size", "batch_size")):
        if getattr(args, flag, None) is not None:
            overrides[key] = getattr(args, flag)
    if getattr(args, "corpora", None):
        overrides["corpora"] = tuple(args.corpora)
    if "no-cat" in getattr(args, "ablate", []):
        overrides["disable_L_cat"] = True
    if "no-frame" in getattr(args, "ablate", []):
        overrides["disable_L_f_str"] = True
    cfg.train = replace(cfg.train, **overrides)
    if args.out is not None:
        cfg.out = args.out
    return cfg


def cmd_train(args) -> int:
    from .model import init_params
    from .pipeline import build_table
    from .training import train

    cfg = _run_config(args)
    cfg.out.mkdir(parents=True, exist_ok=True)
    table, _, cache, _ = build_table(cfg)
    model = init_params(replace(cfg.model, dropout_rate=cfg.train.dropout), cfg.train.rng_seed)
    meta = {"normalization": {"mean": cache.stats.mean.tolist(), "std": cache.stats.std.tolist()},
            "emotions": list(TRAINED_EMOTIONS), "train_config": _jsonable(cfg.train)}
    ckpt = cfg.out / "checkpoint.ckpt"
    try:
        result = train(model, table, cfg.train, log_path=cfg.out / "train_log.jsonl",
                       checkpoint_path=ckpt, checkpoint_metadata=meta)
    except NumericalError as exc:
        print(f"numerical failure: {exc}; last good checkpoint kept at {ckpt}", file=sys.stderr)
        return 2
    print(f"best epoch {result.best_epoch}: val_mae {result.best_val_mae:.6f}; checkpoint {ckpt}")
    return 0


def _jsonable(cfg) -> dict:
    from dataclasses import asdict

    return json.loads(json.dumps(asdict(cfg)))


def _model_from_checkpoint(path):
    from .model import load_checkpoint

    model, meta = load_checkpoint(path)
    if "normalization" not in meta:
        raise UsageError(f"{path}: checkpoint lacks normalization stats")
    stats = NormalizationStats(np.array(meta["normalization"]["mean"]), np.array(meta["normalization"]["std"]))
    return model, stats, meta


def cmd_predict(args) -> int:
    from .model import predict

    model, stats, meta = _model_from_checkpoint(args.checkpoint)
    emotions = meta.get("emotions", list(TRAINED_EMOTIONS))
    items = [(Path(w).stem, Path(w)) for w in args.wavs]
    if args.manifest:
        items += [(r.utterance_id, Path(r.audio_path)) for r in load_manifest(args.manifest)]
    if not items:
        raise UsageError("no input files")
    results, failures = [], 0
    for uid, path in items:
        try:
            mel = apply_normalization(mel_spectrogram(load_audio(path)), stats).astype(np.float32)
            p = predict(model, [mel])[0]
            results.append({"utterance_id": uid, "strength": p["strength"],
                            "emotion": emotions[int(np.argmax(p["probs"]))],
                            "probs": {e: float(v) for e, v in zip(emotions, p["probs"])}})
        except Exception as exc:  # per-file error object
            failures += 1
            results.append({"utterance_id": uid, "error": f"{path}: {exc}"})
    lines = "".join(json.dumps(r) + "\n" for r in results)
    if args.out:
        Path(args.out).write_text(lines)
    else:
        sys.stdout.write(lines)
    return 1 if failures == len(items) else 0


def _write_metrics(report, out_dir: Path, name="metrics") -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{name}.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    with open(out_dir / f"{name}.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["group", "name", "n", "utterance_mae", "ser_accuracy"])
        rows = [("all", "all", report.to_dict())]
        rows += [("corpus", k, v) for k, v in report.per_corpus.items()]
        rows += [("emotion", k, v) for k, v in report.per_emotion.items()]
        for group, name_, d in rows:
            acc = d.get("ser_accuracy")
            writer.writerow([group, name_, d["n"], f"{d['utterance_mae']:.6f}",
                             "" if acc is None else f"{acc:.6f}"])


def _print_report(report, title="evaluation") -> None:
    acc = "absent" if report.ser_accuracy is None else f"{report.ser_accuracy:.4f}"
    print(f"{title}: n={report.n} mae={report.utterance_mae:.4f} ser_acc={acc}")
    for ds, d in report.per_corpus.items():
        print(f"  {ds}: mae={d['utterance_mae']:.4f} n={d['n']}")


def cmd_evaluate(args) -> int:
    from .ranker import load_labels
    from .training import evaluate, evaluate_predictions, make_training_table, select

    manifest = _load_manifests(args.manifest).filter(split=args.split, emotion=TRAINED_EMOTIONS)
    if len(manifest) == 0:
        raise UsageError(f"no labelled utterances in split {args.split!r}")
    labels = load_labels(args.labels)
    if args.predictions:
        preds = {}
        for line in Path(args.predictions).read_text().splitlines():
            if line.strip():
                rec = json.loads(line)
                if "error" not in rec:
                    preds[rec["utterance_id"]] = rec
        records, with_acc = [], True
        for r in manifest:
            if r.utterance_id not in preds:
                raise UsageError(f"no prediction for {r.utterance_id!r}")
            if r.utterance_id not in labels:
                raise UsageError(f"no label for {r.utterance_id!r}")
            p = preds[r.utterance_id]
            with_acc = with_acc and "emotion" in p
            records.append({"utterance_id": r.utterance_id, "dataset_id": r.dataset_id, "emotion": r.emotion,
                            "label": labels[r.utterance_id].normalized, "strength": float(p["strength"]),
                            "predicted_emotion": p.get("emotion")})
        report = evaluate_predictions(records, with_accuracy=with_acc)
    else:
        from .pipeline import FeatureCache

        if args.features is None:
            raise UsageError("--features is required with --checkpoint")
        model, stats, meta = _model_from_checkpoint(args.checkpoint)
        cache = FeatureCache(args.features)
        table = make_training_table(manifest, labels, cache.mel, stats)
        no_cat = meta.get("train_config", {}).get("disable_L_cat", False)
        report = evaluate(model, select(table, args.split), with_accuracy=not no_cat)
    _print_report(report)
    _write_metrics(report, _out(args, Path("evaluation")))
    return 0


def _pool_name(spec: str) -> tuple:
    return tuple(spec.split("+"))


def cmd_compare(args) -> int:
    from .pipeline import build_table, load_rankers
    from .training import cross_corpus_eval

    cfg = _run_config(args)
    seeds = args.seeds or cfg.seeds
    table, manifest, cache, labels = build_table(cfg)
    ranker_dir = cfg.rankers or cfg.labels.parent
    rankers = load_rankers(ranker_dir)
    if not rankers:
        raise UsageError(f"no ranking models under {ranker_dir}/rankers")
    feats = cache.functionals([r.utterance_id for r in manifest.filter(emotion=TRAINED_EMOTIONS)])
    comparison = cross_corpus_eval(table, [_pool_name(p) for p in args.pools], rankers, feats, labels,
                                   cfg.train, cfg.model, seeds=seeds)
    out = _out(args, cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    multi = len(seeds) > 1
    comparison.to_csv(out / "comparison.csv", mask_seen=True, with_std=multi)
    comparison.to_csv(out / "comparison_all.csv", mask_seen=False, with_std=multi)
    (out / "comparison.json").write_text(json.dumps(comparison.to_dict(), indent=2) + "\n")
    print((out / "comparison.csv").read_text(), end="")
    return 0


def cmd_ablate(args) -> int:
    from .pipeline import build_table
    from .training import run_ablation, summarize_runs

    cfg = _run_config(args)
    seeds = args.seeds or cfg.seeds
    table, *_ = build_table(cfg)
    results = run_ablation(table, cfg.train, cfg.model, seeds=seeds)
    out = _out(args, cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {}
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["variant", "mae_mean", "mae_std", "acc_mean", "acc_std", "n_runs"])
        for name, reports in results.items():
            s = summarize_runs(reports)
            summary[name] = dict(s, strength_scores=[[p["strength"] for p in r.predictions] for r in reports])
            writer.writerow([name, f"{s['mae_mean']:.6f}", f"{s['mae_std']:.6f}",
                             f"{s['acc_mean']:.6f}" if "acc_mean" in s else "NA",
                             f"{s['acc_std']:.6f}" if "acc_std" in s else "NA", s["n_runs"]])
            acc = f"{s['acc_mean']:.4f}" if "acc_mean" in s else "absent"
            print(f"{name}: mae={s['mae_mean']:.4f}±{s['mae_std']:.4f} acc={acc}")
    (out / "ablation.json").write_text(json.dumps(summary, indent=2) + "\n")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 2
    except (StrengthNetError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
