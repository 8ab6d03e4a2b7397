"""File-backed pipeline steps shared by the CLI and the experiment scripts.

Feature cache layout (one directory):

    mels/<utterance_id>.mel          raw log-mel record (see features.write_mel_record)
    functionals/<utterance_id>.npy   384-dim float64 vector
    mel_stats.json                   {"mean": [80], "std": [80]} from the stats split
"""
from __future__ import annotations

import json
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .datasets import CorpusManifest, load_manifest
from .errors import InvalidInput
from .features import (NormalizationStats, fit_normalization, functional_features, load_audio,
                       mel_spectrogram, read_mel_record, write_mel_record)
from .model import ModelConfig
from .ranker import RankingModel, load_labels, rank_corpus, save_labels
from .training import TrainConfig

log = logging.getLogger(__name__)
STATS_FILE = "mel_stats.json"


def _safe_name(uid: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in uid)


def mel_path(cache, uid) -> Path:
    return Path(cache) / "mels" / f"{_safe_name(uid)}.mel"


def functional_path(cache, uid) -> Path:
    return Path(cache) / "functionals" / f"{_safe_name(uid)}.npy"


def _extract_one(args):
    uid, audio, mel_out, func_out = args
    try:
        w = load_audio(audio)
        write_mel_record(mel_out, uid, mel_spectrogram(w))
        np.save(func_out, functional_features(w))
        return uid, None
    except Exception as exc:  # reported per file
        return uid, f"{audio}: {exc}"


@dataclass
class ExtractSummary:
    extracted: int = 0
    skipped: int = 0
    errors: list = field(default_factory=list)


def _up_to_date(outputs, source) -> bool:
    try:
        src = Path(source).stat().st_mtime
    except OSError:
        return False
    return all(o.is_file() and o.stat().st_mtime >= src for o in outputs)


def extract_features(manifest: CorpusManifest, cache, *, stats_from="train", jobs=1, force=False) -> ExtractSummary:
    cache = Path(cache)
    (cache / "mels").mkdir(parents=True, exist_ok=True)
    (cache / "functionals").mkdir(parents=True, exist_ok=True)
    todo, summary = [], ExtractSummary()
    for r in manifest:
        outs = (mel_path(cache, r.utterance_id), functional_path(cache, r.utterance_id))
        if not Path(r.audio_path).is_file():
            summary.errors.append((r.utterance_id, f"{r.audio_path}: file not found"))
        elif not force and _up_to_date(outs, r.audio_path):
            summary.skipped += 1
        else:
            todo.append((r.utterance_id, r.audio_path, str(outs[0]), str(outs[1])))
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_extract_one, todo, chunksize=8))
    else:
        results = [_extract_one(t) for t in todo]
    for uid, err in results:
        if err:
            summary.errors.append((uid, err))
        else:
            summary.extracted += 1
    failed = {uid for uid, _ in summary.errors}
    stats_rows = manifest.filter(split=stats_from) if stats_from else manifest
    stats_ids = [r.utterance_id for r in stats_rows if r.utterance_id not in failed]
    if not stats_ids:
        raise InvalidInput(f"no utterances in split {stats_from!r} to fit normalization stats")
    stats = fit_normalization(read_mel_record(mel_path(cache, u))[1] for u in stats_ids)
    stats.save(cache / STATS_FILE)
    return summary


class FeatureCache:
    """Read access to an extracted feature directory."""

    def __init__(self, root):
        self.root = Path(root)
        if not (self.root / STATS_FILE).is_file():
            raise InvalidInput(f"{self.root}: no {STATS_FILE}; run extract-features first")
        self.stats = NormalizationStats.load(self.root / STATS_FILE)

    def mel(self, uid) -> np.ndarray:
        path = mel_path(self.root, uid)
        if not path.is_file():
            raise InvalidInput(f"no cached mel features for {uid!r}")
        return read_mel_record(path)[1]

    def functional(self, uid) -> np.ndarray:
        path = functional_path(self.root, uid)
        if not path.is_file():
            raise InvalidInput(f"no cached functional features for {uid!r}")
        return np.load(path)

    def functionals(self, ids) -> dict[str, np.ndarray]:
        return {u: self.functional(u) for u in ids}


def ranker_path(out_dir, dataset_id, emotion) -> Path:
    return Path(out_dir) / "rankers" / f"{_safe_name(dataset_id)}__{emotion}.json"


def train_rankers(manifest, cache: FeatureCache, emotions, out_dir, *, c_ordered=1.0, c_similar=1.0,
                  max_pairs_per_set=2000, rng_seed=0, pair_split="train"):
    """Fit rankers and write ``rankers/<dataset>__<emotion>.json`` plus ``labels.csv``.

    Returns (models, labels, caught warnings).
    """
    out_dir = Path(out_dir)
    (out_dir / "rankers").mkdir(parents=True, exist_ok=True)
    subset = manifest.filter(emotion=("neutral", *emotions))
    feats = cache.functionals(subset.ids)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        models, labels = rank_corpus(subset, feats, emotions, c_ordered=c_ordered, c_similar=c_similar,
                                     max_pairs_per_set=max_pairs_per_set, rng_seed=rng_seed,
                                     pair_split=pair_split)
    for (ds, emo), model in models.items():
        model.save(ranker_path(out_dir, ds, emo))
    save_labels(labels, out_dir / "labels.csv")
    return models, labels, list(caught)


def load_rankers(out_dir) -> dict[tuple[str, str], RankingModel]:
    models = {}
    for path in sorted((Path(out_dir) / "rankers").glob("*.json")):
        m = RankingModel.load(path)
        models[(m.dataset_id, m.emotion)] = m
    return models


# ---------------------------------------------------------------------------
# run configuration file

_RANKER_KEYS = {"c_ordered", "c_similar", "max_pairs_per_set", "pair_split", "rng_seed"}
_TOP_KEYS = {"manifests", "features", "labels", "rankers", "out", "model", "train", "ranker", "seeds"}


@dataclass
class RunConfig:
    manifests: list
    features: Path
    labels: Path
    out: Path
    rankers: Path | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ranker: dict = field(default_factory=dict)
    seeds: list = field(default_factory=lambda: [0])

    def manifest(self) -> CorpusManifest:
        out = CorpusManifest()
        for path in self.manifests:
            out = out + load_manifest(path)
        return out


def _check_keys(section, given, allowed):
    unknown = set(given) - set(allowed)
    if unknown:
        raise InvalidInput(f"unknown key(s) in {section}: {sorted(unknown)}")


def load_run_config(path) -> RunConfig:
    """JSON run configuration; relative paths resolve against the file's directory."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InvalidInput(f"{path}: {exc}") from exc
    _check_keys("run config", raw, _TOP_KEYS)
    for key in ("manifests", "features", "labels", "out"):
        if key not in raw:
            raise InvalidInput(f"run config is missing {key!r}")
    base = path.parent

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    model_kw = raw.get("model", {})
    _check_keys("model", model_kw, {f.name for f in fields(ModelConfig)})
    train_kw = raw.get("train", {})
    _check_keys("train", train_kw, {f.name for f in fields(TrainConfig)})
    ranker_kw = raw.get("ranker", {})
    _check_keys("ranker", ranker_kw, _RANKER_KEYS)
    manifests = raw["manifests"]
    if isinstance(manifests, str):
        manifests = [manifests]
    return RunConfig(
        manifests=[resolve(m) for m in manifests],
        features=resolve(raw["features"]),
        labels=resolve(raw["labels"]),
        out=resolve(raw["out"]),
        rankers=resolve(raw["rankers"]) if raw.get("rankers") else None,
        model=ModelConfig(**model_kw),
        train=TrainConfig(**train_kw),
        ranker=dict(ranker_kw),
        seeds=list(raw.get("seeds", [0])),
    )


def build_table(cfg: RunConfig):
    from .training import make_training_table

    manifest = cfg.manifest()
    cache = FeatureCache(cfg.features)
    labels = load_labels(cfg.labels)
    return make_training_table(manifest, labels, cache.mel, cache.stats), manifest, cache, labels
