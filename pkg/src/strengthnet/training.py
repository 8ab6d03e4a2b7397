"""Training loop, evaluation and the comparison harnesses (ablation, cross-corpus)."""
from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from .datasets import TRAINED_EMOTIONS
from .errors import InvalidInput, MissingLabel, NumericalError
from .model import ModelConfig, StrengthNet, collate, compute_loss, init_params, predict
from .ranker import normalize_scores, score

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.98
    batch_size: int = 64
    dropout: float = 0.3
    patience_epochs: int = 30
    max_epochs: int = 300
    rng_seed: int = 0
    corpora: tuple = ()  # empty = every corpus in the table
    disable_L_cat: bool = False
    disable_L_f_str: bool = False
    bucket_factor: int = 8  # batches per length-sorted bucket

    def __post_init__(self):
        object.__setattr__(self, "corpora", tuple(self.corpora))
        if self.batch_size < 1:
            raise InvalidInput("batch_size must be >= 1")
        if self.patience_epochs < 1:
            raise InvalidInput("patience_epochs must be >= 1")
        if self.max_epochs < 1:
            raise InvalidInput("max_epochs must be >= 1")


@dataclass(frozen=True)
class TableRow:
    utterance_id: str
    dataset_id: str
    emotion: str
    split: str
    mel: np.ndarray  # normalized (T, C)
    target: float
    emotion_index: int


def make_training_table(manifest, labels, mels, stats=None, emotions=TRAINED_EMOTIONS) -> list[TableRow]:
    """Join manifest rows with strength labels and (normalized) mel features.

    ``labels`` maps utterance_id -> StrengthLabel (or float); ``mels`` maps
    utterance_id -> raw log-mel array, or is a callable doing the lookup.
    Neutral utterances are not part of the network's training data.
    """
    from .features import apply_normalization

    lookup = mels if callable(mels) else mels.__getitem__
    table = []
    for r in manifest:
        if r.emotion not in emotions:
            continue
        if r.utterance_id not in labels:
            raise MissingLabel(r.utterance_id)
        lab = labels[r.utterance_id]
        target = float(getattr(lab, "normalized", lab))
        mel = np.asarray(lookup(r.utterance_id), dtype=np.float32)
        if stats is not None:
            mel = apply_normalization(mel, stats).astype(np.float32)
        table.append(TableRow(r.utterance_id, r.dataset_id, r.emotion, r.split, mel, target,
                              emotions.index(r.emotion)))
    return table


def select(table, split=None, corpora=()) -> list[TableRow]:
    splits = {split} if isinstance(split, str) else (set(split) if split else None)
    return [r for r in table
            if (splits is None or r.split in splits) and (not corpora or r.dataset_id in corpora)]


class EarlyStopping:
    """Track the best validation MAE; ``step`` returns True when training should stop."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = float("inf")
        self.best_epoch = 0
        self.wait = 0

    def step(self, epoch: int, value: float) -> bool:
        if value < self.best:
            self.best = value
            self.best_epoch = epoch
            self.wait = 0
            return False
        self.wait += 1
        return self.wait >= self.patience


def make_batches(rows, batch_size: int, rng: np.random.Generator, bucket_factor: int = 8) -> list[list[int]]:
    """Shuffle, sort by length within buckets of ``bucket_factor`` batches, shuffle batch order."""
    order = rng.permutation(len(rows))
    bucket = batch_size * max(1, bucket_factor)
    batches = []
    for start in range(0, len(order), bucket):
        chunk = sorted(order[start : start + bucket].tolist(), key=lambda i: (len(rows[i].mel), i))
        batches.extend(chunk[k : k + batch_size] for k in range(0, len(chunk), batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


@dataclass
class EvalReport:
    utterance_mae: float
    ser_accuracy: float | None
    n: int
    per_corpus: dict = field(default_factory=dict)
    per_emotion: dict = field(default_factory=dict)
    predictions: list = field(default_factory=list, repr=False)

    def to_dict(self, with_predictions=False) -> dict:
        d = {"utterance_mae": self.utterance_mae, "n": self.n,
             "per_corpus": self.per_corpus, "per_emotion": self.per_emotion}
        if self.ser_accuracy is not None:
            d["ser_accuracy"] = self.ser_accuracy
        if with_predictions:
            d["predictions"] = self.predictions
        return d


def evaluate_predictions(records, with_accuracy: bool = True) -> EvalReport:
    """records: dicts with utterance_id, dataset_id, emotion, label, strength, predicted_emotion."""
    records = list(records)
    if not records:
        raise InvalidInput("cannot evaluate an empty subset")

    def summarize(rs):
        mae = float(np.mean([abs(r["strength"] - r["label"]) for r in rs]))
        acc = float(np.mean([r["predicted_emotion"] == r["emotion"] for r in rs])) if with_accuracy else None
        out = {"utterance_mae": mae, "n": len(rs)}
        if acc is not None:
            out["ser_accuracy"] = acc
        return out

    overall = summarize(records)
    per_corpus = {ds: summarize([r for r in records if r["dataset_id"] == ds])
                  for ds in sorted({r["dataset_id"] for r in records})}
    per_emotion = {e: summarize([r for r in records if r["emotion"] == e])
                   for e in sorted({r["emotion"] for r in records})}
    return EvalReport(overall["utterance_mae"], overall.get("ser_accuracy"), len(records),
                      per_corpus, per_emotion, records)


def evaluate(model: StrengthNet, rows, with_accuracy: bool = True, batch_size: int = 64,
             emotions=TRAINED_EMOTIONS) -> EvalReport:
    rows = list(rows)
    if not rows:
        raise InvalidInput("cannot evaluate an empty subset")
    preds = predict(model, [r.mel for r in rows], batch_size=batch_size)
    records = [{
        "utterance_id": r.utterance_id, "dataset_id": r.dataset_id, "emotion": r.emotion,
        "label": r.target, "strength": p["strength"],
        "predicted_emotion": emotions[int(np.argmax(p["probs"]))],
    } for r, p in zip(rows, preds)]
    return evaluate_predictions(records, with_accuracy)


@dataclass
class TrainResult:
    model: StrengthNet
    best_epoch: int
    best_val_mae: float
    log: list
    stopped_early: bool


def train(model: StrengthNet, table, config: TrainConfig, *, log_path=None, checkpoint_path=None,
          checkpoint_metadata: dict | None = None, eval_batch_size: int = 64) -> TrainResult:
    """Adam training with early stopping on validation utterance MAE.

    The returned model holds the parameters of the best epoch; with
    ``checkpoint_path`` every improvement is written there immediately.
    """
    from .model import save_checkpoint

    train_rows = select(table, "train", config.corpora)
    val_rows = select(table, "val", config.corpora)
    if not train_rows or not val_rows:
        raise InvalidInput("training needs non-empty train and val subsets")
    torch.manual_seed(config.rng_seed)
    rng = np.random.default_rng(config.rng_seed)
    for module in model.modules():
        if isinstance(module, torch.nn.Dropout):
            module.p = config.dropout
    dtype = next(model.parameters()).dtype
    params = [p for p in model.parameters()]
    if config.disable_L_cat:
        emotion_ids = {id(p) for p in model.emotion_parameters()}
        params = [p for p in params if id(p) not in emotion_ids]
    optimizer = torch.optim.Adam(params, lr=config.learning_rate, betas=(config.beta1, config.beta2))
    stopper = EarlyStopping(config.patience_epochs)
    best_state = copy.deepcopy(model.state_dict())
    records = []
    log_fh = open(log_path, "w") if log_path else None
    stopped = False
    try:
        for epoch in range(1, config.max_epochs + 1):
            model.train()
            sums = {"frame_mae": 0.0, "utterance_mae": 0.0, "category_ce": 0.0, "total": 0.0}
            for b, idx in enumerate(make_batches(train_rows, config.batch_size, rng, config.bucket_factor)):
                batch = [train_rows[i] for i in idx]
                x, lengths = collate([r.mel for r in batch], dtype)
                y = torch.tensor([r.target for r in batch], dtype=dtype)
                onehot = torch.nn.functional.one_hot(
                    torch.tensor([r.emotion_index for r in batch]), model.config.num_emotions).to(dtype)
                pred = model(x, lengths)
                losses = compute_loss(pred, y, onehot, use_frame=not config.disable_L_f_str,
                                      use_cat=not config.disable_L_cat)
                if not torch.isfinite(losses.total):
                    raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}")
                optimizer.zero_grad()
                losses.total.backward()
                optimizer.step()
                for k, v in losses.as_floats().items():
                    sums[k] += v * len(batch)
            report = evaluate(model, val_rows, with_accuracy=not config.disable_L_cat,
                              batch_size=eval_batch_size)
            record = {"epoch": epoch,
                      "train_loss": {k: v / len(train_rows) for k, v in sums.items()},
                      "val_mae": report.utterance_mae}
            if report.ser_accuracy is not None:
                record["val_acc"] = report.ser_accuracy
            record["lr"] = config.learning_rate
            records.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            log.debug("epoch %d val_mae %.4f", epoch, report.utterance_mae)
            improved = report.utterance_mae < stopper.best
            stop = stopper.step(epoch, report.utterance_mae)
            if improved:
                best_state = copy.deepcopy(model.state_dict())
                if checkpoint_path:
                    meta = dict(checkpoint_metadata or {}, epoch=epoch, val_mae=report.utterance_mae)
                    save_checkpoint(checkpoint_path, model, meta)
            if stop:
                stopped = True
                break
    finally:
        if log_fh:
            log_fh.close()
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, stopper.best_epoch, stopper.best, records, stopped)


def train_new(table, config: TrainConfig, model_config: ModelConfig, **kwargs) -> TrainResult:
    model = init_params(replace(model_config, dropout_rate=config.dropout), config.rng_seed)
    return train(model, table, config, **kwargs)


# ---------------------------------------------------------------------------
# harnesses

ABLATIONS = {
    "StrengthNet": {},
    "StrengthNet w/o L_cat": {"disable_L_cat": True},
    "StrengthNet w/o L_f_str": {"disable_L_f_str": True},
}


def run_ablation(table, config: TrainConfig, model_config: ModelConfig, seeds=(0,),
                 test_split="test") -> dict[str, list[EvalReport]]:
    """Train the full model and both ablations with identical data and seeds."""
    test_rows = select(table, test_split, config.corpora)
    out = {}
    for name, flags in ABLATIONS.items():
        reports = []
        for seed in seeds:
            cfg = replace(config, rng_seed=seed, **flags)
            result = train_new(table, cfg, model_config)
            reports.append(evaluate(result.model, test_rows, with_accuracy=not cfg.disable_L_cat))
        out[name] = reports
    return out


def summarize_runs(reports) -> dict:
    maes = np.array([r.utterance_mae for r in reports])
    out = {"mae_mean": float(maes.mean()), "mae_std": float(maes.std()), "n_runs": len(reports)}
    accs = [r.ser_accuracy for r in reports if r.ser_accuracy is not None]
    if accs:
        out["acc_mean"] = float(np.mean(accs))
        out["acc_std"] = float(np.std(accs))
    return out


def ranker_transfer_mae(source_models, target_features, target_labels, eval_ids) -> float:
    """MAE of a source corpus's rankers on a target corpus, min-max normalized over the target.

    source_models: emotion -> RankingModel; target_features: uid -> vector;
    target_labels: uid -> StrengthLabel for every emotional target utterance.
    """
    records = []
    for uid, lab in target_labels.items():
        raw = score(source_models[lab.emotion], target_features[uid])
        records.append((uid, lab.dataset_id, lab.emotion, raw))
    transferred = {lab.utterance_id: lab.normalized for lab in normalize_scores(records)}
    return float(np.mean([abs(transferred[u] - target_labels[u].normalized) for u in eval_ids]))


@dataclass
class ComparisonCell:
    mae_mean: float
    mae_std: float
    n_runs: int
    seen: bool  # the test corpus was part of this method's training data

    def to_dict(self):
        return asdict(self)


@dataclass
class Comparison:
    methods: list[str]
    corpora: list[str]
    cells: dict  # (method, corpus) -> ComparisonCell

    def value(self, method, corpus) -> float:
        return self.cells[(method, corpus)].mae_mean

    def to_csv(self, path, mask_seen: bool = True, with_std: bool = False) -> None:
        """Methods x test corpora; NA where the test corpus overlaps the training data."""
        header = ["method"]
        for c in self.corpora:
            header += [c, f"{c}_std"] if with_std else [c]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for m in self.methods:
                row = [m]
                for c in self.corpora:
                    cell = self.cells.get((m, c))
                    if cell is None or (mask_seen and cell.seen):
                        row += ["NA", "NA"] if with_std else ["NA"]
                    else:
                        row += [f"{cell.mae_mean:.4f}", f"{cell.mae_std:.4f}"] if with_std else [f"{cell.mae_mean:.4f}"]
                writer.writerow(row)

    def to_dict(self) -> dict:
        return {"methods": self.methods, "corpora": self.corpora,
                "cells": [{"method": m, "corpus": c, **cell.to_dict()} for (m, c), cell in self.cells.items()]}


def cross_corpus_eval(table, pools, rankers, features, labels, config: TrainConfig,
                      model_config: ModelConfig, seeds=(0,), test_split="test") -> Comparison:
    """Ranker-transfer baselines and StrengthNet trained on each pool, scored per test corpus.

    pools: list of corpus tuples, e.g. [("A",), ("A", "B")];
    rankers: (dataset, emotion) -> RankingModel; features: uid -> functional vector;
    labels: uid -> StrengthLabel (ground truth for every corpus).
    """
    corpora = sorted({r.dataset_id for r in table})
    if len(corpora) < 2:
        raise InvalidInput("cross-corpus evaluation needs at least two corpora")
    cells = {}
    methods = []
    for source in corpora:
        name = f"R_{source}"
        methods.append(name)
        models = {emo: m for (ds, emo), m in rankers.items() if ds == source}
        for target in corpora:
            eval_ids = [r.utterance_id for r in select(table, test_split, (target,))]
            if target == source:
                # labels are this ranker's own output
                cells[(name, target)] = ComparisonCell(0.0, 0.0, 1, True)
                continue
            target_labels = {u: lab for u, lab in labels.items() if lab.dataset_id == target}
            mae = ranker_transfer_mae(models, features, target_labels, eval_ids)
            cells[(name, target)] = ComparisonCell(mae, 0.0, 1, False)
    for pool in pools:
        pool = tuple(pool)
        name = "StrengthNet_" + "+".join(pool)
        methods.append(name)
        per_target = {t: [] for t in corpora}
        for seed in seeds:
            result = train_new(table, replace(config, rng_seed=seed, corpora=pool), model_config)
            for target in corpora:
                rows = select(table, test_split, (target,))
                per_target[target].append(evaluate(result.model, rows, with_accuracy=False))
        for target, reports in per_target.items():
            s = summarize_runs(reports)
            cells[(name, target)] = ComparisonCell(s["mae_mean"], s["mae_std"], len(reports), target in pool)
    return Comparison(methods, corpora, cells)
