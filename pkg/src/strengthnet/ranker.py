"""Relative-attribute ranking of emotion strength.

A linear function R(x) = w.x is learned per (dataset, emotion) from ordered
pairs (emotional > neutral) and similar pairs (same domain), then used to score
every emotional utterance.  Scores are min-max normalized per group to give the
strength labels that supervise the network.
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConvergenceWarning, DegenerateGroupWarning, InsufficientData, InvalidInput, ParseError

LABEL_HEADER = ["utterance_id", "dataset_id", "emotion", "raw_score", "normalized"]


@dataclass(frozen=True)
class PairSets:
    ordered: np.ndarray  # (n, 2) int: strength(i) > strength(j)
    similar: np.ndarray  # (m, 2) int: strength(i) ~ strength(j)
    emotion: str
    dataset_id: str

    def __post_init__(self):
        for name in ("ordered", "similar"):
            arr = np.asarray(getattr(self, name), dtype=np.int64).reshape(-1, 2)
            if np.any(arr[:, 0] == arr[:, 1]):
                raise InvalidInput(f"{name} pairs must join two distinct utterances")
            object.__setattr__(self, name, arr)

    def check_indices(self, n_rows: int) -> None:
        for arr in (self.ordered, self.similar):
            if arr.size and (arr.min() < 0 or arr.max() >= n_rows):
                raise InvalidInput(f"pair index out of range for a table of {n_rows} rows")


def _unrank_combinations(k: np.ndarray, n: int) -> np.ndarray:
    """Map ranks 0..C(n,2)-1 to pairs (i, j), i < j, in lexicographic order."""
    k = np.asarray(k, dtype=np.int64)
    # number of pairs starting before row i: i*n - i*(i+1)/2
    i = (n - 2 - np.floor(np.sqrt(-8.0 * k + 4.0 * n * (n - 1) - 7) / 2.0 - 0.5)).astype(np.int64)
    start = i * n - i * (i + 1) // 2
    # float rounding guard
    i = np.where(start > k, i - 1, i)
    start = i * n - i * (i + 1) // 2
    nxt = (i + 1) * n - (i + 1) * (i + 2) // 2
    i = np.where(nxt <= k, i + 1, i)
    start = i * n - i * (i + 1) // 2
    j = k - start + i + 1
    return np.stack([i, j], axis=1)


def _sample(total: int, cap: int, rng) -> np.ndarray:
    if total <= cap:
        return np.arange(total, dtype=np.int64)
    return np.sort(rng.choice(total, size=cap, replace=False)).astype(np.int64)


def build_pair_sets(manifest, emotion: str, max_pairs_per_set: int = 2000, rng_seed: int = 0,
                    dataset_id: str | None = None) -> PairSets:
    """Ordered pairs from (emotional x neutral), similar pairs from within each domain.

    Indices point into ``manifest.rows``.
    """
    rows = list(manifest)
    if dataset_id is None:
        datasets = {r.dataset_id for r in rows}
        if len(datasets) > 1:
            raise InvalidInput(f"manifest spans datasets {sorted(datasets)}; pass dataset_id")
        dataset_id = datasets.pop() if datasets else ""
    neutral = np.array([i for i, r in enumerate(rows) if r.dataset_id == dataset_id and r.emotion == "neutral"], dtype=np.int64)
    emotional = np.array([i for i, r in enumerate(rows) if r.dataset_id == dataset_id and r.emotion == emotion], dtype=np.int64)
    if len(neutral) == 0 or len(emotional) == 0:
        raise InsufficientData(
            f"dataset {dataset_id!r} emotion {emotion!r}: {len(emotional)} emotional and "
            f"{len(neutral)} neutral utterances; need at least one of each")
    rng = np.random.default_rng(rng_seed)

    picks = _sample(len(emotional) * len(neutral), max_pairs_per_set, rng)
    ordered = np.stack([emotional[picks // len(neutral)], neutral[picks % len(neutral)]], axis=1)

    n_nn = len(neutral) * (len(neutral) - 1) // 2
    n_ee = len(emotional) * (len(emotional) - 1) // 2
    picks = _sample(n_nn + n_ee, max_pairs_per_set, rng)
    from_neutral, from_emotional = picks[picks < n_nn], picks[picks >= n_nn] - n_nn
    similar = np.concatenate([
        neutral[_unrank_combinations(from_neutral, len(neutral))] if from_neutral.size else np.empty((0, 2), np.int64),
        emotional[_unrank_combinations(from_emotional, len(emotional))] if from_emotional.size else np.empty((0, 2), np.int64),
    ])
    return PairSets(ordered, similar, emotion, dataset_id)


# ---------------------------------------------------------------------------
# solver


def rank_objective(w, d_ordered, d_similar, c_ordered=1.0, c_similar=1.0):
    """1/2 |w|^2 + c_o sum max(0, 1 - w.d)^2 + c_s sum (w.d)^2 over pair differences d."""
    w = np.asarray(w, dtype=np.float64)
    hinge = np.maximum(0.0, 1.0 - d_ordered @ w)
    sim = d_similar @ w
    return 0.5 * w @ w + c_ordered * hinge @ hinge + c_similar * sim @ sim


def _grad(w, d_ordered, d_similar, c_ordered, c_similar):
    hinge = np.maximum(0.0, 1.0 - d_ordered @ w)
    return w - 2.0 * c_ordered * (d_ordered.T @ hinge) + 2.0 * c_similar * (d_similar.T @ (d_similar @ w))


@dataclass
class SolverResult:
    w: np.ndarray
    objective: float
    converged: bool
    n_iter: int
    history: list[float] = field(default_factory=list)


def fit_rank_svm(d_ordered, d_similar, c_ordered=1.0, c_similar=1.0, max_iter=5000,
                 tol=1e-8, window=10) -> SolverResult:
    """Minimize the squared-slack primal by full-batch gradient descent.

    Steps use momentum extrapolation with a backtracking (Armijo) line search;
    a step that would raise the objective falls back to a plain gradient step
    from the current point, so the recorded objective never increases.
    Stops when the objective drops by less than ``tol`` over ``window`` iterations.
    """
    d_ordered = np.asarray(d_ordered, dtype=np.float64)
    d_similar = np.asarray(d_similar, dtype=np.float64)
    dim = d_ordered.shape[1] if d_ordered.size else d_similar.shape[1]
    d_ordered = d_ordered.reshape(-1, dim)
    d_similar = d_similar.reshape(-1, dim)
    f = lambda v: rank_objective(v, d_ordered, d_similar, c_ordered, c_similar)  # noqa: E731
    g = lambda v: _grad(v, d_ordered, d_similar, c_ordered, c_similar)  # noqa: E731

    w = np.zeros(dim)
    fw = f(w)
    history = [fw]
    # Lipschitz bound on the gradient gives the first trial step
    lip = 1.0
    if d_ordered.size:
        lip += 2.0 * c_ordered * np.linalg.norm(d_ordered, 2) ** 2
    if d_similar.size:
        lip += 2.0 * c_similar * np.linalg.norm(d_similar, 2) ** 2
    step = 1.0 / lip
    w_prev = w.copy()
    momentum_k = 1.0
    converged = False
    n_iter = 0

    def line_search(x, fx, gx, t):
        gg = gx @ gx
        while True:
            cand = x - t * gx
            fc = f(cand)
            if fc <= fx - 0.5 * t * gg or t < 1e-20:
                return cand, fc, t
            t *= 0.5

    for n_iter in range(1, max_iter + 1):
        k_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * momentum_k**2))
        y = w + ((momentum_k - 1.0) / k_next) * (w - w_prev)
        fy = f(y)
        gy = g(y)
        cand, fc, step = line_search(y, fy, gy, min(step * 2.0, 1e6))
        if fc > fw:
            # restart momentum from the current iterate
            k_next = 1.0
            cand, fc, step = line_search(w, fw, g(w), min(step * 2.0, 1e6))
        if fc <= fw:
            w_prev, w, fw = w, cand, fc
        history.append(fw)
        momentum_k = k_next
        if n_iter >= window and history[-1 - window] - history[-1] < tol:
            converged = True
            break
    return SolverResult(w, float(fw), converged, n_iter, history)


@dataclass(frozen=True)
class RankingModel:
    emotion: str
    w: np.ndarray  # weights in standardized feature space
    feature_mean: np.ndarray
    feature_std: np.ndarray
    c_ordered: float = 1.0
    c_similar: float = 1.0
    objective: float = float("nan")
    converged: bool = True
    n_iter: int = 0
    dataset_id: str = ""

    def __post_init__(self):
        for name in ("w", "feature_mean", "feature_std"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if not (self.w.shape == self.feature_mean.shape == self.feature_std.shape):
            raise InvalidInput("w, feature_mean and feature_std must have equal length")
        if not np.all(np.isfinite(self.w)):
            raise InvalidInput("ranking weights are not finite")

    @property
    def effective_weights(self) -> np.ndarray:
        """Weights acting on raw features: w / std."""
        return self.w / self.feature_std

    def to_dict(self) -> dict:
        return {
            "emotion": self.emotion,
            "dataset_id": self.dataset_id,
            "w": self.w.tolist(),
            "feature_mean": self.feature_mean.tolist(),
            "feature_std": self.feature_std.tolist(),
            "c_ordered": self.c_ordered,
            "c_similar": self.c_similar,
            "objective": self.objective,
            "converged": self.converged,
            "n_iter": self.n_iter,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RankingModel":
        return cls(d["emotion"], np.array(d["w"]), np.array(d["feature_mean"]), np.array(d["feature_std"]),
                   d.get("c_ordered", 1.0), d.get("c_similar", 1.0), d.get("objective", float("nan")),
                   d.get("converged", True), d.get("n_iter", 0), d.get("dataset_id", ""))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "RankingModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def train_ranker(features, pairs: PairSets, c_ordered: float = 1.0, c_similar: float = 1.0,
                 standardize: bool = True, max_iter: int = 5000, tol: float = 1e-8) -> RankingModel:
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise InvalidInput("features must be a 2-D table (utterances x dims)")
    if c_ordered <= 0 or c_similar <= 0:
        raise InvalidInput("c_ordered and c_similar must be positive")
    pairs.check_indices(len(X))
    used = np.unique(np.concatenate([pairs.ordered.ravel(), pairs.similar.ravel()]))
    if not np.all(np.isfinite(X[used])):
        raise InvalidInput("features contain non-finite values")
    if standardize:
        mean = X[used].mean(axis=0)
        std = X[used].std(axis=0)
        std = np.where(std > 1e-12, std, 1.0)
    else:
        mean = np.zeros(X.shape[1])
        std = np.ones(X.shape[1])
    Z = (X - mean) / std
    d_o = Z[pairs.ordered[:, 0]] - Z[pairs.ordered[:, 1]]
    d_s = Z[pairs.similar[:, 0]] - Z[pairs.similar[:, 1]]
    result = fit_rank_svm(d_o, d_s, c_ordered, c_similar, max_iter=max_iter, tol=tol)
    if not result.converged:
        warnings.warn(f"ranker {pairs.dataset_id}/{pairs.emotion} stopped after {result.n_iter} "
                      "iterations without converging", ConvergenceWarning, stacklevel=2)
    return RankingModel(pairs.emotion, result.w, mean, std, c_ordered, c_similar,
                        result.objective, result.converged, result.n_iter, pairs.dataset_id)


def score(m: RankingModel, x) -> np.ndarray | float:
    """Raw strength score (w / std) . x for one vector or each row of a table.

    The centering term is constant per model and cancels under per-group
    normalization, so it is left out and the score stays linear in x.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != m.w.shape[0]:
        raise InvalidInput(f"feature dimension {x.shape[-1]} does not match model dimension {m.w.shape[0]}")
    out = x @ m.effective_weights
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class StrengthLabel:
    utterance_id: str
    dataset_id: str
    emotion: str
    raw_score: float
    normalized: float


def normalize_scores(records) -> list[StrengthLabel]:
    """Min-max normalize raw scores within each (dataset_id, emotion) group.

    ``records`` are (utterance_id, dataset_id, emotion, raw_score) tuples; output
    keeps their order.  A group whose scores are all equal gets 0.5 everywhere
    and a DegenerateGroupWarning.
    """
    records = list(records)
    if not records:
        raise InvalidInput("no scores to normalize")
    groups: dict[tuple[str, str], list[int]] = {}
    for k, (_, ds, emo, _) in enumerate(records):
        groups.setdefault((ds, emo), []).append(k)
    normalized = [0.0] * len(records)
    for (ds, emo), idx in groups.items():
        raw = np.array([records[k][3] for k in idx], dtype=np.float64)
        lo, hi = raw.min(), raw.max()
        if hi - lo <= 1e-12 * max(1.0, abs(hi), abs(lo)):
            warnings.warn(f"all raw scores equal in group dataset={ds!r} emotion={emo!r}; labels set to 0.5",
                          DegenerateGroupWarning, stacklevel=2)
            vals = np.full(len(idx), 0.5)
        else:
            vals = np.clip((raw - lo) / (hi - lo), 0.0, 1.0)
        for k, v in zip(idx, vals):
            normalized[k] = float(v)
    return [StrengthLabel(uid, ds, emo, float(raw), normalized[k])
            for k, (uid, ds, emo, raw) in enumerate(records)]


def save_labels(labels, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LABEL_HEADER)
        for lab in labels:
            writer.writerow([lab.utterance_id, lab.dataset_id, lab.emotion, repr(lab.raw_score), repr(lab.normalized)])


def load_labels(path) -> dict[str, StrengthLabel]:
    out = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != LABEL_HEADER:
            raise ParseError(f"expected header {','.join(LABEL_HEADER)}", line=1)
        for lineno, r in enumerate(reader, start=2):
            try:
                out[r["utterance_id"]] = StrengthLabel(r["utterance_id"], r["dataset_id"], r["emotion"],
                                                       float(r["raw_score"]), float(r["normalized"]))
            except (TypeError, ValueError) as exc:
                raise ParseError(str(exc), line=lineno) from exc
    return out


def rank_corpus(manifest, features: dict[str, np.ndarray], emotions, *, c_ordered=1.0, c_similar=1.0,
                max_pairs_per_set=2000, rng_seed=0, pair_split="train"):
    """Train one ranker per (dataset, emotion) and label every emotional utterance.

    Pairs come from ``pair_split`` rows only (all rows when None); scoring and
    normalization cover the whole group.  Returns (models, labels).
    """
    models: dict[tuple[str, str], RankingModel] = {}
    records = []
    for ds in manifest.dataset_ids:
        corpus = manifest.filter(dataset_id=ds)
        pool = corpus.filter(split=pair_split) if pair_split else corpus
        for emo in emotions:
            sub = pool.filter(emotion=("neutral", emo))
            pairs = build_pair_sets(sub, emo, max_pairs_per_set, rng_seed, dataset_id=ds)
            X = np.stack([features[r.utterance_id] for r in sub])
            model = train_ranker(X, pairs, c_ordered, c_similar)
            models[(ds, emo)] = model
            targets = corpus.filter(emotion=emo)
            raw = score(model, np.stack([features[r.utterance_id] for r in targets]))
            records.extend((r.utterance_id, ds, emo, float(s)) for r, s in zip(targets, raw))
    return models, normalize_scores(records)
