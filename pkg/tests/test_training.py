import copy
import json
from dataclasses import replace

import numpy as np
import pytest
import torch

from strengthnet import training
from strengthnet.datasets import CorpusManifest, ManifestRow
from strengthnet.errors import InvalidInput, MissingLabel, NumericalError
from strengthnet.features import fit_normalization, load_audio, mel_spectrogram
from strengthnet.model import ModelConfig, init_params, load_checkpoint
from strengthnet.ranker import RankingModel, StrengthLabel
from strengthnet.training import (Comparison, ComparisonCell, EarlyStopping, EvalReport, TableRow, TrainConfig,
                                  evaluate, evaluate_predictions, make_batches, make_training_table,
                                  ranker_transfer_mae, run_ablation, select, summarize_runs, train, train_new)

TINY = ModelConfig(block_filters=(2, 4, 4, 8), bilstm_cells_per_direction=4, fc_hidden=4)
FAST = TrainConfig(learning_rate=3e-3, batch_size=4, max_epochs=3, patience_epochs=30)


@pytest.fixture(scope="module")
def table(small_corpus):
    manifest, truth, _ = small_corpus
    mels = {r.utterance_id: mel_spectrogram(load_audio(r.audio_path)) for r in manifest}
    stats = fit_normalization(mels[r.utterance_id] for r in manifest.filter(split="train"))
    return make_training_table(manifest, truth, mels, stats)


def fake_rows(n, split="test", seed=0):
    rng = np.random.default_rng(seed)
    return [TableRow(f"u{i}", "D", "happy", split, rng.normal(size=(5, 80)).astype(np.float32),
                     float(rng.uniform()), 0) for i in range(n)]


class TestTable:
    def manifest(self):
        rows = [ManifestRow(f"{e}{i}", "", "D", e, "s", "train")
                for e in ("neutral", "happy", "sad", "angry", "surprise") for i in range(2)]
        return CorpusManifest(tuple(rows))

    def test_counts_and_targets(self):
        m = self.manifest()
        labels = {u: StrengthLabel(u, "D", "x", 0.0, 0.25) for u in m.ids if not u.startswith("neutral")}
        table = make_training_table(m, labels, lambda u: np.zeros((3, 80)))
        assert len(table) == 8
        assert {r.emotion for r in table} == {"happy", "sad", "angry", "surprise"}
        assert all(r.target == 0.25 and r.mel.dtype == np.float32 for r in table)
        assert [r.emotion_index for r in table[::2]] == [0, 1, 2, 3]

    def test_missing_label(self):
        m = self.manifest()
        labels = {u: 0.5 for u in m.ids if u != "sad1"}
        with pytest.raises(MissingLabel, match="sad1"):
            make_training_table(m, labels, lambda u: np.zeros((3, 80)))

    def test_select(self, table):
        assert len(select(table)) == 20
        assert len(select(table, "train")) == 12 and len(select(table, ("val", "test"))) == 8
        assert select(table, corpora=("nope",)) == []


class TestEarlyStopping:
    def test_patience_one(self):
        stopper = EarlyStopping(1)
        assert [stopper.step(e, v) for e, v in enumerate([0.5, 0.3, 0.4], start=1)] == [False, False, True]
        assert stopper.best_epoch == 2 and stopper.best == 0.3

    def test_train_returns_best_epoch(self, table, monkeypatch):
        scripted = iter([0.5, 0.3, 0.4, 0.1])
        states = []
        real = training.evaluate

        def fake_evaluate(model, rows, with_accuracy=True, batch_size=64):
            states.append(copy.deepcopy(model.state_dict()))
            report = real(model, rows, with_accuracy, batch_size)
            return replace(report, utterance_mae=next(scripted))

        monkeypatch.setattr(training, "evaluate", fake_evaluate)
        result = train_new(table, replace(FAST, patience_epochs=1, max_epochs=10), TINY)
        assert result.best_epoch == 2 and result.stopped_early and len(result.log) == 3
        assert result.best_val_mae == min(r["val_mae"] for r in result.log)
        for k, v in result.model.state_dict().items():
            assert torch.equal(v, states[1][k]), k


class TestBatches:
    def test_partition_and_determinism(self):
        rows = [TableRow(str(i), "D", "happy", "train", np.zeros((1 + i % 7, 80)), 0.0, 0) for i in range(50)]
        a = make_batches(rows, 8, np.random.default_rng(1))
        b = make_batches(rows, 8, np.random.default_rng(1))
        assert a == b
        flat = sorted(i for batch in a for i in batch)
        assert flat == list(range(50)) and all(len(batch) <= 8 for batch in a)

    def test_buckets_group_lengths(self):
        rows = [TableRow(str(i), "D", "happy", "train", np.zeros((1 + i, 80)), 0.0, 0) for i in range(64)]
        batches = make_batches(rows, 8, np.random.default_rng(0), bucket_factor=8)
        for batch in batches:
            lengths = [len(rows[i].mel) for i in batch]
            assert max(lengths) - min(lengths) == 7

    def test_config_validation(self):
        for bad in ({"batch_size": 0}, {"patience_epochs": 0}, {"max_epochs": 0}):
            with pytest.raises(InvalidInput):
                TrainConfig(**bad)


class TestTrain:
    def test_zero_learning_rate(self, table):
        model = init_params(TINY, 0)
        before = copy.deepcopy(model.state_dict())
        train(model, table, replace(FAST, learning_rate=0.0, max_epochs=2))
        assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())

    def test_loss_decreases_over_30_epochs(self, table):
        result = train_new(table, replace(FAST, max_epochs=30), TINY)
        assert len(result.log) == 30
        assert result.log[-1]["train_loss"]["total"] < result.log[0]["train_loss"]["total"]

    def test_no_cat_leaves_emotion_branch(self, table):
        model = init_params(TINY, 0)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        result = train(model, table, replace(FAST, disable_L_cat=True))
        after = result.model.state_dict()
        for k in before:
            if k.startswith("emotion_"):
                assert torch.equal(before[k], after[k]), k
        assert not torch.equal(before["strength_fc1.weight"], after["strength_fc1.weight"])
        assert all("val_acc" not in r and r["train_loss"]["category_ce"] == 0 for r in result.log)

    def test_no_frame_reports_zero(self, table):
        result = train_new(table, replace(FAST, disable_L_f_str=True, max_epochs=1), TINY)
        assert result.log[0]["train_loss"]["frame_mae"] == 0 and "val_acc" in result.log[0]

    def test_log_and_checkpoint_determinism(self, table, tmp_path):
        for run in ("a", "b"):
            train_new(table, FAST, TINY, log_path=tmp_path / f"{run}.jsonl", checkpoint_path=tmp_path / f"{run}.ckpt",
                      checkpoint_metadata={"tag": 1})
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        records = [json.loads(line) for line in (tmp_path / "a.jsonl").read_text().splitlines()]
        assert [r["epoch"] for r in records] == [1, 2, 3]
        assert set(records[0]) == {"epoch", "train_loss", "val_mae", "val_acc", "lr"}
        _, meta = load_checkpoint(tmp_path / "a.ckpt")
        assert meta["tag"] == 1 and meta["val_mae"] == min(r["val_mae"] for r in records)

    def test_divergence(self, table):
        bad = [replace(r, mel=np.full_like(r.mel, np.nan)) if r.split == "train" else r for r in table]
        with pytest.raises(NumericalError, match="epoch 1"):
            train_new(bad, FAST, TINY)

    def test_needs_train_and_val(self, table):
        with pytest.raises(InvalidInput):
            train_new(select(table, "train"), FAST, TINY)


def record(strength, label, emotion="happy", predicted="happy", ds="D"):
    return {"utterance_id": "u", "dataset_id": ds, "emotion": emotion, "label": label,
            "strength": strength, "predicted_emotion": predicted}


class TestEvaluate:
    def test_perfect(self):
        rep = evaluate_predictions([record(0.2, 0.2), record(0.9, 0.9, "sad", "sad")])
        assert rep.utterance_mae == 0.0 and rep.ser_accuracy == 1.0 and rep.n == 2

    def test_single_wrong(self):
        rep = evaluate_predictions([record(0.4, 0.7, "happy", "angry")])
        assert abs(rep.utterance_mae - 0.3) < 1e-12 and rep.ser_accuracy == 0.0

    def test_breakdowns(self):
        rep = evaluate_predictions([record(0.0, 0.5, ds="A"), record(0.0, 0.1, "sad", "sad", ds="B")])
        assert rep.per_corpus["A"]["utterance_mae"] == 0.5 and rep.per_emotion["sad"]["n"] == 1
        assert "ser_accuracy" not in evaluate_predictions([record(0, 0)], with_accuracy=False).to_dict()

    def test_empty(self):
        with pytest.raises(InvalidInput):
            evaluate_predictions([])
        with pytest.raises(InvalidInput):
            evaluate(init_params(TINY, 0), [])

    def test_half_predictor_anchor(self):
        labels = np.random.default_rng(0).uniform(size=400)
        rep = evaluate_predictions([record(0.5, float(v)) for v in labels], with_accuracy=False)
        assert abs(rep.utterance_mae - 0.25) < 0.05 and rep.ser_accuracy is None

    def test_evaluate_model_is_deterministic(self):
        model = init_params(TINY, 0)
        rows = fake_rows(6)
        a, b = evaluate(model, rows), evaluate(model, rows)
        assert a.utterance_mae == b.utterance_mae and 0 <= a.ser_accuracy <= 1


class TestHarness:
    def test_ablation_reports(self, table):
        out = run_ablation(table, replace(FAST, max_epochs=2), TINY, seeds=(0,))
        assert list(out) == ["StrengthNet", "StrengthNet w/o L_cat", "StrengthNet w/o L_f_str"]
        assert out["StrengthNet w/o L_cat"][0].ser_accuracy is None
        assert out["StrengthNet"][0].ser_accuracy is not None
        s = summarize_runs(out["StrengthNet"] * 2)
        assert s["n_runs"] == 2 and s["mae_std"] == 0.0

    def test_ranker_transfer_self_is_zero(self):
        rng = np.random.default_rng(0)
        feats = {f"u{i}": rng.normal(size=3) for i in range(6)}
        model = RankingModel("happy", np.array([1.0, 0.5, -1.0]), np.zeros(3), np.ones(3))
        raw = {u: float(x @ model.w) for u, x in feats.items()}
        lo, hi = min(raw.values()), max(raw.values())
        labels = {u: StrengthLabel(u, "T", "happy", r, (r - lo) / (hi - lo)) for u, r in raw.items()}
        assert ranker_transfer_mae({"happy": model}, feats, labels, list(feats)) < 1e-12

    def test_comparison_csv(self, tmp_path):
        cells = {("R_A", "A"): ComparisonCell(0.0, 0.0, 1, True), ("R_A", "B"): ComparisonCell(0.2, 0.0, 1, False),
                 ("S_A", "A"): ComparisonCell(0.05, 0.01, 3, True), ("S_A", "B"): ComparisonCell(0.15, 0.02, 3, False)}
        comp = Comparison(["R_A", "S_A"], ["A", "B"], cells)
        comp.to_csv(tmp_path / "c.csv")
        assert (tmp_path / "c.csv").read_text().splitlines() == ["method,A,B", "R_A,NA,0.2000", "S_A,NA,0.1500"]
        comp.to_csv(tmp_path / "s.csv", mask_seen=False, with_std=True)
        lines = (tmp_path / "s.csv").read_text().splitlines()
        assert lines[0] == "method,A,A_std,B,B_std" and lines[2] == "S_A,0.0500,0.0100,0.1500,0.0200"
        assert comp.value("S_A", "B") == 0.15 and len(comp.to_dict()["cells"]) == 4

    def test_eval_report_dict(self):
        rep = EvalReport(0.1, None, 3)
        assert rep.to_dict() == {"utterance_mae": 0.1, "n": 3, "per_corpus": {}, "per_emotion": {}}
