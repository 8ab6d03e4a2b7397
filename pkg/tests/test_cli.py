import csv
import json

import pytest

from strengthnet import training
from strengthnet.cli import main
from strengthnet.datasets import load_manifest, save_manifest
from strengthnet.errors import NumericalError
from strengthnet.pipeline import FeatureCache, load_run_config
from strengthnet.ranker import load_labels

TINY = {"block_filters": [2, 4, 4, 8], "bilstm_cells_per_direction": 4, "fc_hidden": 4}


def run(capsys, *args):
    code = main([str(a) for a in args])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """Two tiny synthetic corpora with features, rankers, labels and a run config."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-synth", "--profile", "synthA", "--n-per-emotion", "5", "--n-neutral", "5", "--out", str(root / "A")]) == 0
    assert main(["gen-synth", "--profile", "synthB", "--n-per-emotion", "5", "--n-neutral", "5", "--seed", "1",
                 "--out", str(root / "B")]) == 0
    manifests = [root / "A" / "manifest.csv", root / "B" / "manifest.csv"]
    assert main(["extract-features", *map(str, manifests), "--out", str(root / "feats")]) == 0
    assert main(["train-ranker", *map(str, manifests), "--features", str(root / "feats"), "--all-emotions",
                 "--c-ordered", "1e-5", "--c-similar", "1e-7", "--out", str(root / "rank")]) == 0
    config = {"manifests": ["A/manifest.csv", "B/manifest.csv"], "features": "feats", "labels": "rank/labels.csv",
              "rankers": "rank", "out": "run", "model": TINY,
              "train": {"learning_rate": 3e-3, "batch_size": 8, "max_epochs": 2}}
    (root / "run.json").write_text(json.dumps(config))
    return root


class TestGenSynth:
    def test_writes_split_corpus(self, work):
        m = load_manifest(work / "A" / "manifest.csv")
        assert len(m) == 25 and not m.missing_audio()
        assert {r.split for r in m} == {"train", "val", "test"}
        assert (work / "A" / "strength_truth.csv").is_file()


class TestExtract:
    def test_counts_and_idempotence(self, work, capsys, tmp_path):
        m = load_manifest(work / "A" / "manifest.csv")
        small = type(m)(m.rows[:5])
        save_manifest(small, tmp_path / "m.csv")
        code, out, _ = run(capsys, "extract-features", tmp_path / "m.csv", "--stats-from", "all", "--out", tmp_path / "f")
        assert code == 0 and out.startswith("5 extracted, 0 skipped")
        assert len(list((tmp_path / "f" / "mels").iterdir())) == 5
        assert len(list((tmp_path / "f" / "functionals").iterdir())) == 5
        assert (tmp_path / "f" / "mel_stats.json").is_file()
        args = ("extract-features", tmp_path / "m.csv", "--stats-from", "all", "--out", tmp_path / "f")
        assert run(capsys, *args)[1].startswith("0 extracted, 5 skipped")
        code, out, _ = run(capsys, *args, "--force")
        assert out.startswith("5 extracted, 0 skipped")

    def test_missing_audio(self, work, capsys, tmp_path):
        m = load_manifest(work / "A" / "manifest.csv")
        rows = list(m.rows)
        rows[0] = rows[0].__class__(**{**rows[0].__dict__, "audio_path": str(tmp_path / "gone.wav")})
        save_manifest(type(m)(tuple(rows)), tmp_path / "m.csv")
        code, _, err = run(capsys, "extract-features", tmp_path / "m.csv", "--out", tmp_path / "f")
        assert code == 1 and "gone.wav" in err

    def test_parallel_matches_serial(self, work, capsys, tmp_path):
        m = load_manifest(work / "B" / "manifest.csv")
        save_manifest(type(m)(m.rows[:6]), tmp_path / "m.csv")
        for jobs in ("1", "2"):
            assert run(capsys, "extract-features", tmp_path / "m.csv", "--stats-from", "all", "--jobs", jobs,
                       "--out", tmp_path / jobs)[0] == 0
        for sub in ("mels", "functionals"):
            for f in (tmp_path / "1" / sub).iterdir():
                assert f.read_bytes() == (tmp_path / "2" / sub / f.name).read_bytes()

    def test_cache_contents(self, work):
        cache = FeatureCache(work / "feats")
        uid = load_manifest(work / "A" / "manifest.csv").ids[0]
        assert cache.mel(uid).shape[1] == 80 and cache.functional(uid).shape == (384,)


class TestTrainRanker:
    def test_outputs(self, work):
        assert len(list((work / "rank" / "rankers").glob("*.json"))) == 8
        labels = load_labels(work / "rank" / "labels.csv")
        assert len(labels) == 40 and all(0 <= lab.normalized <= 1 for lab in labels.values())

    def test_degenerate_group(self, work, capsys, tmp_path):
        m = load_manifest(work / "A" / "manifest.csv")
        same = next(r for r in m if r.emotion == "sad").audio_path
        rows = tuple(r.__class__(**{**r.__dict__, "audio_path": same}) if r.emotion == "sad" else r for r in m)
        save_manifest(type(m)(rows), tmp_path / "m.csv")
        assert run(capsys, "extract-features", tmp_path / "m.csv", "--out", tmp_path / "f")[0] == 0
        code, _, err = run(capsys, "train-ranker", tmp_path / "m.csv", "--features", tmp_path / "f",
                           "--emotion", "sad", "--out", tmp_path / "r")
        assert code == 0 and "warning" in err and "sad" in err
        assert all(lab.normalized == 0.5 for lab in load_labels(tmp_path / "r" / "labels.csv").values())

    def test_insufficient_data(self, work, capsys, tmp_path):
        m = load_manifest(work / "A" / "manifest.csv")
        save_manifest(m.filter(emotion=("happy", "sad", "angry", "surprise")), tmp_path / "m.csv")
        code, _, err = run(capsys, "train-ranker", tmp_path / "m.csv", "--features", work / "feats",
                           "--emotion", "angry", "--out", tmp_path / "r")
        assert code == 1 and "synthA" in err and "angry" in err


class TestTrain:
    def test_train_and_rerun(self, work, capsys):
        code, out, _ = run(capsys, "train", work / "run.json", "--seed", "3", "--out", work / "t1")
        assert code == 0
        code2, out2, _ = run(capsys, "train", work / "run.json", "--seed", "3", "--out", work / "t2")
        assert out.split("val_mae")[1].split(";")[0] == out2.split("val_mae")[1].split(";")[0]
        log = [json.loads(line) for line in (work / "t1" / "train_log.jsonl").read_text().splitlines()]
        assert len(log) == 2 and all("val_acc" in r for r in log)
        assert (work / "t1" / "train_log.jsonl").read_bytes() == (work / "t2" / "train_log.jsonl").read_bytes()

    def test_ablate_no_cat(self, work, capsys):
        assert run(capsys, "train", work / "run.json", "--ablate", "no-cat", "--out", work / "nc")[0] == 0
        log = [json.loads(line) for line in (work / "nc" / "train_log.jsonl").read_text().splitlines()]
        assert all("val_acc" not in r for r in log)

    def test_missing_label(self, work, capsys, tmp_path):
        labels = (work / "rank" / "labels.csv").read_text().splitlines()
        dropped = labels[5].split(",")[0]
        (tmp_path / "labels.csv").write_text("\n".join(labels[:5] + labels[6:]) + "\n")
        cfg = json.loads((work / "run.json").read_text())
        cfg.update(manifests=[str(work / "A" / "manifest.csv")], features=str(work / "feats"),
                   labels=str(tmp_path / "labels.csv"), out=str(tmp_path / "o"))
        (tmp_path / "run.json").write_text(json.dumps(cfg))
        code, _, err = run(capsys, "train", tmp_path / "run.json")
        assert code == 1 and dropped in err

    def test_numerical_failure_exits_2(self, work, capsys, monkeypatch):
        def boom(*args, **kwargs):
            raise NumericalError("non-finite loss at epoch 1, batch 0")

        monkeypatch.setattr(training, "train", boom)
        code, _, err = run(capsys, "train", work / "run.json", "--out", work / "boom")
        assert code == 2 and "epoch 1" in err

    def test_config_errors(self, work, capsys, tmp_path):
        cfg = json.loads((work / "run.json").read_text())
        (tmp_path / "bad.json").write_text(json.dumps(dict(cfg, surprise_key=1)))
        code, _, err = run(capsys, "train", tmp_path / "bad.json")
        assert code == 1 and "surprise_key" in err
        (tmp_path / "bad2.json").write_text(json.dumps(dict(cfg, train={"learning_rte": 1})))
        assert run(capsys, "train", tmp_path / "bad2.json")[0] == 1
        loaded = load_run_config(work / "run.json")
        assert loaded.features == work / "feats" and loaded.model.block_filters == (2, 4, 4, 8)


@pytest.fixture(scope="module")
def checkpoint(work):
    assert main(["train", str(work / "run.json"), "--out", str(work / "pe")]) == 0
    return work / "pe" / "checkpoint.ckpt"


class TestPredictEvaluate:
    def test_predict_files(self, work, checkpoint, capsys):
        wav = sorted((work / "B" / "audio").glob("*.wav"))[0]
        code, out, _ = run(capsys, "predict", "--checkpoint", checkpoint, wav, wav, work / "missing.wav")
        lines = [json.loads(x) for x in out.splitlines()]
        assert code == 0 and len(lines) == 3
        assert lines[0] == lines[1]
        assert set(lines[0]) == {"utterance_id", "strength", "emotion", "probs"}
        assert set(lines[0]["probs"]) == {"happy", "sad", "angry", "surprise"}
        assert abs(sum(lines[0]["probs"].values()) - 1) < 1e-6
        assert "error" in lines[2] and "missing.wav" in lines[2]["error"]

    def test_predict_all_fail(self, work, checkpoint, capsys):
        code, out, _ = run(capsys, "predict", "--checkpoint", checkpoint, work / "nope.wav")
        assert code == 1 and "error" in json.loads(out)

    def test_perfect_fixture(self, work, capsys, tmp_path):
        labels = load_labels(work / "rank" / "labels.csv")
        m = load_manifest(work / "A" / "manifest.csv").filter(split="test", emotion=("happy", "sad", "angry", "surprise"))
        with open(tmp_path / "p.jsonl", "w") as fh:
            for r in m:
                fh.write(json.dumps({"utterance_id": r.utterance_id, "strength": labels[r.utterance_id].normalized,
                                     "emotion": r.emotion}) + "\n")
        code, out, _ = run(capsys, "evaluate", "--labels", work / "rank" / "labels.csv", "--manifest",
                           work / "A" / "manifest.csv", "--predictions", tmp_path / "p.jsonl", "--out", tmp_path / "e")
        assert code == 0 and "mae=0.0000" in out and "ser_acc=1.0000" in out
        rows = list(csv.DictReader(open(tmp_path / "e" / "metrics.csv")))
        assert rows[0]["utterance_mae"] == "0.000000"

    def test_evaluate_checkpoint(self, work, checkpoint, capsys, tmp_path):
        code, out, _ = run(capsys, "evaluate", "--labels", work / "rank" / "labels.csv", "--manifest",
                           work / "A" / "manifest.csv", work / "B" / "manifest.csv", "--checkpoint", checkpoint,
                           "--features", work / "feats", "--out", tmp_path / "e")
        assert code == 0 and "synthB" in out
        metrics = json.loads((tmp_path / "e" / "metrics.json").read_text())
        assert metrics["n"] == 8 and 0 <= metrics["ser_accuracy"] <= 1

    def test_empty_test_set(self, work, checkpoint, capsys, tmp_path):
        m = load_manifest(work / "A" / "manifest.csv")
        save_manifest(m.filter(split="train"), tmp_path / "m.csv")
        code, _, err = run(capsys, "evaluate", "--labels", work / "rank" / "labels.csv", "--manifest", tmp_path / "m.csv",
                           "--checkpoint", checkpoint, "--features", work / "feats")
        assert code == 1 and "no labelled" in err


class TestCompareAblate:
    def test_compare_three_seeds(self, work, capsys):
        code, out, _ = run(capsys, "compare", work / "run.json", "--pools", "synthA", "synthA+synthB",
                           "--seeds", "0", "1", "2", "--max-epochs", "1", "--out", work / "cmp")
        assert code == 0
        rows = list(csv.reader(open(work / "cmp" / "comparison.csv")))
        assert rows[0] == ["method", "synthA", "synthA_std", "synthB", "synthB_std"]
        table = {r[0]: r[1:] for r in rows[1:]}
        assert table["R_synthA"][:2] == ["NA", "NA"] and table["R_synthB"][2:] == ["NA", "NA"]
        assert table["StrengthNet_synthA+synthB"] == ["NA"] * 4
        assert table["StrengthNet_synthA"][0] == "NA" and table["StrengthNet_synthA"][2] != "NA"
        full = json.loads((work / "cmp" / "comparison.json").read_text())
        assert {c["n_runs"] for c in full["cells"] if c["method"].startswith("StrengthNet")} == {3}

    def test_ablate(self, work, capsys):
        code, out, _ = run(capsys, "ablate", work / "run.json", "--seeds", "0", "--corpora", "synthA",
                           "--max-epochs", "1", "--out", work / "abl")
        assert code == 0 and "acc=absent" in out
        summary = json.loads((work / "abl" / "ablation.json").read_text())
        assert len(summary) == 3
        n_test = len(load_manifest(work / "A" / "manifest.csv").filter(split="test", emotion=("happy", "sad", "angry", "surprise")))
        assert all(len(v["strength_scores"][0]) == n_test for v in summary.values())


def test_usage_errors(capsys):
    with pytest.raises(SystemExit) as info:
        main(["train-ranker"])
    assert info.value.code == 2
    assert run(capsys, "evaluate", "--labels", "x.csv", "--manifest", "y.csv", "--predictions", "p.jsonl")[0] == 1
