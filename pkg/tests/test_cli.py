import csv
import json

import numpy as np
import pytest

from samast import cli
from samast.cli import load_config, main
from samast.metrics import evaluate_predictions
from samast.model import ModelCheckpoint, load_checkpoint, save_checkpoint

# one-second clips and 32 mel bins keep the model input at 32x112
SMALL = {
    "duration": 1.0,
    "mel": {"mel_bins": 32},
    "model": {"input_bins": 32, "input_frames": 112, "embed_dim": 8, "depth": 1, "heads": 2},
    "optim": {"lr": 0.003},
    "epochs": 2,
    "batch_size": 4,
    "synth": {"train_counts": [6, 4, 3, 3], "test_counts": [2, 2, 2, 2], "min_duration": 0.4, "max_duration": 0.8},
    "embed": {"tsne": {"perplexity": 2.0, "iterations": 150}},
}


def write_config(tmp_path, **extra):
    cfg = json.loads(json.dumps(SMALL))
    cfg["synth"]["out"] = str(tmp_path / "data")
    cfg["data"] = {"path": str(tmp_path / "data" / "manifest.csv")}
    cfg["out"] = str(tmp_path / "run")
    for key, value in extra.items():
        cfg[key] = value
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture
def prepared(tmp_path):
    path = write_config(tmp_path)
    assert main(["synth", "--config", str(path)]) == 0
    assert main(["preprocess", "--config", str(path)]) == 0
    return path, tmp_path


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- config


def test_print_config_defaults(capsys):
    assert main(["print-config"]) == 0
    cfg = json.loads(capsys.readouterr().out)
    assert cfg["optim"]["lr"] == 1e-5 and cfg["optim"]["weight_decay"] == 1e-4
    assert cfg["optim"]["rho"] == 0.05 and cfg["optim"]["sam"] is True and cfg["optim"]["kind"] == "adamw"
    assert cfg["epochs"] == 20 and cfg["batch_size"] == 8
    assert cfg["mel"]["mel_bins"] == 128 and cfg["model"]["patch_size"] == 16


def test_set_overrides_and_seed(tmp_path):
    cfg = load_config(None, ["optim.lr=0.5", "sampler=uniform", "model.depth=2"], seed=9, out=str(tmp_path))
    assert cfg.optim.lr == 0.5 and cfg.sampler == "uniform" and cfg.model.depth == 2
    assert cfg.seed == 9 and cfg.out == str(tmp_path)


@pytest.mark.parametrize(
    "args",
    [
        ["print-config", "--set", "optim.learning_rate=1"],
        ["print-config", "--set", "epochs=many"],
        ["print-config", "--set", "optim.lr=-1"],
        ["print-config", "--set", "model.input_frames=784"],
        ["print-config", "--set", "nonsense"],
        ["print-config", "--config", "/nonexistent/config.json"],
    ],
)
def test_config_errors_exit_2(args):
    assert main(args) == 2


def test_config_error_has_no_side_effects(tmp_path):
    path = write_config(tmp_path, sampler="sometimes")
    for command in ("synth", "preprocess", "train", "ablation"):
        assert main([command, "--config", str(path)]) == 2
    assert not (tmp_path / "run").exists() and not (tmp_path / "data").exists()


def test_missing_data_source_is_config_error(tmp_path):
    path = write_config(tmp_path)
    assert main(["preprocess", "--config", str(path)]) == 2
    assert not (tmp_path / "run").exists()


def test_bad_manifest_is_data_error(tmp_path):
    path = write_config(tmp_path)
    (tmp_path / "data").mkdir()
    (tmp_path / "data" / "manifest.csv").write_text("wrong,header\n")
    (tmp_path / "data" / "split.txt").write_text("")
    assert main(["preprocess", "--config", str(path)]) == 3


# ---------------------------------------------------------------- synth and preprocess


def test_synth_counts_and_regeneration(tmp_path):
    path = write_config(tmp_path)
    assert main(["synth", "--config", str(path)]) == 0
    rows = read_rows(tmp_path / "data" / "manifest.csv")
    counts = {}
    for row in rows:
        counts[row["class"]] = counts.get(row["class"], 0) + 1
    assert counts == {"Normal": 8, "Crackle": 6, "Wheeze": 5, "Both": 5}
    first = {p.name: p.read_bytes() for p in (tmp_path / "data").iterdir()}
    assert main(["synth", "--config", str(path)]) == 0
    assert first == {p.name: p.read_bytes() for p in (tmp_path / "data").iterdir()}


def test_preprocess_default_size_and_idempotent(tmp_path):
    path = write_config(tmp_path)
    cfg = json.loads(path.read_text())
    for key in ("duration", "mel", "model"):
        cfg.pop(key)
    cfg["synth"].update(train_counts=[10, 10, 10, 10], test_counts=[0, 0, 0, 0])
    path.write_text(json.dumps(cfg))
    assert main(["synth", "--config", str(path)]) == 0
    assert main(["preprocess", "--config", str(path)]) == 0
    cache = tmp_path / "run" / "cache"
    entries = sorted(cache.glob("*.spg"))
    assert len(entries) == 40
    rows = read_rows(cache / "index.csv")
    assert {(r["bins"], r["frames"]) for r in rows} == {("128", "800")}
    before = {p.name: p.read_bytes() for p in cache.iterdir()}
    assert main(["preprocess", "--config", str(path)]) == 0
    assert before == {p.name: p.read_bytes() for p in cache.iterdir()}


def test_preprocess_skips_corrupt_wav(tmp_path, capsys):
    path = write_config(tmp_path)
    cfg = json.loads(path.read_text())
    cfg["synth"].update(train_counts=[3, 3, 2, 2], test_counts=[0, 0, 0, 0])
    path.write_text(json.dumps(cfg))
    assert main(["synth", "--config", str(path)]) == 0
    victim = read_rows(tmp_path / "data" / "manifest.csv")[4]["id"]
    (tmp_path / "data" / f"{victim}.wav").write_bytes(b"RIFF\x00\x00")
    capsys.readouterr()
    assert main(["preprocess", "--config", str(path)]) == 0
    assert "written=9 skipped=1" in capsys.readouterr().out
    assert len(list((tmp_path / "run" / "cache").glob("*.spg"))) == 9


# ---------------------------------------------------------------- train / evaluate


def test_train_is_deterministic(prepared):
    path, tmp = prepared
    assert main(["train", "--config", str(path)]) == 0
    log1 = (tmp / "run" / "train.log").read_bytes()
    ckpt1 = (tmp / "run" / "checkpoints" / "final.astc").read_bytes()
    assert main(["train", "--config", str(path)]) == 0
    assert log1 == (tmp / "run" / "train.log").read_bytes()
    assert ckpt1 == (tmp / "run" / "checkpoints" / "final.astc").read_bytes()
    lines = log1.decode().splitlines()
    steps = [l for l in lines if " step=" in l]
    assert len(steps) == 2 * 4  # epochs x ceil(16 / 4)
    assert all("sharpness=" in l for l in steps)
    assert sorted(p.name for p in (tmp / "run" / "checkpoints").iterdir()) == ["epoch_001.astc", "epoch_002.astc", "final.astc"]


def test_rho_zero_log_matches_plain_run(prepared):
    path, tmp = prepared
    # the cache lives under the default out dir, so point both runs at it explicitly
    cache = str(tmp / "run" / "cache")
    assert main(["train", "--config", str(path), "--set", "optim.rho=0", "--set", f"data.cache={cache}", "--out", str(tmp / "a")]) == 0
    assert main(["train", "--config", str(path), "--set", "optim.sam=false", "--set", f"data.cache={cache}", "--out", str(tmp / "b")]) == 0
    assert (tmp / "a" / "train.log").read_bytes() == (tmp / "b" / "train.log").read_bytes()


def test_train_rejects_mismatched_cache(prepared):
    path, tmp = prepared
    assert main(["train", "--config", str(path), "--set", "mel.f_max=7000"]) == 2
    assert not (tmp / "run" / "train.log").exists()


def test_evaluate_report_matches_prediction_dump(prepared):
    path, tmp = prepared
    assert main(["train", "--config", str(path)]) == 0
    assert main(["evaluate", "--config", str(path)]) == 0
    rows = read_rows(tmp / "run" / "predictions.csv")
    assert len(rows) == 8
    logits = np.array([[float(r[k]) for k in r if k.startswith("logit_")] for r in rows])
    preds = np.argmax(logits, axis=1)
    assert [int(r["predicted"]) for r in rows] == preds.tolist()
    true = [int(r["true"]) for r in rows]
    oracle = evaluate_predictions(true, preds)
    metrics = {r["metric"]: r["value"] for r in read_rows(tmp / "run" / "report_metrics.csv")}
    for key in ("sensitivity", "specificity", "score"):
        value = getattr(oracle, key)
        assert metrics[key] == ("undefined" if value is None else f"{value:.4f}")
    perfect = evaluate_predictions(true, true)
    assert perfect.sensitivity == perfect.specificity == perfect.score == 1.0


def test_evaluate_zero_head_predicts_normal(prepared):
    path, tmp = prepared
    assert main(["train", "--config", str(path)]) == 0
    ckpt_path = tmp / "run" / "checkpoints" / "final.astc"
    ckpt = load_checkpoint(ckpt_path)
    ckpt.params["head.weight"][:] = 0.0
    ckpt.params["head.bias"][:] = 0.0
    save_checkpoint(ckpt, tmp / "zero.astc")
    assert main(["evaluate", "--config", str(path), "--checkpoint", str(tmp / "zero.astc")]) == 0
    assert {r["predicted"] for r in read_rows(tmp / "run" / "predictions.csv")} == {"0"}
    metrics = {r["metric"]: r["value"] for r in read_rows(tmp / "run" / "report_metrics.csv")}
    assert metrics["sensitivity"] == "0.0000" and metrics["specificity"] == "1.0000"


def test_evaluate_rejects_other_architecture(prepared):
    path, tmp = prepared
    assert main(["train", "--config", str(path)]) == 0
    assert main(["evaluate", "--config", str(path), "--set", "model.embed_dim=16"]) == 2


def test_ablation_schema_and_shared_split(prepared):
    path, tmp = prepared
    assert main(["ablation", "--config", str(path)]) == 0
    rows = read_rows(tmp / "run" / "ablation.csv")
    assert [r["config"] for r in rows] == ["baseline", "weighted", "weighted_sam"]
    assert list(rows[0]) == ["config", "Se", "Sp", "Score"]
    ids = [[r["id"] for r in read_rows(tmp / "run" / "ablation" / name / "predictions.csv")] for name in ("baseline", "weighted", "weighted_sam")]
    assert ids[0] == ids[1] == ids[2]
    logs = [(tmp / "run" / "ablation" / name / "train.log").read_text() for name in ("baseline", "weighted", "weighted_sam")]
    assert "sampler=uniform" in logs[0] and "sampler=weighted" in logs[1] and "sam-adamw" in logs[2]


def test_embed_outputs(prepared):
    path, tmp = prepared
    assert main(["train", "--config", str(path)]) == 0
    assert main(["embed", "--config", str(path)]) == 0
    emb = read_rows(tmp / "run" / "embeddings.csv")
    assert len(emb) == 8 and len(emb[0]) == 2 + 8
    coords = (tmp / "run" / "tsne.csv").read_bytes()
    assert coords.decode().splitlines()[0] == "id,label,x,y"
    assert len(read_rows(tmp / "run" / "kl.csv")) == 150
    assert main(["embed", "--config", str(path)]) == 0
    assert coords == (tmp / "run" / "tsne.csv").read_bytes()


def test_embed_reduces_perplexity_for_small_splits(prepared):
    path, tmp = prepared
    assert main(["train", "--config", str(path)]) == 0
    assert main(["embed", "--config", str(path), "--set", "embed.tsne.perplexity=30"]) == 0


def test_checkpoint_missing_is_config_error(prepared):
    path, _ = prepared
    assert main(["evaluate", "--config", str(path)]) == 2


def test_runtime_error_exit_code(prepared, monkeypatch):
    path, _ = prepared

    def boom(*_a, **_k):
        raise RuntimeError("simulated failure")

    monkeypatch.setattr(cli, "train", boom)
    assert main(["train", "--config", str(path)]) == 4


def test_preprocess_icbhi_directory(tmp_path):
    from samast.dsp import AudioClip, encode_wav

    root = tmp_path / "icbhi"
    root.mkdir()
    rng = np.random.default_rng(0)
    for name in ("101_1b1_Al_sc_Meditron", "102_1b1_Ar_sc_Meditron"):
        (root / f"{name}.wav").write_bytes(encode_wav(AudioClip(rng.uniform(-0.5, 0.5, 8000), 4000)))
        (root / f"{name}.txt").write_text("0.0\t0.8\t0\t0\n0.8\t1.5\t1\t0\n1.5\t2.0\t1\t1\n")
    split = tmp_path / "official.txt"
    split.write_text("101_1b1_Al_sc_Meditron\ttrain\n102_1b1_Ar_sc_Meditron\ttest\n")
    path = write_config(tmp_path)
    args = ["--config", str(path), "--set", "data.source=icbhi-dir", "--set", f"data.path={root}", "--set", f"split.file={split}"]
    assert main(["preprocess", *args]) == 0
    rows = read_rows(tmp_path / "run" / "cache" / "index.csv")
    assert len(rows) == 6
    assert {r["split"] for r in rows if r["subject"] == "101"} == {"train"}
    assert sorted(r["label"] for r in rows) == ["0", "0", "1", "1", "3", "3"]
    split.write_text("101_1b1_Al_sc_Meditron\ttrain\n")
    assert main(["preprocess", *args]) == 3
