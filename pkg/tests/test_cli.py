import csv
import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from montage_retrieval import montage as M
from montage_retrieval.cli import main
from montage_retrieval.phantom import PhantomClass, gen_volume, read_manifest
from montage_retrieval.volume_io import write_nifti
from oracles import enumerate_indices


def tree_bytes(root):
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert main(["phantom", "--count", "20", "--usable-fraction", "0.3", "--seed", "4", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def small_scans(tmp_path_factory):
    d = tmp_path_factory.mktemp("scans")
    rng = np.random.default_rng(0)
    for i in range(20):
        cls = list(PhantomClass)[i % 3]
        z = int(rng.integers(8, 80))
        vol, _ = gen_volume(cls, i, (24, 24, z))
        write_nifti(vol, d / f"scan{i:02d}.nii")
    return d


@pytest.fixture(scope="module")
def model_file(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("model") / "m.bin"
    args = ["train", "--train", str(corpus / "manifest_train.csv"), "--val", str(corpus / "manifest_val.csv"),
            "--input-side", "16", "--epochs", "3", "--lr", "1e-3", "--seed", "1", "--out", str(out)]
    assert main(args) == 0
    return out


def test_phantom_counts_and_determinism(tmp_path, capsys):
    for name in ("a", "b"):
        assert main(["phantom", "--count", "100", "--seed", "2", "--out", str(tmp_path / name)]) == 0
    rows = read_manifest(tmp_path / "a" / "manifest.csv")
    assert sum(r["label"] for r in rows) == 15
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    assert "wrote 100 scans" in capsys.readouterr().out


def test_phantom_bad_fraction(tmp_path, capsys):
    assert main(["phantom", "--count", "100", "--usable-fraction", "1.5", "--out", str(tmp_path)]) == 2
    assert "usable-fraction" in capsys.readouterr().err


def test_usage_errors_exit_2(tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["montage"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["montage", str(tmp_path), "--out", str(tmp_path), "--window", "1", "2", "3"])
    assert e.value.code == 2


def test_montage_single_scan_sidecar(tmp_path):
    vol, _ = gen_volume(PhantomClass.WHOLE_BRAIN, 3, (32, 32, 100))
    write_nifti(vol, tmp_path / "one.nii")
    assert main(["montage", str(tmp_path / "one.nii"), "--out", str(tmp_path / "out")]) == 0
    meta = json.loads((tmp_path / "out" / "one.json").read_text())
    assert meta["indices"] == enumerate_indices(100)
    assert (meta["z"], meta["N"], meta["m"]) == (100, 100 // 36, 100 // 2 - 17 * (100 // 36))
    assert meta["config"]["window"] == [-100.0, 300.0]
    assert meta["tool_version"]
    px = M.load_png(tmp_path / "out" / "one.png")
    assert px.shape == (512, 512)


def test_montage_worker_independence(small_scans, tmp_path):
    for w in (1, 4, 8):
        assert main(["montage", str(small_scans), "--out", str(tmp_path / f"w{w}"), "--workers", str(w)]) == 0
    ref = tree_bytes(tmp_path / "w1")
    assert len(ref) == 40
    assert tree_bytes(tmp_path / "w4") == ref
    assert tree_bytes(tmp_path / "w8") == ref


def test_montage_env_default_workers(small_scans, tmp_path, monkeypatch):
    monkeypatch.setenv("MONTAGE_RETRIEVAL_WORKERS", "3")
    assert main(["montage", str(small_scans), "--out", str(tmp_path / "env"), "--window", "auto"]) == 0
    assert main(["montage", str(small_scans), "--out", str(tmp_path / "flag"), "--window", "auto",
                 "--workers", "1"]) == 0
    assert tree_bytes(tmp_path / "env") == tree_bytes(tmp_path / "flag")
    assert json.loads((tmp_path / "env" / "scan00.json").read_text())["window"] == "auto"


def test_montage_corrupt_file_isolated(small_scans, tmp_path, capsys):
    src = tmp_path / "src"
    shutil.copytree(small_scans, src)
    (src / "broken.nii").write_bytes(b"\0" * 100)
    assert main(["montage", str(src), "--out", str(tmp_path / "out"), "--workers", "2"]) == 1
    out = capsys.readouterr().out
    assert "montaged 20 of 21" in out and "broken.nii" in out
    assert len(list((tmp_path / "out").glob("*.png"))) == 20


def test_train_defaults_recorded(corpus, tmp_path):
    out = tmp_path / "m.bin"
    args = ["train", "--train", str(corpus / "manifest_train.csv"), "--val", str(corpus / "manifest_val.csv"),
            "--input-side", "16", "--out", str(out)]
    assert main(args) == 0
    hist = json.loads((tmp_path / "m.bin.history.json").read_text())
    train_cfg = hist["config"]["train"]
    assert (train_cfg["max_epochs"], train_cfg["batch_size"], train_cfg["learning_rate"]) == (100, 8, 1e-4)
    assert train_cfg["class_weights"] == [1.0, 10.0]
    assert len(hist["epochs"]) == 100
    assert 1 <= hist["selected_epoch"] <= 100


def test_train_deterministic_across_runs_and_workers(corpus, model_file, tmp_path):
    for w in ("1", "4"):
        out = tmp_path / f"m{w}.bin"
        args = ["train", "--train", str(corpus / "manifest_train.csv"), "--val", str(corpus / "manifest_val.csv"),
                "--input-side", "16", "--epochs", "3", "--lr", "1e-3", "--seed", "1", "--out", str(out),
                "--workers", w, "--cache-dir", str(tmp_path / "cache")]
        assert main(args) == 0
        assert out.read_bytes() == model_file.read_bytes()
    assert len(list((tmp_path / "cache").glob("*.npy"))) == 16  # 12 train + 4 val scans, reused on the second run


def test_train_single_class_val(corpus, tmp_path, capsys):
    lines = (corpus / "manifest_val.csv").read_text().splitlines()
    keep = [ln for ln in lines if ln.startswith("#") or ln.startswith("path") or ",0," in ln]
    (corpus / "val_neg.csv").write_text("\n".join(keep) + "\n")
    args = ["train", "--train", str(corpus / "manifest_train.csv"), "--val", str(corpus / "val_neg.csv"),
            "--input-side", "16", "--epochs", "1", "--out", str(tmp_path / "m.bin")]
    assert main(args) == 1
    assert "DegenerateData" in capsys.readouterr().err
    assert not (tmp_path / "m.bin").exists()


def test_train_missing_scan_named(corpus, tmp_path, capsys):
    text = (corpus / "manifest_train.csv").read_text()
    (corpus / "train_missing.csv").write_text(text + "train/ghost.nii,sub-9999,whole_brain,1,train,1\n")
    args = ["train", "--train", str(corpus / "train_missing.csv"), "--val", str(corpus / "manifest_val.csv"),
            "--input-side", "16", "--epochs", "1", "--out", str(tmp_path / "m.bin")]
    assert main(args) == 1
    assert "ghost.nii" in capsys.readouterr().err


def _retrieve(model, scans, out, *extra):
    return main(["retrieve", str(model), str(scans), "--out", str(out), *extra])


def test_retrieve_worker_independence_and_format(model_file, corpus, tmp_path):
    for w in (1, 4, 8):
        assert _retrieve(model_file, corpus / "test", tmp_path / f"r{w}.csv", "--workers", str(w)) == 0
    ref = (tmp_path / "r1.csv").read_bytes()
    assert (tmp_path / "r4.csv").read_bytes() == ref == (tmp_path / "r8.csv").read_bytes()
    text = ref.decode()
    assert "model_sha256" in text and "tool=montage-retrieval" in text
    rows = list(csv.DictReader(ln for ln in text.splitlines() if not ln.startswith("#")))
    assert len(rows) == 4
    assert [r["path"] for r in rows] == sorted(r["path"] for r in rows)
    for r in rows:
        assert 0.0 <= float(r["score"]) <= 1.0 and r["status"] == "ok"
        assert r["predicted_label"] == str(int(float(r["score"]) >= 0.5))


def test_retrieve_failures(model_file, corpus, tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert _retrieve(model_file, tmp_path / "empty", tmp_path / "r.csv") == 2
    assert _retrieve(model_file, tmp_path / "nope", tmp_path / "r.csv") == 2
    mixed = tmp_path / "mixed"
    shutil.copytree(corpus / "test", mixed)
    (mixed / "zz_bad.nii").write_bytes(b"junk" * 100)
    assert _retrieve(model_file, mixed, tmp_path / "r.csv") == 0
    rows = list(csv.DictReader(ln for ln in (tmp_path / "r.csv").read_text().splitlines()
                               if not ln.startswith("#")))
    assert rows[-1]["path"].endswith("zz_bad.nii") and rows[-1]["status"].startswith("error")
    only_bad = tmp_path / "only_bad"
    only_bad.mkdir()
    (only_bad / "x.nii").write_bytes(b"junk")
    assert _retrieve(model_file, only_bad, tmp_path / "r2.csv") == 1


def _write_pred(path, scored):
    with open(path, "w", newline="") as f:
        f.write("# tool=montage-retrieval test\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["path", "score", "predicted_label", "z", "N", "m", "mode", "status"])
        for p, s in scored:
            w.writerow([p, repr(s), int(s >= 0.5), 40, 1, 3, "sampled", "ok"])


def _write_truth(path, labelled):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["path", "subject_id", "class_name", "label", "split", "seed"])
        for p, y in labelled:
            w.writerow([p, "sub-0000", "whole_brain" if y else "non_brain", y, "test", 0])


def test_evaluate_reported_outcome(tmp_path, capsys):
    counts = [(0.9, 1, 150), (0.8, 0, 6), (0.2, 1, 6), (0.1, 0, 838)]
    rows = [(s, y) for s, y, n in counts for _ in range(n)]
    paths = [f"s{i:04d}.nii" for i in range(len(rows))]
    _write_pred(tmp_path / "pred.csv", [(p, s) for p, (s, _) in zip(paths, rows)])
    _write_truth(tmp_path / "truth.csv", [(p, y) for p, (_, y) in zip(paths, rows)])
    assert main(["evaluate", str(tmp_path / "pred.csv"), str(tmp_path / "truth.csv"),
                 "--out", str(tmp_path / "rep.json")]) == 0
    rep = json.loads((tmp_path / "rep.json").read_text())
    assert rep["confusion"] == {"tp": 150, "fp": 6, "fn": 6, "tn": 838}
    assert rep["metrics"]["accuracy"] == 0.988
    assert rep["metrics_rendered"] == {"accuracy": "0.988", "precision": "0.962", "recall": "0.962", "f1": "0.962"}
    assert "accuracy=0.988" in capsys.readouterr().out
    roc = (tmp_path / "rep.roc.csv").read_text().splitlines()
    assert roc[0] == "fpr,tpr,threshold" and roc[1] == "0.0,0.0,inf" and roc[-1].startswith("1.0,1.0,")
    assert rep["roc"][0]["threshold"] is None


def test_evaluate_perfect_and_join_mismatch(tmp_path, capsys):
    labelled = [("a.nii", 1), ("b.nii", 0), ("c.nii", 0)]
    _write_pred(tmp_path / "pred.csv", [(p, float(y)) for p, y in labelled])
    _write_truth(tmp_path / "truth.csv", labelled)
    assert main(["evaluate", str(tmp_path / "pred.csv"), str(tmp_path / "truth.csv"),
                 "--out", str(tmp_path / "rep.json")]) == 0
    rep = json.loads((tmp_path / "rep.json").read_text())
    assert set(rep["metrics_rendered"].values()) == {"1.000"} and rep["auc"] == 1.0

    _write_truth(tmp_path / "short.csv", labelled[:2])
    capsys.readouterr()
    assert main(["evaluate", str(tmp_path / "pred.csv"), str(tmp_path / "short.csv"),
                 "--out", str(tmp_path / "rep2.json")]) == 1
    assert "c.nii" in capsys.readouterr().err


def test_end_to_end_small(model_file, corpus, tmp_path):
    pred = corpus / "pred_small.csv"
    assert _retrieve(model_file, corpus / "test", pred) == 0
    assert main(["evaluate", str(pred), str(corpus / "manifest_test.csv"),
                 "--out", str(tmp_path / "rep.json")]) == 0
    rep = json.loads((tmp_path / "rep.json").read_text())
    assert rep["n"] == 4
    assert rep["config"]["retrieval_config"]["model_preset"] == "micro"
