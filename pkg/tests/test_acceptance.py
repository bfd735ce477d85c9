"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

The lines are also collected into the "acceptance criteria" section of the
pytest terminal summary (see conftest.py).
"""
import csv
import json
import time
from pathlib import Path

import nibabel as nib
import numpy as np
import pytest

from montage_retrieval import montage as M
from montage_retrieval.cli import main
from montage_retrieval.metrics import ConfusionMatrix, confusion, prf1, roc_auc
from montage_retrieval.volume_io import Volume3D, read_nifti, resample_inplane, write_nifti
from oracles import enumerate_indices, gradient_check, mann_whitney, tiny_net

E2E_EPOCHS = 60
E2E_BUDGET_S = 15 * 60


def tree_bytes(root):
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_sampling_plan_oracle(criterion):
    t = time.perf_counter()
    bad = []
    for z in range(1, 2001):
        plan = M.plan_sampling(z)
        idx = list(plan.indices)
        ok = len(idx) == 36 and idx == enumerate_indices(z)
        if z >= 36:
            n = z // 36
            ok &= plan.step == n and plan.first_slice == z // 2 - 17 * n and plan.mode == M.SAMPLED
            ok &= min(idx) >= 1 and max(idx) <= z and all(b - a == n for a, b in zip(idx, idx[1:]))
        else:
            ok &= plan.mode == M.PADDED and idx.count(M.ZERO_SLICE) == 36 - z and idx[:z] == list(range(1, z + 1))
        if not ok:
            bad.append(z)
    dt = time.perf_counter() - t
    criterion("sampling-plan oracle, z in [1, 2000]", not bad and dt < 1.0,
              f"{len(bad)} mismatches, {dt:.2f} s")


def test_paper_metric_arithmetic(criterion):
    scores = [0.9] * 150 + [0.7] * 6 + [0.3] * 6 + [0.1] * 838
    labels = [1] * 150 + [0] * 6 + [1] * 6 + [0] * 838
    cm = confusion(scores, labels)
    m = prf1(cm)
    target = 150 / 156  # 0.96153...
    ok = (cm == ConfusionMatrix(150, 6, 6, 838) and abs(m.accuracy - 0.988) < 1e-12
          and all(abs(v - target) < 1e-12 for v in (m.precision, m.recall, m.f1))
          and m.rendered() == {"accuracy": "0.988", "precision": "0.962", "recall": "0.962", "f1": "0.962"})
    criterion("metric arithmetic tp=150 fp=6 fn=6 tn=838", ok,
              f"accuracy {m.accuracy!r}, f1 {m.f1:.6f} -> {m.rendered()['f1']}")


def test_auc_oracle_equivalence(criterion):
    rng = np.random.default_rng(2024)
    t = time.perf_counter()
    worst, n_tied = 0.0, 0
    for i in range(50):
        # a mix of coarse grids (heavy ties) and continuous scores
        scores = np.round(rng.random(200), int(rng.integers(1, 4))) if i % 2 == 0 else rng.random(200)
        labels = rng.integers(0, 2, 200)
        labels[:2] = [0, 1]
        n_tied += len(np.unique(scores)) < 200
        worst = max(worst, abs(roc_auc(scores, labels) - mann_whitney(scores.tolist(), labels.tolist())))
    dt = time.perf_counter() - t
    criterion("AUC equals Mann-Whitney on 50 x n=200", worst < 1e-12 and dt < 5 and n_tied >= 25,
              f"max diff {worst:.1e}, {n_tied} instances with ties, {dt:.2f} s")


def test_gradient_check(criterion):
    t = time.perf_counter()
    model, x, y = tiny_net(0)
    stats = {}
    worst, n = gradient_check(model, x, y, per_array=150, seed=1, stats=stats)
    dt = time.perf_counter() - t
    criterion("gradient check, tiny net vs central differences", worst < 1e-4 and dt < 60,
              f"{n} parameters probed, worst relative error {worst:.1e}, "
              f"{stats['shrunk']} stencils narrowed off a ReLU kink, {dt:.1f} s")


@pytest.mark.slow
def test_end_to_end_desk_scale(tmp_path, criterion):
    t = time.perf_counter()
    corpus = tmp_path / "corpus"
    assert main(["phantom", "--count", "350", "--usable-fraction", "0.15", "--seed", "0",
                 "--split-ratios", "200", "50", "100", "--out", str(corpus)]) == 0
    model = tmp_path / "model.bin"
    assert main(["train", "--train", str(corpus / "manifest_train.csv"), "--val", str(corpus / "manifest_val.csv"),
                 "--preset", "micro", "--input-side", "128", "--epochs", str(E2E_EPOCHS), "--seed", "0",
                 "--workers", "1", "--out", str(model)]) == 0
    pred = corpus / "retrieved_test.csv"
    assert main(["retrieve", str(model), str(corpus / "test"), "--workers", "1", "--out", str(pred)]) == 0
    report = tmp_path / "report.json"
    assert main(["evaluate", str(pred), str(corpus / "manifest_test.csv"), "--out", str(report)]) == 0
    dt = time.perf_counter() - t

    hist = json.loads((tmp_path / "model.bin.history.json").read_text())
    sel = hist["selected_epoch"]
    val_auc = hist["epochs"][sel - 1]["val_auc"]
    rep = json.loads(report.read_text())
    test_auc = rep["auc"]
    criterion("end-to-end phantom 200/50/100, micro at 128",
              val_auc >= 0.95 and test_auc >= 0.95 and dt < E2E_BUDGET_S,
              f"selected epoch {sel}/{E2E_EPOCHS}, val AUC {val_auc:.4f}, test AUC {test_auc:.4f}, "
              f"test f1 {rep['metrics']['f1']:.3f}, {dt / 60:.1f} min")

    rows = [r for r in csv.DictReader(ln for ln in pred.read_text().splitlines() if not ln.startswith("#"))]
    frac = sum(int(r["predicted_label"]) for r in rows) / len(rows)
    print(f"retrieval example: retrieved fraction {frac:.3f} vs usable fraction 0.15")
    assert abs(frac - 0.15) <= 0.05


def test_determinism_suite(tmp_path, criterion):
    corpus = tmp_path / "corpus"
    assert main(["phantom", "--count", "24", "--usable-fraction", "0.25", "--seed", "3", "--out", str(corpus)]) == 0
    again = tmp_path / "corpus2"
    assert main(["phantom", "--count", "24", "--usable-fraction", "0.25", "--seed", "3", "--out", str(again)]) == 0
    same_corpus = tree_bytes(corpus) == tree_bytes(again)

    pngs, models, manifests = {}, {}, {}
    for run, w in [("a", 1), ("b", 1), ("c", 4), ("d", 8)]:
        out = tmp_path / run
        assert main(["montage", str(corpus / "test"), "--out", str(out / "png"), "--workers", str(w)]) == 0
        pngs[run] = tree_bytes(out / "png")
        assert main(["train", "--train", str(corpus / "manifest_train.csv"),
                     "--val", str(corpus / "manifest_val.csv"), "--input-side", "32", "--epochs", "2",
                     "--seed", "5", "--workers", str(w), "--out", str(out / "m.bin")]) == 0
        models[run] = (out / "m.bin").read_bytes()
        # write the manifest at the same relative location so paths match byte for byte
        pred = corpus / f"pred_{run}.csv"
        assert main(["retrieve", str(out / "m.bin"), str(corpus / "test"),
                     "--workers", str(w), "--out", str(pred)]) == 0
        manifests[run] = pred.read_bytes()

    ok_png = len({json.dumps(sorted((k, v.hex()) for k, v in p.items())) for p in pngs.values()}) == 1
    ok_model = len(set(models.values())) == 1
    ok_manifest = len(set(manifests.values())) == 1
    criterion("determinism across runs and workers {1, 4, 8}",
              same_corpus and ok_png and ok_model and ok_manifest and len(pngs["a"]) > 0,
              f"corpus {same_corpus}, png {ok_png} ({len(pngs['a'])} files), model {ok_model}, "
              f"manifest {ok_manifest}")


def test_nifti_round_trip(tmp_path, criterion):
    rng = np.random.default_rng(8)
    failures = []
    for dtype in ("uint8", "int16", "int32", "float32", "float64"):
        for order in ("<", ">"):
            if dtype == "uint8":
                data = rng.integers(0, 256, (7, 5, 6))
            elif dtype.startswith("int"):
                data = rng.integers(-3000, 3000, (7, 5, 6))
            else:
                data = rng.normal(0, 400, (7, 5, 6)).astype(np.float32)
            vol = Volume3D(data, (0.7, 0.8, 2.5))
            path = tmp_path / f"{dtype}{'be' if order == '>' else 'le'}.nii"
            write_nifti(vol, path, dtype, order)
            back = read_nifti(path)
            if back.dims != vol.dims or not np.array_equal(back.data, vol.data):
                failures.append(f"{dtype}{order}")

    ref_data = rng.integers(-1024, 3000, (17, 13, 9)).astype(np.int16)
    img = nib.Nifti1Image(ref_data, np.diag([0.5, 0.5, 3.0, 1.0]))
    img.header.set_slope_inter(0.5, -10.0)
    nib.save(img, tmp_path / "reference.nii.gz")
    ours = read_nifti(tmp_path / "reference.nii.gz")
    theirs = np.asarray(nib.load(tmp_path / "reference.nii.gz").dataobj, dtype=np.float64)
    stats = lambda a: (a.min(), a.max(), a.mean(), a.std())
    ref_ok = ours.dims == theirs.shape and np.allclose(stats(ours.data), stats(theirs), rtol=0, atol=1e-9)
    criterion("NIfTI round trip, 5 datatypes x 2 byte orders, plus reference file",
              not failures and ref_ok,
              f"failed: {failures or 'none'}; reference dims {ours.dims}, mean {ours.data.mean():.3f}")


def test_montage_structure(criterion):
    # z = 36: slice k of the stack is source slice k
    labelled = np.broadcast_to(np.arange(1, 37, dtype=float), (512, 512, 36))
    stack = M.extract_stack(Volume3D(labelled), M.plan_sampling(36))
    identity = all(np.all(stack.data[:, :, k] == k + 1) for k in range(36))

    # z = 10: exactly 26 black trailing tiles
    vol = Volume3D(np.full((64, 64, 10), 100.0))
    st = M.window_normalize(M.extract_stack(resample_inplane(vol), M.plan_sampling(10)), M.WindowSpec())
    tiled = M.tile_montage(st).pixels
    tiles = [tiled[(k // 6) * 512:(k // 6 + 1) * 512, (k % 6) * 512:(k % 6 + 1) * 512] for k in range(36)]
    black = [k for k in range(36) if not tiles[k].any()]
    padded_ok = black == list(range(10, 36)) and all(tiles[k].min() > 0 for k in range(10))

    # tiling bijection: every montage pixel maps to exactly one (i, j, k) and holds that value
    data = np.random.default_rng(0).random((512, 512, 36))
    px = M.tile_montage(M.CanonicalStack(data, M.plan_sampling(36))).pixels
    R, C = np.indices(px.shape)
    k, i, j = (R // 512) * 6 + C // 512, R % 512, C % 512
    gathered = data[i, j, k]
    flat = (k * 512 + i) * 512 + j
    bijection = np.array_equal(px, gathered) and np.unique(flat).size == data.size == px.size

    criterion("montage structure: z=36 identity, z=10 padding, tiling bijection",
              identity and padded_ok and bijection,
              f"identity {identity}, black tiles {len(black)} starting at {black[0] if black else None}, "
              f"bijection {bijection}")
