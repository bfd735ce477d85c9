"""
Training the montage classifier
===============================

A small phantom corpus, the micro ResNet at 32 px, and the epoch selection
rule (best validation F1, then AUC, then the earliest epoch).
Takes about a minute on one core.
"""
import tempfile
from pathlib import Path

import numpy as np

from montage_retrieval import montage as M
from montage_retrieval.classifier import (TrainConfig, layer_specs, load_model, micro, predict_batch,
                                         prepare_input, save_model, train)
from montage_retrieval.metrics import roc_auc
from montage_retrieval.phantom import gen_corpus, read_manifest
from montage_retrieval.volume_io import read_nifti

SIDE = 32
tmp = Path(tempfile.mkdtemp())
gen_corpus(120, usable_fraction=0.3, seed=2, out_dir=tmp)


def load(split):
    rows = read_manifest(tmp / f"manifest_{split}.csv")
    X = np.stack([prepare_input(M.make_montage(read_nifti(r["path"])), SIDE) for r in rows])
    return X, np.array([r["label"] for r in rows])


(X, y), (Xv, yv), (Xt, yt) = load("train"), load("val"), load("test")
print("train", X.shape, "positives", y.sum(), "| val", Xv.shape, "positives", yv.sum())

arch = micro(SIDE)
print(arch.preset, "layers:", len(layer_specs(arch)))

# positives are rare, so they weigh 10x in the loss
cfg = TrainConfig(max_epochs=8, learning_rate=3e-3, seed=0)
model, history = train((X, y), (Xv, yv), cfg, arch)
for h in history:
    print(f"epoch {h['epoch']:2d}  loss {h['train_loss']:.4f}  val f1 {h['val_f1']:.3f}  auc {h['val_auc']:.3f}")
print("selected epoch:", model.provenance["epoch"])

scores = predict_batch(model, Xt)
print(f"test AUC {roc_auc(scores, yt):.3f}")

# the model file is self-describing and checksummed; weights are stored as
# float32, so reloaded scores differ only at that precision
path = tmp / "micro.bin"
save_model(model, path)
again = load_model(path, expected=arch)
print(f"max score change after reload {np.abs(predict_batch(again, Xt) - scores).max():.1e}")
save_model(again, tmp / "micro2.bin")
print("save -> load -> save byte-identical:", path.read_bytes() == (tmp / "micro2.bin").read_bytes())
