"""
Retrieval from the command line
===============================

The same steps as a user would run in a shell: build a corpus, train, score a
directory of scans and compare with the ground truth.
"""
import json
import tempfile
from pathlib import Path

from montage_retrieval.cli import main

tmp = Path(tempfile.mkdtemp())
corpus = tmp / "corpus"
main(["phantom", "--count", "60", "--usable-fraction", "0.3", "--seed", "5", "--out", str(corpus)])
main(["train", "--train", str(corpus / "manifest_train.csv"), "--val", str(corpus / "manifest_val.csv"),
      "--input-side", "32", "--epochs", "20", "--lr", "3e-3", "--out", str(tmp / "model.bin")])

main(["retrieve", str(tmp / "model.bin"), str(corpus / "test"), "--out", str(corpus / "retrieved.csv")])
print("\n".join((corpus / "retrieved.csv").read_text().splitlines()[:6]))

main(["evaluate", str(corpus / "retrieved.csv"), str(corpus / "manifest_test.csv"),
      "--out", str(tmp / "report.json")])
report = json.loads((tmp / "report.json").read_text())
print("auc", report["auc_rendered"], report["metrics_rendered"], report["confusion"])

# a file that cannot be read gets an error row instead of stopping the run ...
(corpus / "test" / "broken.nii").write_bytes(b"not a nifti file")
main(["retrieve", str(tmp / "model.bin"), str(corpus / "test"), "--out", str(corpus / "retrieved2.csv")])
print([ln for ln in (corpus / "retrieved2.csv").read_text().splitlines() if "broken" in ln])
# ... and evaluation refuses predictions that do not join one-to-one with the truth
code = main(["evaluate", str(corpus / "retrieved2.csv"), str(corpus / "manifest_test.csv"),
             "--out", str(tmp / "report2.json")])
print("evaluate exit code:", code)
