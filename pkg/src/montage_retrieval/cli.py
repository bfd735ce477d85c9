"""Command-line entry point: phantom, montage, train, retrieve, evaluate.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, metrics
from .classifier import TrainConfig, predict_batch, prepare_input, preset, train
from .classifier.serialize import decode_model, encode_model
from .errors import DegenerateData, IoFailure, JoinMismatch, RetrievalError
from .montage import DEFAULT_WINDOW, WindowSpec, make_montage, save_png, sidecar
from .phantom import gen_corpus, read_manifest
from .pool import default_workers, run_jobs
from .volume_io import read_nifti

log = logging.getLogger("montage_retrieval")

RETRIEVAL_COLUMNS = ["path", "score", "predicted_label", "z", "N", "m", "mode", "status"]


class UsageError(Exception):
    pass


@dataclass
class PipelineConfig:
    """Effective settings of one command. ``workers`` is scheduling only and is
    left out of :meth:`to_dict` so outputs do not depend on it."""

    window: WindowSpec = field(default_factory=WindowSpec)
    input_side: int = 128
    preset: str = "micro"
    threshold: float = 0.5
    workers: int = 1
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def validate(self):
        if self.input_side < 1:
            raise UsageError("--input-side must be >= 1")
        if not 0.0 <= self.threshold <= 1.0:
            raise UsageError("--threshold must be in [0, 1]")
        if self.workers < 1:
            raise UsageError("--workers must be >= 1")
        return self

    def to_dict(self):
        d = {"window": self.window.to_json(), "input_side": self.input_side, "preset": self.preset,
             "threshold": self.threshold, "seed": self.seed}
        d.update(self.extra)
        return d


def header_lines(command, cfg: dict):
    return [f"tool=montage-retrieval {__version__}", f"command={command}",
            "config=" + json.dumps(cfg, sort_keys=True)]


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_text(path, text):
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def scan_files(path):
    p = Path(path)
    if p.is_file():
        return [p]
    if not p.is_dir():
        raise UsageError(f"{path} is neither a file nor a directory")
    return sorted(f for f in p.rglob("*") if f.is_file() and f.name.endswith((".nii", ".nii.gz")))


def _stem(path):
    name = Path(path).name
    for ext in (".nii.gz", ".nii"):
        if name.endswith(ext):
            return name[: -len(ext)]
    return Path(path).stem


# -- job functions (module level so the process pool can pickle them) --------

def _montage_job(args):
    path, lo, hi = args
    try:
        img = make_montage(read_nifti(path), WindowSpec(lo, hi))
        buf = io.BytesIO()
        save_png(img, buf)
        return str(path), buf.getvalue(), sidecar(img), None
    except (RetrievalError, OSError, ValueError) as e:
        return str(path), None, None, f"{type(e).__name__}: {e}"


def _input_job(args):
    path, lo, hi, side = args
    img = make_montage(read_nifti(path), WindowSpec(lo, hi))
    return prepare_input(img, side).astype(np.float64)


_MODEL = None


def _load_worker_model(raw):
    global _MODEL
    _MODEL = decode_model(raw)[0]


def _retrieve_job(args):
    path, lo, hi = args
    try:
        img = make_montage(read_nifti(path), WindowSpec(lo, hi))
        x = prepare_input(img, _MODEL.arch.input_side)[None]
        score = float(predict_batch(_MODEL, x)[0])
        plan = img.meta["plan"]
        return str(path), score, plan, "ok"
    except (RetrievalError, OSError, ValueError) as e:
        return str(path), None, None, f"error: {type(e).__name__}: {e}"


# -- commands ------------------------------------------------------------------

def cmd_phantom(args):
    if not 0 < args.usable_fraction < 1:
        raise UsageError("--usable-fraction must be strictly between 0 and 1")
    if args.count < 10:
        raise UsageError("--count must be >= 10")
    if len(args.split_ratios) != 3 or min(args.split_ratios) < 0 or sum(args.split_ratios) <= 0:
        raise UsageError("--split-ratios takes three non-negative numbers")
    cfg = {"count": args.count, "usable_fraction": args.usable_fraction, "seed": args.seed,
           "split_ratios": list(args.split_ratios)}
    manifest = gen_corpus(args.count, args.usable_fraction, args.seed, args.out,
                          tuple(args.split_ratios), header_lines("phantom", cfg))
    for split in ("train", "val", "test"):
        rows = manifest.split(split)
        pos = sum(e.label for e in rows)
        print(f"{split}: {len(rows)} scans, {pos} usable, "
              f"{len({e.subject_id for e in rows})} subjects")
    print(f"wrote {len(manifest.entries)} scans to {args.out}")
    return 0


def cmd_montage(args):
    cfg = PipelineConfig(window=args.window, workers=args.workers).validate()
    files = scan_files(args.input)
    if not files:
        raise UsageError(f"no NIfTI files under {args.input}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    w = cfg.window
    results = run_jobs(_montage_job, [(str(f), w.lo, w.hi) for f in files], cfg.workers)
    failures = []
    for path, png, meta, err in sorted(results):
        if err is not None:
            log.error("%s: %s", path, err)
            failures.append((path, err))
            continue
        stem = _stem(path)
        (out / f"{stem}.png").write_bytes(png)
        meta.update(source=Path(path).name, tool_version=__version__, config=cfg.to_dict())
        _write_text(out / f"{stem}.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"montaged {len(files) - len(failures)} of {len(files)} scans into {out}")
    for path, err in failures:
        print(f"FAILED {path}: {err}")
    return 1 if failures else 0


def _load_inputs(rows, cfg: PipelineConfig, cache_dir=None):
    missing = [r["path"] for r in rows if not Path(r["path"]).is_file()]
    if missing:
        raise IoFailure("missing scans: " + ", ".join(missing))
    w = cfg.window
    jobs, todo, X = [], [], [None] * len(rows)
    for i, r in enumerate(rows):
        key = None
        if cache_dir is not None:
            h = hashlib.sha256(Path(r["path"]).read_bytes())
            h.update(json.dumps([w.to_json(), cfg.input_side]).encode())
            key = Path(cache_dir) / f"{h.hexdigest()}.npy"
            if key.is_file():
                X[i] = np.load(key)
                continue
        jobs.append((r["path"], w.lo, w.hi, cfg.input_side))
        todo.append((i, key))
    for (i, key), x in zip(todo, run_jobs(_input_job, jobs, cfg.workers)):
        X[i] = x
        if key is not None:
            Path(cache_dir).mkdir(parents=True, exist_ok=True)
            np.save(key, x)
    return np.stack(X), np.array([r["label"] for r in rows], dtype=np.int64)


def cmd_train(args):
    cfg = PipelineConfig(window=args.window, input_side=args.input_side, preset=args.preset,
                         workers=args.workers, seed=args.seed).validate()
    try:
        tcfg = TrainConfig(max_epochs=args.epochs, batch_size=args.batch_size,
                           learning_rate=args.lr, class_weights=tuple(args.class_weights),
                           seed=args.seed, threshold=args.threshold)
    except ValueError as e:
        raise UsageError(str(e)) from e
    arch = preset(args.preset, args.input_side)
    train_rows, val_rows = read_manifest(args.train), read_manifest(args.val)
    for name, rows in (("training", train_rows), ("validation", val_rows)):
        if len({r["label"] for r in rows}) < 2:
            raise DegenerateData(f"{name} manifest contains a single class")
    X, y = _load_inputs(train_rows, cfg, args.cache_dir)
    Xv, yv = _load_inputs(val_rows, cfg, args.cache_dir)

    model, history = train((X, y), (Xv, yv), tcfg, arch)
    full_cfg = dict(cfg.to_dict(), train=tcfg.to_dict(),
                    train_manifest_sha256=_sha256(args.train), val_manifest_sha256=_sha256(args.val))
    extra = {"tool_version": __version__, "config": full_cfg}
    try:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_bytes(encode_model(model, extra))
    except OSError as e:
        raise IoFailure(f"cannot write {args.out}: {e}") from e
    history_path = args.history or str(args.out) + ".history.json"
    doc = {"tool_version": __version__, "config": full_cfg,
           "selected_epoch": model.provenance["epoch"], "epochs": history}
    _write_text(history_path, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    best = history[model.provenance["epoch"] - 1]
    print(f"selected epoch {best['epoch']}: val f1 {best['val_f1']:.3f} auc {best['val_auc']:.3f}")
    print(f"wrote {args.out} and {history_path}")
    return 0


def cmd_retrieve(args):
    raw = Path(args.model).read_bytes() if Path(args.model).is_file() else None
    if raw is None:
        raise IoFailure(f"cannot read model {args.model}")
    model, extra = decode_model(raw)
    trained = extra.get("config", {})
    window = args.window
    if window is None:
        tw = trained.get("window", list(DEFAULT_WINDOW))
        window = WindowSpec.auto() if tw == "auto" else WindowSpec(*tw)
    cfg = PipelineConfig(window=window, input_side=model.arch.input_side, preset=model.arch.preset,
                         threshold=args.threshold, workers=args.workers).validate()
    src = Path(args.scans)
    if not src.is_dir():
        raise UsageError(f"{args.scans} is not a directory")
    files = scan_files(src)
    if not files:
        raise UsageError(f"no NIfTI files under {args.scans}")
    out = Path(args.out)
    w = cfg.window
    results = run_jobs(_retrieve_job, [(str(f), w.lo, w.hi) for f in files], cfg.workers,
                       initializer=_load_worker_model, initargs=(raw,))

    base = out.parent.resolve()
    rows = []
    for path, score, plan, status in results:
        rel = Path(path).resolve().relative_to(base) if Path(path).resolve().is_relative_to(base) \
            else Path(path).resolve()
        if score is None:
            rows.append([str(rel), "", "", "", "", "", "", status])
        else:
            rows.append([str(rel), repr(score), int(score >= cfg.threshold), plan["z"], plan["N"],
                         plan["m"], plan["mode"], status])
    rows.sort(key=lambda r: r[0])
    hdr = header_lines("retrieve", dict(cfg.to_dict(), model_sha256=hashlib.sha256(raw).hexdigest(),
                                        model_preset=model.arch.preset,
                                        model_epoch=model.provenance.get("epoch")))
    buf = io.StringIO()
    buf.write("".join(f"# {h}\n" for h in hdr))
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(RETRIEVAL_COLUMNS)
    wr.writerows(rows)
    _write_text(out, buf.getvalue())

    ok = [r for r in rows if r[-1] == "ok"]
    hits = sum(r[2] for r in ok)
    frac = hits / len(ok) if ok else 0.0
    print(f"retrieved {hits} of {len(ok)} scored scans (fraction {frac:.3f}); "
          f"{len(rows) - len(ok)} failed")
    return 0 if ok else 1


def read_retrieval_manifest(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise IoFailure(str(e)) from e
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    meta = {}
    for ln in text.splitlines():
        if ln.startswith("# config="):
            meta = json.loads(ln[len("# config="):])
    rows = []
    for r in csv.DictReader(lines):
        r = dict(r)
        r["path"] = str((path.parent / r["path"]).resolve())
        rows.append(r)
    return rows, meta


def evaluate_rows(pred_rows, truth_rows, threshold):
    truth = {r["path"]: r["label"] for r in truth_rows}
    scored = {r["path"]: float(r["score"]) for r in pred_rows if r.get("status", "ok") == "ok"}
    unmatched = (set(truth) ^ set(scored)) | {r["path"] for r in pred_rows if r["path"] not in scored}
    if unmatched:
        raise JoinMismatch(unmatched)
    keys = sorted(truth)
    scores = np.array([scored[k] for k in keys])
    labels = np.array([truth[k] for k in keys])
    cm = metrics.confusion(scores, labels, threshold)
    pm = metrics.prf1(cm)
    curve = metrics.roc(scores, labels)
    area = metrics.auc(curve)
    return cm, pm, curve, area


def build_report(cm, pm, curve, area, threshold, cfg=None):
    return {
        "tool_version": __version__,
        "config": cfg or {},
        "threshold": threshold,
        "n": cm.total,
        "confusion": cm.to_dict(),
        "metrics": pm.to_dict(),
        "metrics_rendered": pm.rendered(3),
        "auc": area,
        "auc_rendered": f"{area:.3f}",
        "roc": [{"fpr": f, "tpr": t, "threshold": None if np.isinf(th) else float(th)}
                for f, t, th in zip(curve.fpr.tolist(), curve.tpr.tolist(), curve.thresholds.tolist())],
    }


def roc_csv(curve):
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["fpr", "tpr", "threshold"])
    for f, t, th in zip(curve.fpr, curve.tpr, curve.thresholds):
        wr.writerow([repr(float(f)), repr(float(t)), "inf" if np.isinf(th) else repr(float(th))])
    return buf.getvalue()


def cmd_evaluate(args):
    if not 0.0 <= args.threshold <= 1.0:
        raise UsageError("--threshold must be in [0, 1]")
    pred_rows, pred_meta = read_retrieval_manifest(args.pred)
    truth_rows = read_manifest(args.truth)
    cm, pm, curve, area = evaluate_rows(pred_rows, truth_rows, args.threshold)
    cfg = {"threshold": args.threshold, "pred_sha256": _sha256(args.pred),
           "truth_sha256": _sha256(args.truth), "retrieval_config": pred_meta}
    report = build_report(cm, pm, curve, area, args.threshold, cfg)
    _write_text(args.out, json.dumps(report, indent=2, sort_keys=True) + "\n")
    roc_path = args.roc or str(Path(args.out).with_suffix("")) + ".roc.csv"
    _write_text(roc_path, roc_csv(curve))
    r = pm.rendered(3)
    print(f"n={cm.total} tp={cm.tp} fp={cm.fp} fn={cm.fn} tn={cm.tn} "
          f"accuracy={r['accuracy']} precision={r['precision']} recall={r['recall']} "
          f"f1={r['f1']} auc={area:.4f}")
    return 0


# -- argument parsing ------------------------------------------------------------

class _WindowAction(argparse.Action):
    def __call__(self, parser, namespace, values, option_string=None):
        if len(values) == 1 and values[0].lower() == "auto":
            setattr(namespace, self.dest, WindowSpec.auto())
            return
        if len(values) != 2:
            parser.error("--window takes LO HI or 'auto'")
        try:
            setattr(namespace, self.dest, WindowSpec(float(values[0]), float(values[1])))
        except ValueError as e:
            parser.error(f"--window: {e}")


def _positive_int(v):
    n = int(v)
    if n < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return n


def build_parser():
    p = argparse.ArgumentParser(prog="montage-retrieval", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def window_flag(sp, default):
        sp.add_argument("--window", nargs="+", action=_WindowAction, default=default,
                        metavar="LO HI | auto", help="HU window (default -100 300)")

    def workers_flag(sp):
        sp.add_argument("--workers", type=_positive_int, default=default_workers(),
                        help="worker processes (default: $MONTAGE_RETRIEVAL_WORKERS or 1)")

    sp = sub.add_parser("phantom", help="generate a labelled synthetic corpus")
    sp.add_argument("--count", type=int, default=100)
    sp.add_argument("--usable-fraction", type=float, default=0.15)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--split-ratios", type=float, nargs=3, default=[0.6, 0.2, 0.2],
                    metavar=("TRAIN", "VAL", "TEST"))
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_phantom)

    sp = sub.add_parser("montage", help="write PNG montages and JSON sidecars")
    sp.add_argument("input", help="NIfTI file or directory")
    sp.add_argument("--out", required=True)
    window_flag(sp, WindowSpec())
    workers_flag(sp)
    sp.set_defaults(func=cmd_montage)

    sp = sub.add_parser("train", help="train the montage classifier")
    sp.add_argument("--train", required=True, help="training manifest CSV")
    sp.add_argument("--val", required=True, help="validation manifest CSV")
    sp.add_argument("--preset", choices=["micro", "resnet50"], default="micro")
    sp.add_argument("--input-side", type=_positive_int, default=None)
    sp.add_argument("--epochs", type=_positive_int, default=100)
    sp.add_argument("--batch-size", type=_positive_int, default=8)
    sp.add_argument("--lr", type=float, default=1e-4)
    sp.add_argument("--class-weights", type=float, nargs=2, default=[1.0, 10.0], metavar=("W0", "W1"))
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--cache-dir", default=None)
    sp.add_argument("--history", default=None)
    sp.add_argument("--out", required=True, help="model file")
    window_flag(sp, WindowSpec())
    workers_flag(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("retrieve", help="score every scan in a directory")
    sp.add_argument("model")
    sp.add_argument("scans", help="directory of NIfTI scans")
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--out", required=True, help="retrieval manifest CSV")
    window_flag(sp, None)
    workers_flag(sp)
    sp.set_defaults(func=cmd_retrieve)

    sp = sub.add_parser("evaluate", help="compare a retrieval manifest with ground truth")
    sp.add_argument("pred")
    sp.add_argument("truth")
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--out", required=True, help="report JSON")
    sp.add_argument("--roc", default=None, help="ROC CSV (default: next to the report)")
    sp.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "input_side", "unset") is None:
        args.input_side = 128 if args.preset == "micro" else 512
    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {e}", file=sys.stderr)
        return 2
    except RetrievalError as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
