"""Seeded synthetic CT corpus: whole-brain, partial-brain and non-brain scans.

Whole-brain phantoms are an ellipsoidal head (bright shell, soft interior)
that spans most of the scan in z. Partial-brain phantoms are the same head
cut off partway up, so the top of the scan is empty. Non-brain phantoms are
soft-tissue cylinders and blobs without a shell.
"""
from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidSize, IoFailure
from .volume_io import Volume3D, write_nifti

AIR_HU = -1000.0
SHELL_HU = 900.0
BRAIN_HU = 30.0
NOISE_HU = 10.0
SOFT_HU = 40.0
SKULL_BASE = 0.6  # fraction of the z semi-axis below centre
NECK_RADIUS = 0.45

Z_RANGE = (8, 80)
INPLANE_SIZES = (48, 64, 96)
SPLITS = ("train", "val", "test")
MANIFEST_COLUMNS = ["path", "subject_id", "class_name", "label", "split", "seed"]


class PhantomClass(enum.Enum):
    WHOLE_BRAIN = "whole_brain"
    PARTIAL_BRAIN = "partial_brain"
    NON_BRAIN = "non_brain"

    @property
    def label(self) -> int:
        return int(self is PhantomClass.WHOLE_BRAIN)

    @property
    def code(self) -> int:
        return list(PhantomClass).index(self)


def _grid(size):
    x, y, z = size
    return np.meshgrid(np.arange(x, dtype=float), np.arange(y, dtype=float),
                       np.arange(z, dtype=float), indexing="ij")


def _smooth_texture(rng, gx, gy, gz, size, amplitude=8.0, n_waves=4):
    tex = np.zeros(size)
    for _ in range(n_waves):
        k = rng.uniform(0.5, 3.0, 3) * 2 * np.pi / np.array(size, dtype=float)
        phase = rng.uniform(0, 2 * np.pi)
        tex += np.sin(k[0] * gx + k[1] * gy + k[2] * gz + phase)
    return amplitude * tex / n_waves


def _head(rng, size):
    """Ellipsoid head spanning 84-96% of z, without noise."""
    x, y, z = size
    gx, gy, gz = _grid(size)
    ax = x * rng.uniform(0.30, 0.38)
    ay = y * rng.uniform(0.34, 0.42)
    az = z * rng.uniform(0.42, 0.48)
    cx = (x - 1) / 2 + rng.uniform(-0.05, 0.05) * x
    cy = (y - 1) / 2 + rng.uniform(-0.05, 0.05) * y
    # keep both poles inside the scan
    slack = max(0.0, (z - 1) / 2 - az + 0.5)
    cz = (z - 1) / 2 + rng.uniform(-slack, slack) * 0.5
    r = np.sqrt(((gx - cx) / ax) ** 2 + ((gy - cy) / ay) ** 2 + ((gz - cz) / az) ** 2)
    t = rng.uniform(0.10, 0.16)
    # the vertex cap must span at least 1.5 slices so it survives coarse z sampling
    tz = max(t * az, 1.5)
    r_in = np.sqrt(((gx - cx) / (ax * (1 - t))) ** 2 + ((gy - cy) / (ay * (1 - t))) ** 2
                   + ((gz - cz) / (az - tz)) ** 2)
    tex = _smooth_texture(rng, gx, gy, gz, size)
    hu = np.full(size, AIR_HU)
    hu[r <= 1.0] = SHELL_HU
    inner = r_in <= 1.0
    hu[inner] = BRAIN_HU + tex[inner]
    # the skull base is open: below it the head is soft tissue running into a
    # neck, so only the vertex ends in a closed bright cap
    below = gz - cz < -SKULL_BASE * az
    r_xy = np.sqrt(((gx - cx) / ax) ** 2 + ((gy - cy) / ay) ** 2)
    soft = below & ((r <= 1.0) | (r_xy <= NECK_RADIUS))
    hu[below] = AIR_HU
    hu[soft] = SOFT_HU + tex[soft]
    return hu


def _body(rng, size):
    """Soft-tissue trunk: an elliptic cylinder along z plus a few organ blobs."""
    x, y, z = size
    gx, gy, gz = _grid(size)
    ax = x * rng.uniform(0.35, 0.46)
    ay = y * rng.uniform(0.25, 0.40)
    cx = (x - 1) / 2 + rng.uniform(-0.05, 0.05) * x
    cy = (y - 1) / 2 + rng.uniform(-0.05, 0.05) * y
    r = np.sqrt(((gx - cx) / ax) ** 2 + ((gy - cy) / ay) ** 2)
    hu = np.full(size, AIR_HU)
    hu[r <= 1.0] = -90.0  # fat layer
    hu[r <= 0.85] = SOFT_HU + _smooth_texture(rng, gx, gy, gz, size)[r <= 0.85]
    for _ in range(rng.integers(1, 4)):
        bx = cx + rng.uniform(-0.4, 0.4) * ax
        by = cy + rng.uniform(-0.4, 0.4) * ay
        bz = rng.uniform(0, z - 1)
        rb = rng.uniform(0.12, 0.25) * np.array([ax, ay, max(z, 4) * 1.5])
        blob = ((gx - bx) / rb[0]) ** 2 + ((gy - by) / rb[1]) ** 2 + ((gz - bz) / rb[2]) ** 2 <= 1.0
        hu[blob & (r <= 0.85)] = rng.uniform(50.0, 120.0)
    return hu


def gen_volume(cls: PhantomClass, seed: int, size=(64, 64, 40)):
    """Generate one phantom volume; deterministic in ``(cls, seed, size)``."""
    x, y, z = (int(s) for s in size)
    if x < 16 or y < 16 or z < 4:
        raise InvalidSize(f"size {size} below minimum (16, 16, 4)")
    size = (x, y, z)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), cls.code, x, y, z]))
    if cls is PhantomClass.NON_BRAIN:
        hu = _body(rng, size)
    else:
        hu = _head(rng, size)
        if cls is PhantomClass.PARTIAL_BRAIN:
            keep = int(math.floor(z * rng.uniform(0.40, 0.70)))
            hu[:, :, max(keep, 1):] = AIR_HU
    hu = hu + rng.normal(0.0, NOISE_HU, size)
    spacing = (float(rng.uniform(0.4, 1.0)),) * 2 + (float(rng.choice([1.0, 2.5, 5.0])),)
    # round to float32 so that the on-disk copy reads back identically
    return Volume3D(hu.astype(np.float32), spacing), cls.label


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    subject_id: str
    phantom_class: PhantomClass
    label: int
    split: str
    seed: int


@dataclass
class CorpusManifest:
    entries: list
    root: Path | None = None

    def split(self, name):
        return [e for e in self.entries if e.split == name]

    def to_csv(self, entries=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for e in self.entries if entries is None else entries:
            w.writerow([e.path, e.subject_id, e.phantom_class.value, e.label, e.split, e.seed])
        return buf.getvalue()


def _largest_remainder(total, weights):
    raw = [total * w for w in weights]
    counts = [int(math.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def _round_half_up(v):
    return int(math.floor(v + 0.5))


def corpus_plan(count, usable_fraction, seed, split_ratios=(0.6, 0.2, 0.2)):
    """Decide split, subject, class and geometry of every scan (no I/O)."""
    if count < 10:
        raise ValueError("count must be >= 10")
    if not 0 < usable_fraction < 1:
        raise ValueError("usable_fraction must be in (0, 1)")
    if len(split_ratios) != 3 or min(split_ratios) < 0 or sum(split_ratios) <= 0:
        raise ValueError("split_ratios must be three non-negative numbers")
    total = float(sum(split_ratios))
    sizes = _largest_remainder(count, [r / total for r in split_ratios])
    n_usable = _round_half_up(count * usable_fraction)
    usable = _largest_remainder(n_usable, [s / count for s in sizes])

    rng = np.random.default_rng(seed)
    rows = []
    subject = 0
    for split, n, n_pos in zip(SPLITS, sizes, usable):
        classes = [PhantomClass.WHOLE_BRAIN] * n_pos
        rest = n - n_pos
        classes += [PhantomClass.PARTIAL_BRAIN] * ((rest + 1) // 2)
        classes += [PhantomClass.NON_BRAIN] * (rest // 2)
        classes = [classes[i] for i in rng.permutation(n)]
        i = 0
        while i < n:
            k = min(int(rng.integers(2, 7)), n - i)
            for j in range(k):
                rows.append(dict(split=split, subject=subject, scan=j, cls=classes[i + j]))
            i += k
            subject += 1
    for r in rows:
        r["inplane"] = int(rng.choice(INPLANE_SIZES))
        r["seed"] = int(rng.integers(0, 2**31 - 1))
    # stratified z within every (split, class) group: each group covers the
    # whole range, so short padded scans are never missing from one split
    groups = {}
    for r in rows:
        groups.setdefault((r["split"], r["cls"]), []).append(r)
    lo, hi = Z_RANGE
    for g in groups.values():
        u = (rng.permutation(len(g)) + rng.random(len(g))) / len(g)
        for r, ui in zip(g, u):
            r["z"] = lo + int(ui * (hi - lo + 1))
    # both montage branches must appear
    if not any(r["z"] < 36 for r in rows):
        rows[0]["z"] = int(rng.integers(Z_RANGE[0], 36))
    if not any(r["z"] > 36 for r in rows):
        rows[-1]["z"] = int(rng.integers(37, Z_RANGE[1] + 1))
    return rows


def gen_corpus(count, usable_fraction=0.15, seed=0, out_dir=".", split_ratios=(0.6, 0.2, 0.2),
               header_lines=()) -> CorpusManifest:
    """Write a labelled phantom corpus under ``out_dir``.

    Layout: ``<split>/sub-XXXX_scan-YY.nii`` plus ``manifest.csv`` (all rows)
    and one ``manifest_<split>.csv`` per split. Paths in the manifests are
    relative to ``out_dir``.
    """
    rows = corpus_plan(count, usable_fraction, seed, split_ratios)
    out_dir = Path(out_dir)
    entries = []
    try:
        for split in SPLITS:
            (out_dir / split).mkdir(parents=True, exist_ok=True)
        for r in rows:
            rel = f"{r['split']}/sub-{r['subject']:04d}_scan-{r['scan']:02d}.nii"
            vol, label = gen_volume(r["cls"], r["seed"], (r["inplane"], r["inplane"], r["z"]))
            write_nifti(vol, out_dir / rel)
            entries.append(ManifestEntry(rel, f"sub-{r['subject']:04d}", r["cls"], label,
                                         r["split"], r["seed"]))
        manifest = CorpusManifest(entries, out_dir)
        prefix = "".join(f"# {line}\n" for line in header_lines)
        (out_dir / "manifest.csv").write_text(prefix + manifest.to_csv())
        for split in SPLITS:
            (out_dir / f"manifest_{split}.csv").write_text(prefix + manifest.to_csv(manifest.split(split)))
    except OSError as e:
        raise IoFailure(str(e)) from e
    return manifest


def read_manifest(path):
    """Read a corpus manifest CSV, skipping ``#`` metadata lines.

    Returns a list of dicts with ``path`` resolved against the manifest's
    directory and ``label`` as int.
    """
    path = Path(path)
    try:
        lines = [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]
    except OSError as e:
        raise IoFailure(str(e)) from e
    rows = []
    for row in csv.DictReader(lines):
        row = dict(row)
        row["rel_path"] = row["path"]
        row["path"] = str((path.parent / row["path"]).resolve())
        row["label"] = int(row["label"])
        rows.append(row)
    return rows
