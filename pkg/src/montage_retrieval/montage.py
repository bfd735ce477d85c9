"""Reduction of a CT volume to a single 2D montage image.

A volume with ``z`` slices is reduced to a stack of 36 slices: when
``z >= 36`` every ``N``-th slice is taken around the centre of the scan,
otherwise all slices are kept and zero slices are appended. The 36 slices
are windowed to [0, 1], tiled row-major into a 6x6 grid and box-averaged
down to the network input size.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DimensionMismatch, IoFailure, NonIntegerFactor
from .volume_io import Volume3D, resample_inplane

N_SLICES = 36
GRID = 6
SLICE_SIDE = 512
MONTAGE_SIDE = GRID * SLICE_SIDE
ZERO_SLICE = 0  # sentinel index for a padded slice; real indices are 1-based

SAMPLED = "sampled"
PADDED = "padded"

DEFAULT_WINDOW = (-100.0, 300.0)


@dataclass(frozen=True)
class SamplingPlan:
    z: int
    step: int
    first_slice: int
    indices: tuple
    mode: str

    @property
    def n_real(self) -> int:
        return sum(1 for i in self.indices if i != ZERO_SLICE)

    def to_dict(self):
        return {
            "z": self.z,
            "N": self.step,
            "m": self.first_slice,
            "mode": self.mode,
            "indices": list(self.indices),
        }


def plan_sampling(z: int) -> SamplingPlan:
    """Choose which source slices (1-based) make up the 36-slice stack.

    For ``z >= 36``: ``N = z // 36`` and ``m = z // 2 - 17 * N``, and the
    stack takes ``m + N * i`` for ``i = 0 .. 35``. The offsets start at 0 so
    the last index, ``z // 2 + 18 * N``, never passes ``z``.
    """
    z = int(z)
    if z < 1:
        raise ValueError("z must be >= 1")
    if z >= N_SLICES:
        step = z // N_SLICES
        first = z // 2 - 17 * step
        indices = tuple(first + step * i for i in range(N_SLICES))
        return SamplingPlan(z, step, first, indices, SAMPLED)
    indices = tuple(range(1, z + 1)) + (ZERO_SLICE,) * (N_SLICES - z)
    return SamplingPlan(z, 1, 1, indices, PADDED)


@dataclass
class CanonicalStack:
    """36 slices, shape ``(side, side, 36)``, plus the plan that produced them."""

    data: np.ndarray
    plan: SamplingPlan

    @property
    def padded(self) -> np.ndarray:
        return np.array([i == ZERO_SLICE for i in self.plan.indices])


def _assemble(real_slices: np.ndarray, plan: SamplingPlan) -> CanonicalStack:
    side_x, side_y, n = real_slices.shape
    assert n == plan.n_real
    data = np.zeros((side_x, side_y, N_SLICES), dtype=np.float64)
    data[:, :, :n] = real_slices  # real slices always come first
    return CanonicalStack(data, plan)


def _real_indices(plan: SamplingPlan) -> list:
    return [i - 1 for i in plan.indices if i != ZERO_SLICE]


def extract_stack(vol: Volume3D, plan: SamplingPlan, side: int = SLICE_SIDE) -> CanonicalStack:
    x, y, z = vol.dims
    if (x, y) != (side, side):
        raise DimensionMismatch(f"in-plane size {x}x{y}, expected {side}x{side}")
    if plan.z != z:
        raise DimensionMismatch(f"plan built for z={plan.z}, volume has z={z}")
    return _assemble(vol.data[:, :, _real_indices(plan)], plan)


@dataclass(frozen=True)
class WindowSpec:
    """Intensity window in HU. ``lo = hi = None`` means automatic."""

    lo: float | None = DEFAULT_WINDOW[0]
    hi: float | None = DEFAULT_WINDOW[1]

    def __post_init__(self):
        if (self.lo is None) != (self.hi is None):
            raise ValueError("window bounds must both be set or both be auto")
        if self.lo is not None and not self.lo < self.hi:
            raise ValueError(f"window lo={self.lo} must be < hi={self.hi}")

    @classmethod
    def auto(cls):
        return cls(None, None)

    @property
    def is_auto(self):
        return self.lo is None

    def to_json(self):
        return "auto" if self.is_auto else [self.lo, self.hi]


def window_normalize(stack: CanonicalStack, w: WindowSpec) -> CanonicalStack:
    pad = stack.padded
    if w.is_auto:
        real = stack.data[:, :, ~pad]
        lo, hi = (float(real.min()), float(real.max())) if real.size else (0.0, 0.0)
    else:
        lo, hi = w.lo, w.hi
    if hi > lo:
        out = np.clip((stack.data - lo) / (hi - lo), 0.0, 1.0)
    else:
        out = np.zeros_like(stack.data)
    out[:, :, pad] = 0.0
    return CanonicalStack(out, stack.plan)


@dataclass
class MontageImage:
    pixels: np.ndarray
    layout: str = "row-major-6x6"
    meta: dict = field(default_factory=dict)

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


def tile_montage(stack: CanonicalStack) -> MontageImage:
    """Place slice ``k`` at tile row ``k // 6``, column ``k % 6``."""
    sx, sy, n = stack.data.shape
    assert n == N_SLICES
    tiles = stack.data.transpose(2, 0, 1).reshape(GRID, GRID, sx, sy)
    pixels = tiles.transpose(0, 2, 1, 3).reshape(GRID * sx, GRID * sy)
    return MontageImage(np.ascontiguousarray(pixels), meta={"plan": stack.plan.to_dict()})


def downsample_montage(img: MontageImage, target: int = SLICE_SIDE) -> MontageImage:
    """Box-average ``img`` down to ``target`` x ``target``."""
    h, w = img.pixels.shape
    if h % target or w % target:
        raise NonIntegerFactor(f"{h}x{w} is not an integer multiple of {target}")
    fh, fw = h // target, w // target
    if fh == fw == 1:
        return MontageImage(img.pixels.copy(), img.layout, dict(img.meta))
    pixels = img.pixels.reshape(target, fh, target, fw).mean(axis=(1, 3))
    return MontageImage(pixels, img.layout, dict(img.meta))


def make_montage(vol: Volume3D, w: WindowSpec = WindowSpec(), side: int = SLICE_SIDE) -> MontageImage:
    """Full volume -> 512x512 montage pipeline.

    Only the slices selected by the plan are resampled. Resampling works
    slice by slice, so this matches resampling the whole volume first.
    """
    plan = plan_sampling(vol.dims[2])
    picked = Volume3D(vol.data[:, :, _real_indices(plan)], vol.voxel_size)
    picked = resample_inplane(picked, side)
    stack = window_normalize(_assemble(picked.data, plan), w)
    img = downsample_montage(tile_montage(stack), side)
    img.meta["window"] = w.to_json()
    return img


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    # round half up
    return np.floor(np.clip(pixels, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_png(img: MontageImage, path) -> None:
    try:
        Image.fromarray(to_uint8(img.pixels)).save(path, format="PNG")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def sidecar(img: MontageImage, **extra) -> dict:
    plan = img.meta.get("plan", {})
    out = {k: plan.get(k) for k in ("z", "N", "m", "mode")}
    out["indices"] = plan.get("indices")
    out["window"] = img.meta.get("window")
    out.update(extra)
    return out


def write_sidecar(img: MontageImage, path, **extra) -> None:
    try:
        Path(path).write_text(json.dumps(sidecar(img, **extra), indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e
