"""
From a CT volume to a 512x512 montage
=====================================

Generate one phantom of each class, look at how the 36 slices are picked,
and write the montages next to this script.
"""
from pathlib import Path

import numpy as np

from montage_retrieval import montage as M
from montage_retrieval.phantom import PhantomClass, gen_volume
from montage_retrieval.volume_io import read_nifti, resample_inplane, write_nifti

out = Path(__file__).with_name("out_01")
out.mkdir(exist_ok=True)

# which slices end up in the montage depends only on the slice count z
for z in (10, 36, 40, 75, 200):
    plan = M.plan_sampling(z)
    print(z, plan.mode, "N =", plan.step, "m =", plan.first_slice, plan.indices[:4], "...", plan.indices[-2:])

# short scans are padded with black tiles instead of repeating slices
print("real slices for z=20:", M.plan_sampling(20).n_real)

vols = {}
for cls in PhantomClass:
    vol, label = gen_volume(cls, seed=11, size=(64, 64, 48))
    vols[cls] = vol
    # top 20% of the scan: the whole-brain head still has its bright cap there
    top = vol.data[:, :, int(0.8 * vol.dims[2]):]
    print(f"{cls.value:14s} label={label} voxel_size={tuple(round(s, 2) for s in vol.voxel_size)} "
          f"top max HU={top.max():7.1f}")

# the NIfTI writer and reader round-trip exactly
p = out / "whole_brain.nii"
write_nifti(vols[PhantomClass.WHOLE_BRAIN], p)
back = read_nifti(p)
print("round trip exact:", np.array_equal(back.data, vols[PhantomClass.WHOLE_BRAIN].data))

# montage: resample to 512, window to [0, 1], tile 6x6, box-average back to 512
for cls, vol in vols.items():
    img = M.make_montage(vol)
    M.save_png(img, out / f"{cls.value}.png")
    M.write_sidecar(img, out / f"{cls.value}.json")
    print(cls.value, img.pixels.shape, f"mean {img.pixels.mean():.3f}")

# the staged pipeline (resample every slice first) gives the same pixels
vol = vols[PhantomClass.PARTIAL_BRAIN]
stack = M.extract_stack(resample_inplane(vol), M.plan_sampling(vol.dims[2]))
staged = M.downsample_montage(M.tile_montage(M.window_normalize(stack, M.WindowSpec())))
print("staged == make_montage:", np.array_equal(staged.pixels, M.make_montage(vol).pixels))
print("wrote", sorted(q.name for q in out.iterdir()))
