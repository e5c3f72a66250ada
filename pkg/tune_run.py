"""Scratch tuning harness for the acceptance training configuration."""
import sys
import time

import numpy as np

from mgpc.config import ModelConfig, TrainConfig
from mgpc.training import synth_dataset, train_two_stage
from mgpc.codec import encode, decode
from mgpc.metrics import d1_psnr, y_psnr
from mgpc.sparse import SparseVoxelTensor


def evaluate(model, tag):
    test = synth_dataset(99, 6, 6, points_per_cloud=(260, 520))
    rng = np.random.default_rng(0)
    worst_d1, worst_y = 1e9, 1e9
    for i, pc in enumerate(test):
        container, stats = encode(pc, model, 0)
        recon = decode(container, model)
        d1 = d1_psnr(recon, pc, 6)
        yps = y_psnr(recon, pc)
        rnd_coords = np.unique(rng.integers(0, 64, size=(pc.num_points, 3)), axis=0)
        d1_rnd = d1_psnr(SparseVoxelTensor(rnd_coords, np.zeros((len(rnd_coords), 3)), 6, validate=False), pc, 6)
        rc = SparseVoxelTensor(recon.coords, rng.random(recon.feat_array().shape), 6, validate=False)
        y_rnd = y_psnr(rc, pc)
        worst_d1 = min(worst_d1, d1 - d1_rnd)
        worst_y = min(worst_y, yps - y_rnd)
        print(f"  {tag} cloud{i}: N={pc.num_points} bpp={stats.bpp_total:.2f} "
              f"D1 +{d1-d1_rnd:.1f} Y +{yps-y_rnd:.1f} (Y={yps:.1f}, rnd={y_rnd:.1f})",
              flush=True)
    print(f"  {tag} WORST: D1 +{worst_d1:.1f} Y +{worst_y:.1f}", flush=True)


def main():
    t00 = time.time()
    cfg = ModelConfig(channels=(16, 24, 32), state_dim=8, mem_width=16)
    ds = synth_dataset(2, 200, 6, points_per_cloud=(260, 520))
    c1 = TrainConfig(stage="attribute_only", lambda_a=0.05, epochs=8, seed=0,
                     lr_initial=2e-3, lr_halve_every=4)
    c2 = TrainConfig(stage="joint", lambda_a=0.03, lambda_g=7.2, epochs=12, seed=0,
                     lr_initial=2e-3, lr_halve_every=5, gt_geometry_epochs=9)
    t0 = time.time()
    res = train_two_stage(cfg, c1, c2, ds, seed=0)
    print("train %.0fs" % (time.time() - t0), flush=True)
    for tag, r in (("s1", res.stage1), ("s2", res.stage2)):
        eps = {}
        for row in r.log:
            eps.setdefault(row["epoch"], []).append(row)
        print(tag, "L:", " ".join("%.0f" % np.mean([x["L"] for x in v]) for _, v in sorted(eps.items())), flush=True)
        print(tag, "D_A:", " ".join("%.0f" % np.mean([x["D_A"] for x in v]) for _, v in sorted(eps.items())), flush=True)
        if tag == "s2":
            print(tag, "D_G:", " ".join("%.2f" % np.mean([x["D_G"] for x in v]) for _, v in sorted(eps.items())), flush=True)
            print(tag, "R:", " ".join("%.2f" % np.mean([x["R"] for x in v]) for _, v in sorted(eps.items())), flush=True)
    evaluate(res.model, "A")
    print("total %.0fs" % (time.time() - t00), flush=True)


if __name__ == "__main__":
    main()
