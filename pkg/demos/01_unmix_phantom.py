"""Unmix a synthetic Papanicolaou specimen with every shipped method.

Generates a seeded phantom, runs color deconvolution, the two sparse
baselines, and the weighted-nucleus-sparsity solver on its RGB densities,
then reports reconstruction quality and writes per-dye heatmaps.

Run:
    python demos/01_unmix_phantom.py [output-dir]
"""

import sys
from pathlib import Path

import numpy as np

from papsmix.calib import robust_max
from papsmix.imagery import write_gray_png
from papsmix.metrics import sre
from papsmix.phantom import BENCHMARK_CONFIGS, PhantomSpec, generate, h_mass_outside_nuclei
from papsmix.solver import unmix
from papsmix.stainlib import DYES, ms_unmix

out_dir = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_unmix_out")
out_dir.mkdir(parents=True, exist_ok=True)

# A 64x64 specimen with five cells at 30 dB observation noise.
spec = PhantomSpec(seed=7)
truth = generate(spec)
print(f"phantom: {spec.width}x{spec.height}, {spec.n_cells} cells, "
      f"SNR {spec.noise_snr_db} dB")

# The 14-band pseudoinverse result plays the role of ground truth, exactly
# as the evaluation protocol prescribes.
gt = ms_unmix(truth.ms_od, truth.ms_matrix).planes
print(f"multispectral ground truth recovered, max |err| vs construction = "
      f"{np.abs(gt - truth.abundance.planes).max():.3f}")

print("\nmethod      SRE vs gt   non-nuclear H mass")
for method in ("cd", "sunsal", "sunsal_tv", "proposed"):
    cfg = BENCHMARK_CONFIGS.get(method)
    field, report = unmix(method, truth.rgb_od.planes, truth.rgb_matrix, cfg)
    score = sre(gt, field.planes)
    h_fp = h_mass_outside_nuclei(field, truth.labels_mask)
    iters = f" ({report.iterations} iterations)" if report else ""
    print(f"{method:<10}  {score:7.2f} dB  {h_fp:10.1f}{iters}")
    for i, dye in enumerate(DYES):
        q = max(robust_max(gt[i]), 1e-9)
        write_gray_png(field.planes[i] / q, out_dir / f"{method}_{dye}.png")

print(f"\nheatmaps written under {out_dir}/")
print("note how the proposed method empties the hematoxylin plane outside "
      "the nuclei while color deconvolution spreads it across the cytoplasm")
