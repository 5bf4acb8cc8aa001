"""Distinguish the two cytoplasm classes of the phantom from relative dye
abundances: Mann-Whitney tests per dye, then a two-feature linear
discriminant, mirroring the EC / LEGH mucin analysis.

Run:
    python demos/03_classification.py
"""

import numpy as np

from papsmix.analysis import (
    classification_report,
    extract_patch_features,
    lda_predict,
    lda_train,
    mann_whitney_u,
)
from papsmix.phantom import (
    BENCHMARK_CONFIGS,
    MASK_EC_CYTOPLASM,
    MASK_LEGH_CYTOPLASM,
    PhantomSpec,
    generate,
)
from papsmix.solver import unmix
from papsmix.stainlib import DYES

rng = np.random.default_rng(0)
spec = PhantomSpec(width=96, height=96, n_cells=8, seed=5,
                   nucleus_radius_px=(2.5, 4.0), cytoplasm_radius_px=(8.0, 11.0))
truth = generate(spec)

# Unmix the RGB observation; patches are sampled from the estimate, not from
# the construction, so the classifier sees solver output end to end.
field, _ = unmix("proposed", truth.rgb_od.planes, truth.rgb_matrix,
                 BENCHMARK_CONFIGS["proposed"])

samples = []
for code, label in ((MASK_EC_CYTOPLASM, "EC"), (MASK_LEGH_CYTOPLASM, "LEGH")):
    ys, xs = np.where(truth.labels_mask == code)
    inside = (xs >= 2) & (xs < spec.width - 2) & (ys >= 2) & (ys < spec.height - 2)
    picks = rng.choice(np.flatnonzero(inside), size=60, replace=False)
    for i in picks:
        samples.append(extract_patch_features(field, (xs[i], ys[i]), label=label))

print(f"{len(samples)} cytoplasm patches (5x5), split evenly between classes\n")

# --- per-dye Mann-Whitney on relative abundance -------------------------------
print("dye   median EC   median LEGH   two-sided p")
for i, dye in enumerate(DYES):
    ec = [s.relative_abundance[i] for s in samples if s.label == "EC"]
    legh = [s.relative_abundance[i] for s in samples if s.label == "LEGH"]
    _, p = mann_whitney_u(ec, legh)
    print(f"{dye:<4}  {np.median(ec):9.3f}   {np.median(legh):11.3f}   {p:11.3g}")

# --- two-feature discriminant: relative EY and OG ------------------------------
features = [(s.relative_abundance[0], s.relative_abundance[3]) for s in samples]
labels = [s.label for s in samples]
split = rng.permutation(len(samples))
train_idx, test_idx = split[: len(split) // 2], split[len(split) // 2 :]

model = lda_train([features[i] for i in train_idx], [labels[i] for i in train_idx],
                  feature_names=("EY_rel", "OG_rel"))
w = ", ".join(f"{n}={v:+.2f}" for n, v in zip(model.feature_names, model.weights))
print(f"\ndiscriminant: D(x) = {w}, bias={model.bias:+.2f}  (D >= 0 -> LEGH)")

predictions = [lda_predict(model, features[i])[0] for i in test_idx]
report = classification_report(predictions, [labels[i] for i in test_idx])
print("held-out metrics: " + "  ".join(
    f"{k}={report[k]:.3f}" for k in ("accuracy", "precision", "recall", "f1")))
